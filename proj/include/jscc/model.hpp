#pragma once

#include <array>
#include <deque>
#include <nlohmann/json.hpp>

#include "jscc/channel.hpp"
#include "jscc/losses.hpp"

namespace jscc::model {

enum class ModelKind { ae, vae };
enum class SamplerKind { none, fully_connected, convolutional };
enum class Activation { prelu, none };
enum class OutputActivation { sigmoid, none };

struct ConvLayerSpec {
  std::size_t out_channels = 16;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool bias = true;
  bool batch_norm = true;
  Activation activation = Activation::prelu;

  void validate(std::size_t index) const {
    const std::string at = "encoder layer " + std::to_string(index) + ": ";
    if (out_channels < 1 || kernel_h < 1 || kernel_w < 1)
      throw ValidationError(at + "channels and kernel sizes must be positive");
    if (stride < 1) throw ValidationError(at + "stride must be >= 1");
  }
};

using ImageShape = std::array<std::size_t, 3>;  // channels, height, width

struct ModelSpec {
  ModelKind kind = ModelKind::ae;
  ImageShape input_shape{3, 32, 32};
  std::vector<ConvLayerSpec> encoder_layers;
  SamplerKind sampler = SamplerKind::none;
  std::size_t k = 512;
  /// Target k/n; 0 disables the check.
  double compression_rate = 1.0 / 6.0;
  OutputActivation output_activation = OutputActivation::sigmoid;
  /// At eval time, draw epsilon (true) or collapse the sampler to mu (false).
  bool eval_sample_latent = true;

  std::size_t n() const { return input_shape[0] * input_shape[1] * input_shape[2]; }

  /// Per-layer (C, H, W) from the input through every encoder layer.
  std::vector<ImageShape> encoder_shapes() const {
    std::vector<ImageShape> shapes{input_shape};
    for (std::size_t i = 0; i < encoder_layers.size(); ++i) {
      const ConvLayerSpec& l = encoder_layers[i];
      const ImageShape& s = shapes.back();
      const std::size_t H = s[1] + 2 * l.padding, W = s[2] + 2 * l.padding;
      if (H < l.kernel_h || W < l.kernel_w)
        throw ValidationError("encoder layer " + std::to_string(i) + ": kernel " +
                              std::to_string(l.kernel_h) + "x" + std::to_string(l.kernel_w) +
                              " does not fit padded input " + std::to_string(H) + "x" +
                              std::to_string(W));
      shapes.push_back({l.out_channels, (H - l.kernel_h) / l.stride + 1, (W - l.kernel_w) / l.stride + 1});
    }
    return shapes;
  }

  ImageShape latent_shape() const { return encoder_shapes().back(); }

  void validate() const {
    if (input_shape[0] < 1 || input_shape[1] < 1 || input_shape[2] < 1)
      throw ValidationError("model input_shape must be positive");
    if (encoder_layers.empty()) throw ValidationError("model needs at least one encoder layer");
    for (std::size_t i = 0; i < encoder_layers.size(); ++i) encoder_layers[i].validate(i);
    if (kind == ModelKind::ae && sampler != SamplerKind::none)
      throw ValidationError("AE model must use sampler 'none'");
    if (kind == ModelKind::vae && sampler == SamplerKind::none)
      throw ValidationError("VAE model needs a sampler (fully_connected or convolutional)");
    const ImageShape out = latent_shape();
    const std::size_t elems = out[0] * out[1] * out[2];
    if (elems != 2 * k) {
      std::string reach;
      const std::size_t plane = out[1] * out[2];
      for (std::size_t c = 1; c <= 2 * out[0] && c <= 64; ++c)
        if ((c * plane) % 2 == 0) reach += (reach.empty() ? "" : ", ") + std::to_string(c * plane / 2);
      throw ValidationError("encoder output " + std::to_string(out[0]) + "x" + std::to_string(out[1]) +
                            "x" + std::to_string(out[2]) + " = " + std::to_string(elems) +
                            " reals cannot carry 2k = " + std::to_string(2 * k) +
                            "; achievable k by final-layer channel count: {" + reach + "}");
    }
    if (compression_rate > 0 && std::abs(double(k) - compression_rate * double(n())) >= 1.0)
      throw ValidationError("k/n = " + std::to_string(k) + "/" + std::to_string(n()) +
                            " does not match compression_rate " + std::to_string(compression_rate));
  }

  /// Five-layer stack: two stride-2 5x5 layers then three 3x3 layers, ending
  /// at 16 channels, so any HxW divisible by 4 gives k/n = 1/6.
  static ModelSpec default_for(ImageShape input, ModelKind kind,
                               SamplerKind sampler = SamplerKind::convolutional) {
    ModelSpec s;
    s.kind = kind;
    s.sampler = kind == ModelKind::ae ? SamplerKind::none : sampler;
    s.input_shape = input;
    s.encoder_layers = {{16, 5, 5, 2, 2}, {32, 5, 5, 2, 2}, {32, 3, 3, 1, 1}, {32, 3, 3, 1, 1}, {16, 3, 3, 1, 1}};
    s.k = 16 * (input[1] / 4) * (input[2] / 4) / 2;
    return s;
  }
  static ModelSpec cifar_default(ModelKind kind = ModelKind::ae,
                                 SamplerKind sampler = SamplerKind::convolutional) {
    return default_for({3, 32, 32}, kind, sampler);
  }
  static ModelSpec stl_default(ModelKind kind = ModelKind::ae,
                               SamplerKind sampler = SamplerKind::convolutional) {
    return default_for({3, 96, 96}, kind, sampler);
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(ModelKind, {{ModelKind::ae, "AE"}, {ModelKind::vae, "VAE"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SamplerKind, {{SamplerKind::none, "none"},
                                           {SamplerKind::fully_connected, "fully_connected"},
                                           {SamplerKind::convolutional, "convolutional"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::prelu, "prelu"}, {Activation::none, "none"}})
NLOHMANN_JSON_SERIALIZE_ENUM(OutputActivation,
                             {{OutputActivation::sigmoid, "sigmoid"}, {OutputActivation::none, "none"}})

namespace detail {

template <class E>
E enum_from(const nlohmann::json& j, const char* key, std::initializer_list<const char*> allowed) {
  const std::string s = j.at(key).get<std::string>();
  for (const char* a : allowed)
    if (s == a) return nlohmann::json(s).get<E>();
  std::string list;
  for (const char* a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
  throw ValidationError(std::string("model.") + key + ": unknown value '" + s + "' (expected " + list + ")");
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ConvLayerSpec& l) {
  j = {{"out_channels", l.out_channels}, {"kernel", {l.kernel_h, l.kernel_w}},
       {"stride", l.stride},            {"padding", l.padding},
       {"bias", l.bias},                {"batch_norm", l.batch_norm},
       {"activation", l.activation}};
}

inline void from_json(const nlohmann::json& j, ConvLayerSpec& l) {
  l = ConvLayerSpec{};
  l.out_channels = j.at("out_channels").get<std::size_t>();
  const auto& kernel = j.at("kernel");
  if (kernel.is_number()) {
    l.kernel_h = l.kernel_w = kernel.get<std::size_t>();
  } else {
    l.kernel_h = kernel.at(0).get<std::size_t>();
    l.kernel_w = kernel.at(1).get<std::size_t>();
  }
  l.stride = j.value("stride", std::size_t{1});
  l.padding = j.value("padding", std::size_t{0});
  l.bias = j.value("bias", true);
  l.batch_norm = j.value("batch_norm", true);
  if (j.contains("activation")) l.activation = detail::enum_from<Activation>(j, "activation", {"prelu", "none"});
}

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"kind", s.kind},
       {"input_shape", s.input_shape},
       {"encoder_layers", s.encoder_layers},
       {"sampler", s.sampler},
       {"k", s.k},
       {"compression_rate", s.compression_rate},
       {"output_activation", s.output_activation},
       {"eval_sample_latent", s.eval_sample_latent}};
}

/// Accepts either a full spec or a preset: {"preset": "cifar"|"stl", "kind": ..., "sampler": ...}.
inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  if (!j.is_object()) throw ValidationError("model section must be a JSON object");
  if (!j.contains("kind")) throw ValidationError("model section is missing key 'kind'");
  const ModelKind kind = detail::enum_from<ModelKind>(j, "kind", {"AE", "VAE"});
  SamplerKind sampler = kind == ModelKind::ae ? SamplerKind::none : SamplerKind::convolutional;
  if (j.contains("sampler"))
    sampler = detail::enum_from<SamplerKind>(j, "sampler", {"none", "fully_connected", "convolutional"});
  if (j.contains("preset")) {
    const std::string p = j.at("preset").get<std::string>();
    if (p == "cifar") s = ModelSpec::cifar_default(kind, sampler);
    else if (p == "stl") s = ModelSpec::stl_default(kind, sampler);
    else throw ValidationError("model.preset: unknown value '" + p + "' (expected cifar, stl)");
    s.sampler = sampler;
  } else {
    for (const char* key : {"input_shape", "encoder_layers", "k"})
      if (!j.contains(key)) throw ValidationError(std::string("model section is missing key '") + key + "'");
    s = ModelSpec{};
    s.kind = kind;
    s.sampler = sampler;
    s.input_shape = j.at("input_shape").get<ImageShape>();
    s.encoder_layers = j.at("encoder_layers").get<std::vector<ConvLayerSpec>>();
    s.k = j.at("k").get<std::size_t>();
  }
  s.compression_rate = j.value("compression_rate", s.compression_rate);
  if (j.contains("output_activation"))
    s.output_activation = detail::enum_from<OutputActivation>(j, "output_activation", {"sigmoid", "none"});
  s.eval_sample_latent = j.value("eval_sample_latent", s.eval_sample_latent);
  s.validate();
}

// ---- parameter counting ---------------------------------------------------

struct LayerCount {
  std::string name;
  std::size_t count = 0;
};

struct ParamCount {
  std::size_t total = 0;
  std::vector<LayerCount> layers;
};

namespace detail {

/// One conv (or transposed conv) block of the mirrored pipeline.
struct Block {
  std::string name;
  std::size_t in_channels, out_channels, kernel_h, kernel_w, stride, padding;
  std::size_t output_padding_h = 0, output_padding_w = 0;
  bool transposed = false, bias = true, batch_norm = true;
  Activation activation = Activation::prelu;
};

inline std::vector<Block> encoder_blocks(const ModelSpec& s) {
  std::vector<Block> out;
  std::size_t c = s.input_shape[0];
  for (std::size_t i = 0; i < s.encoder_layers.size(); ++i) {
    const ConvLayerSpec& l = s.encoder_layers[i];
    out.push_back({"enc" + std::to_string(i), c, l.out_channels, l.kernel_h, l.kernel_w, l.stride,
                   l.padding, 0, 0, false, l.bias, l.batch_norm, l.activation});
    c = l.out_channels;
  }
  return out;
}

/// Decoder layer j undoes encoder layer L-1-j; output_padding restores the
/// exact pre-stride size. The last layer drops batch norm and PReLU.
inline std::vector<Block> decoder_blocks(const ModelSpec& s) {
  const auto shapes = s.encoder_shapes();
  const std::size_t L = s.encoder_layers.size();
  std::vector<Block> out;
  for (std::size_t j = 0; j < L; ++j) {
    const std::size_t i = L - 1 - j;
    const ConvLayerSpec& l = s.encoder_layers[i];
    const ImageShape& in = shapes[i + 1];
    const ImageShape& target = shapes[i];
    const auto base = [&](std::size_t h, std::size_t k) -> long {
      return long(h - 1) * long(l.stride) - 2 * long(l.padding) + long(k);
    };
    const long oph = long(target[1]) - base(in[1], l.kernel_h);
    const long opw = long(target[2]) - base(in[2], l.kernel_w);
    if (oph < 0 || opw < 0 || oph >= long(l.stride) || opw >= long(l.stride))
      throw ValidationError("encoder layer " + std::to_string(i) +
                            " has no transposed mirror that restores " + std::to_string(target[1]) +
                            "x" + std::to_string(target[2]));
    const bool last = j + 1 == L;
    out.push_back({"dec" + std::to_string(j), l.out_channels, target[0], l.kernel_h, l.kernel_w,
                   l.stride, l.padding, std::size_t(oph), std::size_t(opw), true, l.bias, last ? false : l.batch_norm,
                   last ? Activation::none : l.activation});
  }
  return out;
}

inline std::size_t block_params(const Block& b) {
  std::size_t n = b.in_channels * b.out_channels * b.kernel_h * b.kernel_w;
  if (b.bias) n += b.out_channels;
  if (b.batch_norm) n += 2 * b.out_channels;
  if (b.activation == Activation::prelu) n += b.out_channels;
  return n;
}

}  // namespace detail

/// Exact trainable-weight count: conv kernels, biases, batch-norm affine
/// parameters and PReLU slopes. Running statistics are not counted.
inline ParamCount count_params(const ModelSpec& spec) {
  spec.validate();
  ParamCount pc;
  auto add = [&](std::string name, std::size_t n) {
    pc.layers.push_back({std::move(name), n});
    pc.total += n;
  };
  for (const auto& b : detail::encoder_blocks(spec)) add(b.name, detail::block_params(b));
  const ImageShape lat = spec.latent_shape();
  if (spec.sampler == SamplerKind::fully_connected) {
    const std::size_t d = lat[0] * lat[1] * lat[2];
    add("sampler.mu", d * d + d);
    add("sampler.log_var", d * d + d);
  } else if (spec.sampler == SamplerKind::convolutional) {
    const std::size_t c = lat[0];
    add("sampler.mu", c * c * 9 + c);
    add("sampler.log_var", c * c * 9 + c);
  }
  for (const auto& b : detail::decoder_blocks(spec)) add(b.name, detail::block_params(b));
  return pc;
}

// ---- built model ----------------------------------------------------------

/// Named tensors with stable addresses. `trainable` distinguishes weights
/// from batch-norm running statistics.
template <class T>
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };
  std::deque<Entry> entries;

  Tensor<T>& add(std::string name, Tensor<T> t, bool trainable) {
    t.requires_grad = trainable;
    entries.push_back({std::move(name), std::move(t), trainable});
    return entries.back().tensor;
  }

  Tensor<T>& at(const std::string& name) {
    for (auto& e : entries)
      if (e.name == name) return e.tensor;
    throw Error("no parameter named '" + name + "'");
  }
  const Tensor<T>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  std::vector<Tensor<T>*> trainable() {
    std::vector<Tensor<T>*> out;
    for (auto& e : entries)
      if (e.trainable) out.push_back(&e.tensor);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries)
      if (e.trainable) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries) e.tensor.grad.reset();
  }
};

template <class T>
struct SamplerOutput {
  Tensor<T> mu, log_var, z_s, epsilon;
};

/// Graph handles for one pass through the system.
template <class T>
struct Pipeline {
  ad::Var<T> x_hat;
  std::optional<losses::LatentVars<T>> latent;
  ad::Var<T> z_s;       // pre-channel latent, [B, 2k]
  ad::Var<T> symbols;   // power-normalized, [B, 2k]
  ad::Var<T> received;  // after AWGN, [B, 2k]
  std::optional<ad::Var<T>> sample_node;
};

template <class T>
struct TransmitResult {
  Tensor<T> x_hat;
  std::optional<SamplerOutput<T>> sampler;
  Tensor<T> symbols;
  Tensor<T> received;
};

template <class T>
class Model {
 public:
  /// He-uniform weights (fan-in), zero biases, batch-norm scale 1 / shift 0,
  /// PReLU slopes 0.25. Deterministic in `seed`.
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    std::uint64_t counter = 0;
    auto he = [&](Shape shape, std::size_t fan_in) {
      Tensor<T> t(std::move(shape));
      RngStream rng(hash_combine(seed, counter++));
      const double bound = std::sqrt(6.0 / double(fan_in));
      for (T& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
      return t;
    };
    auto add_block = [&](const detail::Block& b) {
      const Shape ws = b.transposed ? Shape{b.in_channels, b.out_channels, b.kernel_h, b.kernel_w}
                                    : Shape{b.out_channels, b.in_channels, b.kernel_h, b.kernel_w};
      params_.add(b.name + ".weight", he(ws, b.in_channels * b.kernel_h * b.kernel_w), true);
      if (b.bias) params_.add(b.name + ".bias", Tensor<T>({b.out_channels}), true);
      if (b.batch_norm) {
        params_.add(b.name + ".bn.gamma", Tensor<T>({b.out_channels}, T{1}), true);
        params_.add(b.name + ".bn.beta", Tensor<T>({b.out_channels}), true);
        params_.add(b.name + ".bn.running_mean", Tensor<T>({b.out_channels}), false);
        params_.add(b.name + ".bn.running_var", Tensor<T>({b.out_channels}, T{1}), false);
      }
      if (b.activation == Activation::prelu)
        params_.add(b.name + ".prelu", Tensor<T>({b.out_channels}, T(0.25)), true);
    };
    encoder_ = detail::encoder_blocks(spec_);
    decoder_ = detail::decoder_blocks(spec_);
    for (const auto& b : encoder_) add_block(b);
    const ImageShape lat = spec_.latent_shape();
    if (spec_.sampler == SamplerKind::fully_connected) {
      const std::size_t d = lat[0] * lat[1] * lat[2];
      for (const char* head : {"sampler.mu", "sampler.log_var"}) {
        params_.add(std::string(head) + ".weight", he({d, d}, d), true);
        params_.add(std::string(head) + ".bias", Tensor<T>({d}), true);
      }
    } else if (spec_.sampler == SamplerKind::convolutional) {
      const std::size_t c = lat[0];
      for (const char* head : {"sampler.mu", "sampler.log_var"}) {
        params_.add(std::string(head) + ".weight", he({c, c, 3, 3}, c * 9), true);
        params_.add(std::string(head) + ".bias", Tensor<T>({c}), true);
      }
    }
    for (const auto& b : decoder_) add_block(b);
  }

  const ModelSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Wires encoder -> [sampler] -> normalize -> AWGN -> decoder into `g`.
  /// The graph's mode selects batch statistics (train, updating running
  /// stats) or running statistics (eval). `channel.k` is taken from the spec.
  Pipeline<T> build(ad::Graph<T>& g, ad::Var<T> x, channel::ChannelConfig channel) {
    const auto& in = spec_.input_shape;
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[1] != in[0] || xs[2] != in[1] || xs[3] != in[2])
      throw ShapeError("model expects input [B," + std::to_string(in[0]) + "," + std::to_string(in[1]) +
                       "," + std::to_string(in[2]) + "], got " + to_string(xs));
    channel.k = spec_.k;
    channel.validate();
    const std::size_t B = xs[0];

    ad::Var<T> h = x;
    for (const auto& b : encoder_) h = apply_block(g, h, b);

    Pipeline<T> p;
    ad::Var<T> latent = h;
    if (spec_.sampler != SamplerKind::none) {
      ad::Var<T> mu, lv;
      if (spec_.sampler == SamplerKind::fully_connected) {
        const ad::Var<T> flat = ad::reshape(h, Shape{B, 2 * spec_.k});
        auto head = [&](const std::string& name) {
          auto w = g.parameter(params_.at(name + ".weight"), name + ".weight");
          auto bias = g.parameter(params_.at(name + ".bias"), name + ".bias");
          return ad::reshape(ad::bias_add(ad::matmul(flat, w), bias), h.shape());
        };
        mu = head("sampler.mu");
        lv = head("sampler.log_var");
      } else {
        auto head = [&](const std::string& name) {
          auto w = g.parameter(params_.at(name + ".weight"), name + ".weight");
          auto bias = g.parameter(params_.at(name + ".bias"), name + ".bias");
          return ad::bias_add(ad::conv2d(h, w, 1, 1), bias);
        };
        mu = head("sampler.mu");
        lv = head("sampler.log_var");
      }
      const bool draw = g.mode() == ad::Mode::train || spec_.eval_sample_latent;
      latent = ad::gaussian_sample(mu, lv, draw);
      p.sample_node = latent;
      p.latent = losses::LatentVars<T>{mu, lv};
    }
    p.z_s = ad::reshape(latent, Shape{B, 2 * spec_.k});
    p.symbols = channel::normalize_power(p.z_s, channel);
    p.received = channel::awgn(p.symbols, channel);

    ad::Var<T> d = ad::reshape(p.received, latent.shape());
    for (const auto& b : decoder_) d = apply_block(g, d, b);
    if (spec_.output_activation == OutputActivation::sigmoid) d = ad::sigmoid(d);
    p.x_hat = d;
    return p;
  }

  /// One pass on concrete tensors. Eval mode reads running statistics and
  /// leaves the model untouched; `seed` keys the sampler and channel noise.
  TransmitResult<T> transmit(const Tensor<T>& x, const channel::ChannelConfig& channel,
                             ad::Mode mode, std::uint64_t seed) {
    ad::Graph<T> g(seed, mode);
    const Pipeline<T> p = build(g, g.input("x", x), channel);
    TransmitResult<T> r{p.x_hat.value(), std::nullopt, p.symbols.value(), p.received.value()};
    if (p.latent) {
      const auto& op = g.template op<ad::GaussianSampleOp<T>>(*p.sample_node);
      r.sampler = SamplerOutput<T>{p.latent->mu.value(), p.latent->log_var.value(),
                                   p.sample_node->value(), op.epsilon()};
    }
    return r;
  }

  /// Pre-channel latents z_s, [B, 2k], in eval mode.
  Tensor<T> encode(const Tensor<T>& x, std::uint64_t seed) {
    ad::Graph<T> g(seed, ad::Mode::eval);
    channel::ChannelConfig quiet;
    quiet.snr_db = std::numeric_limits<double>::infinity();
    return build(g, g.input("x", x), quiet).z_s.value();
  }

 private:
  ad::Var<T> apply_block(ad::Graph<T>& g, ad::Var<T> x, const detail::Block& b) {
    auto w = g.parameter(params_.at(b.name + ".weight"), b.name + ".weight");
    ad::Var<T> y = b.transposed ? ad::conv_transpose2d(x, w, b.stride, b.padding, b.output_padding_h, b.output_padding_w)
                                : ad::conv2d(x, w, b.stride, b.padding);
    if (b.bias) y = ad::bias_add(y, g.parameter(params_.at(b.name + ".bias"), b.name + ".bias"));
    if (b.batch_norm)
      y = ad::batch_norm(y, g.parameter(params_.at(b.name + ".bn.gamma")),
                         g.parameter(params_.at(b.name + ".bn.beta")),
                         &params_.at(b.name + ".bn.running_mean"), &params_.at(b.name + ".bn.running_var"));
    if (b.activation == Activation::prelu)
      y = ad::prelu(y, g.parameter(params_.at(b.name + ".prelu"), b.name + ".prelu"));
    return y;
  }

  ModelSpec spec_;
  ParamStore<T> params_;
  std::vector<detail::Block> encoder_, decoder_;
};

}  // namespace jscc::model
