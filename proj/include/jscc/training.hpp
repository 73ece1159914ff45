#pragma once

#include <zlib.h>

#include <bit>
#include <functional>

#include "jscc/data_io.hpp"
#include "jscc/model.hpp"

namespace jscc::train {

namespace fs = std::filesystem;

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr_initial = 1e-3;
  double lr_after = 1e-4;
  std::size_t lr_switch_epoch = 10;
  double train_snr_db = 10.0;
  std::uint64_t seed = 0;
  losses::LossConfig loss{};
  double power = 1.0;
  std::size_t eval_batch_size = 100;

  channel::ChannelConfig channel(double snr_db) const {
    channel::ChannelConfig c;
    c.power = power;
    c.snr_db = snr_db;
    return c;
  }

  void validate() const {
    if (epochs < 1) throw ValidationError("train.epochs must be >= 1");
    if (batch_size < 1 || eval_batch_size < 1) throw ValidationError("train batch sizes must be >= 1");
    if (!(lr_initial > 0) || !(lr_after > 0)) throw ValidationError("train learning rates must be > 0");
    loss.validate();
    channel(train_snr_db).validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr_initial", c.lr_initial},
       {"lr_after", c.lr_after},
       {"lr_switch_epoch", c.lr_switch_epoch},
       {"train_snr_db", c.train_snr_db},
       {"seed", c.seed},
       {"loss", {{"reconstruction", losses::to_string(c.loss.reconstruction)},
                 {"alpha", c.loss.alpha},
                 {"beta_kl", c.loss.beta_kl}}},
       {"power", c.power},
       {"eval_batch_size", c.eval_batch_size}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ValidationError("train section must be a JSON object");
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_initial = j.value("lr_initial", c.lr_initial);
  c.lr_after = j.value("lr_after", c.lr_after);
  c.lr_switch_epoch = j.value("lr_switch_epoch", c.lr_switch_epoch);
  c.train_snr_db = j.value("train_snr_db", c.train_snr_db);
  c.seed = j.value("seed", c.seed);
  c.power = j.value("power", c.power);
  c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    if (l.is_string()) {
      c.loss.reconstruction = losses::reconstruction_from_string(l.get<std::string>());
    } else {
      c.loss.reconstruction = losses::reconstruction_from_string(l.value("reconstruction", std::string("mse")));
      c.loss.alpha = l.value("alpha", c.loss.alpha);
      c.loss.beta_kl = l.value("beta_kl", c.loss.beta_kl);
    }
  }
  c.validate();
}

/// Step schedule: lr_initial before lr_switch_epoch, lr_after from it on.
inline double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg) {
  return epoch < cfg.lr_switch_epoch ? cfg.lr_initial : cfg.lr_after;
}

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update. Parameters without a grad slot are
/// treated as having zero gradient.
template <class T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  if (state.m.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam state does not match parameter list");
  ++state.step;
  const double c1 = 1 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw ShapeError("adam state does not match parameter " + std::to_string(i));
    for (std::size_t e = 0; e < p.size(); ++e) {
      const double g = p.grad ? double((*p.grad)[e]) : 0.0;
      m[e] = cfg.beta1 * m[e] + (1 - cfg.beta1) * g;
      v[e] = cfg.beta2 * v[e] + (1 - cfg.beta2) * g * g;
      const double step = lr * (m[e] / c1) / (std::sqrt(v[e] / c2) + cfg.eps);
      p[e] = static_cast<T>(double(p[e]) - step);
    }
  }
}

// ---- evaluation -------------------------------------------------------------

struct EvalResult {
  double psnr_db = 0;
  double ssim = 0;
};

/// Mean per-image PSNR and SSIM of eval-mode reconstructions. Batch b draws
/// its noise from hash(seed, b).
template <class T>
EvalResult evaluate(model::Model<T>& m, const data::Dataset& ds, const channel::ChannelConfig& ch,
                    std::uint64_t seed, std::size_t batch_size = 100) {
  if (ds.empty()) throw ValidationError("evaluation dataset is empty");
  double psnr = 0, ssim = 0;
  std::size_t b = 0;
  for (std::size_t first = 0; first < ds.count(); first += batch_size, ++b) {
    const std::size_t n = std::min(batch_size, ds.count() - first);
    const Tensor<T> x = ds.batch_range<T>(first, n);
    const auto r = m.transmit(x, ch, ad::Mode::eval, hash_combine(seed, b));
    for (double v : metrics::psnr_per_image(x, r.x_hat)) psnr += v;
    for (double v : metrics::ssim_per_image(x, r.x_hat)) ssim += v;
  }
  return {psnr / double(ds.count()), ssim / double(ds.count())};
}

/// PSNR of always answering the mean image of `reference`, averaged over
/// the images of `target`.
inline double mean_image_psnr(const data::Dataset& reference, const data::Dataset& target) {
  if (reference.empty() || target.empty()) throw ValidationError("baseline needs nonempty datasets");
  const std::size_t n = reference.image_size();
  std::vector<double> mean(n, 0.0);
  for (std::size_t i = 0; i < reference.count(); ++i)
    for (std::size_t e = 0; e < n; ++e) mean[e] += reference.pixels[i * n + e];
  for (double& v : mean) v /= double(reference.count());
  double acc = 0;
  for (std::size_t i = 0; i < target.count(); ++i) {
    double se = 0;
    for (std::size_t e = 0; e < n; ++e) {
      const double d = target.pixels[i * n + e] - mean[e];
      se += d * d;
    }
    acc += metrics::psnr_from_mse(se / double(n));
  }
  return acc / double(target.count());
}

// ---- training loop ----------------------------------------------------------

struct HistoryEntry {
  std::size_t epoch = 0;
  double train_loss = 0;
  double eval_psnr_db = 0;
  double eval_ssim = 0;
};

inline void to_json(nlohmann::json& j, const HistoryEntry& h) {
  j = {{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"eval_psnr_db", h.eval_psnr_db}, {"eval_ssim", h.eval_ssim}};
}
inline void from_json(const nlohmann::json& j, HistoryEntry& h) {
  h.epoch = j.at("epoch").get<std::size_t>();
  h.train_loss = j.at("train_loss").get<double>();
  h.eval_psnr_db = j.at("eval_psnr_db").get<double>();
  h.eval_ssim = j.at("eval_ssim").get<double>();
}

/// Training objective for one pass: vae_loss for VAEs, the bare
/// reconstruction term for AEs.
template <class T>
ad::Var<T> objective(const model::Model<T>& m, ad::Var<T> x, const model::Pipeline<T>& p,
                     const losses::LossConfig& cfg) {
  if (m.spec().kind == model::ModelKind::vae) return losses::vae_loss(x, p.x_hat, p.latent, cfg);
  return losses::reconstruction_loss(x, p.x_hat, cfg);
}

/// Seed of the evaluation noise used for the per-epoch held-out metrics.
inline std::uint64_t eval_seed(const TrainConfig& cfg) { return hash_combine(cfg.seed, 0x6576616cULL); }

/// Minibatch Adam over `train_set` at train_snr_db with fresh noise per
/// batch; after every epoch the held-out metrics are appended to the
/// history. Deterministic given cfg.seed.
template <class T>
std::vector<HistoryEntry> train(model::Model<T>& m, const data::Dataset& train_set,
                                const data::Dataset& eval_set, const TrainConfig& cfg,
                                const std::function<void(const HistoryEntry&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("training dataset is empty");
  const auto& in = m.spec().input_shape;
  if (train_set.channels != in[0] || train_set.height != in[1] || train_set.width != in[2])
    throw ValidationError("dataset images are " + std::to_string(train_set.channels) + "x" +
                          std::to_string(train_set.height) + "x" + std::to_string(train_set.width) +
                          " but the model expects " + std::to_string(in[0]) + "x" + std::to_string(in[1]) +
                          "x" + std::to_string(in[2]));
  const data::BatchPlan plan{cfg.batch_size, cfg.seed, train_set.count() >= cfg.batch_size};
  const channel::ChannelConfig ch = cfg.channel(cfg.train_snr_db);
  auto params = m.params().trainable();
  AdamState<T> adam;
  std::vector<HistoryEntry> history;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    const auto batches = data::make_batches(train_set.count(), plan, epoch);
    double loss_sum = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      m.params().zero_grad();
      double loss_value = std::numeric_limits<double>::quiet_NaN();
      try {
        ad::Graph<T> g(hash_combine(cfg.seed, epoch, b), ad::Mode::train);
        const auto x = g.input("x", train_set.batch<T>(batches[b]));
        const auto p = m.build(g, x, ch);
        const auto loss = objective(m, x, p, cfg.loss);
        loss_value = double(loss.value().item());
        g.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + ": " + e.what());
      }
      for (const Tensor<T>* p : params)
        if (p->grad && !all_finite<T>(*p->grad))
          throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b) + ": non-finite gradient (loss " +
                             std::to_string(loss_value) + ")");
      adam_step<T>(params, adam, lr);
      loss_sum += loss_value;
    }
    HistoryEntry h;
    h.epoch = epoch;
    h.train_loss = loss_sum / double(batches.size());
    if (!eval_set.empty()) {
      const EvalResult r = evaluate(m, eval_set, ch, eval_seed(cfg), cfg.eval_batch_size);
      h.eval_psnr_db = r.psnr_db;
      h.eval_ssim = r.ssim;
    }
    history.push_back(h);
    if (on_epoch) on_epoch(h);
  }
  return history;
}

// ---- checkpoints ------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'J', 'S', 'C', 'C', 'V', 'A', 'E', '1'};

template <class T>
struct Checkpoint {
  model::Model<T> model;
  TrainConfig config;
  std::size_t epoch = 0;
  std::vector<HistoryEntry> history;
};

namespace detail {

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

inline std::uint32_t crc32_of(const std::string& s) {
  return crc32_of(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

template <class T>
nlohmann::json manifest(const model::ParamStore<T>& store) {
  nlohmann::json m = nlohmann::json::array();
  for (const auto& e : store.entries)
    m.push_back({{"name", e.name}, {"shape", e.tensor.shape}, {"trainable", e.trainable}});
  return m;
}

}  // namespace detail

/// Layout: magic "JSCCVAE1", u64 LE header length, JSON header, then every
/// tensor of the manifest as little-endian float32 in manifest order.
template <class T>
void save_checkpoint(const model::Model<T>& m, const TrainConfig& cfg, std::size_t epoch,
                     const std::vector<HistoryEntry>& history, const fs::path& path) {
  std::vector<unsigned char> payload;
  for (const auto& e : m.params().entries) {
    for (T v : e.tensor.data) {
      const float f = static_cast<float>(v);
      if (static_cast<T>(f) != v)
        throw NumericError("checkpoint: tensor '" + e.name + "' holds a value not representable as float32");
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
      for (int s = 0; s < 32; s += 8) payload.push_back(static_cast<unsigned char>(bits >> s));
    }
  }
  const nlohmann::json man = detail::manifest(m.params());
  nlohmann::json header = {{"format_version", 1},
                           {"model", m.spec()},
                           {"train", cfg},
                           {"epoch", epoch},
                           {"history", history},
                           {"dtype", "f32"},
                           {"tensors", man},
                           {"manifest_crc32", detail::crc32_of(man.dump())},
                           {"payload_bytes", payload.size()},
                           {"payload_crc32", detail::crc32_of(payload)}};
  const std::string text = header.dump();
  std::vector<unsigned char> bytes(kCheckpointMagic, kCheckpointMagic + 8);
  const std::uint64_t len = text.size();
  for (int s = 0; s < 64; s += 8) bytes.push_back(static_cast<unsigned char>(len >> s));
  bytes.insert(bytes.end(), text.begin(), text.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  data::detail::write_bytes(path, bytes);
}

/// Payload bytes only (the tensor blobs), for reproducibility comparisons.
inline std::vector<unsigned char> checkpoint_payload(const fs::path& path) {
  const auto bytes = data::detail::read_bytes(path);
  if (bytes.size() < 16) throw ValidationError(path.string() + ": truncated checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(bytes[8 + i]) << (8 * i);
  if (16 + len > bytes.size()) throw ValidationError(path.string() + ": truncated checkpoint header");
  return {bytes.begin() + 16 + std::ptrdiff_t(len), bytes.end()};
}

/// Loads into precision T. float32 payloads convert exactly to float or
/// double.
template <class T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  const auto bytes = data::detail::read_bytes(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < 16 || !std::equal(kCheckpointMagic, kCheckpointMagic + 8, bytes.begin()))
    throw ValidationError(where + "not a checkpoint (magic mismatch)");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(bytes[8 + i]) << (8 * i);
  if (len > bytes.size() - 16) throw ValidationError(where + "truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + "corrupt checkpoint header: " + e.what());
  }
  try {
    if (header.at("dtype") != "f32") throw ValidationError(where + "unsupported dtype " + header.at("dtype").dump());
    const nlohmann::json& man = header.at("tensors");
    if (detail::crc32_of(man.dump()) != header.at("manifest_crc32").get<std::uint32_t>())
      throw ValidationError(where + "tensor manifest checksum mismatch");
    Checkpoint<T> ck{model::Model<T>(header.at("model").get<model::ModelSpec>(), 0),
                     header.at("train").get<TrainConfig>(), header.at("epoch").get<std::size_t>(),
                     header.at("history").get<std::vector<HistoryEntry>>()};
    auto& entries = ck.model.params().entries;
    if (man.size() != entries.size())
      throw ValidationError(where + "manifest lists " + std::to_string(man.size()) + " tensors, model has " +
                            std::to_string(entries.size()));
    std::size_t expected = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (man[i].at("name") != entries[i].name || man[i].at("shape").get<Shape>() != entries[i].tensor.shape)
        throw ValidationError(where + "manifest entry " + std::to_string(i) + " (" + man[i].at("name").dump() +
                              ") does not match model tensor " + entries[i].name + " " +
                              to_string(entries[i].tensor.shape));
      expected += 4 * entries[i].tensor.size();
    }
    const std::span<const unsigned char> payload(bytes.data() + 16 + len, bytes.size() - 16 - len);
    if (payload.size() != expected || header.at("payload_bytes").get<std::size_t>() != expected)
      throw ValidationError(where + "payload holds " + std::to_string(payload.size()) + " bytes, expected " +
                            std::to_string(expected) + " (truncated or padded file)");
    if (detail::crc32_of(payload) != header.at("payload_crc32").get<std::uint32_t>())
      throw ValidationError(where + "payload checksum mismatch");
    std::size_t off = 0;
    for (auto& e : entries)
      for (T& v : e.tensor.data) {
        std::uint32_t bits = 0;
        for (int s = 0; s < 4; ++s) bits |= std::uint32_t(payload[off++]) << (8 * s);
        v = static_cast<T>(std::bit_cast<float>(bits));
      }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + "malformed checkpoint header: " + e.what());
  }
}

}  // namespace jscc::train
