#pragma once

#include <algorithm>
#include <functional>
#include <map>

#include "jscc/channel.hpp"
#include "jscc/losses.hpp"

namespace jscc::ad {

/// How to draw a test point for one input of a checked op.
enum class Domain {
  any,        // uniform(-1, 1)
  positive,   // uniform(0.5, 2)
  away_zero,  // ±uniform(0.1, 1), keeps kinks of abs/prelu out of reach
  unit,       // uniform(0.05, 0.95), image-like
};

template <class T>
using GraphBuilder = std::function<Var<T>(Graph<T>&, std::span<const Var<T>>)>;

struct GradcheckEntry {
  std::vector<Shape> default_shapes;
  std::vector<Domain> domains;
  /// Same construction at the checked precision and at the oracle precision.
  GraphBuilder<double> build;
  GraphBuilder<long double> build_oracle;
  /// Optional: rewrite drawn inputs (e.g. x̂ = x ± offset so |x − x̂| stays
  /// away from the L1 kink).
  std::function<void(std::vector<Tensor<double>>&)> adjust = {};
};

namespace detail {

template <class F>
GradcheckEntry entry(std::vector<Shape> shapes, std::vector<Domain> domains, F f,
                     std::function<void(std::vector<Tensor<double>>&)> adjust = {}) {
  return {std::move(shapes), std::move(domains),
          [f](Graph<double>& g, std::span<const Var<double>> in) { return f(g, in); },
          [f](Graph<long double>& g, std::span<const Var<long double>> in) { return f(g, in); },
          std::move(adjust)};
}

template <class T>
std::vector<T> window_as(std::size_t size, double sigma) {
  const auto w = metrics::gaussian_window(size, sigma);
  return std::vector<T>(w.begin(), w.end());
}

inline std::map<std::string, GradcheckEntry>& registry_storage() {
  static std::map<std::string, GradcheckEntry> r = [] {
    std::map<std::string, GradcheckEntry> m;
    const Shape s34{3, 4};
    m["square"] = entry({s34}, {Domain::any}, [](auto&, auto in) { return square(in[0]); });
    m["sqrt"] = entry({s34}, {Domain::positive}, [](auto&, auto in) { return sqrt(in[0]); });
    m["log"] = entry({s34}, {Domain::positive}, [](auto&, auto in) { return log(in[0]); });
    m["exp"] = entry({s34}, {Domain::any}, [](auto&, auto in) { return exp(in[0]); });
    m["abs"] = entry({s34}, {Domain::away_zero}, [](auto&, auto in) { return abs(in[0]); });
    m["sigmoid"] = entry({s34}, {Domain::any}, [](auto&, auto in) { return sigmoid(in[0]); });
    m["mean"] = entry({s34}, {Domain::any}, [](auto&, auto in) { return mean(in[0]); });
    m["sum"] = entry({s34}, {Domain::any}, [](auto&, auto in) { return sum(in[0]); });
    m["scale"] = entry({s34}, {Domain::any}, [](auto&, auto in) { return scale(in[0], 2.5); });
    m["reshape"] = entry({s34}, {Domain::any},
                         [](auto&, auto in) { return reshape(in[0], Shape{numel(in[0].shape())}); });
    m["l2_norm"] = entry({s34}, {Domain::away_zero}, [](auto&, auto in) { return l2_norm(in[0]); });
    m["add"] = entry({{2, 2}, {2, 2}}, {Domain::any, Domain::any}, [](auto&, auto in) { return add(in[0], in[1]); });
    m["sub"] = entry({{2, 3}, {2, 3}}, {Domain::any, Domain::any}, [](auto&, auto in) { return sub(in[0], in[1]); });
    m["mul"] = entry({{2, 3}, {2, 3}}, {Domain::any, Domain::any}, [](auto&, auto in) { return mul(in[0], in[1]); });
    m["div"] = entry({{2, 3}, {2, 3}}, {Domain::any, Domain::positive}, [](auto&, auto in) { return div(in[0], in[1]); });
    m["matmul"] = entry({{3, 4}, {4, 2}}, {Domain::any, Domain::any}, [](auto&, auto in) { return matmul(in[0], in[1]); });
    m["bias_add"] = entry({{2, 3, 2, 2}, {3}}, {Domain::any, Domain::any},
                          [](auto&, auto in) { return bias_add(in[0], in[1]); });
    m["prelu"] = entry({{2, 3, 2, 2}, {3}}, {Domain::away_zero, Domain::any},
                       [](auto&, auto in) { return prelu(in[0], in[1]); });
    m["conv2d"] = entry({{1, 3, 8, 8}, {4, 3, 3, 3}}, {Domain::any, Domain::any},
                        [](auto&, auto in) { return conv2d(in[0], in[1], 1, 1); });
    m["conv2d_strided"] = entry({{2, 2, 7, 7}, {3, 2, 5, 5}}, {Domain::any, Domain::any},
                                [](auto&, auto in) { return conv2d(in[0], in[1], 2, 2); });
    m["conv_transpose2d"] = entry({{2, 3, 4, 4}, {3, 2, 5, 5}}, {Domain::any, Domain::any},
                                  [](auto&, auto in) { return conv_transpose2d(in[0], in[1], 2, 2, 1); });
    m["conv_transpose2d_asym"] = entry({{2, 3, 4, 5}, {3, 2, 3, 3}}, {Domain::any, Domain::any},
                                       [](auto&, auto in) { return conv_transpose2d(in[0], in[1], 2, 1, 1, 0); });
    m["batch_norm"] = entry({{4, 3, 2, 2}, {3}, {3}}, {Domain::any, Domain::positive, Domain::any},
                            [](auto&, auto in) {
                              using T = typename std::decay_t<decltype(in[0])>::value_type;
                              return batch_norm<T>(in[0], in[1], in[2], nullptr, nullptr);
                            });
    m["gaussian_filter"] = entry({{1, 2, 8, 8}}, {Domain::any}, [](auto&, auto in) {
      using T = typename std::decay_t<decltype(in[0])>::value_type;
      return gaussian_filter(in[0], window_as<T>(5, 1.5));
    });
    m["gaussian_sample"] = entry({{2, 5}, {2, 5}}, {Domain::any, Domain::any},
                                 [](auto&, auto in) { return gaussian_sample(in[0], in[1]); });
    auto offset_second = [](std::vector<Tensor<double>>& t) {
      RngStream rng(t[1].size() + 17);
      for (std::size_t i = 0; i < t[1].size(); ++i)
        t[1][i] = t[0][i] + (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.05, 0.3);
    };
    m["mse"] = entry({{2, 3, 4, 4}, {2, 3, 4, 4}}, {Domain::unit, Domain::unit},
                     [](auto&, auto in) { return metrics::mse(in[0], in[1]); });
    m["mae"] = entry({{2, 3, 4, 4}, {2, 3, 4, 4}}, {Domain::unit, Domain::unit},
                     [](auto&, auto in) { return metrics::mae(in[0], in[1]); }, offset_second);
    m["kl_divergence"] = entry({{3, 6}, {3, 6}}, {Domain::any, Domain::any},
                               [](auto&, auto in) { return losses::kl_divergence(in[0], in[1]); });
    m["ssim_loss"] = entry({{1, 3, 16, 16}, {1, 3, 16, 16}}, {Domain::unit, Domain::unit},
                           [](auto&, auto in) { return affine(metrics::ssim(in[0], in[1]), -1, 1); });
    m["mixed_loss"] = entry({{1, 3, 12, 12}, {1, 3, 12, 12}}, {Domain::unit, Domain::unit},
                            [](auto&, auto in) { return losses::mixed_loss(in[0], in[1], 0.5); }, offset_second);
    m["vae_loss"] = entry({{2, 3, 12, 12}, {2, 3, 12, 12}, {2, 8}, {2, 8}},
                          {Domain::unit, Domain::unit, Domain::any, Domain::any},
                          [](auto&, auto in) {
                            using T = typename std::decay_t<decltype(in[0])>::value_type;
                            losses::LossConfig cfg;
                            cfg.reconstruction = losses::Reconstruction::mixed_ssim_l1;
                            cfg.beta_kl = 0.1;
                            return losses::vae_loss(in[0], in[1],
                                                    std::optional<losses::LatentVars<T>>({in[2], in[3]}), cfg);
                          },
                          offset_second);
    m["normalize_power"] = entry({{3, 8}}, {Domain::away_zero}, [](auto&, auto in) {
      channel::ChannelConfig cfg;
      cfg.k = 4;
      cfg.power = 1.5;
      return channel::normalize_power(in[0], cfg);
    });
    m["awgn"] = entry({{2, 8}}, {Domain::any}, [](auto&, auto in) {
      channel::ChannelConfig cfg;
      cfg.k = 4;
      cfg.snr_db = 5;
      return channel::awgn(in[0], cfg);
    });
    return m;
  }();
  return r;
}

}  // namespace detail

inline const std::map<std::string, GradcheckEntry>& gradcheck_registry() {
  return detail::registry_storage();
}

inline std::vector<std::string> gradcheck_op_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : gradcheck_registry()) names.push_back(name);
  return names;
}

struct GradcheckReport {
  std::string op;
  std::uint64_t seed = 0;
  std::vector<double> max_rel_error;  // one per input

  double worst() const {
    return max_rel_error.empty() ? 0.0 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
  }
  bool passed(double tol = 1e-4) const { return worst() < tol; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares analytic gradients of sum(op(inputs) ⊙ R), R a fixed random
/// projection, computed in double precision, against central differences.
/// The differences are evaluated in extended precision: at double precision
/// the rounding noise of an O(1) loss (~1e-11 after dividing by 2h) swamps
/// gradients as small as those at SSIM window tails (~1e-8).
inline GradcheckReport gradcheck(const std::string& op_name, std::vector<Shape> input_shapes,
                                 std::uint64_t seed, double step = 1e-5) {
  const auto& reg = gradcheck_registry();
  auto it = reg.find(op_name);
  if (it == reg.end()) throw ValidationError("gradcheck: unknown op '" + op_name + "'");
  const GradcheckEntry& entry = it->second;
  if (input_shapes.empty()) input_shapes = entry.default_shapes;
  if (input_shapes.size() != entry.domains.size())
    throw ValidationError("gradcheck: op '" + op_name + "' takes " +
                          std::to_string(entry.domains.size()) + " inputs");

  RngStream rng(hash_combine(seed, 0x6772616463686bULL));
  std::vector<Tensor<double>> values;
  for (std::size_t i = 0; i < input_shapes.size(); ++i) {
    Tensor<double> t(input_shapes[i]);
    for (double& v : t.data) {
      switch (entry.domains[i]) {
        case Domain::any: v = rng.uniform(-1, 1); break;
        case Domain::positive: v = rng.uniform(0.5, 2); break;
        case Domain::away_zero: v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 1); break;
        case Domain::unit: v = rng.uniform(0.05, 0.95); break;
      }
    }
    values.push_back(std::move(t));
  }
  if (entry.adjust) entry.adjust(values);

  // Analytic side.
  Graph<double> g(seed);
  std::vector<Var<double>> inputs;
  for (std::size_t i = 0; i < values.size(); ++i)
    inputs.push_back(g.input("in" + std::to_string(i), values[i], true));
  Var<double> out = entry.build(g, inputs);
  Tensor<double> proj(out.shape());
  for (double& v : proj.data) v = rng.uniform(0.5, 1.5);
  g.backward(sum(mul(out, g.constant(proj))));

  // Finite-difference side, same seed so stochastic nodes draw the same noise.
  using Ext = long double;
  Graph<Ext> fd(seed);
  std::vector<Var<Ext>> fd_inputs;
  std::map<std::string, Tensor<Ext>> bind;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::string key = "in" + std::to_string(i);
    bind[key] = values[i].cast<Ext>();
    fd_inputs.push_back(fd.input(key, bind[key]));
  }
  // Build before the projection constant so node ids (and noise keys) match.
  const Var<Ext> fd_out = entry.build_oracle(fd, fd_inputs);
  Var<Ext> fd_loss = sum(mul(fd_out, fd.constant(proj.cast<Ext>())));

  GradcheckReport report{op_name, seed, {}};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Tensor<double> analytic = g.grad(inputs[i]);
    const std::string key = "in" + std::to_string(i);
    double worst = 0;
    for (std::size_t e = 0; e < values[i].size(); ++e) {
      const Ext orig = bind[key][e];
      bind[key][e] = orig + step;
      fd.forward(bind);
      const Ext up = fd.value(fd_loss).item();
      bind[key][e] = orig - step;
      fd.forward(bind);
      const Ext down = fd.value(fd_loss).item();
      bind[key][e] = orig;
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<Ext>(step)));
      worst = std::max(worst, relative_error(analytic[e], numeric));
    }
    report.max_rel_error.push_back(worst);
  }
  return report;
}

}  // namespace jscc::ad
