#pragma once

#include <cstdio>
#include <iomanip>

#include "jscc/training.hpp"

namespace jscc::exp {

namespace fs = std::filesystem;
using nlohmann::json;

struct SweepRecord {
  std::string model;  // AE | VAE
  std::string loss;   // mse | mixed
  double train_snr_db = 0;
  double test_snr_db = 0;
  std::uint64_t seed = 0;
  double psnr_db = 0;
  double ssim = 0;
};

inline constexpr const char* kCsvHeader = "model,loss,train_snr_db,test_snr_db,seed,psnr_db,ssim";

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string to_csv(const std::vector<SweepRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : records)
    out += r.model + "," + r.loss + "," + format_number(r.train_snr_db) + "," + format_number(r.test_snr_db) +
           "," + std::to_string(r.seed) + "," + format_number(r.psnr_db) + "," + format_number(r.ssim) + "\n";
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  data::detail::write_bytes(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

inline void write_csv(const std::vector<SweepRecord>& records, const fs::path& path) {
  write_text(path, to_csv(records));
}

/// Noise seed of one evaluation cell; shared by every model in that cell.
inline std::uint64_t cell_seed(std::uint64_t seed, double snr_db) {
  return hash_combine(seed, std::bit_cast<std::uint64_t>(snr_db), 0x7377656570ULL);
}

template <class T>
void require_compatible(const model::Model<T>& m, const data::Dataset& ds, const std::string& what) {
  const auto& in = m.spec().input_shape;
  if (ds.channels != in[0] || ds.height != in[1] || ds.width != in[2])
    throw ValidationError(what + ": model expects " + std::to_string(in[0]) + "x" + std::to_string(in[1]) + "x" +
                          std::to_string(in[2]) + " images, dataset has " + std::to_string(ds.channels) + "x" +
                          std::to_string(ds.height) + "x" + std::to_string(ds.width));
}

inline std::string kind_label(const model::ModelSpec& s) { return s.kind == model::ModelKind::ae ? "AE" : "VAE"; }

/// One record per (checkpoint, test SNR, seed), in that nesting order.
inline std::vector<SweepRecord> snr_sweep(const std::vector<fs::path>& checkpoints, const std::vector<double>& snrs,
                                          const data::Dataset& ds, const std::vector<std::uint64_t>& seeds) {
  if (snrs.empty()) throw ValidationError("sweep: SNR list is empty");
  if (seeds.empty()) throw ValidationError("sweep: seed list is empty");
  if (ds.empty()) throw ValidationError("sweep: dataset is empty");
  std::vector<SweepRecord> out;
  for (const auto& path : checkpoints) {
    auto ck = train::load_checkpoint<float>(path);
    require_compatible(ck.model, ds, path.string());
    for (double snr : snrs)
      for (std::uint64_t seed : seeds) {
        const auto r = train::evaluate(ck.model, ds, ck.config.channel(snr), cell_seed(seed, snr),
                                       ck.config.eval_batch_size);
        out.push_back({kind_label(ck.model.spec()), losses::to_string(ck.config.loss.reconstruction),
                       ck.config.train_snr_db, snr, seed, r.psnr_db, r.ssim});
      }
  }
  return out;
}

struct RobustnessCell {
  double snr_db = 0;
  std::uint64_t seed = 0;
  double ae_psnr = 0, vae_psnr = 0, ae_ssim = 0, vae_ssim = 0;
};

struct RobustnessVerdict {
  std::vector<RobustnessCell> cells;
  double psnr_fraction = 0;  // cells with VAE >= AE (ties count for the VAE)
  double ssim_fraction = 0;
};

inline void require_same_training(const train::TrainConfig& a, const train::TrainConfig& b) {
  std::string why;
  if (a.train_snr_db != b.train_snr_db) why = "train_snr_db";
  else if (a.loss.reconstruction != b.loss.reconstruction || a.loss.alpha != b.loss.alpha) why = "loss";
  else if (a.epochs != b.epochs) why = "epochs";
  else if (a.batch_size != b.batch_size) why = "batch_size";
  else if (a.lr_initial != b.lr_initial || a.lr_after != b.lr_after || a.lr_switch_epoch != b.lr_switch_epoch)
    why = "learning-rate schedule";
  else if (a.power != b.power) why = "power";
  if (!why.empty()) throw ValidationError("compare: checkpoints were trained with different " + why);
}

template <class T>
RobustnessVerdict compare_robustness(model::Model<T>& ae, const train::TrainConfig& ae_cfg, model::Model<T>& vae,
                                     const train::TrainConfig& vae_cfg, const std::vector<double>& snrs,
                                     const data::Dataset& ds, const std::vector<std::uint64_t>& seeds) {
  if (snrs.empty()) throw ValidationError("compare: SNR list is empty");
  if (seeds.empty()) throw ValidationError("compare: seed list is empty");
  if (ds.empty()) throw ValidationError("compare: dataset is empty");
  require_same_training(ae_cfg, vae_cfg);
  require_compatible(ae, ds, "compare (AE)");
  require_compatible(vae, ds, "compare (VAE)");
  RobustnessVerdict v;
  std::size_t psnr_wins = 0, ssim_wins = 0;
  for (double snr : snrs)
    for (std::uint64_t seed : seeds) {
      const auto a = train::evaluate(ae, ds, ae_cfg.channel(snr), cell_seed(seed, snr), ae_cfg.eval_batch_size);
      const auto b = train::evaluate(vae, ds, vae_cfg.channel(snr), cell_seed(seed, snr), vae_cfg.eval_batch_size);
      v.cells.push_back({snr, seed, a.psnr_db, b.psnr_db, a.ssim, b.ssim});
      psnr_wins += b.psnr_db >= a.psnr_db;
      ssim_wins += b.ssim >= a.ssim;
    }
  v.psnr_fraction = double(psnr_wins) / double(v.cells.size());
  v.ssim_fraction = double(ssim_wins) / double(v.cells.size());
  return v;
}

inline RobustnessVerdict compare_robustness(const fs::path& ae_ckpt, const fs::path& vae_ckpt,
                                            const std::vector<double>& snrs, const data::Dataset& ds,
                                            const std::vector<std::uint64_t>& seeds) {
  if (snrs.empty()) throw ValidationError("compare: SNR list is empty");
  auto a = train::load_checkpoint<float>(ae_ckpt);
  auto b = train::load_checkpoint<float>(vae_ckpt);
  return compare_robustness(a.model, a.config, b.model, b.config, snrs, ds, seeds);
}

/// One row per source image: the original, then each model's
/// reconstruction at `snr_db`.
inline Tensor<float> reconstruct_grid(std::vector<model::Model<float>*> models, const std::vector<Tensor<float>>& images,
                                      const channel::ChannelConfig& ch, std::uint64_t seed, std::size_t gutter = 2) {
  if (images.empty()) throw ValidationError("grid: no images");
  for (const auto& img : images)
    if (img.shape != images.front().shape) throw ShapeError("grid: images differ in shape");
  const Shape& s = images.front().shape;
  Tensor<float> x({images.size(), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < images.size(); ++i)
    std::copy(images[i].data.begin(), images[i].data.end(), x.data.begin() + i * images[i].size());
  std::vector<std::vector<Tensor<float>>> rows(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) rows[i].push_back(images[i]);
  for (auto* m : models) {
    const auto& in = m->spec().input_shape;
    if (s != Shape{in[0], in[1], in[2]})
      throw ShapeError("grid: model expects " + to_string(Shape{in[0], in[1], in[2]}) + ", images are " + to_string(s));
    const auto r = m->transmit(x, ch, ad::Mode::eval, seed);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto* p = r.x_hat.data.data() + i * images[i].size();
      rows[i].emplace_back(s, std::vector<float>(p, p + images[i].size()));
    }
  }
  return data::compose_grid(rows, gutter);
}

inline Tensor<float> reconstruct_grid(const std::vector<fs::path>& checkpoints, const std::vector<Tensor<float>>& images,
                                      double snr_db, const fs::path& out_path, std::uint64_t seed = 0) {
  std::vector<train::Checkpoint<float>> cks;
  for (const auto& p : checkpoints) cks.push_back(train::load_checkpoint<float>(p));
  std::vector<model::Model<float>*> models;
  channel::ChannelConfig ch;
  ch.snr_db = snr_db;
  for (auto& c : cks) {
    models.push_back(&c.model);
    ch.power = c.config.power;
  }
  Tensor<float> grid = reconstruct_grid(models, images, ch, seed);
  data::write_image(grid, out_path);
  return grid;
}

/// Pre-channel latents of every image, PCA'd to two components and binned.
inline metrics::LatentPca latent_histogram(model::Model<float>& m, const data::Dataset& ds, std::uint64_t seed,
                                           std::size_t bins = 64, std::size_t batch_size = 100) {
  if (ds.empty()) throw ValidationError("latent-hist: dataset is empty");
  require_compatible(m, ds, "latent-hist");
  const std::size_t d = 2 * m.spec().k;
  Eigen::MatrixXd latents(ds.count(), d);
  std::size_t b = 0;
  for (std::size_t first = 0; first < ds.count(); first += batch_size, ++b) {
    const std::size_t n = std::min(batch_size, ds.count() - first);
    const Tensor<float> z = m.encode(ds.batch_range<float>(first, n), hash_combine(seed, b));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) latents(Eigen::Index(first + i), Eigen::Index(j)) = z[i * d + j];
  }
  return metrics::latent_pca_histogram(latents, bins);
}

inline metrics::LatentPca latent_histogram_cmd(const fs::path& ckpt, const data::Dataset& ds, const fs::path& csv_path,
                                               std::uint64_t seed = 0) {
  if (ds.empty()) throw ValidationError("latent-hist: dataset is empty");
  auto ck = train::load_checkpoint<float>(ckpt);
  auto pca = latent_histogram(ck.model, ds, seed);
  fs::path json_path = csv_path;
  json_path.replace_extension(".json");
  metrics::write_histogram(pca, csv_path, json_path);
  return pca;
}

// ---- datasets from config / flags ------------------------------------------

struct DatasetConfig {
  std::string source = "cifar10";  // cifar10 | stl10 | folder | synthetic
  std::vector<fs::path> paths;
  std::size_t max_count = 0;
  std::size_t train_count = 2000;
  std::size_t eval_count = 500;
  std::uint64_t synthetic_seed = 7;
};

inline data::Dataset load_dataset(const std::string& source, const std::vector<fs::path>& paths, std::size_t max_count) {
  if (paths.empty()) throw ValidationError("dataset: no input paths");
  for (const auto& p : paths)
    if (!fs::exists(p)) throw ValidationError("dataset: path does not exist: " + p.string());
  if (source == "cifar10" || source == "synthetic") return data::load_cifar10(paths, max_count);
  if (source == "stl10") {
    if (paths.size() != 1) throw ValidationError("dataset: stl10 takes exactly one file");
    return data::load_stl10(paths.front(), max_count);
  }
  if (source == "folder") {
    if (paths.size() != 1) throw ValidationError("dataset: folder takes exactly one directory");
    return data::load_folder(paths.front(), max_count);
  }
  throw ValidationError("dataset.source: unknown value '" + source + "' (expected cifar10, stl10, folder, synthetic)");
}

// ---- end-to-end run ---------------------------------------------------------

struct ModelEntry {
  std::string name;
  model::ModelSpec spec;
  train::TrainConfig train;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<ModelEntry> models;
  std::vector<double> test_snrs{-5, 0, 5, 10, 15, 20};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t grid_images = 5;
  double grid_snr_db = 10;
  std::size_t hist_bins = 64;
  fs::path output_dir = "out";
};

/// Parses and validates a config. Relative paths resolve against `base`.
inline ExperimentConfig parse_config(const json& j, const fs::path& base = {}) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (const char* key : {"dataset", "model"})
    if (!j.contains(key)) throw ValidationError(std::string("config is missing required key '") + key + "'");
  ExperimentConfig c;
  try {
    const json& d = j.at("dataset");
    c.dataset.source = d.value("source", c.dataset.source);
    if (d.contains("path")) c.dataset.paths.push_back(base / d.at("path").get<std::string>());
    if (d.contains("paths"))
      for (const auto& p : d.at("paths")) c.dataset.paths.push_back(base / p.get<std::string>());
    c.dataset.max_count = d.value("max_count", c.dataset.max_count);
    c.dataset.train_count = d.value("train_count", c.dataset.train_count);
    c.dataset.eval_count = d.value("eval_count", c.dataset.eval_count);
    c.dataset.synthetic_seed = d.value("synthetic_seed", c.dataset.synthetic_seed);
    if (c.dataset.source != "synthetic" && c.dataset.paths.empty())
      throw ValidationError("dataset section needs 'path' or 'paths' for source '" + c.dataset.source + "'");
    if (c.dataset.train_count < 1 || c.dataset.eval_count < 1)
      throw ValidationError("dataset.train_count and dataset.eval_count must be >= 1");

    const train::TrainConfig base_train =
        j.contains("train") ? j.at("train").get<train::TrainConfig>() : train::TrainConfig{};
    const json& m = j.at("model");
    const json list = m.is_array() ? m : json::array({m});
    if (list.empty()) throw ValidationError("config key 'model' lists no models");
    for (const json& e : list) {
      ModelEntry me;
      me.spec = e.get<model::ModelSpec>();
      me.train = base_train;
      if (e.contains("loss")) {
        json t = json(base_train);
        t["loss"] = e.at("loss");
        me.train = t.get<train::TrainConfig>();
      }
      me.name = e.value("name", kind_label(me.spec) + "_" + losses::to_string(me.train.loss.reconstruction));
      for (const auto& other : c.models)
        if (other.name == me.name) throw ValidationError("duplicate model name '" + me.name + "'; set 'name'");
      c.models.push_back(std::move(me));
    }

    if (j.contains("eval")) {
      const json& e = j.at("eval");
      c.test_snrs = e.value("test_snrs", c.test_snrs);
      c.seeds = e.value("seeds", c.seeds);
      c.grid_images = e.value("grid_images", c.grid_images);
      c.grid_snr_db = e.value("grid_snr_db", c.grid_snr_db);
      c.hist_bins = e.value("hist_bins", c.hist_bins);
      if (e.contains("output_dir")) c.output_dir = e.at("output_dir").get<std::string>();
    }
    c.output_dir = base / c.output_dir;
    if (c.test_snrs.empty()) throw ValidationError("eval.test_snrs must be nonempty");
    if (c.seeds.empty()) throw ValidationError("eval.seeds must be nonempty");
    if (c.hist_bins < 1) throw ValidationError("eval.hist_bins must be >= 1");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

inline std::string crc32_hex(const fs::path& path) {
  const auto bytes = data::detail::read_bytes(path);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", train::detail::crc32_of(bytes));
  return buf;
}

/// Runs `fn`; any failure is rethrown with the stage name, keeping the
/// validation/runtime distinction.
template <class F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw ValidationError("stage '" + name + "': " + e.what());
  } catch (const std::exception& e) {
    throw Error("stage '" + name + "': " + e.what());
  }
}

struct RunResult {
  fs::path index;
  std::vector<fs::path> checkpoints;
  fs::path csv;
  std::vector<SweepRecord> records;
};

/// data -> train every model -> sweep -> grid -> latent histogram -> index.
/// Artifacts written before a failure are kept.
inline RunResult run(const ExperimentConfig& cfg, const std::function<void(const std::string&)>& log = {}) {
  auto say = [&](const std::string& s) { if (log) log(s); };
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  RunResult res;
  json artifacts = json::array();
  auto record = [&](const fs::path& p, const std::string& kind) {
    artifacts.push_back({{"path", fs::relative(p, out).generic_string()}, {"kind", kind}, {"crc32", crc32_hex(p)},
                         {"bytes", fs::file_size(p)}});
  };

  const auto [train_set, eval_set] = stage("data", [&] {
    std::vector<fs::path> paths = cfg.dataset.paths;
    if (cfg.dataset.source == "synthetic") {
      const fs::path syn = out / "data" / "synthetic_cifar.bin";
      data::write_synthetic_cifar(syn, cfg.dataset.train_count + cfg.dataset.eval_count, cfg.dataset.synthetic_seed);
      paths = {syn};
    }
    std::size_t limit = cfg.dataset.train_count + cfg.dataset.eval_count;
    if (cfg.dataset.max_count) limit = std::min(limit, cfg.dataset.max_count);
    const data::Dataset all = load_dataset(cfg.dataset.source, paths, limit);
    if (all.count() < 2) throw ValidationError("dataset holds fewer than 2 images");
    const std::size_t n_train = std::min(cfg.dataset.train_count, all.count() - 1);
    return all.split(n_train);
  });
  say("data: " + std::to_string(train_set.count()) + " train / " + std::to_string(eval_set.count()) + " eval images");

  std::vector<std::unique_ptr<model::Model<float>>> models;
  for (const ModelEntry& me : cfg.models) {
    stage("train " + me.name, [&] {
      auto m = std::make_unique<model::Model<float>>(me.spec, me.train.seed);
      const auto hist = train::train(*m, train_set, eval_set, me.train, [&](const train::HistoryEntry& h) {
        say(me.name + " epoch " + std::to_string(h.epoch) + " loss " + format_number(h.train_loss) + " psnr " +
            format_number(h.eval_psnr_db) + " ssim " + format_number(h.eval_ssim));
      });
      const fs::path ck = out / "checkpoints" / (me.name + ".ckpt");
      train::save_checkpoint(*m, me.train, me.train.epochs, hist, ck);
      res.checkpoints.push_back(ck);
      record(ck, "checkpoint");
      models.push_back(std::move(m));
    });
  }

  stage("sweep", [&] {
    res.records = snr_sweep(res.checkpoints, cfg.test_snrs, eval_set, cfg.seeds);
    res.csv = out / "sweep.csv";
    write_csv(res.records, res.csv);
    record(res.csv, "sweep_csv");
  });

  stage("grid", [&] {
    std::vector<Tensor<float>> images;
    for (std::size_t i = 0; i < std::min(cfg.grid_images, eval_set.count()); ++i) images.push_back(eval_set.image(i));
    std::vector<model::Model<float>*> ptrs;
    for (auto& m : models) ptrs.push_back(m.get());
    channel::ChannelConfig ch = cfg.models.front().train.channel(cfg.grid_snr_db);
    const fs::path p = out / "grid.png";
    data::write_image(reconstruct_grid(ptrs, images, ch, cfg.seeds.front()), p);
    record(p, "grid_png");
  });

  stage("latent-hist", [&] {
    for (std::size_t i = 0; i < models.size(); ++i) {
      const auto pca = latent_histogram(*models[i], eval_set, cfg.seeds.front(), cfg.hist_bins);
      const fs::path csv = out / ("latent_" + cfg.models[i].name + ".csv");
      fs::path sidecar = csv;
      sidecar.replace_extension(".json");
      metrics::write_histogram(pca, csv, sidecar);
      record(csv, "latent_hist_csv");
      record(sidecar, "latent_hist_json");
    }
  });

  res.index = out / "index.json";
  json index = {{"artifacts", artifacts}, {"models", json::array()}};
  for (const auto& me : cfg.models) index["models"].push_back({{"name", me.name}, {"model", me.spec}, {"train", me.train}});
  write_text(res.index, index.dump(2) + "\n");
  say("wrote " + res.index.string());
  return res;
}

}  // namespace jscc::exp
