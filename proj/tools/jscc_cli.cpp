// Command-line front end: train, sweep, compare, grid, latent-hist,
// gradcheck and run. Exit code 0 on success, 1 on validation errors,
// 2 on runtime failures.

#include <CLI11.hpp>
#include <iostream>

#include "jscc/experiments.hpp"
#include "jscc/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace jscc;

namespace {

struct DataFlags {
  std::vector<std::string> paths;
  std::string format = "cifar10";
  std::size_t max_count = 0;

  void attach(CLI::App* app) {
    app->add_option("--data", paths, "Dataset file(s) or image directory")->required();
    app->add_option("--format", format, "cifar10 | stl10 | folder")->capture_default_str();
    app->add_option("--max-count", max_count, "Read at most this many images (0 = all)");
  }
  data::Dataset load() const {
    return exp::load_dataset(format, std::vector<fs::path>(paths.begin(), paths.end()), max_count);
  }
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint source-channel coding laboratory: AE/VAE image transmission over AWGN"};
  app.require_subcommand(1);

  // train
  std::string train_config, train_out;
  auto* train_cmd = app.add_subcommand("train", "Train every model of a config; write checkpoints");
  train_cmd->add_option("--config", train_config, "Experiment config (JSON)")->required();
  train_cmd->add_option("--out", train_out, "Output directory for checkpoints")->required();

  // sweep
  std::vector<std::string> sweep_ckpts;
  std::vector<double> sweep_snrs{-5, 0, 5, 10, 15, 20};
  std::vector<std::uint64_t> sweep_seeds{0, 1, 2};
  std::string sweep_csv;
  DataFlags sweep_data;
  auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate checkpoints over test SNRs and seeds; write CSV");
  sweep_cmd->add_option("--ckpt", sweep_ckpts, "Checkpoint file(s)")->required();
  sweep_cmd->add_option("--snrs", sweep_snrs, "Test SNRs in dB")->capture_default_str();
  sweep_cmd->add_option("--seeds", sweep_seeds, "Noise seeds")->capture_default_str();
  sweep_cmd->add_option("--csv", sweep_csv, "Output CSV path")->required();
  sweep_data.attach(sweep_cmd);

  // compare
  std::string cmp_ae, cmp_vae;
  std::vector<double> cmp_snrs{-5, 0};
  std::vector<std::uint64_t> cmp_seeds{0, 1, 2};
  DataFlags cmp_data;
  auto* cmp_cmd = app.add_subcommand("compare", "VAE vs AE robustness verdict below the train SNR");
  cmp_cmd->add_option("--ae", cmp_ae, "AE checkpoint")->required();
  cmp_cmd->add_option("--vae", cmp_vae, "VAE checkpoint")->required();
  cmp_cmd->add_option("--snrs", cmp_snrs, "Low test SNRs in dB")->capture_default_str();
  cmp_cmd->add_option("--seeds", cmp_seeds, "Noise seeds")->capture_default_str();
  cmp_data.attach(cmp_cmd);

  // grid
  std::vector<std::string> grid_ckpts, grid_images;
  double grid_snr = 10;
  std::string grid_out;
  std::uint64_t grid_seed = 0;
  auto* grid_cmd = app.add_subcommand("grid", "Originals next to each model's reconstruction, as PNG");
  grid_cmd->add_option("--ckpt", grid_ckpts, "Checkpoint file(s)");
  grid_cmd->add_option("--images", grid_images, "Image files (PNG or PPM)")->required();
  grid_cmd->add_option("--snr", grid_snr, "Test SNR in dB")->capture_default_str();
  grid_cmd->add_option("--seed", grid_seed, "Noise seed")->capture_default_str();
  grid_cmd->add_option("--out", grid_out, "Output PNG path")->required();

  // latent-hist
  std::string hist_ckpt, hist_out;
  std::uint64_t hist_seed = 0;
  DataFlags hist_data;
  auto* hist_cmd = app.add_subcommand("latent-hist", "Two-component PCA histogram of pre-channel latents");
  hist_cmd->add_option("--ckpt", hist_ckpt, "Checkpoint file")->required();
  hist_cmd->add_option("--out", hist_out, "Output CSV path (a .json sidecar is written next to it)")->required();
  hist_cmd->add_option("--seed", hist_seed, "Sampler seed")->capture_default_str();
  hist_data.attach(hist_cmd);

  // gradcheck
  std::vector<std::string> gc_ops;
  std::size_t gc_seeds = 20;
  double gc_tol = 1e-4;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of registered primitives and losses");
  gc_cmd->add_option("--op", gc_ops, "Op name(s); default: all registered");
  gc_cmd->add_option("--seeds", gc_seeds, "Random points per op")->capture_default_str();
  gc_cmd->add_option("--tol", gc_tol, "Max relative error")->capture_default_str();

  // run
  std::string run_config;
  auto* run_cmd = app.add_subcommand("run", "Train, sweep, grid and latent histogram end to end");
  run_cmd->add_option("--config", run_config, "Experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) {
      const auto cfg = exp::load_config(train_config);
      auto [train_set, eval_set] = [&] {
        std::vector<fs::path> paths = cfg.dataset.paths;
        if (cfg.dataset.source == "synthetic") {
          const fs::path syn = fs::path(train_out) / "data" / "synthetic_cifar.bin";
          data::write_synthetic_cifar(syn, cfg.dataset.train_count + cfg.dataset.eval_count, cfg.dataset.synthetic_seed);
          paths = {syn};
        }
        const auto all = exp::load_dataset(cfg.dataset.source, paths, cfg.dataset.train_count + cfg.dataset.eval_count);
        return all.split(std::min(cfg.dataset.train_count, all.count() - 1));
      }();
      for (const auto& me : cfg.models) {
        model::Model<float> m(me.spec, me.train.seed);
        const auto hist = train::train(m, train_set, eval_set, me.train, [&](const train::HistoryEntry& h) {
          log_line(me.name + " epoch " + std::to_string(h.epoch) + " loss " + exp::format_number(h.train_loss) +
                   " psnr " + exp::format_number(h.eval_psnr_db) + " ssim " + exp::format_number(h.eval_ssim));
        });
        const fs::path ck = fs::path(train_out) / (me.name + ".ckpt");
        train::save_checkpoint(m, me.train, me.train.epochs, hist, ck);
        std::cout << ck.string() << "\n";
      }
    } else if (*sweep_cmd) {
      const auto records = exp::snr_sweep(std::vector<fs::path>(sweep_ckpts.begin(), sweep_ckpts.end()), sweep_snrs,
                                          sweep_data.load(), sweep_seeds);
      exp::write_csv(records, sweep_csv);
      std::cout << exp::to_csv(records);
    } else if (*cmp_cmd) {
      const auto v = exp::compare_robustness(cmp_ae, cmp_vae, cmp_snrs, cmp_data.load(), cmp_seeds);
      std::cout << "test_snr_db,seed,ae_psnr_db,vae_psnr_db,ae_ssim,vae_ssim\n";
      for (const auto& c : v.cells)
        std::cout << exp::format_number(c.snr_db) << "," << c.seed << "," << exp::format_number(c.ae_psnr) << ","
                  << exp::format_number(c.vae_psnr) << "," << exp::format_number(c.ae_ssim) << ","
                  << exp::format_number(c.vae_ssim) << "\n";
      std::cout << "verdict psnr_fraction=" << v.psnr_fraction << " ssim_fraction=" << v.ssim_fraction << "\n";
    } else if (*grid_cmd) {
      std::vector<Tensor<float>> images;
      for (const auto& p : grid_images) images.push_back(data::read_image(p));
      exp::reconstruct_grid(std::vector<fs::path>(grid_ckpts.begin(), grid_ckpts.end()), images, grid_snr, grid_out,
                            grid_seed);
      std::cout << grid_out << "\n";
    } else if (*hist_cmd) {
      const auto pca = exp::latent_histogram_cmd(hist_ckpt, hist_data.load(), hist_out, hist_seed);
      std::cout << "eigenvalues " << pca.eigenvalues[0] << " " << pca.eigenvalues[1] << "\n";
    } else if (*gc_cmd) {
      if (gc_ops.empty()) gc_ops = ad::gradcheck_op_names();
      bool ok = true;
      for (const auto& op : gc_ops) {
        double worst = 0;
        for (std::uint64_t s = 0; s < gc_seeds; ++s) worst = std::max(worst, ad::gradcheck(op, {}, s).worst());
        ok = ok && worst < gc_tol;
        std::cout << (worst < gc_tol ? "PASS " : "FAIL ") << op << " max_rel_error=" << worst << "\n";
      }
      return ok ? 0 : 2;
    } else if (*run_cmd) {
      const auto res = exp::run(exp::load_config(run_config), log_line);
      std::cout << res.index.string() << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
