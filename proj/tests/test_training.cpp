#include <gtest/gtest.h>

#include "jscc/training.hpp"

using namespace jscc;
using namespace jscc::train;
namespace fs = std::filesystem;

namespace {

model::ModelSpec tiny_spec(model::ModelKind kind = model::ModelKind::ae) {
  model::ModelSpec s;
  s.kind = kind;
  s.sampler = kind == model::ModelKind::ae ? model::SamplerKind::none : model::SamplerKind::convolutional;
  s.input_shape = {3, 16, 16};
  s.encoder_layers = {{8, 3, 3, 2, 1}, {2, 3, 3, 1, 1}};
  s.k = 64;
  s.compression_rate = 0;
  return s;
}

data::Dataset tiny_data(std::size_t count, std::uint64_t seed) {
  data::Dataset ds;
  ds.height = ds.width = 16;
  for (std::size_t i = 0; i < count; ++i)
    for (unsigned char b : data::synthetic_image(16, 16, hash_combine(seed, i))) ds.pixels.push_back(b / 255.0f);
  return ds;
}

TrainConfig tiny_config(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.eval_batch_size = 8;
  c.lr_switch_epoch = epochs;
  c.seed = 3;
  return c;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / "jscc_training";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor<double> p({3}, {1, 2, 3});
  std::vector<Tensor<double>*> ps{&p};
  AdamState<double> st;
  adam_step<double>(ps, st, 1e-3);
  EXPECT_EQ(p.data, (std::vector<double>{1, 2, 3}));
}

TEST(Adam, FirstStepIsLearningRate) {
  Tensor<double> p({2}, {0, 0});
  p.grad = std::vector<double>{0.3, -50};
  std::vector<Tensor<double>*> ps{&p};
  AdamState<double> st;
  adam_step<double>(ps, st, 1e-3);
  EXPECT_NEAR(p[0], -1e-3, 1e-9);
  EXPECT_NEAR(p[1], 1e-3, 1e-9);
}

TEST(Adam, DescendsQuadratic) {
  Tensor<double> p({1}, {5});
  std::vector<Tensor<double>*> ps{&p};
  AdamState<double> st;
  double prev = 25;
  for (int i = 0; i < 200; ++i) {
    p.grad = std::vector<double>{2 * p[0]};
    adam_step<double>(ps, st, 0.05);
    EXPECT_LE(p[0] * p[0], prev + 1e-12);
    prev = p[0] * p[0];
  }
  EXPECT_LT(std::abs(p[0]), 1.0);
}

TEST(Schedule, SwitchEpoch) {
  TrainConfig c;
  c.lr_switch_epoch = 350;
  EXPECT_EQ(lr_at_epoch(349, c), 1e-3);
  EXPECT_EQ(lr_at_epoch(350, c), 1e-4);
  c.lr_switch_epoch = 0;
  EXPECT_EQ(lr_at_epoch(0, c), 1e-4);
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  auto c = tiny_config(4);
  c.loss.reconstruction = losses::Reconstruction::mixed_ssim_l1;
  c.loss.beta_kl = 0.25;
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
  EXPECT_THROW(nlohmann::json::parse(R"({"batch_size": 0})").get<TrainConfig>(), ValidationError);
  EXPECT_THROW(nlohmann::json::parse(R"({"loss": "huber"})").get<TrainConfig>(), ValidationError);
}

TEST(Training, DeterministicGivenSeeds) {
  const auto train_set = tiny_data(8, 1), eval_set = tiny_data(4, 2);
  model::Model<float> a(tiny_spec(model::ModelKind::vae), 5), b(tiny_spec(model::ModelKind::vae), 5);
  const auto ha = train::train(a, train_set, eval_set, tiny_config(1));
  const auto hb = train::train(b, train_set, eval_set, tiny_config(1));
  ASSERT_EQ(ha.size(), 1u);
  EXPECT_EQ(ha[0].train_loss, hb[0].train_loss);
  EXPECT_EQ(ha[0].eval_psnr_db, hb[0].eval_psnr_db);
  for (std::size_t i = 0; i < a.params().entries.size(); ++i)
    EXPECT_EQ(a.params().entries[i].tensor.data, b.params().entries[i].tensor.data);
}

TEST(Training, LossDecreasesOnSmallSet) {
  const auto ds = tiny_data(64, 4);
  model::Model<float> m(tiny_spec(), 2);
  auto cfg = tiny_config(30);
  cfg.train_snr_db = 30;
  const auto h = train::train(m, ds, ds, cfg);
  ASSERT_EQ(h.size(), 30u);
  EXPECT_LT(h.back().train_loss, 0.5 * h.front().train_loss);
  EXPECT_GT(h.back().eval_psnr_db, h.front().eval_psnr_db);
  for (const auto& e : h) EXPECT_TRUE(std::isfinite(e.train_loss));
}

TEST(Training, NonFiniteAborts) {
  model::Model<float> m(tiny_spec(), 2);
  m.params().at("enc0.weight")[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train::train(m, tiny_data(8, 1), data::Dataset{}, tiny_config(1));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}

TEST(Training, ShapeMismatchIsValidationError) {
  model::Model<float> m(model::ModelSpec::cifar_default(), 2);
  EXPECT_THROW(train::train(m, tiny_data(8, 1), data::Dataset{}, tiny_config(1)), ValidationError);
}

TEST(Baseline, MeanImagePsnr) {
  const auto ds = tiny_data(10, 9);
  data::Dataset constant = ds;
  std::fill(constant.pixels.begin(), constant.pixels.end(), 0.5f);
  EXPECT_EQ(mean_image_psnr(constant, constant), 100.0);
  EXPECT_GT(mean_image_psnr(ds, ds), 5.0);
  EXPECT_THROW(mean_image_psnr(data::Dataset{}, ds), ValidationError);
}

TEST(Checkpoint, RoundTripReproducesEvaluation) {
  const auto ds = tiny_data(8, 1);
  model::Model<float> m(tiny_spec(model::ModelKind::vae), 5);
  const auto cfg = tiny_config(1);
  const auto hist = train::train(m, ds, ds, cfg);
  const fs::path p = temp_path("round.ckpt");
  save_checkpoint(m, cfg, 1, hist, p);

  auto ck = load_checkpoint<float>(p);
  EXPECT_EQ(ck.epoch, 1u);
  ASSERT_EQ(ck.history.size(), 1u);
  EXPECT_EQ(ck.history[0].train_loss, hist[0].train_loss);
  EXPECT_EQ(nlohmann::json(ck.config), nlohmann::json(cfg));
  for (std::size_t i = 0; i < m.params().entries.size(); ++i)
    EXPECT_EQ(ck.model.params().entries[i].tensor.data, m.params().entries[i].tensor.data);
  const auto ch = cfg.channel(0);
  EXPECT_EQ(evaluate(ck.model, ds, ch, 7, 8).psnr_db, evaluate(m, ds, ch, 7, 8).psnr_db);

  auto dbl = load_checkpoint<double>(p);
  EXPECT_EQ(dbl.model.params().at("enc0.weight")[3], double(m.params().at("enc0.weight")[3]));
}

TEST(Checkpoint, CorruptionIsDetected) {
  model::Model<float> m(tiny_spec(), 1);
  const fs::path p = temp_path("corrupt.ckpt");
  save_checkpoint(m, tiny_config(1), 0, {}, p);
  const auto good = data::detail::read_bytes(p);

  auto expect_error = [&](std::vector<unsigned char> bytes, const std::string& needle) {
    const fs::path q = temp_path("bad.ckpt");
    data::detail::write_bytes(q, bytes);
    try {
      load_checkpoint<float>(q);
      ADD_FAILURE() << "no error for " << needle;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };

  auto magic = good;
  magic[0] = 'X';
  expect_error(magic, "magic");

  auto truncated = good;
  truncated.resize(good.size() - 10);
  expect_error(truncated, "truncated");

  auto payload = good;
  payload.back() ^= 0x5a;
  expect_error(payload, "payload checksum");

  // Flip a character inside a tensor name of the manifest.
  const std::string text(good.begin(), good.end());
  const auto at = text.find("enc0.bias");
  ASSERT_NE(at, std::string::npos);
  auto manifest = good;
  manifest[at + 3] = '7';
  expect_error(manifest, "manifest");

  expect_error({'J', 'S'}, "magic");
}

TEST(Checkpoint, RejectsUnrepresentableValues) {
  model::Model<double> m(tiny_spec(), 1);
  m.params().at("enc0.weight")[0] = 0.1;  // not exactly a float
  EXPECT_THROW(save_checkpoint(m, tiny_config(1), 0, {}, temp_path("x.ckpt")), NumericError);
}
