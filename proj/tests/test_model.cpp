#include <gtest/gtest.h>

#include "jscc/model.hpp"

using namespace jscc;
using namespace jscc::model;

namespace {

Tensor<float> random_batch(std::size_t B, ImageShape s, std::uint64_t seed) {
  RngStream rng(seed);
  Tensor<float> t({B, s[0], s[1], s[2]});
  for (float& v : t.data) v = static_cast<float>(rng.uniform());
  return t;
}

channel::ChannelConfig at_snr(double snr) {
  channel::ChannelConfig c;
  c.snr_db = snr;
  return c;
}

}  // namespace

TEST(ModelSpec, DefaultCompressionRates) {
  const auto c = ModelSpec::cifar_default();
  EXPECT_EQ(c.k, 512u);
  EXPECT_EQ(c.n(), 3072u);
  EXPECT_EQ(6 * c.k, c.n());
  const auto s = ModelSpec::stl_default(ModelKind::vae);
  EXPECT_EQ(s.k, 4608u);
  EXPECT_EQ(6 * s.k, s.n());
  EXPECT_NO_THROW(c.validate());
  EXPECT_NO_THROW(s.validate());
}

TEST(ModelSpec, UnreachableKListsAchievableSizes) {
  auto s = ModelSpec::cifar_default();
  s.k = 500;
  s.compression_rate = 0;
  try {
    s.validate();
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("achievable k"), std::string::npos) << msg;
    EXPECT_NE(msg.find("512"), std::string::npos) << msg;
  }
}

TEST(ModelSpec, KindSamplerConsistency) {
  auto s = ModelSpec::cifar_default(ModelKind::vae);
  s.sampler = SamplerKind::none;
  EXPECT_THROW(s.validate(), ValidationError);
  auto a = ModelSpec::cifar_default();
  a.sampler = SamplerKind::convolutional;
  EXPECT_THROW(a.validate(), ValidationError);
}

TEST(ParamCount, SingleConvLayer) {
  ModelSpec s;
  s.input_shape = {3, 8, 8};
  s.encoder_layers = {{16, 5, 5, 1, 2, true, false, Activation::none}};
  s.k = 16 * 64 / 2;
  s.compression_rate = 0;
  const auto pc = count_params(s);
  ASSERT_FALSE(pc.layers.empty());
  EXPECT_EQ(pc.layers.front().count, 16u * 3 * 25 + 16);
  EXPECT_EQ(pc.layers.front().count, 1216u);
}

TEST(ParamCount, DefaultsAndSamplerRatio) {
  const auto ae = count_params(ModelSpec::cifar_default());
  const auto fc = count_params(ModelSpec::cifar_default(ModelKind::vae, SamplerKind::fully_connected));
  const auto cv = count_params(ModelSpec::cifar_default(ModelKind::vae, SamplerKind::convolutional));
  EXPECT_EQ(ae.total, 75043u);
  EXPECT_EQ(fc.total, 2174243u);
  EXPECT_EQ(cv.total, 79683u);
  std::size_t sampler = 0;
  for (const auto& l : fc.layers)
    if (l.name.rfind("sampler", 0) == 0) sampler += l.count;
  EXPECT_EQ(sampler, 2u * (1024 * 1024 + 1024));
  EXPECT_GE(double(fc.total) / double(ae.total), 10.0);
}

TEST(ParamCount, MatchesBuiltModel) {
  for (auto spec : {ModelSpec::cifar_default(), ModelSpec::cifar_default(ModelKind::vae),
                    ModelSpec::cifar_default(ModelKind::vae, SamplerKind::fully_connected)}) {
    Model<float> m(spec, 1);
    EXPECT_EQ(m.params().trainable_count(), count_params(spec).total);
  }
}

TEST(Model, InitialWeightsDeterministic) {
  const auto spec = ModelSpec::cifar_default(ModelKind::vae);
  Model<float> a(spec, 3), b(spec, 3), c(spec, 4);
  EXPECT_EQ(a.params().at("enc0.weight").data, b.params().at("enc0.weight").data);
  EXPECT_EQ(a.params().at("sampler.mu.weight").data, b.params().at("sampler.mu.weight").data);
  EXPECT_NE(a.params().at("enc0.weight").data, c.params().at("enc0.weight").data);
}

TEST(Model, TransmitShapesPowerAndRange) {
  for (auto sampler : {SamplerKind::none, SamplerKind::convolutional, SamplerKind::fully_connected}) {
    const auto spec = ModelSpec::cifar_default(sampler == SamplerKind::none ? ModelKind::ae : ModelKind::vae, sampler);
    Model<float> m(spec, 2);
    const auto x = random_batch(3, spec.input_shape, 1);
    const auto r = m.transmit(x, at_snr(10), ad::Mode::eval, 5);
    EXPECT_EQ(r.x_hat.shape, x.shape);
    EXPECT_EQ(r.symbols.shape, (Shape{3, 1024}));
    for (double p : channel::row_power(r.symbols)) EXPECT_NEAR(p, 1.0, 1e-5);
    for (float v : r.x_hat.data) {
      ASSERT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    EXPECT_EQ(r.sampler.has_value(), sampler != SamplerKind::none);
  }
}

TEST(Model, SamplerOutputInvariant) {
  Model<double> m(ModelSpec::cifar_default(ModelKind::vae), 7);
  const auto x = [] {
    RngStream rng(3);
    Tensor<double> t({2, 3, 32, 32});
    for (double& v : t.data) v = rng.uniform();
    return t;
  }();
  const auto r = m.transmit(x, at_snr(10), ad::Mode::train, 11);
  ASSERT_TRUE(r.sampler);
  const auto& s = *r.sampler;
  for (std::size_t i = 0; i < s.z_s.size(); ++i)
    EXPECT_NEAR(s.z_s[i], s.mu[i] + std::exp(0.5 * s.log_var[i]) * s.epsilon[i], 1e-12);
}

TEST(Model, SamplerMomentsMonteCarlo) {
  const std::size_t N = 10000;
  ad::Graph<double> g(17);
  auto mu = g.input("mu", Tensor<double>({1, N}, 1.0));
  auto lv = g.input("lv", Tensor<double>({1, N}, std::log(4.0)));
  const auto z = ad::gaussian_sample(mu, lv, true).value();
  double mean = 0, var = 0;
  for (double v : z.data) mean += v;
  mean /= double(N);
  for (double v : z.data) var += (v - mean) * (v - mean);
  var /= double(N - 1);
  EXPECT_NEAR(mean, 1.0, 0.05);
  EXPECT_NEAR(var, 4.0, 0.2);
}

TEST(Model, NoiselessEvalIsDeterministic) {
  Model<float> m(ModelSpec::cifar_default(), 9);
  const auto x = random_batch(2, {3, 32, 32}, 4);
  const auto inf = at_snr(std::numeric_limits<double>::infinity());
  EXPECT_EQ(m.transmit(x, inf, ad::Mode::eval, 1).x_hat.data, m.transmit(x, inf, ad::Mode::eval, 2).x_hat.data);
  EXPECT_NE(m.transmit(x, at_snr(0), ad::Mode::eval, 1).x_hat.data,
            m.transmit(x, at_snr(0), ad::Mode::eval, 2).x_hat.data);
}

TEST(Model, SamplerKindsShareShapes) {
  const auto x = random_batch(2, {3, 32, 32}, 6);
  Model<float> fc(ModelSpec::cifar_default(ModelKind::vae, SamplerKind::fully_connected), 1);
  Model<float> cv(ModelSpec::cifar_default(ModelKind::vae, SamplerKind::convolutional), 1);
  EXPECT_EQ(fc.encode(x, 0).shape, cv.encode(x, 0).shape);
  EXPECT_EQ(fc.transmit(x, at_snr(5), ad::Mode::eval, 0).x_hat.shape,
            cv.transmit(x, at_snr(5), ad::Mode::eval, 0).x_hat.shape);
}

TEST(Model, DecoderMirrorsOddShapes) {
  for (ImageShape in : {ImageShape{3, 30, 30}, ImageShape{1, 17, 23}, ImageShape{2, 9, 12}}) {
    ModelSpec s;
    s.input_shape = in;
    s.encoder_layers = {{8, 5, 5, 2, 2}, {6, 3, 3, 2, 1}, {4, 3, 3, 1, 1}};
    s.compression_rate = 0;
    const auto lat = s.latent_shape();
    const std::size_t elems = lat[0] * lat[1] * lat[2];
    if (elems % 2) s.encoder_layers.back().out_channels = 2;
    const auto lat2 = s.latent_shape();
    s.k = lat2[0] * lat2[1] * lat2[2] / 2;
    Model<float> m(s, 1);
    const auto x = random_batch(2, in, 2);
    EXPECT_EQ(m.transmit(x, at_snr(10), ad::Mode::train, 0).x_hat.shape, x.shape);
  }
}

TEST(Model, RejectsWrongInputShape) {
  Model<float> m(ModelSpec::cifar_default(), 1);
  EXPECT_THROW(m.transmit(random_batch(1, {3, 16, 16}, 0), at_snr(10), ad::Mode::eval, 0), ShapeError);
}

TEST(ModelJson, RoundTripPresetAndMissingKey) {
  const auto spec = ModelSpec::cifar_default(ModelKind::vae, SamplerKind::fully_connected);
  const nlohmann::json j = spec;
  const auto back = j.get<ModelSpec>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(count_params(back).total, count_params(spec).total);

  const auto p = nlohmann::json::parse(R"({"kind": "VAE", "preset": "stl"})").get<ModelSpec>();
  EXPECT_EQ(p.k, 4608u);
  EXPECT_EQ(p.sampler, SamplerKind::convolutional);

  try {
    nlohmann::json::parse(R"({"kind": "AE", "input_shape": [3, 32, 32], "k": 512})").get<ModelSpec>();
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder_layers"), std::string::npos);
  }
  EXPECT_THROW(nlohmann::json::parse(R"({"kind": "GAN", "preset": "cifar"})").get<ModelSpec>(), ValidationError);
}
