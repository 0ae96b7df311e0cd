#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "decompress/checkpoint.hpp"
#include "decompress/denoiser.hpp"
#include "decompress/training.hpp"
#include "gradcheck.hpp"

namespace dc = decompress;
using dc::Shape;
using T64 = dc::Tensor<double>;

namespace {

const dc::CodecConfig kMini{8, 4, 2, 3, 255.0};

dc::Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  dc::Rng rng(seed);
  dc::Image img(h, w);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform(0, 255));
  return img;
}

dc::Image data_image(const char* name) {
  return dc::read_image(std::filesystem::path(DECOMPRESS_TEST_DATA) / name);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST(Patches, CountLaw) {
  EXPECT_EQ(dc::extract_patches(dc::Image(16, 16)).size(), 1u);
  EXPECT_EQ(dc::extract_patches(dc::Image(18, 18)).size(), 9u);
  EXPECT_EQ(dc::extract_patches(dc::Image(375, 500)).size(), 174600u);
  EXPECT_EQ(dc::extract_patches(dc::Image(40, 40), 16, 4).size(), 49u);
  EXPECT_THROW(dc::extract_patches(dc::Image(15, 40)), dc::GeometryError);
}

TEST(Patches, GatherAndDeterministicShuffle) {
  const dc::Image img = random_image(20, 21, 1);
  dc::PatchDataset a({img}, 16, 1), b({img}, 16, 1);
  dc::Rng ra(3), rb(3);
  a.shuffle(ra);
  b.shuffle(rb);
  EXPECT_TRUE(std::equal(a.refs().begin(), a.refs().end(), b.refs().begin()));
  std::vector<float> out(256);
  a.gather<float>(a.refs().subspan(0, 1), out.data());
  const auto ref = a.refs()[0];
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(out[r * 16 + c], img.at(ref.row + r, ref.col + c));
}

TEST(Patches, SubsampleKeepsDistinctSortedSubset) {
  dc::PatchDataset ds({random_image(64, 64, 2)}, 16, 1);
  dc::Rng rng(4);
  ds.subsample(100, rng);
  ASSERT_EQ(ds.size(), 100u);
  for (std::size_t i = 1; i < ds.size(); ++i) {
    const auto p = ds.refs()[i - 1], q = ds.refs()[i];
    EXPECT_TRUE(p.row < q.row || (p.row == q.row && p.col < q.col));
  }
}

TEST(Loss, BreakdownIdentities) {
  dc::Rng rng(5);
  dc::NeuralCodec<double> codec(kMini, rng);
  T64 y({2, 1, 8, 8});
  for (auto& v : y.data()) v = rng.uniform(0, 255);
  dc::Rng q1(6), q2(6);
  const auto zero = dc::rd_loss(y, codec, 0.0, dc::QuantizerMode::Train, q1).values();
  EXPECT_EQ(zero.total, zero.distortion);
  const auto v = dc::rd_loss(y, codec, 1000.0, dc::QuantizerMode::Train, q2).values();
  EXPECT_EQ(v.total, v.distortion + 1000.0 * v.rate);
  EXPECT_GE(v.distortion, 0.0);
  EXPECT_GE(v.rate, 0.0);
}

TEST(Loss, ConstantOffsetDistortion) {
  const dc::LossBreakdown b = dc::make_breakdown(256.0, 0.5, 1000.0);
  EXPECT_EQ(b.total, 756.0);
  T64 y({1, 1, 4, 4}, 10.0), y_hat({1, 1, 4, 4}, 26.0);
  EXPECT_EQ(dc::reduce_mean(dc::square(dc::sub(y_hat, y))).item(), 256.0);
}

TEST(Loss, FullModelGradientMatchesFiniteDifferences) {
  dc::Rng rng(7);
  dc::NeuralCodec<double> codec(kMini, rng);
  T64 y({3, 1, 8, 8});
  for (auto& v : y.data()) v = rng.uniform(0, 255);
  T64 noise({3, 2, 1, 1});
  for (auto& v : noise.data()) v = rng.uniform(-0.5, 0.5);
  const auto r = dc::testing::check_gradients<double>(
      codec.named_parameters(), [&] { return dc::rd_loss_with_noise(y, codec, 1000.0, noise).total; },
      1e-4);  // loss is O(1e4); smaller steps are dominated by round-off
  EXPECT_LE(r.max_rel_error, 1e-3) << r.worst;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  T64 p = T64::scalar(1.0);
  p.set_requires_grad(true);
  p.mutable_grad()[0] = 1.0;
  dc::AdamState<double> st;
  ASSERT_TRUE(dc::adam_step<double>({&p}, st, 1e-3));
  EXPECT_NEAR(p[0], 1.0 - 1e-3 / (1 + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameterAndDecaysMoments) {
  T64 p = T64::scalar(2.0);
  p.set_requires_grad(true);
  dc::AdamState<double> st;
  p.mutable_grad()[0] = 1.0;
  dc::adam_step<double>({&p}, st, 1e-3);
  const double after_first = p[0], m1 = st.first_moment[0][0], v1 = st.second_moment[0][0];
  p.zero_grad();
  dc::adam_step<double>({&p}, st, 1e-3);
  EXPECT_DOUBLE_EQ(st.first_moment[0][0], 0.9 * m1);
  EXPECT_DOUBLE_EQ(st.second_moment[0][0], 0.999 * v1);
  EXPECT_LT(p[0], after_first);  // momentum continues
  T64 q = T64::scalar(2.0);
  q.set_requires_grad(true);
  q.mutable_grad();
  dc::AdamState<double> fresh;
  dc::adam_step<double>({&q}, fresh, 1e-3);
  EXPECT_EQ(q[0], 2.0);
}

TEST(Adam, NonFiniteGradientSkipsStep) {
  T64 p = T64::scalar(2.0);
  p.set_requires_grad(true);
  p.mutable_grad()[0] = std::nan("");
  dc::AdamState<double> st;
  std::string diag;
  EXPECT_FALSE(dc::adam_step<double>({&p}, st, 1e-3, &diag));
  EXPECT_EQ(p[0], 2.0);
  EXPECT_EQ(st.step, 0u);
  EXPECT_NE(diag.find("non-finite"), std::string::npos);
}

TEST(Train, SmokeRunHasFiniteLog) {
  dc::TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 4;
  cfg.log_interval = 1;
  const auto result = dc::train<double>({random_image(32, 32, 8)}, cfg);
  ASSERT_EQ(result.log.size(), 10u);
  for (const auto& rec : result.log) {
    EXPECT_TRUE(std::isfinite(rec.loss.distortion));
    EXPECT_TRUE(std::isfinite(rec.loss.rate));
    EXPECT_TRUE(std::isfinite(rec.loss.total));
  }
  EXPECT_EQ(result.skipped_steps, 0u);
}

TEST(Train, LogRowCountIsStepsOverInterval) {
  dc::TrainConfig cfg;
  cfg.arch = kMini;
  cfg.steps = 25;
  cfg.batch_size = 2;
  cfg.log_interval = 5;
  EXPECT_EQ(dc::train<double>({random_image(12, 12, 9)}, cfg).log.size(), 5u);
}

TEST(Train, RejectsBadInputs) {
  dc::TrainConfig cfg;
  EXPECT_THROW(dc::train<double>({}, cfg), dc::ContractError);
  cfg.lambda = 0;
  EXPECT_THROW(dc::train<double>({random_image(32, 32, 1)}, cfg), dc::ConfigError);
  cfg.lambda = 1000;
  cfg.steps = 1;
  EXPECT_THROW(dc::train<double>({random_image(10, 32, 1)}, cfg), dc::GeometryError);
  cfg.arch.patch_size = 8;
  EXPECT_THROW(cfg.require_standard_patch(), dc::ConfigError);
}

TEST(Train, DefaultLambdaTable) {
  EXPECT_EQ(dc::default_lambda_for_sigma(15), 300.0);
  EXPECT_EQ(dc::default_lambda_for_sigma(25), 1000.0);
  EXPECT_EQ(dc::default_lambda_for_sigma(50), 3000.0);
  EXPECT_FALSE(dc::default_lambda_for_sigma(20).has_value());
}

TEST(Train, IdenticalSeedsGiveIdenticalParameters) {
  dc::TrainConfig cfg;
  cfg.arch = kMini;
  cfg.steps = 30;
  cfg.batch_size = 4;
  cfg.seed = 17;
  const dc::Image img = random_image(20, 20, 10);
  auto a = dc::train<double>({img}, cfg);
  auto b = dc::train<double>({img}, cfg);
  const auto pa = a.codec.parameters(), pb = b.codec.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    ASSERT_TRUE(std::equal(pa[i]->data().begin(), pa[i]->data().end(), pb[i]->data().begin()));
}

TEST(Train, LossDecreasesOnNaturalCrop) {
  const dc::Image noisy = dc::add_awgn(data_image("astronaut_crop_64.pgm"), {25.0, 1});
  dc::TrainConfig cfg;
  cfg.lambda = 1000;
  cfg.steps = 1000;
  cfg.batch_size = 8;
  cfg.log_interval = 1;
  cfg.seed = 2;
  const auto result = dc::train<float>({noisy}, cfg);
  std::vector<double> early, late;
  for (const auto& rec : result.log) {
    if (rec.step <= 100) early.push_back(rec.loss.total);
    if (rec.step >= 900) late.push_back(rec.loss.total);
  }
  EXPECT_LT(median(late), median(early)) << "early " << median(early) << " late " << median(late);
}

TEST(Train, LargerLambdaGivesLowerRate) {
  const dc::Image noisy = dc::add_awgn(data_image("astronaut_crop_64.pgm"), {25.0, 3});
  dc::TrainConfig cfg;
  cfg.steps = 600;
  cfg.batch_size = 8;
  cfg.seed = 4;
  auto eval_rate = [&](double lambda) {
    cfg.lambda = lambda;
    auto trained = dc::train<float>({noisy}, cfg);
    dc::DenoiseOptions opts;
    opts.stride = 4;
    return dc::denoise_detailed(noisy, trained.codec, opts).mean_rate_bpp;
  };
  const double r300 = eval_rate(300), r3000 = eval_rate(3000);
  EXPECT_LT(r3000, r300) << "R(300)=" << r300 << " R(3000)=" << r3000;
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  dc::Rng rng(11);
  dc::NeuralCodec<float> codec(dc::CodecConfig{16, 8, 4, 3, 255.0}, rng);
  const auto path = std::filesystem::temp_directory_path() / "decompress_roundtrip.dcmp";
  dc::CheckpointMeta meta;
  meta.lambda = 1000.0 / 3.0;
  meta.sigma = 25;
  meta.steps = 123;
  meta.seed = 77;
  dc::save_checkpoint(codec, meta, path);
  auto loaded = dc::load_checkpoint<float>(path);
  EXPECT_EQ(loaded.meta.lambda, meta.lambda);
  EXPECT_EQ(loaded.meta.steps, 123u);
  EXPECT_EQ(loaded.meta.arch, codec.config());
  const dc::Image noisy = random_image(24, 20, 12);
  const dc::Image a = dc::denoise(noisy, codec), b = dc::denoise(noisy, loaded.codec);
  EXPECT_EQ(a, b);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncationNamesMissingBytes) {
  dc::Rng rng(13);
  dc::NeuralCodec<float> codec(kMini, rng);
  auto bytes = dc::encode_checkpoint(codec, {});
  bytes.resize(bytes.size() - 3);
  try {
    dc::decode_checkpoint<float>(bytes, "ckpt");
    FAIL() << "truncated checkpoint accepted";
  } catch (const dc::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("(missing 3)"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, BadMagicAndVersion) {
  dc::Rng rng(14);
  dc::NeuralCodec<float> codec(kMini, rng);
  auto bytes = dc::encode_checkpoint(codec, {});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(dc::decode_checkpoint<float>(bad, "ckpt"), dc::FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(dc::decode_checkpoint<float>(bad, "ckpt"), dc::VersionError);
}
