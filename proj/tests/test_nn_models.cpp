#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <sstream>

#include "rcpilot/nn.hpp"
#include "support/frames.hpp"
#include "support/gradcheck.hpp"

using namespace rcpilot;
using namespace rcpilot::nn;

namespace {

std::size_t conv_params(std::size_t k, std::size_t cin, std::size_t f) { return f * (k * k * cin) + f; }
std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }
std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s) { return (in - k) / s + 1; }

template <typename T>
void zero_all(Model<T>& m) {
  for (auto& p : m.params()) p.value->fill(T{0});
}

template <typename T>
std::vector<Tensor<T>> weights_of(Model<T>& m) {
  std::vector<Tensor<T>> out;
  for (auto& p : m.params()) out.push_back(*p.value);
  return out;
}

Tensor<float> random_input(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t(s);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST(LinearCnn, ShapeChainMatchesLayerArithmetic) {
  Model<float> m;
  // expected chain from out = floor((in - k) / s) + 1
  std::size_t h = 120, w = 160;
  const std::size_t f[5] = {24, 32, 64, 64, 64}, k[5] = {5, 5, 5, 3, 3}, s[5] = {2, 2, 2, 2, 1};
  std::vector<Shape> want;
  for (int i = 0; i < 5; ++i) {
    h = conv_out(h, k[i], s[i]);
    w = conv_out(w, k[i], s[i]);
    want.push_back({h, w, f[i]});
  }
  EXPECT_EQ(want, (std::vector<Shape>{{58, 78, 24}, {27, 37, 32}, {12, 17, 64}, {5, 8, 64}, {3, 6, 64}}));
  std::vector<Shape> got;
  Shape flat;
  for (const auto& [name, shape] : m.trace_shapes()) {
    if (name.rfind("conv", 0) == 0) got.push_back(shape);
    if (name == "flatten") flat = shape;
  }
  EXPECT_EQ(got, want);
  EXPECT_EQ(flat, (Shape{1152}));
  EXPECT_EQ(m.forward(Tensor<float>({2, 120, 160, 3}, 0.5f)).shape(), (Shape{2, 2}));
}

TEST(LinearCnn, ParameterCountMatchesLayerArithmetic) {
  const std::size_t expected = conv_params(5, 3, 24) + conv_params(5, 24, 32) + conv_params(5, 32, 64) +
                               conv_params(3, 64, 64) + conv_params(3, 64, 64) + dense_params(1152, 100) +
                               dense_params(100, 50) + 2 * dense_params(50, 1);
  EXPECT_EQ(conv_params(5, 3, 24), 1824u);
  EXPECT_EQ(conv_params(5, 24, 32), 19232u);
  EXPECT_EQ(conv_params(5, 32, 64), 51264u);
  EXPECT_EQ(conv_params(3, 64, 64), 36928u);
  EXPECT_EQ(dense_params(1152, 100), 115300u);
  EXPECT_EQ(dense_params(100, 50), 5050u);
  EXPECT_EQ(expected, 266628u);
  Model<float> m;
  EXPECT_EQ(m.parameter_count(), expected);
  ModelConfig single;
  single.single_head = true;
  Model<float> m2(single);
  EXPECT_EQ(m2.parameter_count(), expected);
}

TEST(RnnModel, ShapesAndOutput) {
  ModelConfig cfg;
  cfg.architecture = Architecture::rnn;
  Model<float> m(cfg, 1);
  EXPECT_EQ(m.input_shape(), (Shape{3, 120, 160, 3}));
  const auto trace = m.trace_shapes();
  auto find = [&](const std::string& n) {
    for (const auto& [name, s] : trace)
      if (name == n) return s;
    return Shape{};
  };
  EXPECT_EQ(find("td_conv1"), (Shape{3, 58, 78, 24}));
  EXPECT_EQ(find("td_conv4"), (Shape{3, 11, 16, 32}));
  EXPECT_EQ(find("td_flatten"), (Shape{3, 5632}));
  EXPECT_EQ(find("lstm1"), (Shape{3, 128}));
  EXPECT_EQ(find("lstm2"), (Shape{128}));
  EXPECT_EQ(trace.back().second, (Shape{2}));
  const auto y = m.forward(random_input({3, 120, 160, 3}, 2));
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
}

TEST(Model, ZeroWeightsGiveZeroOutput) {
  for (auto arch : {Architecture::linear, Architecture::rnn}) {
    ModelConfig cfg;
    cfg.architecture = arch;
    Model<float> m(cfg, 3);
    zero_all(m);
    const auto [s, t] = m.predict(random_input(m.input_shape(), 4));
    EXPECT_EQ(s, 0.0);
    EXPECT_EQ(t, 0.0);
  }
}

// Recorded once after the gradient checks passed; frozen since.
TEST(Model, GoldenOutputForSeed42HalfInput) {
  Model<float> lin({}, 42);
  const auto [s, t] = lin.predict(Tensor<float>({120, 160, 3}, 0.5f));
  EXPECT_NEAR(s, -0.0443746485, 1e-5);
  EXPECT_NEAR(t, -0.0506638736, 1e-5);
  ModelConfig rc;
  rc.architecture = Architecture::rnn;
  Model<float> rnn(rc, 42);
  const auto [rs, rt] = rnn.predict(Tensor<float>({3, 120, 160, 3}, 0.5f));
  EXPECT_NEAR(rs, -0.00933566783, 1e-5);
  EXPECT_NEAR(rt, -0.00396967027, 1e-5);
}

TEST(Model, SameSeedSameWeights) {
  Model<float> a({}, 9), b({}, 9), c({}, 10);
  EXPECT_EQ(weights_of(a), weights_of(b));
  EXPECT_NE(weights_of(a), weights_of(c));
}

TEST(Model, RejectsWrongInputShape) {
  Model<float> m;
  EXPECT_THROW(m.forward(Tensor<float>({120, 160, 1})), Error);
  EXPECT_THROW(m.forward(Tensor<float>({1, 160, 120, 3})), Error);
  EXPECT_THROW(m.predict(Tensor<float>({1, 120, 160, 3})), Error);
}

TEST(Model, NonFiniteActivationNamesLayer) {
  Model<float> m;
  m.params()[0].value->fill(std::numeric_limits<float>::infinity());
  try {
    m.predict(Tensor<float>({120, 160, 3}, 0.5f));
    FAIL() << "expected non-finite error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::non_finite);
    EXPECT_NE(std::string(e.what()).find("conv1"), std::string::npos) << e.what();
  }
}

TEST(Model, SplitHeadsAreIndependentLinearOutputs) {
  Model<double> m({}, 5);
  auto params = m.params();
  // Shift only the throttle head bias: steering must not move.
  std::mt19937_64 rng(6);
  const auto x = gradcheck::random_tensor({1, 120, 160, 3}, rng, 0.0, 1.0);
  const auto before = m.forward(x);
  for (auto& p : params)
    if (p.name == "head_throttle/bias") (*p.value)[0] += 3.0;
  const auto after = m.forward(x);
  EXPECT_EQ(after[0], before[0]);
  EXPECT_DOUBLE_EQ(after[1], before[1] + 3.0);
}

TEST(RnnModel, TemporalOrderMatters) {
  ModelConfig cfg;
  cfg.architecture = Architecture::rnn;
  Model<float> m(cfg, 11);
  const auto x = random_input({3, 120, 160, 3}, 12);
  const std::size_t frame = 120 * 160 * 3;
  Tensor<float> perm(x.shape());
  const int order[3] = {2, 0, 1};
  for (int t = 0; t < 3; ++t) std::copy_n(x.data() + order[t] * frame, frame, perm.data() + t * frame);
  const auto a = m.forward(x);
  const auto b = m.forward(perm);
  EXPECT_TRUE(a[0] != b[0] || a[1] != b[1]);
  EXPECT_GT(std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]), 1e-6);
}

TEST(Serialize, RoundTripIsBitExact) {
  for (auto arch : {Architecture::linear, Architecture::rnn}) {
    ModelConfig cfg;
    cfg.architecture = arch;
    Model<float> a(cfg, 21);
    const auto x = random_input(a.input_shape(), 22);
    const auto ya = a.forward(x);
    const auto path = std::filesystem::temp_directory_path() / ("rcpilot_w_" + architecture_name(arch) + ".bin");
    save_weights(a, path);
    Model<float> b(cfg, 99);
    load_weights(b, path);
    EXPECT_EQ(weights_of(a), weights_of(b));
    const auto yb = b.forward(x);
    EXPECT_EQ(std::memcmp(ya.data(), yb.data(), ya.size() * sizeof(float)), 0);
    auto c = load_model<float>(path);
    EXPECT_EQ(c->architecture(), arch);
    EXPECT_EQ(weights_of(*c), weights_of(a));
    std::filesystem::remove(path);
  }
}

TEST(Serialize, ArchitectureMismatch) {
  ModelConfig rc;
  rc.architecture = Architecture::rnn;
  Model<float> rnn(rc, 1);
  Model<float> lin({}, 1);
  const auto bytes = serialize_weights(rnn);
  try {
    deserialize_weights(lin, bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::architecture_mismatch);
  }
  ModelConfig single;
  single.single_head = true;
  Model<float> lin2(single, 1);
  try {
    deserialize_weights(lin2, serialize_weights(lin));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::architecture_mismatch);
  }
}

TEST(Serialize, VersionAndShapeMismatchAreDistinct) {
  Model<float> m({}, 1);
  auto bytes = serialize_weights(m);
  auto bad_version = bytes;
  bad_version[4] = 2;
  try {
    deserialize_weights(m, bad_version);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::version_mismatch);
  }
  // First array is conv1/kernel with dims (5,5,3,24): patch the last dim.
  const std::string name = "conv1/kernel";
  auto it = std::search(bytes.begin(), bytes.end(), name.begin(), name.end());
  ASSERT_NE(it, bytes.end());
  const std::size_t dims = static_cast<std::size_t>(it - bytes.begin()) + name.size() + 4;
  auto bad_shape = bytes;
  bad_shape[dims + 3 * 8] = 25;
  try {
    deserialize_weights(m, bad_shape);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape_mismatch);
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_weights(m, bad_magic), Error);
}

TEST(Serialize, TruncationAtEveryByteIsReported) {
  Model<float> m({}, 3);
  const auto bytes = serialize_weights(m);
  const auto before = weights_of(m);
  std::size_t truncated = 0;
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    try {
      deserialize_weights(m, std::span(bytes).first(n));
      ADD_FAILURE() << "prefix of " << n << " bytes accepted";
    } catch (const Error& e) {
      if (e.code() == Errc::truncated_container) ++truncated;
      else ADD_FAILURE() << "prefix " << n << ": " << e.what();
    }
  }
  EXPECT_EQ(truncated, bytes.size());
  EXPECT_EQ(weights_of(m), before);
}

TEST(Saliency, ZeroModelGivesZeroMap) {
  Model<float> m({}, 1);
  zero_all(m);
  const auto img = saliency(m, random_input({120, 160, 3}, 1));
  EXPECT_EQ(img.width, 160);
  EXPECT_EQ(img.height, 120);
  EXPECT_EQ(img.channels, 1);
  EXPECT_EQ(img.pixels.size(), 120u * 160u);
  for (auto v : img.pixels) EXPECT_EQ(v, 0);
}

TEST(Saliency, MaxPixelMattersMoreThanZeroPixel) {
  Model<double> m({}, 7);
  std::mt19937_64 rng(8);
  const auto x = gradcheck::random_tensor({120, 160, 3}, rng, 0.0, 1.0);
  const auto img = saliency(m, x);
  const auto hi = std::max_element(img.pixels.begin(), img.pixels.end()) - img.pixels.begin();
  const auto lo = std::find(img.pixels.begin(), img.pixels.end(), 0) - img.pixels.begin();
  ASSERT_EQ(img.pixels[static_cast<std::size_t>(hi)], 255);
  ASSERT_LT(static_cast<std::size_t>(lo), img.pixels.size());
  const double base = m.predict(x).first;
  auto change = [&](std::size_t pixel) {
    double best = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      auto xp = x;
      xp[pixel * 3 + c] += 1e-3;
      best = std::max(best, std::abs(m.predict(xp).first - base));
    }
    return best;
  };
  EXPECT_GT(change(static_cast<std::size_t>(hi)), change(static_cast<std::size_t>(lo)));
  // deterministic
  EXPECT_EQ(saliency(m, x).pixels, img.pixels);
}

TEST(Saliency, RnnMapHasFrameShape) {
  ModelConfig cfg;
  cfg.architecture = Architecture::rnn;
  Model<float> m(cfg, 2);
  const auto img = saliency(m, random_input({3, 120, 160, 3}, 3));
  EXPECT_EQ(img.pixels.size(), 120u * 160u);
  EXPECT_EQ(*std::max_element(img.pixels.begin(), img.pixels.end()), 255);
}

TEST(Train, ConstantZeroTargetsDriveOutputsAndBiasesToZero) {
  auto view = testdata::track_frames(48, 1);
  MemoryView<float> zeros({120, 160, 3});
  Tensor<float> x, y;
  for (std::size_t i = 0; i < view.size(); ++i) {
    const std::size_t idx[1] = {i};
    view.fill(idx, x, y);
    zeros.add(x.reshaped({120, 160, 3}), 0.0, 0.0);
  }
  Model<float> m({}, 2);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 16;
  cfg.early_stopping = false;
  const auto report = train(m, zeros, zeros, cfg);
  EXPECT_LT(report.epochs.back().val_mse, 1e-4);
  for (auto& p : m.params()) {
    if (p.name.find("head") == 0 && p.name.find("bias") != std::string::npos) {
      EXPECT_NEAR((*p.value)[0], 0.0, 0.05) << p.name;
    }
  }
}

TEST(Train, EarlyStopWhenValidationStalls) {
  auto view = testdata::track_frames(8, 2);
  Model<float> m({}, 3);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-12;  // nothing can improve by min_delta
  const auto report = train(m, view, view, cfg);
  EXPECT_TRUE(report.stopped_early);
  EXPECT_EQ(report.best_epoch, 1u);
  EXPECT_EQ(report.epochs.size(), 1u + cfg.patience);
  std::ostringstream csv;
  write_report_csv(report, csv);
  const std::string text = csv.str();
  EXPECT_EQ(text.rfind("epoch,train_mse,val_mse,seconds\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + static_cast<long>(report.epochs.size()));
}

TEST(Train, RestoresBestValidationWeights) {
  auto train_view = testdata::track_frames(16, 3);
  auto val_view = testdata::track_frames(8, 4);
  Model<float> m({}, 4);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-3;
  cfg.early_stopping = false;
  const auto report = train(m, train_view, val_view, cfg);
  EXPECT_NEAR(evaluate_mse(m, val_view), report.best_val_mse, 1e-6);
  double best = 1e9;
  for (const auto& e : report.epochs) best = std::min(best, e.val_mse);
  EXPECT_EQ(report.best_val_mse, best);
}

TEST(Train, DeterministicGivenSeed) {
  auto view = testdata::track_frames(16, 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 77;
  Model<float> a({}, 1), b({}, 1);
  train(a, view, view, cfg);
  train(b, view, view, cfg);
  EXPECT_EQ(weights_of(a), weights_of(b));
}

TEST(Train, OverfitsThirtyTwoSamples) {
  auto view = testdata::track_frames(32, 6);
  Model<float> m({}, 5);
  Adam<float> opt(m.params());
  std::vector<std::size_t> idx(32);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Tensor<float> x, y;
  view.fill(idx, x, y);
  double loss = 1.0;
  int epoch = 0;
  for (; epoch < 500 && loss >= 1e-3; ++epoch) train_step(m, opt, x, y), loss = mse(m.forward(x), y);
  EXPECT_LT(loss, 1e-3) << "after " << epoch << " epochs";
}

TEST(Train, DivergenceReportsEpoch) {
  MemoryView<float> bad({120, 160, 3});
  bad.add(Tensor<float>({120, 160, 3}, 0.5f), std::nan(""), 0.0);
  Model<float> m({}, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  try {
    train(m, bad, bad, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::diverged);
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsEmptyViewsAndBadConfig) {
  MemoryView<float> empty({120, 160, 3});
  auto view = testdata::track_frames(2, 7);
  Model<float> m;
  EXPECT_THROW(train(m, empty, view, TrainConfig{}), Error);
  EXPECT_THROW(train(m, view, empty, TrainConfig{}), Error);
  TrainConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(train(m, view, view, bad), Error);
  bad = {};
  bad.learning_rate = 0;
  EXPECT_THROW(train(m, view, view, bad), Error);
}
