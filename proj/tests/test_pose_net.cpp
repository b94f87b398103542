#include <gtest/gtest.h>

#include <cstring>

#include "hpinit/data.hpp"
#include "hpinit/pose_net.hpp"
#include "support.hpp"

using namespace hpinit;
using hpinit::test::mean_face;

namespace {

template <typename S>
nn::Vec<S> random_vec(Rng& rng, std::size_t n) {
  nn::Vec<S> v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = static_cast<S>(normal(rng));
  return v;
}

/// |a - n| <= 1e-3 * max(|a|, |n|), with a 1e-7 floor for gradients that are numerically zero.
::testing::AssertionResult grad_close(double analytic, double numeric) {
  const double tol = 1e-3 * std::max(std::abs(analytic), std::abs(numeric)) + 1e-7;
  if (std::abs(analytic - numeric) <= tol) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << "analytic " << analytic << " vs numeric " << numeric;
}

constexpr double kStep = 1e-4;
// The full-size first layer feeds ~67k ReLU/max-pool units; a smaller step
// keeps perturbations from crossing their kinks.
constexpr double kWideStep = 1e-6;

PoseNetArch tiny_arch() {
  PoseNetArch a;
  a.input = 24;
  a.channels = {3, 4, 5};
  a.hidden = {12, 8};
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Normalization

TEST(AngleNormalization, ExactRoundTrip) {
  Rng rng(31);
  std::size_t naive_failures = 0;
  for (int i = 0; i < 1000000; ++i) {
    const double t = uniform(rng, -90.0, 90.0);
    const NormalizedAngle n = normalize_angle(t);
    ASSERT_EQ(denormalize_angle(n), t) << t;
    ASSERT_LE(std::abs(n.value()), 1.0);
    naive_failures += (t / 90.0) * 90.0 != t;
  }
  for (double t : {-90.0, 90.0, 0.0, -0.0, 1e-300, 45.0, 89.99999999999999, std::nextafter(90.0, 0.0)})
    EXPECT_EQ(denormalize_angle(normalize_angle(t)), t);
  EXPECT_EQ(normalize_angle(90.0).value(), 1.0);
  EXPECT_EQ(normalize_angle(-90.0).value(), -1.0);
  // The plain quotient alone is not invertible, which is why the remainder is kept.
  EXPECT_GT(naive_failures, 0u);
}

// ---------------------------------------------------------------------------
// Preprocessing

TEST(Preprocess, ConstantImageStaysConstant) {
  const GrayImage img(50, 40, 0.5f);
  for (BoundingBox bb : {BoundingBox{0, 0, 50, 40}, BoundingBox{-30, -10, 70, 90}, BoundingBox{10, 5, 3, 3}}) {
    const GrayImage out = preprocess(img, bb);
    ASSERT_EQ(out.width(), 96);
    for (float v : out.pixels()) EXPECT_EQ(v, 0.5f);
  }
}

TEST(Preprocess, IdentityResize) {
  Rng rng(32);
  std::vector<float> px(96 * 96);
  for (auto& v : px) v = static_cast<float>(uniform01(rng));
  const GrayImage img(96, 96, px);
  EXPECT_EQ(preprocess(img, {0, 0, 96, 96}), img);
}

TEST(Preprocess, HalvingMatchesBlockMeans) {
  Rng rng(33);
  std::vector<float> px(192 * 192);
  for (auto& v : px) v = static_cast<float>(uniform01(rng));
  const GrayImage img(192, 192, px);
  const GrayImage out = preprocess(img, {0, 0, 192, 192});
  for (int y = 0; y < 96; ++y)
    for (int x = 0; x < 96; ++x) {
      const double mean = (static_cast<double>(img.at(2 * x, 2 * y)) + img.at(2 * x + 1, 2 * y) +
                           img.at(2 * x, 2 * y + 1) + img.at(2 * x + 1, 2 * y + 1)) / 4.0;
      EXPECT_NEAR(out.at(x, y), mean, 1e-6);
    }
}

TEST(Preprocess, PadsOutsideAndRejectsDisjointBoxes) {
  const GrayImage img(20, 20, 1.0f);
  const GrayImage out = preprocess(img, {-20, 0, 40, 20});
  EXPECT_EQ(out.at(0, 48), 0.5f);
  EXPECT_EQ(out.at(95, 48), 1.0f);
  for (BoundingBox bb : {BoundingBox{20, 0, 5, 5}, BoundingBox{-10, -10, 10, 10}, BoundingBox{0, 25, 5, 5}}) {
    try {
      preprocess(img, bb);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::EmptyIntersection);
    }
  }
}

// ---------------------------------------------------------------------------
// Layers

TEST(Layers, ConvMatchesDirectSum) {
  Rng rng(34);
  const nn::ConvShape cs{2, 7, 3, 3};
  const auto in = random_vec<double>(rng, 2 * 7 * 7);
  const auto w = random_vec<double>(rng, 3 * 2 * 9);
  const auto b = random_vec<double>(rng, 3);
  const auto z = nn::conv_forward<double>(std::span(in.data(), in.size()), cs, std::span(w.data(), w.size()),
                                          std::span(b.data(), b.size()));
  for (int o = 0; o < 3; ++o)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        double s = b(o);
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) s += w((o * 2 + c) * 9 + ky * 3 + kx) * in((c * 7 + y + ky) * 7 + x + kx);
        EXPECT_NEAR(z(o, y * 5 + x), s, 1e-12);
      }
}

TEST(Layers, ConvIsLinearInInput) {
  Rng rng(35);
  const nn::ConvShape cs{2, 6, 2, 3};
  const auto a = random_vec<double>(rng, 72), b = random_vec<double>(rng, 72);
  const auto w = random_vec<double>(rng, 36);
  const nn::Vec<double> zero = nn::Vec<double>::Zero(2);
  auto conv = [&](const nn::Vec<double>& in) {
    return nn::conv_forward<double>(std::span(in.data(), in.size()), cs, std::span(w.data(), w.size()),
                                    std::span(zero.data(), 2));
  };
  const nn::Vec<double> mix = 2.5 * a - 0.75 * b;
  EXPECT_LE((conv(mix) - (2.5 * conv(a) - 0.75 * conv(b))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Layers, MaxPoolBoundedByWindow) {
  Rng rng(36);
  const auto in = random_vec<double>(rng, 3 * 9 * 9);
  std::vector<std::uint32_t> arg;
  const auto out = nn::maxpool_forward<double>(std::span(in.data(), in.size()), 3, 9, arg);
  ASSERT_EQ(out.size(), 3u * 16);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        double m = -1e300;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) m = std::max(m, in((c * 9 + 2 * y + dy) * 9 + 2 * x + dx));
        EXPECT_EQ(out[static_cast<std::size_t>((c * 4 + y) * 4 + x)], m);
      }
}

TEST(LayerGradients, Conv) {
  Rng rng(37);
  const nn::ConvShape cs{2, 6, 3, 3};
  auto in = random_vec<double>(rng, 72);
  auto w = random_vec<double>(rng, 54);
  auto b = random_vec<double>(rng, 3);
  const auto c = random_vec<double>(rng, 3 * 16);  // loss = <c, z>
  auto loss = [&]() {
    const auto z = nn::conv_forward<double>(std::span(in.data(), in.size()), cs, std::span(w.data(), w.size()),
                                            std::span(b.data(), b.size()));
    return (Eigen::Map<const nn::Vec<double>>(z.data(), z.size()).array() * c.array()).sum();
  };
  nn::RowMat<double> col;
  nn::conv_forward<double>(std::span(in.data(), in.size()), cs, std::span(w.data(), w.size()),
                           std::span(b.data(), b.size()), &col);
  nn::RowMat<double> dz = Eigen::Map<const nn::RowMat<double>>(c.data(), 3, 16);
  std::vector<double> dw(54, 0.0), db(3, 0.0), din(72);
  nn::conv_backward<double>(dz, col, cs, std::span<const double>(w.data(), 54), dw, db, din);
  auto check = [&](nn::Vec<double>& param, const std::vector<double>& grad) {
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double keep = param(i);
      param(i) = keep + kStep;
      const double up = loss();
      param(i) = keep - kStep;
      const double down = loss();
      param(i) = keep;
      EXPECT_TRUE(grad_close(grad[static_cast<std::size_t>(i)], (up - down) / (2 * kStep)));
    }
  };
  check(w, dw);
  check(b, db);
  check(in, din);
}

TEST(LayerGradients, MaxPoolAndRelu) {
  Rng rng(38);
  auto in = random_vec<double>(rng, 2 * 6 * 6);
  const auto c = random_vec<double>(rng, 2 * 9);
  auto loss = [&]() {
    std::vector<double> r(in.data(), in.data() + in.size());
    nn::relu_inplace<double>(r);
    std::vector<std::uint32_t> arg;
    const auto out = nn::maxpool_forward<double>(r, 2, 6, arg);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += c(static_cast<Eigen::Index>(i)) * out[i];
    return s;
  };
  std::vector<double> r(in.data(), in.data() + in.size());
  nn::relu_inplace<double>(r);
  std::vector<std::uint32_t> arg;
  nn::maxpool_forward<double>(r, 2, 6, arg);
  std::vector<double> dout(c.data(), c.data() + c.size()), din(in.size());
  nn::maxpool_backward<double>(dout, arg, din);
  nn::relu_backward_inplace<double>(std::span<const double>(in.data(), static_cast<std::size_t>(in.size())), din);
  for (Eigen::Index i = 0; i < in.size(); ++i) {
    const double keep = in(i);
    in(i) = keep + kStep;
    const double up = loss();
    in(i) = keep - kStep;
    const double down = loss();
    in(i) = keep;
    EXPECT_TRUE(grad_close(din[static_cast<std::size_t>(i)], (up - down) / (2 * kStep)));
  }
}

TEST(LayerGradients, Dense) {
  Rng rng(39);
  auto in = random_vec<double>(rng, 7);
  auto w = random_vec<double>(rng, 35);
  auto b = random_vec<double>(rng, 5);
  const auto c = random_vec<double>(rng, 5);
  auto loss = [&]() {
    return c.dot(nn::dense_forward<double>(in, std::span(w.data(), w.size()), std::span(b.data(), b.size())));
  };
  std::vector<double> dw(35, 0.0), db(5, 0.0);
  const auto din = nn::dense_backward<double>(c, in, std::span(w.data(), w.size()), dw, db);
  auto check = [&](nn::Vec<double>& param, auto grad_at) {
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double keep = param(i);
      param(i) = keep + kStep;
      const double up = loss();
      param(i) = keep - kStep;
      const double down = loss();
      param(i) = keep;
      EXPECT_TRUE(grad_close(grad_at(i), (up - down) / (2 * kStep)));
    }
  };
  check(w, [&](Eigen::Index i) { return dw[static_cast<std::size_t>(i)]; });
  check(b, [&](Eigen::Index i) { return db[static_cast<std::size_t>(i)]; });
  check(in, [&](Eigen::Index i) { return din(i); });
}

TEST(LayerGradients, SquaredErrorLoss) {
  Rng rng(40);
  auto out = random_vec<double>(rng, 3);
  const std::array<double, 3> target{0.1, -0.4, 0.7};
  nn::Vec<double> dout;
  squared_error_loss<double>(out, target, dout);
  for (Eigen::Index j = 0; j < 3; ++j) {
    nn::Vec<double> tmp;
    const double keep = out(j);
    out(j) = keep + kStep;
    const double up = squared_error_loss<double>(out, target, tmp);
    out(j) = keep - kStep;
    const double down = squared_error_loss<double>(out, target, tmp);
    out(j) = keep;
    EXPECT_TRUE(grad_close(dout(j), (up - down) / (2 * kStep)));
  }
}

// Every parameter of a small network, 3-sample batch, dropout off.
TEST(NetworkGradient, EveryParameterMatchesFiniteDifferences) {
  Rng rng(41);
  const PoseNetArch arch = tiny_arch();
  PoseNet<double> net = PoseNet<double>::random(arch, 42);
  for (auto& p : net.params()) p += 0.05 * normal(rng);  // non-zero biases
  std::vector<std::vector<double>> x(3, std::vector<double>(24 * 24));
  for (auto& v : x)
    for (auto& p : v) p = uniform01(rng);
  const std::vector<std::array<double, 3>> y{{0.1, -0.2, 0.3}, {-0.5, 0.4, 0.0}, {0.9, -0.9, 0.2}};
  std::vector<double> grad(net.params().size()), scratch(grad.size());
  batch_gradient<double>(net, x, y, grad, nullptr);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    const double keep = net.params()[i];
    net.params()[i] = keep + kStep;
    const double up = batch_gradient<double>(net, x, y, scratch, nullptr);
    net.params()[i] = keep - kStep;
    const double down = batch_gradient<double>(net, x, y, scratch, nullptr);
    net.params()[i] = keep;
    if (!grad_close(grad[i], (up - down) / (2 * kStep))) ++bad;
  }
  EXPECT_EQ(bad, 0u) << "of " << net.params().size();
}

// Full-size network: a seeded sample of parameters from every tensor.
TEST(NetworkGradient, DefaultArchitectureSampledParameters) {
  Rng rng(43);
  PoseNet<double> net = PoseNet<double>::random(PoseNetArch{}, 44);
  std::vector<std::vector<double>> x(3, std::vector<double>(96 * 96));
  for (auto& v : x)
    for (auto& p : v) p = uniform01(rng);
  const std::vector<std::array<double, 3>> y{{0.1, -0.2, 0.3}, {-0.5, 0.4, 0.0}, {0.9, -0.9, 0.2}};
  std::vector<double> grad(net.params().size()), scratch(grad.size());
  batch_gradient<double>(net, x, y, grad, nullptr);
  const auto& lay = net.layout();
  for (std::size_t l = 0; l < 6; ++l) {
    for (const auto& slot : {lay.weights[l], lay.biases[l]}) {
      for (int t = 0; t < 12; ++t) {
        const std::size_t i = slot.offset + uniform_index(rng, slot.size);
        const double keep = net.params()[i];
        net.params()[i] = keep + kWideStep;
        const double up = batch_gradient<double>(net, x, y, scratch, nullptr);
        net.params()[i] = keep - kWideStep;
        const double down = batch_gradient<double>(net, x, y, scratch, nullptr);
        net.params()[i] = keep;
        EXPECT_TRUE(grad_close(grad[i], (up - down) / (2 * kWideStep))) << "layer " << l << " index " << i;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Forward / predict

TEST(PoseNetForward, ZeroWeightsGiveZeroPose) {
  const PoseNet<float> net;
  const GrayImage img(128, 128, 0.3f);
  const auto out = forward(net, preprocess(img, {10, 10, 100, 100}));
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
  EXPECT_EQ(out[2], 0.0);
  const HeadPose p = predict_pose(net, img, {10, 10, 100, 100});
  EXPECT_EQ(p.pitch, 0.0);
  EXPECT_EQ(p.yaw, 0.0);
  EXPECT_EQ(p.roll, 0.0);
}

TEST(PoseNetForward, DeterministicAndBiasShift) {
  Rng rng(45);
  const PoseNet<double> net = PoseNet<double>::random(PoseNetArch{}, 46);
  std::vector<double> x(96 * 96);
  for (auto& p : x) p = uniform01(rng);
  const auto a = net.forward(x), b = net.forward(x);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), 3 * sizeof(double)), 0);

  PoseNet<double> shifted = net;
  const double eps = 0.125;
  shifted.params()[net.layout().biases[5].offset + 1] += eps;
  const auto c = shifted.forward(x);
  EXPECT_NEAR(c(1) - a(1), eps, 1e-15);
  EXPECT_EQ(c(0), a(0));
  EXPECT_EQ(c(2), a(2));
}

TEST(PoseNetForward, ShapeMismatch) {
  const PoseNet<float> net;
  try {
    forward(net, GrayImage(64, 64, 0.5f));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
}

TEST(PoseNetForward, PredictClampsToNinety) {
  PoseNet<float> net;
  net.params()[net.layout().biases[5].offset + 1] = 1.5f;
  net.params()[net.layout().biases[5].offset + 0] = -1.2f;
  const HeadPose p = predict_pose(net, GrayImage(100, 100, 0.5f), {0, 0, 100, 100});
  EXPECT_EQ(p.yaw, 90.0);
  EXPECT_EQ(p.pitch, -90.0);
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct SmallSet {
  std::vector<Sample> samples;
  std::vector<PoseTrainSample> train;
};

SmallSet small_set(int count, std::uint64_t seed) {
  SynthConfig sc;
  sc.count = count;
  sc.seed = seed;
  SmallSet s{generate_synthetic(sc, mean_face()), {}};
  for (const auto& x : s.samples) s.train.push_back({&x.image, x.bb, x.pose});
  return s;
}

}  // namespace

TEST(PoseNetTrain, TrainErrorDecreases) {
  const SmallSet s = small_set(200, 51);
  PoseNetArch arch;
  arch.input = 32;
  arch.channels = {4, 8, 8};
  arch.hidden = {32, 16};
  TrainConfig cfg;
  cfg.max_epochs = 40;
  cfg.patience = 40;
  cfg.seed = 52;
  const auto res = train_pose_net<float>(s.train, cfg, arch);
  ASSERT_GE(res.history.size(), 2u);
  EXPECT_LT(res.history.back().train_rmse, res.history.front().train_rmse);
  for (float p : res.net.params()) ASSERT_TRUE(std::isfinite(p));
}

TEST(PoseNetTrain, DeterministicGivenSeed) {
  const SmallSet s = small_set(24, 53);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.seed = 54;
  PoseNetArch arch = tiny_arch();
  const auto a = train_pose_net<float>(s.train, cfg, arch);
  const auto b = train_pose_net<float>(s.train, cfg, arch);
  EXPECT_EQ(a.net.params(), b.net.params());
  cfg.seed = 55;
  const auto c = train_pose_net<float>(s.train, cfg, arch);
  EXPECT_NE(a.net.params(), c.net.params());
}

TEST(PoseNetTrain, NonFiniteLossAborts) {
  const SmallSet s = small_set(8, 56);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.learning_rate = 1e30;
  try {
    train_pose_net<float>(s.train, cfg, tiny_arch());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteLoss);
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(PoseNetTrain, ConfigValidation) {
  TrainConfig cfg;
  cfg.learning_rate = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.patience = 0;
  EXPECT_THROW(cfg.validate(), Error);
  const SmallSet s = small_set(1, 57);
  EXPECT_THROW(train_pose_net<float>(s.train, TrainConfig{}), Error);
}

// ---------------------------------------------------------------------------
// Model file

TEST(PoseNetFile, RoundTripAndShapeCheck) {
  const auto dir = hpinit::test::temp_dir("posenet");
  const PoseNet<float> net = PoseNet<double>::random(tiny_arch(), 58).cast<float>();
  const std::string path = (dir / "net.bin").string();
  save_pose_net(path, net, {{"seed", 58}});
  const PoseNet<float> back = load_pose_net(path);
  EXPECT_EQ(back.arch(), net.arch());
  EXPECT_EQ(back.params(), net.params());

  // Header claiming another architecture must be rejected.
  Container c = read_container(path, kPoseNetMagic, kPoseNetVersion);
  c.header["arch"]["hidden"] = {13, 8};
  write_container((dir / "bad.bin").string(), kPoseNetMagic, kPoseNetVersion, c);
  try {
    load_pose_net((dir / "bad.bin").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
  write_container((dir / "v2.bin").string(), kPoseNetMagic, kPoseNetVersion + 1, c);
  try {
    load_pose_net((dir / "v2.bin").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::VersionMismatch);
  }
}
