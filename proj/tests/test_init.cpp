#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "hpinit/data.hpp"
#include "hpinit/init.hpp"
#include "hpinit/metrics.hpp"
#include "support.hpp"

using namespace hpinit;
using hpinit::test::mean_face;

namespace {

std::vector<TrainExemplar> random_exemplars(Rng& rng, std::size_t n, std::size_t k = 5) {
  std::vector<TrainExemplar> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> f(2 * k);
    for (auto& v : f) v = uniform(rng, 0, 100);
    char id[16];
    std::snprintf(id, sizeof id, "e%04zu", i);
    out.push_back({id, Shape2D(f), hpinit::test::random_box(rng), hpinit::test::random_pose(rng, 60)});
  }
  return out;
}

std::vector<TrainExemplar> synthetic_exemplars(int count, std::uint64_t seed) {
  SynthConfig sc;
  sc.count = count;
  sc.seed = seed;
  std::vector<TrainExemplar> out;
  for (const auto& s : generate_synthetic(sc, mean_face()))
    out.push_back({s.id, *s.landmarks, s.bb, fit_pose_from_landmarks(*s.landmarks, mean_face()).pose});
  return out;
}

}  // namespace

TEST(MeanShapeInit, SingleExemplarIsRefitted) {
  Rng rng(61);
  const auto ex = random_exemplars(rng, 1);
  const BoundingBox bb{5, 7, 40, 30};
  const Shape2D m = mean_shape_init(ex, bb);
  const Shape2D direct = map_exemplar(ex[0], bb);
  for (std::size_t i = 0; i < m.flat().size(); ++i) EXPECT_NEAR(m.flat()[i], direct.flat()[i], 1e-12);
}

TEST(MeanShapeInit, MatchesPerCoordinateAverage) {
  Rng rng(62);
  const auto ex = random_exemplars(rng, 37);
  const BoundingBox bb{-3, 12, 64, 50};
  const Shape2D m = mean_shape_init(ex, bb);
  // Normalize by hand: u = (p - center) / w + 0.5, average, then p = (u - 0.5) * w + center.
  for (std::size_t k = 0; k < 5; ++k) {
    double ux = 0, uy = 0;
    for (const auto& e : ex) {
      ux += (e.shape.x(k) - (e.bb.x + e.bb.w / 2)) / e.bb.w + 0.5;
      uy += (e.shape.y(k) - (e.bb.y + e.bb.h / 2)) / e.bb.w + 0.5;
    }
    ux /= 37;
    uy /= 37;
    EXPECT_NEAR(m.x(k), (ux - 0.5) * bb.w + bb.x + bb.w / 2, 1e-9);
    EXPECT_NEAR(m.y(k), (uy - 0.5) * bb.w + bb.y + bb.h / 2, 1e-9);
  }
}

TEST(MeanShapeInit, MirrorPairIsSymmetric) {
  const BoundingBox bb{0, 0, 10, 10};
  const TrainExemplar a{"a", Shape2D({2, 3, 4, 8}), bb, {}};
  const TrainExemplar b{"b", Shape2D({8, 3, 6, 8}), bb, {}};
  const std::vector<TrainExemplar> ex{a, b};
  const Shape2D m = mean_shape_init(ex, bb);
  EXPECT_NEAR(m.x(0), 5.0, 1e-12);
  EXPECT_NEAR(m.x(1), 5.0, 1e-12);
}

TEST(RandomInit, SingleAndDeterministic) {
  Rng rng(63);
  const auto one = random_exemplars(rng, 1);
  const BoundingBox bb{1, 2, 30, 30};
  const InitSet s = random_init(one, bb, 1, 9);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s.shapes[0], map_exemplar(one[0], bb));
  EXPECT_EQ(s.scheme, "random:1");

  const auto many = random_exemplars(rng, 50);
  const InitSet a = random_init(many, bb, 7, 123), b = random_init(many, bb, 7, 123);
  EXPECT_EQ(a.shapes, b.shapes);
}

TEST(RandomInit, WithoutReplacementUnlessOversubscribed) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto idx = draw_exemplar_indices(30, 30, rng);
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 30u);
    const auto over = draw_exemplar_indices(3, 10, rng);
    EXPECT_EQ(over.size(), 10u);
    for (auto i : over) EXPECT_LT(i, 3u);
  }
}

// Selection frequency of n = 5 draws over 1000 exemplars across 10^4 seeded
// draws. Expected count 50 per exemplar, sd sqrt(10^4 * 5/1000 * (1 - 5/1000)).
// With 1000 exemplars about 2.7 are expected beyond 3 sd by chance, so the
// per-exemplar bound is Bonferroni-adjusted and the tail count is capped.
TEST(RandomInit, UniformSelection) {
  std::vector<std::size_t> counts(1000, 0);
  for (std::uint64_t d = 0; d < 10000; ++d) {
    Rng rng(derive_seed(64, d));
    for (auto i : draw_exemplar_indices(1000, 5, rng)) ++counts[i];
  }
  const double mean = 50.0, sd = std::sqrt(10000 * 0.005 * 0.995);
  double chi2 = 0;
  std::size_t beyond3 = 0;
  for (auto c : counts) {
    const double z = (static_cast<double>(c) - mean) / sd;
    EXPECT_LT(std::abs(z), 4.5);
    beyond3 += std::abs(z) > 3;
    chi2 += (c - mean) * (c - mean) / mean;
  }
  EXPECT_LE(beyond3, 10u);
  EXPECT_LT(std::abs(chi2 - 999.0), 3 * std::sqrt(2 * 999.0));
}

TEST(Scheme1, FrontalAndEquivariance) {
  const BoundingBox bb{20, 30, 80, 80};
  const Shape2D f = scheme1_3d_init({0, 0, 0}, bb, mean_face());
  EXPECT_EQ(f, project_weak_perspective(mean_face(), {0, 0, 0}, bb));
  EXPECT_NEAR(f.centroid().x(), 60.0, 1e-12);
  EXPECT_NEAR(f.centroid().y(), 70.0, 1e-12);

  const HeadPose p{12, -35, 8};
  const Shape2D a = scheme1_3d_init(p, bb, mean_face());
  const Shape2D b = scheme1_3d_init(p, bb.translated(10, 0), mean_face());
  for (std::size_t k = 0; k < 68; ++k) {
    EXPECT_NEAR(b.x(k) - a.x(k), 10.0, 1e-9);
    EXPECT_NEAR(b.y(k), a.y(k), 1e-9);
  }
  const Shape2D c = scheme1_3d_init(p, {20, 30, 160, 160}, mean_face());
  for (std::size_t k = 0; k < 68; ++k)
    EXPECT_LE(((c.point(k) - c.centroid()) - 2 * (a.point(k) - a.centroid())).norm(), 1e-9);
}

// Paired comparison on wide-yaw synthetic faces, pose from the solver.
TEST(Scheme1, BeatsMeanShapeOnTurnedFaces) {
  const auto train = synthetic_exemplars(300, 65);
  SynthConfig sc;
  sc.count = 400;
  sc.seed = 66;
  const auto test = generate_synthetic(sc, mean_face());
  const BoxConvention conv = learn_box_convention(train);
  std::size_t n = 0, raw_wins = 0, box_wins = 0;
  for (const auto& s : test) {
    if (std::abs(s.pose.yaw) < 30) continue;
    ++n;
    const HeadPose pose = fit_pose_from_landmarks(*s.landmarks, mean_face()).pose;
    const double mean_err = normalized_error(mean_shape_init(train, s.bb), *s.landmarks);
    raw_wins += normalized_error(scheme1_3d_init(pose, s.bb, mean_face()), *s.landmarks) < mean_err;
    box_wins += normalized_error(scheme1_box_init(pose, s.bb, mean_face(), conv), *s.landmarks) < mean_err;
  }
  ASSERT_GT(n, 100u);
  EXPECT_GE(static_cast<double>(raw_wins), 0.9 * static_cast<double>(n));
  EXPECT_EQ(box_wins, n);
}

TEST(BoxConvention, LearnsSyntheticDilation) {
  const auto train = synthetic_exemplars(100, 67);
  const BoxConvention c = learn_box_convention(train);
  EXPECT_NEAR(c.scale, 1.2, 1e-9);
  EXPECT_NEAR(c.dx, 0.0, 1e-9);
  EXPECT_NEAR(c.dy, 0.0, 1e-9);
  // With the exact pose, the box-anchored projection reproduces the landmarks.
  for (const auto& e : train) {
    const Shape2D s = scheme1_box_init(e.pose, e.bb, mean_face(), c);
    EXPECT_LT(normalized_error(s, e.shape), 1e-6);
  }
}

TEST(Scheme2, ExactQueryReturnsExemplar) {
  Rng rng(68);
  const auto ex = random_exemplars(rng, 40);
  const InitSet s = scheme2_knn_init(ex[17].pose, ex[17].bb, ex, 1);
  ASSERT_EQ(s.size(), 1u);
  for (std::size_t i = 0; i < s.shapes[0].flat().size(); ++i)
    EXPECT_NEAR(s.shapes[0].flat()[i], ex[17].shape.flat()[i], 1e-9);
}

TEST(Scheme2, MatchesBruteForceAndIsMonotone) {
  Rng rng(69);
  const auto ex = random_exemplars(rng, 300, 2);
  for (int q = 0; q < 500; ++q) {
    const HeadPose query = hpinit::test::random_pose(rng, 70);
    const std::size_t k = 1 + uniform_index(rng, 20);
    std::vector<std::pair<double, std::string>> all;
    for (const auto& e : ex) {
      const double d = std::sqrt(std::pow(e.pose.pitch - query.pitch, 2) + std::pow(e.pose.yaw - query.yaw, 2) +
                                 std::pow(e.pose.roll - query.roll, 2));
      all.emplace_back(d, e.id);
    }
    std::sort(all.begin(), all.end());
    const auto got = nearest_pose_exemplars(ex, query, k);
    ASSERT_EQ(got.size(), k);
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_EQ(ex[got[i]].id, all[i].second);
      if (i + 1 < k) {
        EXPECT_LE(pose_distance(ex[got[i]].pose, query), pose_distance(ex[got[i + 1]].pose, query));
      }
    }
  }
}

TEST(Scheme2, TiesGoToLowerId) {
  const BoundingBox bb{0, 0, 10, 10};
  const std::vector<TrainExemplar> ex{{"b", Shape2D({1, 1, 2, 2}), bb, {0, 10, 0}},
                                      {"a", Shape2D({3, 3, 4, 4}), bb, {0, -10, 0}},
                                      {"c", Shape2D({5, 5, 6, 6}), bb, {0, 30, 0}}};
  const auto idx = nearest_pose_exemplars(ex, {0, 0, 0}, 2);
  EXPECT_EQ(ex[idx[0]].id, "a");
  EXPECT_EQ(ex[idx[1]].id, "b");
  EXPECT_THROW(nearest_pose_exemplars(ex, {}, 4), Error);
}

TEST(Median, BasicCases) {
  const Shape2D a({1, 2, 3, 4}), b({2, 3, 4, 5}), outlier({1000, -1000, 3.5, 4.5});
  EXPECT_EQ(aggregate_median(std::vector<Shape2D>{a}), a);
  const std::vector<Shape2D> three{a, b, outlier};
  EXPECT_EQ(aggregate_median(three), Shape2D({2, 2, 3.5, 4.5}));
  const std::vector<Shape2D> two{a, b};
  EXPECT_EQ(aggregate_median(two), Shape2D({1.5, 2.5, 3.5, 4.5}));
  const std::vector<Shape2D> same{b, b, b};
  EXPECT_EQ(aggregate_median(same), b);
}

TEST(Median, MatchesSortingOracleAndIsPermutationInvariant) {
  Rng rng(70);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 9), k = 2 + uniform_index(rng, 5);
    std::vector<Shape2D> preds;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> f(2 * k);
      for (auto& v : f) v = std::round(uniform(rng, -5, 5) * 4) / 4;  // force ties
      preds.emplace_back(f);
    }
    const Shape2D m = aggregate_median(preds);
    for (std::size_t c = 0; c < 2 * k; ++c) {
      std::vector<double> col;
      for (const auto& p : preds) col.push_back(p.flat()[c]);
      std::sort(col.begin(), col.end());
      const double want = n % 2 ? col[n / 2] : (col[n / 2 - 1] + col[n / 2]) / 2;
      EXPECT_EQ(m.flat()[c], want);
    }
    std::vector<Shape2D> perm = preds;
    shuffle(perm, rng);
    EXPECT_EQ(aggregate_median(perm), m);
  }
}

TEST(Median, RejectsMismatchedShapes) {
  EXPECT_THROW(aggregate_median(std::vector<Shape2D>{}), Error);
  EXPECT_THROW(aggregate_median(std::vector<Shape2D>{Shape2D({1, 2, 3, 4}), Shape2D({1, 2, 3, 4, 5, 6})}), Error);
}

TEST(SchemeSpec, Parse) {
  EXPECT_EQ(parse_scheme("mean").to_string(), "mean");
  EXPECT_EQ(parse_scheme("3d").to_string(), "3d");
  EXPECT_EQ(parse_scheme("random:5").count, 5u);
  EXPECT_EQ(parse_scheme("knn:3").kind, SchemeSpec::Kind::Knn);
  for (const char* bad : {"", "random", "random:", "random:0", "knn:x", "knn:3x", "median"})
    EXPECT_THROW(parse_scheme(bad), Error) << bad;
}

TEST(MakeInits, AllSchemesProduceK68) {
  const auto ex = synthetic_exemplars(30, 71);
  const BoundingBox bb{10, 10, 70, 70};
  for (const char* s : {"mean", "random:4", "3d", "knn:3"}) {
    const InitSet set = make_inits(parse_scheme(s), ex, mean_face(), bb, {5, 20, -3}, 3);
    ASSERT_FALSE(set.shapes.empty());
    for (const auto& shape : set.shapes) EXPECT_EQ(shape.size(), 68u);
  }
}
