#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hpinit/container.hpp"
#include "hpinit/data.hpp"
#include "hpinit/error.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/image.hpp"
#include "hpinit/init.hpp"
#include "hpinit/metrics.hpp"
#include "hpinit/random.hpp"

namespace hpinit {

/// Interpolated probe: alpha * x_a + (1 - alpha) * x_b + offset, all in box units.
struct Probe {
  std::uint16_t a = 0;
  std::uint16_t b = 0;
  float alpha = 1.0f;
  float dx = 0.0f;
  float dy = 0.0f;
};

/// Pixel-difference feature between two probes.
struct FeatureDef {
  Probe first;
  Probe second;
};

struct Fern {
  std::vector<std::uint32_t> features;  // indices into the stage pool
  std::vector<float> thresholds;
  std::vector<float> updates;  // bins x 2K, box units
  std::vector<std::uint32_t> counts;

  std::size_t depth() const { return features.size(); }
  std::size_t bins() const { return std::size_t{1} << features.size(); }
};

struct Stage {
  std::vector<FeatureDef> pool;
  std::vector<Fern> ferns;
};

struct CascadeConfig {
  int stages = 100;
  int ferns = 10;
  int depth = 5;
  int pool = 400;
  int augment = 20;
  double shrinkage = 0.1;
  double max_offset = 0.1;  // probe offset radius, box widths; at most 0.25
  Normalizer normalizer;
  std::uint64_t seed = 0;

  void validate() const {
    require(stages >= 1 && ferns >= 1 && depth >= 1 && depth <= 16 && pool >= depth &&
                augment >= 1,
            Errc::InvalidArgument, "cascade sizes must be positive (depth <= 16, pool >= depth)");
    require(shrinkage > 0 && shrinkage <= 1, Errc::InvalidArgument, "shrinkage must be in (0, 1]");
    require(max_offset >= 0 && max_offset <= 0.25, Errc::InvalidArgument,
            "probe offset radius must be in [0, 0.25]");
  }
};

inline void to_json(nlohmann::json& j, const CascadeConfig& c) {
  j = {{"stages", c.stages},
       {"ferns", c.ferns},
       {"depth", c.depth},
       {"pool", c.pool},
       {"augment", c.augment},
       {"shrinkage", c.shrinkage},
       {"max_offset", c.max_offset},
       {"normalizer", {c.normalizer.left, c.normalizer.right}},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CascadeConfig& c) {
  CascadeConfig d;
  c.stages = j.value("stages", d.stages);
  c.ferns = j.value("ferns", d.ferns);
  c.depth = j.value("depth", d.depth);
  c.pool = j.value("pool", d.pool);
  c.augment = j.value("augment", d.augment);
  c.shrinkage = j.value("shrinkage", d.shrinkage);
  c.max_offset = j.value("max_offset", d.max_offset);
  if (j.contains("normalizer")) {
    c.normalizer.left = j.at("normalizer").at(0).get<std::size_t>();
    c.normalizer.right = j.at("normalizer").at(1).get<std::size_t>();
  }
  c.seed = j.value("seed", d.seed);
}

struct CascadeModel {
  CascadeConfig config;
  std::size_t landmarks = 0;
  Shape2D mean_shape;  // unit box
  std::vector<Stage> stages;
  /// Mean normalized training error: entry 0 before any stage, entry t after stage t.
  std::vector<double> train_error;

  friend bool operator==(const CascadeModel& a, const CascadeModel& b);
};

// ---------------------------------------------------------------------------
// Shape-indexed features

inline double probe_intensity(const GrayImage& image, const Probe& p, std::span<const double> box_shape,
                              const BoundingBox& bb) {
  const double al = p.alpha;
  const double u = al * box_shape[2 * p.a] + (1.0 - al) * box_shape[2 * p.b] + p.dx;
  const double v = al * box_shape[2 * p.a + 1] + (1.0 - al) * box_shape[2 * p.b + 1] + p.dy;
  return image.sample_clamped(bb.x + u * bb.w, bb.y + v * bb.h);
}

inline double feature_value(const GrayImage& image, const FeatureDef& f,
                            std::span<const double> box_shape, const BoundingBox& bb) {
  return probe_intensity(image, f.first, box_shape, bb) -
         probe_intensity(image, f.second, box_shape, bb);
}

inline void validate_features(std::span<const FeatureDef> defs, std::size_t landmarks) {
  for (const auto& f : defs)
    for (const Probe* p : {&f.first, &f.second}) {
      require(p->a < landmarks && p->b < landmarks, Errc::InvalidArgument,
              "feature landmark index out of range");
      require(p->alpha >= 0.0f && p->alpha <= 1.0f, Errc::InvalidArgument,
              "feature alpha outside [0, 1]");
      require(std::hypot(p->dx, p->dy) <= 0.25 + 1e-6, Errc::InvalidArgument,
              "feature offset exceeds 0.25 box widths");
    }
}

/// Features for a shape given in pixel coordinates.
inline std::vector<double> extract_features(const GrayImage& image, const Shape2D& shape,
                                            const BoundingBox& bb,
                                            std::span<const FeatureDef> defs) {
  validate_features(defs, shape.size());
  const Shape2D box_shape = to_box_frame(shape, bb);
  std::vector<double> out(defs.size());
  for (std::size_t i = 0; i < defs.size(); ++i)
    out[i] = feature_value(image, defs[i], box_shape.flat(), bb);
  return out;
}

inline Probe random_probe(Rng& rng, std::size_t landmarks, double max_offset) {
  Probe p;
  p.a = static_cast<std::uint16_t>(uniform_index(rng, landmarks));
  p.b = static_cast<std::uint16_t>(uniform_index(rng, landmarks));
  p.alpha = static_cast<float>(uniform01(rng));
  double dx, dy;
  do {
    dx = uniform(rng, -1.0, 1.0);
    dy = uniform(rng, -1.0, 1.0);
  } while (dx * dx + dy * dy > 1.0);
  p.dx = static_cast<float>(dx * max_offset);
  p.dy = static_cast<float>(dy * max_offset);
  return p;
}

inline std::vector<FeatureDef> random_feature_pool(Rng& rng, std::size_t count,
                                                   std::size_t landmarks, double max_offset) {
  std::vector<FeatureDef> pool(count);
  for (auto& f : pool) {
    f.first = random_probe(rng, landmarks, max_offset);
    f.second = random_probe(rng, landmarks, max_offset);
  }
  return pool;
}

namespace detail {

inline std::size_t fern_bin(const Fern& fern, std::span<const float> feats) {
  std::size_t bin = 0;
  for (std::size_t d = 0; d < fern.depth(); ++d)
    if (feats[d] >= fern.thresholds[d]) bin |= std::size_t{1} << d;
  return bin;
}

inline double max_abs_update(const Fern& f) {
  double m = 0.0;
  for (float u : f.updates) m = std::max(m, static_cast<double>(std::abs(u)));
  return m;
}

}  // namespace detail

/// Sum over the stage's ferns of their largest stored bin component; no stage
/// update can exceed it in the max norm.
inline double stage_update_bound(const Stage& stage) {
  double b = 0.0;
  for (const auto& f : stage.ferns) b += detail::max_abs_update(f);
  return b;
}

// ---------------------------------------------------------------------------
// Training

struct CascadeTrainingSample {
  const GrayImage* image;
  BoundingBox bb;
  Shape2D truth;
};

namespace detail {

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline double mean_error(const std::vector<std::size_t>& owner,
                         std::span<const CascadeTrainingSample> samples,
                         const Eigen::MatrixXd& current, const Normalizer& norm) {
  double sum = 0.0;
  const auto two_k = current.cols();
  for (std::size_t i = 0; i < owner.size(); ++i) {
    const auto& s = samples[owner[i]];
    std::vector<double> flat(static_cast<std::size_t>(two_k));
    for (Eigen::Index c = 0; c < two_k; ++c) flat[static_cast<std::size_t>(c)] = current(static_cast<Eigen::Index>(i), c);
    sum += normalized_error(from_box_frame(Shape2D(std::move(flat)), s.bb), s.truth, norm);
  }
  return sum / static_cast<double>(owner.size());
}

}  // namespace detail

/// Trains a fern cascade. Each sample is replicated `augment` times with
/// random exemplar initializations; every stage draws a fresh probe pool,
/// selects fern features by correlation with random projections of the
/// residual, and fits bins to the shrunken mean residual of their members.
inline CascadeModel train_cascade(std::span<const CascadeTrainingSample> samples,
                                  const CascadeConfig& cfg) {
  cfg.validate();
  require(samples.size() >= 2, Errc::InvalidArgument, "cascade training needs >= 2 samples");
  const std::size_t k = samples.front().truth.size();
  for (const auto& s : samples) {
    require(s.truth.size() == k, Errc::ShapeMismatch, "training shapes have different K");
    require(s.image != nullptr && !s.image->empty(), Errc::InvalidArgument, "missing image");
    s.bb.validate();
  }
  const std::size_t two_k = 2 * k;
  const auto tk = static_cast<Eigen::Index>(two_k);

  std::vector<TrainExemplar> exemplars;
  exemplars.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    exemplars.push_back({sample_id(i), samples[i].truth, samples[i].bb, {}});

  CascadeModel model;
  model.config = cfg;
  model.landmarks = k;
  model.mean_shape = mean_unit_shape(exemplars);

  // Augmented instances in box units.
  const std::size_t aug = static_cast<std::size_t>(cfg.augment);
  const std::size_t n = samples.size() * aug;
  const auto ni = static_cast<Eigen::Index>(n);
  std::vector<std::size_t> owner(n);
  Eigen::MatrixXd current(ni, tk);
  Eigen::MatrixXd truth(ni, tk);
  const std::uint64_t aug_seed = derive_seed(cfg.seed, 0);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const Shape2D t = to_box_frame(samples[s].truth, samples[s].bb);
    const InitSet inits = random_init(exemplars, samples[s].bb, aug, derive_seed(aug_seed, s));
    for (std::size_t a = 0; a < aug; ++a) {
      const auto row = static_cast<Eigen::Index>(s * aug + a);
      owner[s * aug + a] = s;
      const Shape2D init = to_box_frame(inits.shapes[a], samples[s].bb);
      for (Eigen::Index c = 0; c < tk; ++c) {
        current(row, c) = init.flat()[static_cast<std::size_t>(c)];
        truth(row, c) = t.flat()[static_cast<std::size_t>(c)];
      }
    }
  }

  detail::RowMatF residual(ni, tk);
  model.train_error.push_back(detail::mean_error(owner, samples, current, cfg.normalizer));

  const auto pool_size = static_cast<std::size_t>(cfg.pool);
  const auto depth = static_cast<std::size_t>(cfg.depth);
  Eigen::MatrixXf feats(ni, static_cast<Eigen::Index>(pool_size));
  std::vector<double> fmean(pool_size), fstd(pool_size), fmin(pool_size), fmax(pool_size);
  std::vector<float> row_feats(depth);

  for (int t = 0; t < cfg.stages; ++t) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t) + 1));
    Stage stage;
    stage.pool = random_feature_pool(rng, pool_size, k, cfg.max_offset);

    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = samples[owner[i]];
      std::vector<double> cur(two_k);
      for (std::size_t c = 0; c < two_k; ++c)
        cur[c] = current(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      for (std::size_t p = 0; p < pool_size; ++p)
        feats(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) =
            static_cast<float>(feature_value(*s.image, stage.pool[p], cur, s.bb));
    }
    for (std::size_t p = 0; p < pool_size; ++p) {
      const auto col = feats.col(static_cast<Eigen::Index>(p)).cast<double>();
      fmean[p] = col.mean();
      fstd[p] = std::sqrt(std::max(0.0, col.squaredNorm() / static_cast<double>(n) - fmean[p] * fmean[p]));
      fmin[p] = col.minCoeff();
      fmax[p] = col.maxCoeff();
    }
    residual = (truth - current).cast<float>();
    Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(ni, tk);

    for (int m = 0; m < cfg.ferns; ++m) {
      Eigen::MatrixXf dirs(tk, static_cast<Eigen::Index>(depth));
      for (Eigen::Index r = 0; r < dirs.rows(); ++r)
        for (Eigen::Index c = 0; c < dirs.cols(); ++c) dirs(r, c) = static_cast<float>(normal(rng));
      const Eigen::MatrixXf proj = residual * dirs;                // n x D
      const Eigen::MatrixXf cross = feats.transpose() * proj;      // P x D

      Fern fern;
      for (std::size_t d = 0; d < depth; ++d) {
        const auto dc = static_cast<Eigen::Index>(d);
        const double ymean = proj.col(dc).cast<double>().mean();
        const double yvar = proj.col(dc).cast<double>().squaredNorm() / static_cast<double>(n) - ymean * ymean;
        const double ystd = std::sqrt(std::max(0.0, yvar));
        std::size_t best = pool_size;
        double best_corr = -1.0;
        for (std::size_t p = 0; p < pool_size; ++p) {
          if (std::find(fern.features.begin(), fern.features.end(), p) != fern.features.end()) continue;
          double corr = 0.0;
          if (fstd[p] > 0 && ystd > 0) {
            const double cov = cross(static_cast<Eigen::Index>(p), dc) / static_cast<double>(n) - fmean[p] * ymean;
            corr = std::abs(cov / (fstd[p] * ystd));
          }
          if (corr > best_corr) {
            best_corr = corr;
            best = p;
          }
        }
        fern.features.push_back(static_cast<std::uint32_t>(best));
        fern.thresholds.push_back(static_cast<float>(uniform(rng, fmin[best], fmax[best])));
      }

      const std::size_t bins = fern.bins();
      std::vector<std::size_t> bin_of(n);
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bins), tk);
      fern.counts.assign(bins, 0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < depth; ++d)
          row_feats[d] = feats(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(fern.features[d]));
        const std::size_t b = detail::fern_bin(fern, row_feats);
        bin_of[i] = b;
        ++fern.counts[b];
        sums.row(static_cast<Eigen::Index>(b)) += residual.row(static_cast<Eigen::Index>(i)).cast<double>();
      }
      fern.updates.assign(bins * two_k, 0.0f);
      for (std::size_t b = 0; b < bins; ++b) {
        if (fern.counts[b] == 0) continue;
        for (std::size_t c = 0; c < two_k; ++c) {
          const double u = cfg.shrinkage * sums(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) /
                           static_cast<double>(fern.counts[b]);
          require(std::isfinite(u), Errc::NonFiniteUpdate,
                  "stage " + std::to_string(t) + " fern " + std::to_string(m));
          fern.updates[b * two_k + c] = static_cast<float>(u);
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        const float* u = fern.updates.data() + bin_of[i] * two_k;
        for (std::size_t c = 0; c < two_k; ++c) {
          const auto r = static_cast<Eigen::Index>(i);
          const auto cc = static_cast<Eigen::Index>(c);
          residual(r, cc) -= u[c];
          delta(r, cc) += static_cast<double>(u[c]);
        }
      }
      stage.ferns.push_back(std::move(fern));
    }
    current += delta;
    model.stages.push_back(std::move(stage));
    model.train_error.push_back(detail::mean_error(owner, samples, current, cfg.normalizer));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Inference

/// One trajectory in box units through the first `max_stages` stages (all by default).
inline Shape2D run_cascade_single(const CascadeModel& model, const GrayImage& image,
                                  const BoundingBox& bb, const Shape2D& init,
                                  std::size_t max_stages = std::numeric_limits<std::size_t>::max()) {
  require(init.size() == model.landmarks, Errc::ShapeMismatch,
          "init has " + std::to_string(init.size()) + " landmarks, model expects " +
              std::to_string(model.landmarks));
  bb.validate();
  const std::size_t two_k = 2 * model.landmarks;
  Shape2D cur_shape = to_box_frame(init, bb);
  std::vector<double> cur(cur_shape.flat().begin(), cur_shape.flat().end());
  std::vector<double> delta(two_k);
  std::vector<float> feats;
  const std::size_t stages = std::min(max_stages, model.stages.size());
  for (std::size_t t = 0; t < stages; ++t) {
    const Stage& stage = model.stages[t];
    std::fill(delta.begin(), delta.end(), 0.0);
    for (const Fern& fern : stage.ferns) {
      feats.resize(fern.depth());
      for (std::size_t d = 0; d < fern.depth(); ++d)
        feats[d] = static_cast<float>(feature_value(image, stage.pool[fern.features[d]], cur, bb));
      const float* u = fern.updates.data() + detail::fern_bin(fern, feats) * two_k;
      for (std::size_t c = 0; c < two_k; ++c) delta[c] += static_cast<double>(u[c]);
    }
    double linf = 0.0;
    for (double d : delta) linf = std::max(linf, std::abs(d));
    require(std::isfinite(linf) && linf <= stage_update_bound(stage) * (1 + 1e-12) + 1e-12,
            Errc::NonFiniteUpdate, "stage update exceeds its fern bound");
    for (std::size_t c = 0; c < two_k; ++c) cur[c] += delta[c];
  }
  return from_box_frame(Shape2D(std::move(cur)), bb);
}

/// Runs every initialization independently; more than one result is combined
/// by the per-coordinate median.
inline Shape2D run_cascade(const CascadeModel& model, const GrayImage& image, const BoundingBox& bb,
                           const InitSet& inits,
                           std::size_t max_stages = std::numeric_limits<std::size_t>::max()) {
  require(!inits.shapes.empty(), Errc::InvalidArgument, "empty initialization set");
  std::vector<Shape2D> out;
  out.reserve(inits.size());
  for (const auto& s : inits.shapes) out.push_back(run_cascade_single(model, image, bb, s, max_stages));
  return out.size() == 1 ? out.front() : aggregate_median(out);
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr char kCascadeMagic[9] = "HPICASC\0";
inline constexpr std::uint32_t kCascadeVersion = 1;

inline Container cascade_to_container(const CascadeModel& m) {
  Container c;
  std::vector<double> mean(m.mean_shape.flat().begin(), m.mean_shape.flat().end());
  c.header = {{"format", "hpinit-cascade"},
              {"config", m.config},
              {"landmarks", m.landmarks},
              {"mean_shape", mean},
              {"train_error", m.train_error},
              {"stages", m.stages.size()}};
  auto& p = c.payload;
  auto put_probe = [&](const Probe& pr) {
    p.insert(p.end(), {static_cast<float>(pr.a), static_cast<float>(pr.b), pr.alpha, pr.dx, pr.dy});
  };
  for (const auto& st : m.stages) {
    p.push_back(static_cast<float>(st.pool.size()));
    p.push_back(static_cast<float>(st.ferns.size()));
    for (const auto& f : st.pool) {
      put_probe(f.first);
      put_probe(f.second);
    }
    for (const auto& fern : st.ferns) {
      p.push_back(static_cast<float>(fern.depth()));
      for (auto i : fern.features) p.push_back(static_cast<float>(i));
      p.insert(p.end(), fern.thresholds.begin(), fern.thresholds.end());
      for (auto n : fern.counts) p.push_back(static_cast<float>(n));
      p.insert(p.end(), fern.updates.begin(), fern.updates.end());
    }
  }
  return c;
}

inline CascadeModel cascade_from_container(const Container& c, const std::string& path) {
  require(c.header.value("format", "") == "hpinit-cascade", Errc::ParseError,
          path + ": not a cascade model");
  CascadeModel m;
  try {
    m.config = c.header.at("config").get<CascadeConfig>();
    m.landmarks = c.header.at("landmarks").get<std::size_t>();
    m.mean_shape = Shape2D(c.header.at("mean_shape").get<std::vector<double>>());
    m.train_error = c.header.at("train_error").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path + ": " + e.what());
  }
  require(m.mean_shape.size() == m.landmarks, Errc::ShapeMismatch,
          path + ": mean shape does not match landmark count");
  const std::size_t stages = c.header.at("stages").get<std::size_t>();
  const std::size_t two_k = 2 * m.landmarks;
  std::size_t pos = 0;
  auto take = [&]() {
    require(pos < c.payload.size(), Errc::ParseError, path + ": truncated cascade payload");
    return c.payload[pos++];
  };
  auto take_index = [&](std::size_t limit) {
    const float v = take();
    require(v >= 0 && v < static_cast<float>(limit) && v == std::floor(v), Errc::ShapeMismatch,
            path + ": index out of range in cascade payload");
    return static_cast<std::size_t>(v);
  };
  auto take_probe = [&]() {
    Probe pr;
    pr.a = static_cast<std::uint16_t>(take_index(m.landmarks));
    pr.b = static_cast<std::uint16_t>(take_index(m.landmarks));
    pr.alpha = take();
    pr.dx = take();
    pr.dy = take();
    return pr;
  };
  for (std::size_t t = 0; t < stages; ++t) {
    Stage st;
    const std::size_t pool = take_index(1u << 24);
    const std::size_t ferns = take_index(1u << 24);
    st.pool.resize(pool);
    for (auto& f : st.pool) {
      f.first = take_probe();
      f.second = take_probe();
    }
    for (std::size_t j = 0; j < ferns; ++j) {
      Fern fern;
      const std::size_t depth = take_index(17);
      for (std::size_t d = 0; d < depth; ++d) fern.features.push_back(static_cast<std::uint32_t>(take_index(pool)));
      for (std::size_t d = 0; d < depth; ++d) fern.thresholds.push_back(take());
      const std::size_t bins = fern.bins();
      for (std::size_t b = 0; b < bins; ++b) fern.counts.push_back(static_cast<std::uint32_t>(take_index(1u << 24)));
      require(pos + bins * two_k <= c.payload.size(), Errc::ParseError,
              path + ": truncated fern updates");
      fern.updates.assign(c.payload.begin() + static_cast<std::ptrdiff_t>(pos),
                          c.payload.begin() + static_cast<std::ptrdiff_t>(pos + bins * two_k));
      pos += bins * two_k;
      st.ferns.push_back(std::move(fern));
    }
    m.stages.push_back(std::move(st));
  }
  require(pos == c.payload.size(), Errc::ParseError, path + ": trailing cascade payload");
  return m;
}

inline void save_cascade(const std::string& path, const CascadeModel& m) {
  write_container(path, kCascadeMagic, kCascadeVersion, cascade_to_container(m));
}

inline CascadeModel load_cascade(const std::string& path) {
  return cascade_from_container(read_container(path, kCascadeMagic, kCascadeVersion), path);
}

inline bool operator==(const CascadeModel& a, const CascadeModel& b) {
  return encode_container(kCascadeMagic, kCascadeVersion, cascade_to_container(a)) ==
         encode_container(kCascadeMagic, kCascadeVersion, cascade_to_container(b));
}

}  // namespace hpinit
