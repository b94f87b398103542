#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hpinit/cascade.hpp"
#include "hpinit/data.hpp"
#include "hpinit/error.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/init.hpp"
#include "hpinit/metrics.hpp"
#include "hpinit/random.hpp"

namespace hpinit {

inline constexpr double kFailureThreshold = 0.1;

struct AlignmentResult {
  std::string id;
  Shape2D predicted;
  Shape2D truth;
  double error = 0.0;
};

inline AlignmentResult make_result(std::string id, Shape2D predicted, Shape2D truth,
                                   const Normalizer& norm = {}) {
  const double e = normalized_error(predicted, truth, norm);
  return {std::move(id), std::move(predicted), std::move(truth), e};
}

struct FailureStats {
  std::size_t count = 0;
  double rate = 0.0;
};

/// Failures are errors strictly above `threshold`.
inline FailureStats failure_rate(std::span<const double> errors, double threshold = kFailureThreshold) {
  FailureStats f;
  for (double e : errors) f.count += e > threshold;
  f.rate = errors.empty() ? 0.0 : static_cast<double>(f.count) / static_cast<double>(errors.size());
  return f;
}

inline std::vector<double> errors_of(std::span<const AlignmentResult> results) {
  std::vector<double> e;
  e.reserve(results.size());
  for (const auto& r : results) e.push_back(r.error);
  return e;
}

inline FailureStats failure_rate(std::span<const AlignmentResult> results,
                                 double threshold = kFailureThreshold) {
  const auto e = errors_of(results);
  return failure_rate(std::span<const double>(e), threshold);
}

struct CedPoint {
  double threshold;
  double fraction;  // share of samples with error <= threshold
};

inline std::vector<CedPoint> ced_curve(std::span<const double> errors, std::span<const double> thresholds) {
  std::vector<double> sorted(errors.begin(), errors.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<CedPoint> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    const auto n = static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin());
    out.push_back({t, sorted.empty() ? 0.0 : n / static_cast<double>(sorted.size())});
  }
  return out;
}

/// Evenly spaced thresholds 0, step, ..., max_threshold.
inline std::vector<double> ced_thresholds(double max_threshold = 0.3, std::size_t steps = 60) {
  std::vector<double> t(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i)
    t[i] = max_threshold * static_cast<double>(i) / static_cast<double>(steps);
  return t;
}

// ---------------------------------------------------------------------------
// Pose buckets and top-error analysis

/// Histogram over max(|pitch|, |yaw|, |roll|) with fixed-width buckets covering [0, 90].
struct AngleHistogram {
  double bucket_width = 15.0;
  std::vector<std::size_t> counts;

  explicit AngleHistogram(double width = 15.0)
      : bucket_width(width), counts(static_cast<std::size_t>(std::ceil(90.0 / width - 1e-9))) {
    require(width > 0 && width <= 90, Errc::InvalidArgument, "bucket width must be in (0, 90]");
  }

  std::size_t bucket(double max_abs_angle) const {
    const auto b = static_cast<std::size_t>(std::max(0.0, std::floor(max_abs_angle / bucket_width)));
    return std::min(b, counts.size() - 1);
  }
  double lower_edge(std::size_t b) const { return static_cast<double>(b) * bucket_width; }
  void add(const HeadPose& p) { ++counts[bucket(p.max_abs_angle())]; }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

struct TopErrorRecord {
  std::string id;
  double error;
  HeadPose pose;
};

struct TopErrorAnalysis {
  std::vector<TopErrorRecord> records;  // largest error first
  AngleHistogram histogram;
};

/// The n largest-error samples (ties at equal error go to the smaller id) and
/// the max-|angle| histogram of their poses. `poses[i]` belongs to `results[i]`.
inline TopErrorAnalysis top_error_pose_analysis(std::span<const AlignmentResult> results,
                                                std::span<const HeadPose> poses, std::size_t n = 50,
                                                double bucket_width = 15.0) {
  require(poses.size() == results.size(), Errc::ShapeMismatch, "one pose per result required");
  require(n <= results.size(), Errc::InvalidArgument, "n exceeds the number of results");
  std::vector<std::size_t> idx(results.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (results[a].error != results[b].error) return results[a].error > results[b].error;
                      return results[a].id < results[b].id;
                    });
  TopErrorAnalysis out{{}, AngleHistogram(bucket_width)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = idx[i];
    out.records.push_back({results[j].id, results[j].error, poses[j]});
    out.histogram.add(poses[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct PoseBucketStat {
  double lower = 0.0;
  std::size_t count = 0;
  double mean_error = 0.0;
};

struct EvalReport {
  std::string scheme;
  std::size_t init_count = 1;
  nlohmann::json metadata = nlohmann::json::object();  // config and seeds
  std::vector<AlignmentResult> results;
  std::vector<HeadPose> poses;  // ground-truth pose per result
  double threshold = kFailureThreshold;
  double mean_error = 0.0;
  FailureStats failures;
  std::vector<CedPoint> ced;
  std::vector<PoseBucketStat> pose_buckets;
};

inline EvalReport make_report(std::string scheme, std::size_t init_count, std::vector<AlignmentResult> results,
                              std::vector<HeadPose> poses, nlohmann::json metadata = nlohmann::json::object(),
                              double threshold = kFailureThreshold) {
  require(poses.size() == results.size(), Errc::ShapeMismatch, "one pose per result required");
  EvalReport r;
  r.scheme = std::move(scheme);
  r.init_count = init_count;
  r.metadata = std::move(metadata);
  r.threshold = threshold;
  const auto errs = errors_of(results);
  double sum = 0.0;
  for (double e : errs) sum += e;
  r.mean_error = errs.empty() ? 0.0 : sum / static_cast<double>(errs.size());
  r.failures = failure_rate(std::span<const double>(errs), threshold);
  const auto th = ced_thresholds();
  r.ced = ced_curve(errs, th);

  AngleHistogram h;
  r.pose_buckets.resize(h.counts.size());
  for (std::size_t b = 0; b < r.pose_buckets.size(); ++b) r.pose_buckets[b].lower = h.lower_edge(b);
  for (std::size_t i = 0; i < errs.size(); ++i) {
    auto& pb = r.pose_buckets[h.bucket(poses[i].max_abs_angle())];
    ++pb.count;
    pb.mean_error += errs[i];
  }
  for (auto& pb : r.pose_buckets)
    if (pb.count) pb.mean_error /= static_cast<double>(pb.count);
  r.results = std::move(results);
  r.poses = std::move(poses);
  return r;
}

/// Supplies the pose that drives the pose-based schemes for one test sample.
using PoseProvider = std::function<HeadPose(const Sample&)>;

struct EvalContext {
  const CascadeModel* model = nullptr;
  std::span<const TrainExemplar> exemplars;
  const Shape3D* shape3d = nullptr;
  BoxConvention convention;
  PoseProvider pose;  // may be empty when no scheme needs a pose
  std::uint64_t seed = 0;
};

struct SkippedSample {
  std::string id;
  std::string scheme;
  std::string reason;
};

/// Aligns every test sample with one scheme. Sample i's random draws use
/// derive_seed(seed, i) so schemes see the same draws.
inline EvalReport evaluate_scheme(const EvalContext& ctx, std::span<const Sample> testset,
                                  const SchemeSpec& spec, std::vector<SkippedSample>* skipped = nullptr) {
  require(ctx.model != nullptr && ctx.shape3d != nullptr, Errc::InvalidArgument, "incomplete eval context");
  require(!spec.needs_pose() || static_cast<bool>(ctx.pose), Errc::InvalidArgument,
          "scheme " + spec.to_string() + " needs a pose source");
  std::vector<AlignmentResult> results;
  std::vector<HeadPose> poses;
  for (std::size_t i = 0; i < testset.size(); ++i) {
    const Sample& s = testset[i];
    try {
      require(s.landmarks.has_value(), Errc::InvalidArgument, "no ground-truth landmarks");
      const HeadPose pose = spec.needs_pose() ? ctx.pose(s) : HeadPose{};
      const InitSet inits =
          make_inits(spec, ctx.exemplars, *ctx.shape3d, s.bb, pose, derive_seed(ctx.seed, i), ctx.convention);
      Shape2D out = run_cascade(*ctx.model, s.image, s.bb, inits);
      results.push_back(make_result(s.id, std::move(out), *s.landmarks, ctx.model->config.normalizer));
      poses.push_back(s.pose);
    } catch (const Error& e) {
      if (!skipped) throw;
      skipped->push_back({s.id, spec.to_string(), e.what()});
    }
  }
  return make_report(spec.to_string(), spec.kind == SchemeSpec::Kind::Mean || spec.kind == SchemeSpec::Kind::Projection3D
                                           ? 1
                                           : spec.count,
                     std::move(results), std::move(poses), {{"seed", ctx.seed}});
}

struct PairedDelta {
  std::string scheme;
  std::string baseline;
  std::size_t paired = 0;
  double mean_delta = 0.0;  // scheme error minus baseline error
  std::size_t better = 0;
  std::size_t worse = 0;
  long failure_delta = 0;
};

struct ComparisonReport {
  std::vector<EvalReport> reports;
  std::vector<PairedDelta> deltas;  // every scheme against the first
  std::vector<SkippedSample> skipped;
};

inline PairedDelta paired_delta(const EvalReport& scheme, const EvalReport& baseline) {
  PairedDelta d;
  d.scheme = scheme.scheme;
  d.baseline = baseline.scheme;
  std::size_t j = 0;
  for (const auto& r : scheme.results) {
    while (j < baseline.results.size() && baseline.results[j].id < r.id) ++j;
    if (j == baseline.results.size()) break;
    if (baseline.results[j].id != r.id) continue;
    const double diff = r.error - baseline.results[j].error;
    ++d.paired;
    d.mean_delta += diff;
    d.better += diff < 0;
    d.worse += diff > 0;
  }
  if (d.paired) d.mean_delta /= static_cast<double>(d.paired);
  d.failure_delta = static_cast<long>(scheme.failures.count) - static_cast<long>(baseline.failures.count);
  return d;
}

/// Runs every scheme on the same test set with shared seeds; deltas pair results by id.
/// Test ids must be sorted ascending for pairing.
inline ComparisonReport compare_schemes(const EvalContext& ctx, std::span<const Sample> testset,
                                        std::span<const SchemeSpec> schemes) {
  require(!schemes.empty(), Errc::InvalidArgument, "no schemes to compare");
  require(std::is_sorted(testset.begin(), testset.end(),
                         [](const Sample& a, const Sample& b) { return a.id < b.id; }),
          Errc::InvalidArgument, "test samples must be sorted by id");
  ComparisonReport out;
  for (const auto& spec : schemes) out.reports.push_back(evaluate_scheme(ctx, testset, spec, &out.skipped));
  for (const auto& r : out.reports) out.deltas.push_back(paired_delta(r, out.reports.front()));
  return out;
}

// ---------------------------------------------------------------------------
// Writers

inline nlohmann::json pose_json(const HeadPose& p) { return {p.pitch, p.yaw, p.roll}; }

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json ced = nlohmann::json::array();
  for (const auto& c : r.ced) ced.push_back({c.threshold, c.fraction});
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : r.pose_buckets)
    buckets.push_back({{"lower", b.lower}, {"count", b.count}, {"mean_error", b.mean_error}});
  return {{"scheme", r.scheme},
          {"init_count", r.init_count},
          {"metadata", r.metadata},
          {"samples", r.results.size()},
          {"mean_error", r.mean_error},
          {"threshold", r.threshold},
          {"failure_count", r.failures.count},
          {"failure_rate", r.failures.rate},
          {"ced", ced},
          {"pose_buckets", buckets}};
}

inline nlohmann::json comparison_json(const ComparisonReport& c) {
  nlohmann::json reports = nlohmann::json::array(), deltas = nlohmann::json::array(),
                 skipped = nlohmann::json::array();
  for (const auto& r : c.reports) reports.push_back(report_json(r));
  for (const auto& d : c.deltas)
    deltas.push_back({{"scheme", d.scheme},
                      {"baseline", d.baseline},
                      {"paired", d.paired},
                      {"mean_delta", d.mean_delta},
                      {"better", d.better},
                      {"worse", d.worse},
                      {"failure_delta", d.failure_delta}});
  for (const auto& s : c.skipped) skipped.push_back({{"id", s.id}, {"scheme", s.scheme}, {"reason", s.reason}});
  return {{"reports", reports}, {"deltas", deltas}, {"skipped", skipped}};
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Per-sample CSV; first line is a comment carrying the report metadata.
inline std::string report_csv(const EvalReport& r) {
  std::string out = "# " + nlohmann::json{{"scheme", r.scheme}, {"metadata", r.metadata}}.dump() + "\n";
  out += "id,error,failure,pitch,yaw,roll\n";
  for (std::size_t i = 0; i < r.results.size(); ++i) {
    const auto& p = r.poses[i];
    out += r.results[i].id + "," + fmt(r.results[i].error) + "," + (r.results[i].error > r.threshold ? "1" : "0") +
           "," + fmt(p.pitch) + "," + fmt(p.yaw) + "," + fmt(p.roll) + "\n";
  }
  return out;
}

namespace detail {

inline std::string svg_header(const std::string& title, const nlohmann::json& meta) {
  std::string out =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" viewBox=\"0 0 480 360\">\n";
  std::string m = meta.dump();
  std::string esc;
  for (char ch : m) {
    if (ch == '<') esc += "&lt;";
    else if (ch == '>') esc += "&gt;";
    else if (ch == '&') esc += "&amp;";
    else if (ch == '-' && !esc.empty() && esc.back() == '-') esc += " -";
    else esc += ch;
  }
  out += "<!-- " + esc + " -->\n";
  out += "<rect width=\"480\" height=\"360\" fill=\"white\"/>\n";
  out += "<text x=\"240\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + title + "</text>\n";
  out += "<line x1=\"50\" y1=\"320\" x2=\"460\" y2=\"320\" stroke=\"black\"/>\n";
  out += "<line x1=\"50\" y1=\"320\" x2=\"50\" y2=\"40\" stroke=\"black\"/>\n";
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

/// CED plot, one polyline per report.
inline std::string ced_svg(std::span<const EvalReport> reports, const nlohmann::json& meta) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::string out = detail::svg_header("Cumulative error distribution", meta);
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const auto& ced = reports[r].ced;
    if (ced.empty()) continue;
    const double tmax = std::max(ced.back().threshold, 1e-12);
    std::string pts;
    for (const auto& c : ced)
      pts += detail::num(50 + 410 * c.threshold / tmax) + "," + detail::num(320 - 280 * c.fraction) + " ";
    const char* col = colors[r % 6];
    out += "<polyline fill=\"none\" stroke=\"" + std::string(col) + "\" points=\"" + pts + "\"/>\n";
    out += "<text x=\"60\" y=\"" + std::to_string(50 + 16 * r) + "\" font-size=\"12\" fill=\"" + col + "\">" +
           reports[r].scheme + "</text>\n";
  }
  return out + "</svg>\n";
}

/// Bar chart of a max-|angle| histogram.
inline std::string histogram_svg(const AngleHistogram& h, const nlohmann::json& meta) {
  std::string out = detail::svg_header("Largest absolute angle of top-error samples", meta);
  std::size_t peak = 1;
  for (auto c : h.counts) peak = std::max(peak, c);
  const double bw = 410.0 / static_cast<double>(h.counts.size());
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    const double hh = 280.0 * static_cast<double>(h.counts[b]) / static_cast<double>(peak);
    out += "<rect x=\"" + detail::num(50 + bw * static_cast<double>(b) + 2) + "\" y=\"" + detail::num(320 - hh) +
           "\" width=\"" + detail::num(bw - 4) + "\" height=\"" + detail::num(hh) + "\" fill=\"#1f77b4\"/>\n";
    out += "<text x=\"" + detail::num(50 + bw * (static_cast<double>(b) + 0.5)) +
           "\" y=\"336\" text-anchor=\"middle\" font-size=\"11\">" + detail::num(h.lower_edge(b)) + "</text>\n";
  }
  return out + "</svg>\n";
}

}  // namespace hpinit
