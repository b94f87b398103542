#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hpinit/cascade.hpp"
#include "hpinit/data.hpp"
#include "hpinit/dataset.hpp"
#include "hpinit/error.hpp"
#include "hpinit/eval.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/init.hpp"
#include "hpinit/pose_net.hpp"
#include "hpinit/pose_solver.hpp"

#ifndef HPINIT_DATA_DIR
#define HPINIT_DATA_DIR "data"
#endif

namespace hpinit {

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"count", c.count},
       {"pitch", {c.pitch.lo, c.pitch.hi}},
       {"yaw", {c.yaw.lo, c.yaw.hi}},
       {"roll", {c.roll.lo, c.roll.hi}},
       {"image_size", c.image_size},
       {"face_width", c.face_width},
       {"blob_sigma", c.blob_sigma},
       {"noise_sigma", c.noise_sigma},
       {"bbox_dilation", c.bbox_dilation},
       {"distribution", c.distribution == PoseDistribution::Uniform ? "uniform" : "gaussian"},
       {"seed", c.seed}};
}

inline PoseDistribution parse_distribution(const std::string& s) {
  if (s == "uniform") return PoseDistribution::Uniform;
  if (s == "gaussian") return PoseDistribution::Gaussian;
  throw Error(Errc::InvalidArgument, "distribution must be uniform or gaussian");
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  auto range = [&](const char* key, AngleRange& r) {
    if (j.contains(key)) r = {j.at(key).at(0).get<double>(), j.at(key).at(1).get<double>()};
  };
  c.count = j.value("count", c.count);
  range("pitch", c.pitch);
  range("yaw", c.yaw);
  range("roll", c.roll);
  c.image_size = j.value("image_size", c.image_size);
  c.face_width = j.value("face_width", c.face_width);
  c.blob_sigma = j.value("blob_sigma", c.blob_sigma);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.bbox_dilation = j.value("bbox_dilation", c.bbox_dilation);
  if (j.contains("distribution")) c.distribution = parse_distribution(j.at("distribution").get<std::string>());
  c.seed = j.value("seed", c.seed);
}

namespace cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

inline int exit_code_for(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return kUsage;
    case Errc::NonFiniteLoss:
    case Errc::NonFiniteUpdate:
    case Errc::NonOrthonormalInput:
    case Errc::DegenerateProjection: return kNumeric;
    default: return kData;
  }
}

/// Single-line JSON error record.
inline std::string error_line(std::string_view code, int exit_code, const std::string& message) {
  return nlohmann::json{{"error", code}, {"exit", exit_code}, {"message", message}}.dump();
}

/// Options shared by every subcommand plus each subcommand's own flags.
struct Options {
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out_dir = ".";
  std::string shape3d = HPINIT_DATA_DIR "/mean_face_68.txt";

  // synth-gen
  int count = 0;
  double train_fraction = 0.8;
  int image_size = 0;
  double noise = -1;
  std::vector<double> pitch_range, yaw_range, roll_range;
  std::string distribution;

  // dataset / model inputs
  std::string data, exemplars, model, pose_model;

  // train-pose
  double lr = 0, momentum = -1, jitter = -1, val_fraction = -1;
  int batch_size = 0, epochs = 0, patience = 0, pose_augment = 0;

  // train-cascade
  int stages = 0, ferns = 0, depth = 0, pool = 0, cascade_augment = 0;
  double shrinkage = 0, max_offset = -1;

  // align / evaluate / compare
  std::string scheme = "3d";
  std::string schemes = "random:1,3d,knn:1";
  std::string pose_source = "net";
  std::string image;
  std::vector<double> bbox;
  std::string id = "image";
  int top_n = 50;
};

/// JSON config file: {"synth": {...}, "pose_net": {...}, "arch": {...}, "cascade": {...}}.
inline nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  try {
    auto j = nlohmann::json::parse(read_text(path));
    require(j.is_object(), Errc::ParseError, path + ": config must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path + ": " + e.what());
  }
}

template <typename T>
T section(const nlohmann::json& cfg, const char* key) {
  T out{};
  if (!cfg.contains(key)) return out;
  try {
    out = cfg.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, std::string("config section '") + key + "': " + e.what());
  }
  return out;
}

inline std::string out_path(const Options& o, const std::string& name) {
  return (fs::path(o.out_dir) / name).string();
}

inline void ensure_out_dir(const Options& o) {
  std::error_code ec;
  fs::create_directories(o.out_dir, ec);
  require(!ec, Errc::IoError, "cannot create " + o.out_dir + ": " + ec.message());
}

inline AngleRange range_flag(const std::vector<double>& v, const char* name) {
  require(v.size() == 2, Errc::InvalidArgument, std::string(name) + " takes two values LO,HI");
  return {v[0], v[1]};
}

inline std::vector<Sample> sorted_by_id(std::vector<Sample> s) {
  std::sort(s.begin(), s.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return s;
}

inline Dataset require_dataset(const std::string& dir, const char* flag, bool need_poses) {
  require(!dir.empty(), Errc::InvalidArgument, std::string(flag) + " is required");
  Dataset ds = load_dataset(dir);
  require(!need_poses || ds.has_poses, Errc::ParseError,
          dir + ": no poses.csv (run annotate-pose first)");
  return ds;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_synth_gen(const Options& o, const nlohmann::json& cfg, std::ostream& out) {
  SynthConfig sc = section<SynthConfig>(cfg, "synth");
  sc.seed = o.seed;
  if (o.count) sc.count = o.count;
  if (o.image_size) sc.image_size = o.image_size;
  if (o.noise >= 0) sc.noise_sigma = o.noise;
  if (!o.pitch_range.empty()) sc.pitch = range_flag(o.pitch_range, "--pitch-range");
  if (!o.yaw_range.empty()) sc.yaw = range_flag(o.yaw_range, "--yaw-range");
  if (!o.roll_range.empty()) sc.roll = range_flag(o.roll_range, "--roll-range");
  if (!o.distribution.empty()) sc.distribution = parse_distribution(o.distribution);
  sc.validate();
  require(o.train_fraction >= 0 && o.train_fraction <= 1, Errc::InvalidArgument,
          "--train-fraction must be in [0, 1]");

  const Shape3D shape3d = load_shape3d(o.shape3d);
  auto [train, test] = split(generate_synthetic(sc, shape3d), o.train_fraction, derive_seed(o.seed, 1));
  const nlohmann::json meta = {{"synth", sc}, {"train_fraction", o.train_fraction}, {"seed", o.seed}};
  ensure_out_dir(o);
  for (auto* part : {&train, &test}) {
    const std::string name = part == &train ? "train" : "test";
    nlohmann::json m = meta;
    m["split"] = name;
    save_dataset(out_path(o, name), {m, sorted_by_id(std::move(*part)), false});
  }
  out << "wrote " << out_path(o, "train") << " and " << out_path(o, "test") << "\n";
  return kOk;
}

inline int cmd_annotate_pose(const Options& o, std::ostream& out) {
  Dataset ds = require_dataset(o.data, "--data", false);
  const Shape3D shape3d = load_shape3d(o.shape3d);
  const AnnotationReport rep = annotate_poses(ds.samples, shape3d);
  std::vector<Sample> kept;
  for (auto& s : ds.samples) {
    const bool skip = std::any_of(rep.skipped.begin(), rep.skipped.end(),
                                  [&](const std::string& r) { return r.rfind(s.id + ":", 0) == 0; });
    if (!skip) kept.push_back(std::move(s));
  }
  ds.samples = std::move(kept);
  ds.has_poses = true;
  ds.config["annotation"] = {{"solver", "weak-perspective"}, {"shape3d", fs::path(o.shape3d).filename().string()},
                             {"skipped", rep.skipped}, {"seed", o.seed}};
  ensure_out_dir(o);
  save_dataset(o.out_dir, ds);
  write_pose_index(out_path(o, "pose_index.csv"), exemplars_from(ds.samples));
  out << "annotated " << ds.samples.size() << " samples, skipped " << rep.skipped.size() << "\n";
  return kOk;
}

inline int cmd_train_pose(const Options& o, const nlohmann::json& cfg, std::ostream& out) {
  TrainConfig tc = section<TrainConfig>(cfg, "pose_net");
  PoseNetArch arch = cfg.contains("arch") ? section<PoseNetArch>(cfg, "arch") : PoseNetArch{};
  tc.seed = o.seed;
  if (o.lr > 0) tc.learning_rate = o.lr;
  if (o.momentum >= 0) tc.momentum = o.momentum;
  if (o.batch_size) tc.batch_size = o.batch_size;
  if (o.epochs) tc.max_epochs = o.epochs;
  if (o.patience) tc.patience = o.patience;
  if (o.pose_augment) tc.augment = o.pose_augment;
  if (o.jitter >= 0) tc.jitter = o.jitter;
  if (o.val_fraction >= 0) tc.val_fraction = o.val_fraction;
  tc.validate();
  arch.validate();

  const Dataset ds = require_dataset(o.data, "--data", true);
  std::vector<PoseTrainSample> train;
  for (const auto& s : ds.samples) train.push_back({&s.image, s.bb, s.pose});
  const auto res = train_pose_net<float>(train, tc, arch);

  nlohmann::json history = nlohmann::json::array();
  std::string curve = "# " + nlohmann::json{{"pose_net", tc}, {"arch", arch}}.dump() + "\n";
  curve += "epoch,train_rmse,val_rmse\n";
  for (const auto& h : res.history) {
    history.push_back({{"epoch", h.epoch}, {"train_rmse", h.train_rmse}, {"val_rmse", h.val_rmse}});
    curve += std::to_string(h.epoch) + "," + fmt(h.train_rmse) + "," + fmt(h.val_rmse) + "\n";
  }
  const nlohmann::json meta = {{"pose_net", tc}, {"arch", arch}, {"seed", o.seed}, {"data", ds.config},
                               {"best_epoch", res.best_epoch}, {"history", history}};
  ensure_out_dir(o);
  save_pose_net(out_path(o, "pose_net.bin"), res.net, meta);
  write_text(out_path(o, "learning_curve.csv"), curve);
  write_text(out_path(o, "train_pose.json"), meta.dump(2) + "\n");
  out << "trained pose net: " << res.history.size() << " epochs, best " << res.best_epoch << " (val rmse "
      << res.history[static_cast<std::size_t>(res.best_epoch - 1)].val_rmse << " deg)\n";
  return kOk;
}

inline int cmd_train_cascade(const Options& o, const nlohmann::json& cfg, std::ostream& out) {
  CascadeConfig cc = section<CascadeConfig>(cfg, "cascade");
  cc.seed = o.seed;
  if (o.stages) cc.stages = o.stages;
  if (o.ferns) cc.ferns = o.ferns;
  if (o.depth) cc.depth = o.depth;
  if (o.pool) cc.pool = o.pool;
  if (o.cascade_augment) cc.augment = o.cascade_augment;
  if (o.shrinkage > 0) cc.shrinkage = o.shrinkage;
  if (o.max_offset >= 0) cc.max_offset = o.max_offset;
  cc.validate();

  const Dataset ds = require_dataset(o.data, "--data", false);
  std::vector<CascadeTrainingSample> train;
  for (const auto& s : ds.samples) {
    require(s.landmarks.has_value(), Errc::ParseError, s.id + ": training sample without landmarks");
    train.push_back({&s.image, s.bb, *s.landmarks});
  }
  const CascadeModel model = train_cascade(train, cc);

  std::string trace = "# " + nlohmann::json{{"cascade", cc}}.dump() + "\n";
  trace += "stage,mean_error\n";
  for (std::size_t t = 0; t < model.train_error.size(); ++t)
    trace += std::to_string(t) + "," + fmt(model.train_error[t]) + "\n";
  ensure_out_dir(o);
  save_cascade(out_path(o, "cascade.bin"), model);
  write_text(out_path(o, "stage_errors.csv"), trace);
  write_text(out_path(o, "train_cascade.json"),
             nlohmann::json{{"cascade", cc}, {"seed", o.seed}, {"data", ds.config},
                            {"train_error", model.train_error}}
                     .dump(2) +
                 "\n");
  out << "trained cascade: " << model.stages.size() << " stages, training error " << model.train_error.front()
      << " -> " << model.train_error.back() << "\n";
  return kOk;
}

/// Everything align/evaluate/compare need to run the pipeline.
struct Pipeline {
  CascadeModel model;
  std::vector<TrainExemplar> exemplars;
  Shape3D shape3d;
  BoxConvention convention;
  std::optional<PoseNet<float>> net;
  std::string pose_source;

  PoseProvider provider() const {
    if (pose_source == "solver") {
      const Shape3D* s3 = &shape3d;
      return [s3](const Sample& s) {
        require(s.landmarks.has_value(), Errc::InvalidArgument, "solver pose source needs landmarks");
        return fit_pose_from_landmarks(*s.landmarks, *s3).pose;
      };
    }
    const PoseNet<float>* n = &*net;
    return [n](const Sample& s) { return predict_pose(*n, s.image, s.bb); };
  }

  nlohmann::json describe(const Options& o) const {
    return {{"model", fs::path(o.model).filename().string()},
            {"pose_source", pose_source},
            {"pose_model", o.pose_model.empty() ? "" : fs::path(o.pose_model).filename().string()},
            {"cascade", model.config},
            {"box_convention", {convention.scale, convention.dx, convention.dy}},
            {"seed", o.seed}};
  }
};

inline Pipeline load_pipeline(const Options& o, bool needs_pose) {
  require(!o.model.empty(), Errc::InvalidArgument, "--model is required");
  require(o.pose_source == "net" || o.pose_source == "solver", Errc::InvalidArgument,
          "--pose-source must be net or solver");
  Pipeline p{load_cascade(o.model), {}, load_shape3d(o.shape3d), {}, std::nullopt, o.pose_source};
  const Dataset ex = require_dataset(o.exemplars, "--exemplars", true);
  p.exemplars = exemplars_from(ex.samples);
  require(!p.exemplars.empty(), Errc::ParseError, "exemplar set is empty");
  p.convention = learn_box_convention(p.exemplars);
  if (needs_pose && o.pose_source == "net") {
    require(!o.pose_model.empty(), Errc::InvalidArgument, "--pose-model is required for --pose-source net");
    p.net = load_pose_net(o.pose_model);
  }
  return p;
}

inline int cmd_align(const Options& o, std::ostream& out) {
  const SchemeSpec spec = parse_scheme(o.scheme);
  const Pipeline p = load_pipeline(o, spec.needs_pose());
  std::vector<Sample> samples;
  if (!o.image.empty()) {
    require(o.data.empty(), Errc::InvalidArgument, "use either --image or --data");
    require(o.bbox.size() == 4, Errc::InvalidArgument, "--bbox takes x,y,w,h");
    Sample s;
    s.id = o.id;
    s.image = read_pgm(o.image);
    s.bb = {o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]};
    s.bb.validate();
    samples.push_back(std::move(s));
  } else {
    samples = require_dataset(o.data, "--data", false).samples;
  }
  const PoseProvider pose = spec.needs_pose() ? p.provider() : PoseProvider{};
  ensure_out_dir(o);
  nlohmann::json records = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    const HeadPose hp = pose ? pose(s) : HeadPose{};
    const InitSet inits = make_inits(spec, p.exemplars, p.shape3d, s.bb, hp, derive_seed(o.seed, i), p.convention);
    const Shape2D shape = run_cascade(p.model, s.image, s.bb, inits);
    write_pts(out_path(o, s.id + ".pts"), shape);
    nlohmann::json r = {{"id", s.id}, {"pts", s.id + ".pts"}};
    if (spec.needs_pose()) r["pose"] = pose_json(hp);
    records.push_back(std::move(r));
  }
  nlohmann::json meta = p.describe(o);
  meta["scheme"] = spec.to_string();
  write_text(out_path(o, "align.json"), nlohmann::json{{"config", meta}, {"outputs", records}}.dump(2) + "\n");
  out << "aligned " << samples.size() << " face(s)\n";
  return kOk;
}

inline void write_report_files(const Options& o, const EvalReport& r, const std::string& stem) {
  write_text(out_path(o, stem + ".csv"), report_csv(r));
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
  const SchemeSpec spec = parse_scheme(o.scheme);
  const Pipeline p = load_pipeline(o, spec.needs_pose());
  const auto test = sorted_by_id(require_dataset(o.data, "--data", false).samples);
  require(o.top_n >= 0, Errc::InvalidArgument, "--top-n must be >= 0");
  EvalContext ctx{&p.model, p.exemplars, &p.shape3d, p.convention,
                  spec.needs_pose() ? p.provider() : PoseProvider{}, o.seed};
  std::vector<SkippedSample> skipped;
  EvalReport r = evaluate_scheme(ctx, test, spec, &skipped);
  r.metadata = p.describe(o);
  r.metadata["scheme"] = spec.to_string();

  const auto n = std::min(static_cast<std::size_t>(o.top_n), r.results.size());
  const TopErrorAnalysis top = top_error_pose_analysis(r.results, r.poses, n);
  nlohmann::json top_records = nlohmann::json::array();
  for (const auto& t : top.records) top_records.push_back({{"id", t.id}, {"error", t.error}, {"pose", pose_json(t.pose)}});
  nlohmann::json skip = nlohmann::json::array();
  for (const auto& s : skipped) skip.push_back({{"id", s.id}, {"reason", s.reason}});

  nlohmann::json rep = report_json(r);
  rep["skipped"] = skip;
  rep["top_errors"] = {{"n", n},
                       {"records", top_records},
                       {"histogram", {{"bucket_width", top.histogram.bucket_width}, {"counts", top.histogram.counts}}}};
  ensure_out_dir(o);
  write_text(out_path(o, "report.json"), rep.dump(2) + "\n");
  write_report_files(o, r, "report");
  write_text(out_path(o, "ced.svg"), ced_svg(std::span<const EvalReport>(&r, 1), r.metadata));
  write_text(out_path(o, "top_errors.svg"), histogram_svg(top.histogram, r.metadata));
  out << r.scheme << ": mean error " << r.mean_error << ", failures " << r.failures.count << "/"
      << r.results.size() << "\n";
  return kOk;
}

inline std::vector<SchemeSpec> parse_scheme_list(const std::string& text) {
  std::vector<SchemeSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_scheme(item));
  require(!out.empty(), Errc::InvalidArgument, "--schemes is empty");
  return out;
}

inline int cmd_compare(const Options& o, std::ostream& out) {
  const auto specs = parse_scheme_list(o.schemes);
  const bool needs_pose = std::any_of(specs.begin(), specs.end(), [](const SchemeSpec& s) { return s.needs_pose(); });
  const Pipeline p = load_pipeline(o, needs_pose);
  const auto test = sorted_by_id(require_dataset(o.data, "--data", false).samples);
  EvalContext ctx{&p.model, p.exemplars, &p.shape3d, p.convention, needs_pose ? p.provider() : PoseProvider{},
                  o.seed};
  ComparisonReport c = compare_schemes(ctx, test, specs);
  nlohmann::json meta = p.describe(o);
  meta["schemes"] = o.schemes;
  for (auto& r : c.reports) r.metadata = meta;
  nlohmann::json j = comparison_json(c);
  j["config"] = meta;
  ensure_out_dir(o);
  write_text(out_path(o, "compare.json"), j.dump(2) + "\n");
  for (std::size_t i = 0; i < c.reports.size(); ++i) {
    std::string stem = c.reports[i].scheme;
    std::replace(stem.begin(), stem.end(), ':', '_');
    write_report_files(o, c.reports[i], "scheme_" + std::to_string(i) + "_" + stem);
  }
  write_text(out_path(o, "ced.svg"), ced_svg(c.reports, meta));
  for (const auto& r : c.reports)
    out << r.scheme << ": mean error " << r.mean_error << ", failures " << r.failures.count << "/"
        << r.results.size() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Head-pose-driven initialization for cascaded face alignment", "hpinit"};
  app.require_subcommand(1);
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Random seed");
    sub->add_option("--config", o.config_path, "JSON config file; flags override it");
    sub->add_option("--out-dir", o.out_dir, "Output directory");
    sub->add_option("--shape3d", o.shape3d, "Mean 3D face (68 'x y z' lines)");
  };
  auto pipeline_flags = [&](CLI::App* sub) {
    sub->add_option("--model", o.model, "Cascade model file");
    sub->add_option("--exemplars", o.exemplars, "Annotated training dataset");
    sub->add_option("--pose-model", o.pose_model, "Pose network file");
    sub->add_option("--pose-source", o.pose_source, "net | solver")->check(CLI::IsMember({"net", "solver"}));
  };

  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic train/test dataset");
  common(synth);
  synth->add_option("--count", o.count, "Total number of samples");
  synth->add_option("--train-fraction", o.train_fraction, "Share of samples in the training split");
  synth->add_option("--image-size", o.image_size, "Image side in pixels");
  synth->add_option("--noise", o.noise, "Pixel noise sigma");
  synth->add_option("--pitch-range", o.pitch_range, "LO,HI degrees")->delimiter(',')->expected(2);
  synth->add_option("--yaw-range", o.yaw_range, "LO,HI degrees")->delimiter(',')->expected(2);
  synth->add_option("--roll-range", o.roll_range, "LO,HI degrees")->delimiter(',')->expected(2);
  synth->add_option("--distribution", o.distribution, "uniform | gaussian");

  auto* annotate = app.add_subcommand("annotate-pose", "Fit poses to landmarks and write an annotated copy");
  common(annotate);
  annotate->add_option("--data", o.data, "Dataset directory")->required();

  auto* tpose = app.add_subcommand("train-pose", "Train the pose network");
  common(tpose);
  tpose->add_option("--data", o.data, "Annotated dataset directory")->required();
  tpose->add_option("--lr", o.lr, "Learning rate");
  tpose->add_option("--momentum", o.momentum, "Momentum");
  tpose->add_option("--batch-size", o.batch_size, "Batch size");
  tpose->add_option("--epochs", o.epochs, "Maximum epochs");
  tpose->add_option("--patience", o.patience, "Early-stop patience in epochs");
  tpose->add_option("--augment", o.pose_augment, "Jittered crops per sample");
  tpose->add_option("--jitter", o.jitter, "Box jitter, fraction of box size");
  tpose->add_option("--val-fraction", o.val_fraction, "Validation share");

  auto* tcasc = app.add_subcommand("train-cascade", "Train the fern cascade");
  common(tcasc);
  tcasc->add_option("--data", o.data, "Dataset directory")->required();
  tcasc->add_option("--stages", o.stages, "Number of stages");
  tcasc->add_option("--ferns", o.ferns, "Ferns per stage");
  tcasc->add_option("--depth", o.depth, "Fern depth");
  tcasc->add_option("--pool", o.pool, "Feature pool per stage");
  tcasc->add_option("--augment", o.cascade_augment, "Random initializations per sample");
  tcasc->add_option("--shrinkage", o.shrinkage, "Bin shrinkage");
  tcasc->add_option("--max-offset", o.max_offset, "Probe offset radius, box widths");

  auto* align = app.add_subcommand("align", "Align one image or a dataset");
  common(align);
  pipeline_flags(align);
  align->add_option("--scheme", o.scheme, "mean | random:n | 3d | knn:k");
  align->add_option("--data", o.data, "Dataset directory");
  align->add_option("--image", o.image, "PGM image");
  align->add_option("--bbox", o.bbox, "x,y,w,h")->delimiter(',')->expected(4);
  align->add_option("--id", o.id, "Output name for --image");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate one scheme on a test set");
  common(evaluate);
  pipeline_flags(evaluate);
  evaluate->add_option("--scheme", o.scheme, "mean | random:n | 3d | knn:k");
  evaluate->add_option("--data", o.data, "Test dataset directory")->required();
  evaluate->add_option("--top-n", o.top_n, "Samples in the top-error analysis");

  auto* compare = app.add_subcommand("compare", "Compare schemes on a test set");
  common(compare);
  pipeline_flags(compare);
  compare->add_option("--schemes", o.schemes, "Comma-separated scheme list");
  compare->add_option("--data", o.data, "Test dataset directory")->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << error_line("UsageError", kUsage, e.what()) << "\n";
    return kUsage;
  }

  try {
    const nlohmann::json cfg = load_config(o.config_path);
    if (synth->parsed()) return cmd_synth_gen(o, cfg, out);
    if (annotate->parsed()) return cmd_annotate_pose(o, out);
    if (tpose->parsed()) return cmd_train_pose(o, cfg, out);
    if (tcasc->parsed()) return cmd_train_cascade(o, cfg, out);
    if (align->parsed()) return cmd_align(o, out);
    if (evaluate->parsed()) return cmd_evaluate(o, out);
    if (compare->parsed()) return cmd_compare(o, out);
  } catch (const Error& e) {
    const int code = exit_code_for(e.code());
    err << error_line(to_string(e.code()), code, e.what()) << "\n";
    return code;
  } catch (const fs::filesystem_error& e) {
    err << error_line("IoError", kData, e.what()) << "\n";
    return kData;
  } catch (const nlohmann::json::exception& e) {
    err << error_line("ParseError", kData, e.what()) << "\n";
    return kData;
  }
  return kUsage;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), out, err);
}

}  // namespace cli
}  // namespace hpinit
