#pragma once

// On-disk dataset layout:
//   manifest.json   {"format", "version", "config", "samples": [{"id", "image", "pts"}]}
//   bboxes.csv      id,x,y,w,h
//   poses.csv       id,pitch,yaw,roll
//   images/<id>.pgm
//   pts/<id>.pts

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hpinit/data.hpp"
#include "hpinit/error.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/image.hpp"
#include "hpinit/init.hpp"

namespace hpinit {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;
inline constexpr double kDefaultBoxDilation = 0.2;

/// Round-trip exact decimal form of a double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), Errc::IoError, "cannot write " + path);
  out << text;
  require(static_cast<bool>(out), Errc::IoError, "write failed: " + path);
}

// ---------------------------------------------------------------------------
// CSV tables keyed by id

using CsvRows = std::map<std::string, std::vector<double>>;

/// Reads "id,v1,...,vn" rows after a header line; `header` must match exactly.
inline CsvRows read_id_csv(const std::string& path, const std::string& header) {
  std::istringstream in(read_text(path));
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw Error(Errc::ParseError, path + ":" + std::to_string(lineno) + ": " + msg);
  };
  ++lineno;
  if (!std::getline(in, line) || line != header) fail("expected header '" + header + "'");
  const auto cols = static_cast<std::size_t>(std::count(header.begin(), header.end(), ','));
  CsvRows rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, cell;
    std::getline(ls, id, ',');
    if (id.empty()) fail("empty id");
    std::vector<double> vals;
    while (std::getline(ls, cell, ',')) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        fail("bad number '" + cell + "'");
      }
      if (used != cell.size() || !std::isfinite(v)) fail("bad number '" + cell + "'");
      vals.push_back(v);
    }
    if (vals.size() != cols) fail("expected " + std::to_string(cols) + " values");
    if (!rows.emplace(id, std::move(vals)).second) fail("duplicate id " + id);
  }
  return rows;
}

inline std::string bbox_csv(const std::vector<Sample>& samples) {
  std::string out = "id,x,y,w,h\n";
  for (const auto& s : samples)
    out += s.id + "," + format_double(s.bb.x) + "," + format_double(s.bb.y) + "," +
           format_double(s.bb.w) + "," + format_double(s.bb.h) + "\n";
  return out;
}

inline std::string pose_csv(const std::vector<Sample>& samples) {
  std::string out = "id,pitch,yaw,roll\n";
  for (const auto& s : samples)
    out += s.id + "," + format_double(s.pose.pitch) + "," + format_double(s.pose.yaw) + "," +
           format_double(s.pose.roll) + "\n";
  return out;
}

inline constexpr const char* kBboxHeader = "id,x,y,w,h";
inline constexpr const char* kPoseHeader = "id,pitch,yaw,roll";

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  nlohmann::json config = nlohmann::json::object();  // whatever produced the data
  std::vector<Sample> samples;
  bool has_poses = false;
};

/// Writes the full layout under `dir`. Images are stored as 16-bit PGM.
inline void save_dataset(const std::string& dir, const Dataset& ds) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "pts");
  nlohmann::json records = nlohmann::json::array();
  for (const auto& s : ds.samples) {
    nlohmann::json r = {{"id", s.id}, {"image", "images/" + s.id + ".pgm"}};
    write_pgm((fs::path(dir) / "images" / (s.id + ".pgm")).string(), s.image);
    if (s.landmarks) {
      r["pts"] = "pts/" + s.id + ".pts";
      write_pts((fs::path(dir) / "pts" / (s.id + ".pts")).string(), *s.landmarks);
    }
    records.push_back(std::move(r));
  }
  const nlohmann::json manifest = {{"format", "hpinit-dataset"},
                                   {"version", kManifestVersion},
                                   {"config", ds.config},
                                   {"samples", records}};
  write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  write_text((fs::path(dir) / "bboxes.csv").string(), bbox_csv(ds.samples));
  if (ds.has_poses) write_text((fs::path(dir) / "poses.csv").string(), pose_csv(ds.samples));
}

/// Loads a dataset directory. Samples without a bbox row get their landmark box
/// dilated by 20%; poses come from poses.csv when present.
inline Dataset load_dataset(const std::string& dir) {
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, mpath + ": " + e.what());
  }
  require(manifest.value("format", "") == "hpinit-dataset", Errc::ParseError,
          mpath + ": not a dataset manifest");
  require(manifest.value("version", 0) == kManifestVersion, Errc::VersionMismatch,
          mpath + ": unsupported manifest version");

  Dataset ds;
  ds.config = manifest.value("config", nlohmann::json::object());
  CsvRows boxes;
  if (fs::exists(fs::path(dir) / "bboxes.csv"))
    boxes = read_id_csv((fs::path(dir) / "bboxes.csv").string(), kBboxHeader);
  CsvRows poses;
  ds.has_poses = fs::exists(fs::path(dir) / "poses.csv");
  if (ds.has_poses) poses = read_id_csv((fs::path(dir) / "poses.csv").string(), kPoseHeader);

  try {
    for (const auto& r : manifest.at("samples")) {
      Sample s;
      s.id = r.at("id").get<std::string>();
      s.image = read_pgm((fs::path(dir) / r.at("image").get<std::string>()).string());
      if (r.contains("pts")) s.landmarks = load_pts((fs::path(dir) / r.at("pts").get<std::string>()).string());
      if (auto it = boxes.find(s.id); it != boxes.end()) {
        s.bb = {it->second[0], it->second[1], it->second[2], it->second[3]};
        require(s.bb.valid(), Errc::ParseError, "bboxes.csv: invalid box for " + s.id);
      } else {
        require(s.landmarks.has_value(), Errc::ParseError, s.id + ": no bbox and no landmarks");
        s.bb = dilated_landmark_box(*s.landmarks, kDefaultBoxDilation);
      }
      if (ds.has_poses) {
        auto it = poses.find(s.id);
        require(it != poses.end(), Errc::ParseError, "poses.csv: missing id " + s.id);
        s.pose = {it->second[0], it->second[1], it->second[2]};
      }
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, mpath + ": " + e.what());
  }
  return ds;
}

/// Training exemplars from annotated samples. Every sample needs landmarks.
inline std::vector<TrainExemplar> exemplars_from(const std::vector<Sample>& samples) {
  std::vector<TrainExemplar> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    require(s.landmarks.has_value(), Errc::InvalidArgument, s.id + ": exemplar without landmarks");
    out.push_back({s.id, *s.landmarks, s.bb, s.pose});
  }
  return out;
}

/// Compact exemplar pose index (same grammar as poses.csv).
inline void write_pose_index(const std::string& path, const std::vector<TrainExemplar>& exemplars) {
  std::string out = std::string(kPoseHeader) + "\n";
  for (const auto& e : exemplars)
    out += e.id + "," + format_double(e.pose.pitch) + "," + format_double(e.pose.yaw) + "," +
           format_double(e.pose.roll) + "\n";
  write_text(path, out);
}

}  // namespace hpinit
