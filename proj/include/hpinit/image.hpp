#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hpinit/error.hpp"

namespace hpinit {

/// Row-major grayscale image with intensities in [0, 1].
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(int width, int height, float fill = 0.0f)
      : width_(width), height_(height),
        pixels_(static_cast<std::size_t>(checked_area(width, height)), fill) {}
  GrayImage(int width, int height, std::vector<float> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    require(pixels_.size() == static_cast<std::size_t>(checked_area(width, height)),
            Errc::InvalidArgument, "pixel count does not match image dimensions");
    for (float v : pixels_)
      require(std::isfinite(v) && v >= 0.0f && v <= 1.0f, Errc::InvalidArgument,
              "image intensity outside [0, 1]");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return pixels_.empty(); }

  float at(int x, int y) const { return pixels_[index(x, y)]; }
  float& at(int x, int y) { return pixels_[index(x, y)]; }

  const std::vector<float>& pixels() const { return pixels_; }
  std::vector<float>& pixels() { return pixels_; }

  /// Bilinear sample; coordinates outside the image clamp to the nearest pixel.
  double sample_clamped(double x, double y) const {
    x = std::clamp(x, 0.0, static_cast<double>(width_ - 1));
    y = std::clamp(y, 0.0, static_cast<double>(height_ - 1));
    const int x0 = std::min(static_cast<int>(x), width_ - 1);
    const int y0 = std::min(static_cast<int>(y), height_ - 1);
    const int x1 = std::min(x0 + 1, width_ - 1);
    const int y1 = std::min(y0 + 1, height_ - 1);
    const double fx = x - x0, fy = y - y0;
    const double top = (1 - fx) * at(x0, y0) + fx * at(x1, y0);
    const double bot = (1 - fx) * at(x0, y1) + fx * at(x1, y1);
    return (1 - fy) * top + fy * bot;
  }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  static long checked_area(int w, int h) {
    require(w > 0 && h > 0, Errc::InvalidArgument, "image dimensions must be positive");
    return static_cast<long>(w) * h;
  }
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<float> pixels_;
};

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples).
inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), Errc::IoError, "cannot write " + path);
  out << "P5\n" << img.width() << " " << img.height() << "\n65535\n";
  std::vector<unsigned char> buf;
  buf.reserve(img.pixels().size() * 2);
  for (float v : img.pixels()) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 65535.0f));
    buf.push_back(static_cast<unsigned char>(q >> 8));
    buf.push_back(static_cast<unsigned char>(q & 0xff));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(static_cast<bool>(out), Errc::IoError, "short write to " + path);
}

/// Reads 8- or 16-bit binary PGM.
inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::IoError, "cannot open " + path);
  auto next_token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    return tok;
  };
  require(next_token() == "P5", Errc::ParseError, path + ": not a binary PGM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw Error(Errc::ParseError, path + ": malformed PGM header");
  }
  require(w > 0 && h > 0 && maxval > 0 && maxval <= 65535, Errc::ParseError,
          path + ": bad PGM header values");
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(in.gcount() == static_cast<std::streamsize>(buf.size()), Errc::ParseError,
          path + ": truncated PGM data");
  std::vector<float> px(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < px.size(); ++i) {
    const unsigned v = bytes == 2 ? (unsigned(buf[2 * i]) << 8) | buf[2 * i + 1] : buf[i];
    px[i] = std::min(1.0f, static_cast<float>(v) / static_cast<float>(maxval));
  }
  return GrayImage(w, h, std::move(px));
}

}  // namespace hpinit
