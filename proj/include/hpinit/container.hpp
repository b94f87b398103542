#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hpinit/error.hpp"

namespace hpinit {

// Model file layout, all integers little-endian:
//   8-byte magic | u32 version | u64 header length | JSON header |
//   u64 float count | float32 payload
// The header carries architecture/config metadata; the payload is flat parameters.

struct Container {
  nlohmann::json header;
  std::vector<float> payload;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  std::uint64_t u64() { return le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    require(n <= data_.size() - pos_, Errc::ParseError, path_ + ": truncated model file");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const char (&magic)[9], std::uint32_t version,
                                    const Container& c) {
  std::string out(magic, 8);
  detail::put_u32(out, version);
  const std::string header = c.header.dump();
  detail::put_u64(out, header.size());
  out += header;
  detail::put_u64(out, c.payload.size());
  for (float f : c.payload) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  return out;
}

inline void write_container(const std::string& path, const char (&magic)[9], std::uint32_t version,
                            const Container& c) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), Errc::IoError, "cannot write " + path);
  const std::string bytes = encode_container(magic, version, c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), Errc::IoError, "short write to " + path);
}

inline Container decode_container(const std::string& data, const char (&magic)[9],
                                  std::uint32_t version, const std::string& path) {
  detail::Reader r(data, path);
  require(r.bytes(8) == std::string(magic, 8), Errc::ParseError, path + ": wrong file type");
  const std::uint32_t v = r.u32();
  require(v == version, Errc::VersionMismatch,
          path + ": version " + std::to_string(v) + ", expected " + std::to_string(version));
  Container c;
  const std::uint64_t hlen = r.u64();
  try {
    c.header = nlohmann::json::parse(r.bytes(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path + ": bad header: " + e.what());
  }
  const std::uint64_t n = r.u64();
  require(n <= data.size() / 4, Errc::ParseError, path + ": bad payload length");
  c.payload.resize(n);
  const std::string raw = r.bytes(n * 4);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + b])) << (8 * b);
    std::memcpy(&c.payload[i], &bits, 4);
  }
  require(r.at_end(), Errc::ParseError, path + ": trailing bytes");
  return c;
}

inline Container read_container(const std::string& path, const char (&magic)[9],
                                std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::IoError, "cannot open " + path);
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(data, magic, version, path);
}

}  // namespace hpinit
