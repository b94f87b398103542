#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hpinit {

enum class Errc {
  InvalidArgument,
  NonOrthonormalInput,
  DegenerateProjection,
  DegenerateInput,
  EmptyIntersection,
  ShapeMismatch,
  NonFiniteLoss,
  NonFiniteUpdate,
  ParseError,
  CountMismatch,
  ZeroNormalizer,
  VersionMismatch,
  IoError,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::NonOrthonormalInput: return "NonOrthonormalInput";
    case Errc::DegenerateProjection: return "DegenerateProjection";
    case Errc::DegenerateInput: return "DegenerateInput";
    case Errc::EmptyIntersection: return "EmptyIntersection";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::NonFiniteUpdate: return "NonFiniteUpdate";
    case Errc::ParseError: return "ParseError";
    case Errc::CountMismatch: return "CountMismatch";
    case Errc::ZeroNormalizer: return "ZeroNormalizer";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Library-wide exception. Every throw site in hpinit uses this type so callers
/// can dispatch on code() instead of parsing messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace hpinit
