#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cpur {

enum class Errc {
  NonFinite,
  EmptyVector,
  AllZero,
  LabelOutOfRange,
  TauOutOfRange,
  DegenerateTopProb,
  NonFiniteLogits,
  LengthMismatch,
  AlphaOutOfRange,
  BadGrid,
  DomainError,
  ZOutOfRange,
  ShapeMismatch,
  MissingCleanLogits,
  MissingBetaParams,
  DimMismatch,
  MissingLabel,
  ConfigError,
  ZeroLoss,
  ParseError,
  Io,
};

constexpr std::string_view errc_name(Errc e) noexcept {
  switch (e) {
    case Errc::NonFinite: return "NonFinite";
    case Errc::EmptyVector: return "EmptyVector";
    case Errc::AllZero: return "AllZero";
    case Errc::LabelOutOfRange: return "LabelOutOfRange";
    case Errc::TauOutOfRange: return "TauOutOfRange";
    case Errc::DegenerateTopProb: return "DegenerateTopProb";
    case Errc::NonFiniteLogits: return "NonFiniteLogits";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::AlphaOutOfRange: return "AlphaOutOfRange";
    case Errc::BadGrid: return "BadGrid";
    case Errc::DomainError: return "DomainError";
    case Errc::ZOutOfRange: return "ZOutOfRange";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::MissingCleanLogits: return "MissingCleanLogits";
    case Errc::MissingBetaParams: return "MissingBetaParams";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::MissingLabel: return "MissingLabel";
    case Errc::ConfigError: return "ConfigError";
    case Errc::ZeroLoss: return "ZeroLoss";
    case Errc::ParseError: return "ParseError";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

/// Process exit code for an error kind: 2 config, 3 data, 4 numeric.
constexpr int exit_code_for(Errc e) noexcept {
  switch (e) {
    case Errc::ConfigError:
    case Errc::AlphaOutOfRange:
    case Errc::BadGrid:
    case Errc::MissingBetaParams:
    case Errc::MissingCleanLogits:
    case Errc::MissingLabel:
      return 2;
    case Errc::ParseError:
    case Errc::Io:
    case Errc::LabelOutOfRange:
    case Errc::LengthMismatch:
    case Errc::ShapeMismatch:
    case Errc::DimMismatch:
    case Errc::EmptyVector:
      return 3;
    default:
      return 4;
  }
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace cpur
