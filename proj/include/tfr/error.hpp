#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tfr {

/// Failure categories raised by the library. The CLI maps them to exit codes.
enum class Errc {
  // data model / IO
  MalformedHeader,
  DimensionMismatch,
  NonFiniteValue,
  LabelOutOfRange,
  IoError,
  InvariantViolation,
  DuplicateIdentifier,
  ValueOutOfRange,
  ParseError,
  // numerics
  ShapeMismatch,
  DegenerateInput,
  NonFinite,
  TooFewSamples,
  NoValidTriplet,
  IndexOutOfRange,
  ZeroDenominator,
  DegeneratePool,
  TooFewCandidates,
  EmptyPool,
  StaleCache,
  Divergence,
  EmptyColumn,
  RowNotNormalized,
  EmCollapse,
  SvdFailure,
  ZeroVariance,
  RankDeficiency,
  LengthMismatch,
  DegenerateRanks,
  MissingQValue,
  IdMismatch,
  MetricPrecondition,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace tfr
