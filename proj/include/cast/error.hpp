#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cast {

enum class ErrorCode {
  // cohort
  MissingColumn,
  NonPositiveTime,
  ParseError,
  ZeroVariance,
  TooFewEvents,
  // survival
  EmptyInput,
  NonSurvivalCurve,
  EmptyGroup,
  // propensity
  SingleClass,
  NonConvergence,
  DimensionMismatch,
  EmptyAfterTrim,
  ConstantColumn,
  // forest
  NoValidSubjects,
  DegenerateArm,
  TooSmall,
  // trajectory
  SingularDesign,
  TooFewPoints,
  // heterogeneity
  NonFiniteModelOutput,
  // refutation
  CorrelationUnachievable,
  // synth
  InfeasibleEffect,
  NonPositiveDose,
  // plumbing
  ConfigError,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::NonPositiveTime: return "NonPositiveTime";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::TooFewEvents: return "TooFewEvents";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NonSurvivalCurve: return "NonSurvivalCurve";
    case ErrorCode::EmptyGroup: return "EmptyGroup";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyAfterTrim: return "EmptyAfterTrim";
    case ErrorCode::ConstantColumn: return "ConstantColumn";
    case ErrorCode::NoValidSubjects: return "NoValidSubjects";
    case ErrorCode::DegenerateArm: return "DegenerateArm";
    case ErrorCode::TooSmall: return "TooSmall";
    case ErrorCode::SingularDesign: return "SingularDesign";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::NonFiniteModelOutput: return "NonFiniteModelOutput";
    case ErrorCode::CorrelationUnachievable: return "CorrelationUnachievable";
    case ErrorCode::InfeasibleEffect: return "InfeasibleEffect";
    case ErrorCode::NonPositiveDose: return "NonPositiveDose";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cast
