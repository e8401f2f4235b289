#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cg {

enum class ErrorCode {
  ShapeMismatch,
  UnsupportedKind,
  NonFiniteValue,
  UnknownLayer,
  CyclicGraph,
  KindNotDifferentiableHere,
  ParseError,
  DanglingTensorRef,
  ShapeContractViolation,
  ChecksumMismatch,
  EmptyProbeDir,
  DecodeError,
  DimensionMismatch,
  SingleClusterUndefined,
  NotAConvLayer,
  NoUniquePredecessor,
  EmptyCluster,
  EmptyProbe,
  LayerOrderViolation,
  InsufficientSamples,
  NoAnalyzedLayers,
  MissingUpstreamArtifact,
  ConfigInvalid,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::UnsupportedKind: return "UnsupportedKind";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::UnknownLayer: return "UnknownLayer";
    case ErrorCode::CyclicGraph: return "CyclicGraph";
    case ErrorCode::KindNotDifferentiableHere: return "KindNotDifferentiableHere";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::DanglingTensorRef: return "DanglingTensorRef";
    case ErrorCode::ShapeContractViolation: return "ShapeContractViolation";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::EmptyProbeDir: return "EmptyProbeDir";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::SingleClusterUndefined: return "SingleClusterUndefined";
    case ErrorCode::NotAConvLayer: return "NotAConvLayer";
    case ErrorCode::NoUniquePredecessor: return "NoUniquePredecessor";
    case ErrorCode::EmptyCluster: return "EmptyCluster";
    case ErrorCode::EmptyProbe: return "EmptyProbe";
    case ErrorCode::LayerOrderViolation: return "LayerOrderViolation";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::NoAnalyzedLayers: return "NoAnalyzedLayers";
    case ErrorCode::MissingUpstreamArtifact: return "MissingUpstreamArtifact";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace cg
