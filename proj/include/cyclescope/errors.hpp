#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace cyclescope {

// Base for all recoverable engine errors. The CLI maps these to exit code 1
// and a machine-readable JSON record on stderr; `type()` is the stable
// machine-readable identifier, what() the human-readable message.
class EngineError : public std::runtime_error {
public:
  EngineError(std::string type, const std::string& message)
      : std::runtime_error(message), type_(std::move(type)) {}

  const std::string& type() const noexcept { return type_; }

private:
  std::string type_;
};

struct MalformedTrace : EngineError {
  explicit MalformedTrace(const std::string& m) : EngineError("malformed_trace", m) {}
};
struct NoBeacons : EngineError {
  explicit NoBeacons(const std::string& m) : EngineError("no_beacons", m) {}
};
struct InconsistentBeacons : EngineError {
  explicit InconsistentBeacons(const std::string& m) : EngineError("inconsistent_beacons", m) {}
};
struct AlreadyCalibrated : EngineError {
  explicit AlreadyCalibrated(const std::string& m) : EngineError("already_calibrated", m) {}
};
struct DuplicateCorrelation : EngineError {
  explicit DuplicateCorrelation(const std::string& m) : EngineError("duplicate_correlation", m) {}
};
struct ConflictingTopology : EngineError {
  explicit ConflictingTopology(const std::string& m) : EngineError("conflicting_topology", m) {}
};
struct NoAnchorFound : EngineError {
  explicit NoAnchorFound(const std::string& m) : EngineError("no_anchor_found", m) {}
};
struct MissingWorkloadArgs : EngineError {
  explicit MissingWorkloadArgs(const std::string& m) : EngineError("missing_workload_args", m) {}
};
struct InsufficientData : EngineError {
  explicit InsufficientData(const std::string& m) : EngineError("insufficient_data", m) {}
};
struct FeatureMismatch : EngineError {
  explicit FeatureMismatch(const std::string& m) : EngineError("feature_mismatch", m) {}
};
struct EmptyTestSet : EngineError {
  explicit EmptyTestSet(const std::string& m) : EngineError("empty_test_set", m) {}
};
struct NonPositiveLatency : EngineError {
  explicit NonPositiveLatency(const std::string& m) : EngineError("non_positive_latency", m) {}
};
struct InsufficientCalibration : EngineError {
  explicit InsufficientCalibration(const std::string& m) : EngineError("insufficient_calibration", m) {}
};
struct NoLabels : EngineError {
  explicit NoLabels(const std::string& m) : EngineError("no_labels", m) {}
};
struct EmptySeries : EngineError {
  explicit EmptySeries(const std::string& m) : EngineError("empty_series", m) {}
};
struct InsufficientCycles : EngineError {
  explicit InsufficientCycles(const std::string& m) : EngineError("insufficient_cycles", m) {}
};
struct InvalidProfile : EngineError {
  explicit InvalidProfile(const std::string& m) : EngineError("invalid_profile", m) {}
};
struct ConfigConflict : EngineError {
  explicit ConfigConflict(const std::string& m) : EngineError("config_conflict", m) {}
};
struct ConfigError : EngineError {
  explicit ConfigError(const std::string& m) : EngineError("config_error", m) {}
};
struct ModelFormatError : EngineError {
  explicit ModelFormatError(const std::string& m) : EngineError("model_format_error", m) {}
};
struct IoError : EngineError {
  explicit IoError(const std::string& m) : EngineError("io_error", m) {}
};

}  // namespace cyclescope
