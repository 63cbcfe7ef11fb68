#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "cyclescope/align.hpp"
#include "cyclescope/baseline.hpp"
#include "cyclescope/cycles.hpp"
#include "cyclescope/detector.hpp"
#include "cyclescope/rca.hpp"

namespace cyclescope {

// Everything the pipeline subcommands read from one declarative JSON file.
// Command-line flags override file values; unknown keys are rejected.
struct RunConfig {
  CycleConfig cycle;
  PipelineOptions pipeline;
  FeatureSet feature_set = FeatureSet::Physical;
  GbdtParams gbdt;
  FitOptions fit;
  ControlConfig detector;
  EscalationPolicy escalation;
  MetricMap metric_map = MetricMap::defaults();
  CalibrationOptions calibration;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

// Key-by-key reference of the config schema with defaults; the CLI prints
// this from --help so the contract documents itself.
std::string config_reference_text();

}  // namespace cyclescope
