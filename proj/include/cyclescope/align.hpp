#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "cyclescope/trace.hpp"

namespace cyclescope {

// reference_ts = offset + drift * local_ts
struct AffineClock {
  double offset_ns = 0.0;
  double drift = 1.0;

  Nanos apply(Nanos local_ts) const;
  bool is_identity() const { return offset_ns == 0.0 && drift == 1.0; }
};

struct Beacon {
  std::string domain;
  Nanos local_ts = 0;
  Nanos reference_ts = 0;
};

struct CalibrationOptions {
  std::string reference_domain = "reference";
  double tolerance_ns = 1000.0;  // 1 µs
  bool estimate_drift = false;   // needs >= 2 beacons per domain
};

struct ClockCalibration {
  std::string reference_domain;
  std::map<std::string, AffineClock> transforms;   // includes identity for reference
  std::map<std::string, double> max_residual_ns;   // fit quality per domain

  const AffineClock& transform_for(const std::string& domain) const;
};

// Least-squares affine fit per clock domain. A single beacon pins the offset
// with drift fixed at 1.0. Throws NoBeacons for a domain with no usable
// beacons when drift estimation needs them, InconsistentBeacons when the max
// residual exceeds the tolerance.
ClockCalibration calibrate(std::span<const Beacon> beacons,
                           const CalibrationOptions& options = {});

// Inline beacons: Instant events named "beacon" whose args carry the
// reference-clock nanosecond timestamp under "reference_ts".
std::vector<Beacon> extract_beacons(const Trace& trace);

// Rewrites every event timestamp onto the reference timeline and sets the
// calibrated flag. Throws AlreadyCalibrated on a second application; domains
// without a transform throw NoBeacons.
void apply_calibration(Trace& trace, const ClockCalibration& calibration);

struct CorrelationIndex {
  struct Pair {
    std::uint64_t correlation_id = 0;
    EventId host_event = 0;
    EventId device_event = 0;
  };

  std::vector<Pair> pairs;                 // sorted by correlation id
  std::vector<EventId> orphan_devices;     // device-side ids with no host partner
  std::vector<EventId> orphan_hosts;       // host ids with no device partner

  std::size_t size() const { return pairs.size(); }
};

// Pairs every RuntimeApi event with the GpuKernel/MemCopy event sharing its
// correlation id. Throws DuplicateCorrelation when an id repeats on the same
// side.
CorrelationIndex link_correlations(const Trace& trace);

struct DeviceLocation {
  std::string node;
  int device = 0;

  std::string label() const { return node + "/gpu" + std::to_string(device); }
  bool operator==(const DeviceLocation&) const = default;
};

// (commHash, rank) -> physical (node, device), built from CollectiveComm
// event args. Insertion of an identical entry is idempotent; a conflicting
// one throws ConflictingTopology. Resolution is order-independent.
class TopologyMap {
public:
  using Key = std::pair<std::string, int>;  // (commHash, rank)

  void insert(const std::string& comm_hash, int rank, DeviceLocation loc);
  const DeviceLocation* find(const std::string& comm_hash, int rank) const;
  const std::map<Key, DeviceLocation>& entries() const { return entries_; }
  std::vector<Key> ranks_at(const DeviceLocation& loc) const;
  std::size_t size() const { return entries_.size(); }

private:
  std::map<Key, DeviceLocation> entries_;
};

TopologyMap resolve_topology(const Trace& trace);

// Merges already-calibrated traces into one timeline; events are re-numbered
// sequentially in canonical order so ids stay unique.
Trace merge_traces(std::vector<Trace> traces);

}  // namespace cyclescope
