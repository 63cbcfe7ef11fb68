#include "cyclescope/align.hpp"

#include <algorithm>
#include <cmath>

#include "cyclescope/errors.hpp"

namespace cyclescope {

Nanos AffineClock::apply(Nanos local_ts) const {
  return static_cast<Nanos>(
      std::llround(offset_ns + drift * static_cast<double>(local_ts)));
}

const AffineClock& ClockCalibration::transform_for(const std::string& domain) const {
  auto it = transforms.find(domain);
  if (it == transforms.end())
    throw NoBeacons("no calibration for clock domain '" + domain + "'");
  return it->second;
}

ClockCalibration calibrate(std::span<const Beacon> beacons,
                           const CalibrationOptions& options) {
  ClockCalibration cal;
  cal.reference_domain = options.reference_domain;
  cal.transforms[options.reference_domain] = AffineClock{};
  cal.max_residual_ns[options.reference_domain] = 0.0;

  std::map<std::string, std::vector<const Beacon*>> by_domain;
  for (const auto& b : beacons) {
    if (b.domain == options.reference_domain) continue;
    by_domain[b.domain].push_back(&b);
  }

  for (const auto& [domain, group] : by_domain) {
    AffineClock clock;
    if (group.size() == 1) {
      clock.drift = 1.0;
      clock.offset_ns =
          static_cast<double>(group[0]->reference_ts - group[0]->local_ts);
    } else if (!options.estimate_drift) {
      double sum = 0.0;
      for (const auto* b : group)
        sum += static_cast<double>(b->reference_ts - b->local_ts);
      clock.drift = 1.0;
      clock.offset_ns = sum / static_cast<double>(group.size());
    } else {
      // least-squares line ref = offset + drift * local
      double mean_local = 0.0, mean_ref = 0.0;
      for (const auto* b : group) {
        mean_local += static_cast<double>(b->local_ts);
        mean_ref += static_cast<double>(b->reference_ts);
      }
      mean_local /= static_cast<double>(group.size());
      mean_ref /= static_cast<double>(group.size());
      double cov = 0.0, var = 0.0;
      for (const auto* b : group) {
        const double dl = static_cast<double>(b->local_ts) - mean_local;
        const double dr = static_cast<double>(b->reference_ts) - mean_ref;
        cov += dl * dr;
        var += dl * dl;
      }
      clock.drift = var > 0.0 ? cov / var : 1.0;
      clock.offset_ns = mean_ref - clock.drift * mean_local;
    }

    double max_residual = 0.0;
    for (const auto* b : group) {
      const double predicted =
          clock.offset_ns + clock.drift * static_cast<double>(b->local_ts);
      max_residual = std::max(
          max_residual, std::abs(predicted - static_cast<double>(b->reference_ts)));
    }
    if (max_residual > options.tolerance_ns) {
      throw InconsistentBeacons(
          "domain '" + domain + "' max beacon residual " +
          std::to_string(max_residual) + " ns exceeds tolerance " +
          std::to_string(options.tolerance_ns) + " ns");
    }
    cal.transforms[domain] = clock;
    cal.max_residual_ns[domain] = max_residual;
  }
  return cal;
}

std::vector<Beacon> extract_beacons(const Trace& trace) {
  std::vector<Beacon> beacons;
  for (const auto& e : trace.events) {
    if (e.kind != EventKind::Instant || e.name != "beacon") continue;
    auto ref = arg_int(e, "reference_ts");
    if (!ref) continue;
    beacons.push_back({e.source.clock_domain, e.start_ts, *ref});
  }
  return beacons;
}

void apply_calibration(Trace& trace, const ClockCalibration& calibration) {
  if (trace.calibrated)
    throw AlreadyCalibrated("trace timestamps are already on the unified timeline");
  for (auto& e : trace.events) {
    const auto& clock = calibration.transform_for(e.source.clock_domain);
    if (clock.is_identity()) continue;
    const Nanos start = clock.apply(e.start_ts);
    if (e.kind == EventKind::Span) {
      // durations scale by drift only
      e.duration = static_cast<Nanos>(
          std::llround(clock.drift * static_cast<double>(e.duration)));
    }
    e.start_ts = start;
  }
  trace.calibrated = true;
  trace.sort_events();
}

CorrelationIndex link_correlations(const Trace& trace) {
  std::map<std::uint64_t, EventId> hosts;
  std::map<std::uint64_t, EventId> devices;
  for (const auto& e : trace.events) {
    if (!e.correlation_id) continue;
    const auto id = *e.correlation_id;
    if (e.category == EventCategory::RuntimeApi) {
      if (auto [it, inserted] = hosts.emplace(id, e.event_id); !inserted) {
        throw DuplicateCorrelation("correlation id " + std::to_string(id) +
                                   " appears on host events " +
                                   std::to_string(it->second) + " and " +
                                   std::to_string(e.event_id));
      }
    } else if (e.category == EventCategory::GpuKernel ||
               e.category == EventCategory::MemCopy) {
      if (auto [it, inserted] = devices.emplace(id, e.event_id); !inserted) {
        throw DuplicateCorrelation("correlation id " + std::to_string(id) +
                                   " appears on device events " +
                                   std::to_string(it->second) + " and " +
                                   std::to_string(e.event_id));
      }
    }
  }

  CorrelationIndex index;
  for (const auto& [id, host_event] : hosts) {
    auto dev = devices.find(id);
    if (dev == devices.end()) {
      index.orphan_hosts.push_back(host_event);
    } else {
      index.pairs.push_back({id, host_event, dev->second});
    }
  }
  for (const auto& [id, device_event] : devices) {
    if (hosts.find(id) == hosts.end()) index.orphan_devices.push_back(device_event);
  }
  return index;
}

void TopologyMap::insert(const std::string& comm_hash, int rank,
                         DeviceLocation loc) {
  auto [it, inserted] = entries_.emplace(Key{comm_hash, rank}, loc);
  if (!inserted && !(it->second == loc)) {
    throw ConflictingTopology("(" + comm_hash + ", " + std::to_string(rank) +
                              ") already maps to " + it->second.label() +
                              ", refusing " + loc.label());
  }
}

const DeviceLocation* TopologyMap::find(const std::string& comm_hash,
                                        int rank) const {
  auto it = entries_.find(Key{comm_hash, rank});
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<TopologyMap::Key> TopologyMap::ranks_at(
    const DeviceLocation& loc) const {
  std::vector<Key> keys;
  for (const auto& [key, value] : entries_)
    if (value == loc) keys.push_back(key);
  return keys;
}

TopologyMap resolve_topology(const Trace& trace) {
  TopologyMap map;
  for (const auto& e : trace.events) {
    if (e.category != EventCategory::CollectiveComm) continue;
    auto comm = arg_string(e, "commHash");
    auto rank = arg_int(e, "rank");
    auto host = arg_string(e, "hostname");
    auto device = arg_int(e, "device");
    if (!comm || !rank || !host || !device) continue;
    map.insert(*comm, static_cast<int>(*rank),
               {*host, static_cast<int>(*device)});
  }
  return map;
}

Trace merge_traces(std::vector<Trace> traces) {
  Trace merged;
  std::size_t total = 0;
  for (const auto& t : traces) total += t.events.size();
  merged.events.reserve(total);
  for (auto& t : traces) {
    merged.calibrated = merged.calibrated || t.calibrated;
    std::move(t.events.begin(), t.events.end(), std::back_inserter(merged.events));
  }
  merged.sort_events();
  EventId next = 1;
  for (auto& e : merged.events) e.event_id = next++;
  return merged;
}

}  // namespace cyclescope
