#include "cyclescope/simkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cyclescope/align.hpp"
#include "cyclescope/errors.hpp"
#include "cyclescope/rca.hpp"
#include "cyclescope/rng.hpp"
#include "cyclescope/trace_io.hpp"

namespace cyclescope {

using nlohmann::json;

void WorkloadProfile::validate() const {
  auto range_ok = [](std::int64_t lo, std::int64_t hi) {
    return lo >= 0 && hi >= lo;
  };
  if (!range_ok(batch_min, batch_max) || !range_ok(input_min, input_max) ||
      !range_ok(output_min, output_max) || batch_min < 1)
    throw InvalidProfile("workload ranges must satisfy 1 <= min <= max");
  if (distribution == Distribution::Fixed &&
      (fixed_batch < 1 || fixed_input < 0 || fixed_output < 0))
    throw InvalidProfile("fixed workload values out of range");
}

std::vector<CycleWorkload> generate_workload(const WorkloadProfile& profile,
                                             std::size_t n_cycles,
                                             std::uint64_t seed) {
  profile.validate();
  std::vector<CycleWorkload> cycles;
  cycles.reserve(n_cycles);
  Rng rng(seed);

  const bool fixed = profile.distribution == WorkloadProfile::Distribution::Fixed;
  auto sample_batch = [&] {
    return fixed ? profile.fixed_batch
                 : rng.log_uniform_int(profile.batch_min, profile.batch_max);
  };
  auto sample_input = [&] {
    return fixed ? profile.fixed_input
                 : rng.log_uniform_int(profile.input_min, profile.input_max);
  };

  // (B, L_in) re-sample every cycle: continuous batching changes the batch
  // composition each iteration. A request's lifetime only governs how far
  // L_out has advanced and where prefills land.
  std::uint64_t request_id = 0;
  while (cycles.size() < n_cycles) {
    const std::int64_t total_output =
        fixed ? std::max<std::int64_t>(1, profile.fixed_output)
              : rng.log_uniform_int(std::max<std::int64_t>(1, profile.output_min),
                                    profile.output_max);

    CycleWorkload prefill;
    prefill.index = cycles.size();
    prefill.stage = Stage::Prefill;
    prefill.batch = sample_batch();
    prefill.input_len = sample_input();
    prefill.output_len = 0;
    prefill.request_id = request_id;
    cycles.push_back(prefill);

    for (std::int64_t step = 1; step <= total_output && cycles.size() < n_cycles;
         ++step) {
      CycleWorkload decode;
      decode.index = cycles.size();
      decode.stage = Stage::Decode;
      decode.batch = sample_batch();
      decode.input_len = sample_input();
      decode.output_len = step;
      decode.request_id = request_id;
      cycles.push_back(decode);
    }
    ++request_id;
  }
  cycles.resize(std::min(cycles.size(), n_cycles));
  return cycles;
}

double GroundTruthModel::t_gpu(std::int64_t batch, std::int64_t kv_slots) const {
  return gpu_per_token_slot * static_cast<double>(kv_slots) +
         gpu_per_batch * static_cast<double>(batch) + gpu_fixed;
}

double GroundTruthModel::t_cpu(std::int64_t batch) const {
  return cpu_fixed + cpu_per_batch * static_cast<double>(batch);
}

double GroundTruthModel::exec_latency(std::int64_t batch,
                                      std::int64_t kv_slots) const {
  const double gpu = t_gpu(batch, kv_slots);
  const double cpu = t_cpu(batch);
  return overlap ? std::max(gpu, cpu) : gpu + cpu;
}

void GroundTruthModel::validate() const {
  if (gpu_per_token_slot < 0 || gpu_per_batch < 0 || gpu_fixed < 0 ||
      cpu_fixed < 0 || cpu_per_batch < 0 || noise < 0 || prefill_noise < 0)
    throw ConfigConflict("ground-truth coefficients and noise must be >= 0");
}

const char* to_string(FaultFamily family) {
  switch (family) {
    case FaultFamily::CpuContention: return "cpu_contention";
    case FaultFamily::CpuFreqDrop: return "cpu_freq_drop";
    case FaultFamily::GpuContention: return "gpu_contention";
    case FaultFamily::GpuClockLock: return "gpu_clock_lock";
    case FaultFamily::MemoryThrash: return "memory_thrash";
    case FaultFamily::NvlinkSaturation: return "nvlink_saturation";
    case FaultFamily::PcieBottleneck: return "pcie_bottleneck";
    case FaultFamily::BusContention: return "bus_contention";
  }
  return "?";
}

FaultFamily fault_family_from_string(const std::string& s) {
  for (auto family : {FaultFamily::CpuContention, FaultFamily::CpuFreqDrop,
                      FaultFamily::GpuContention, FaultFamily::GpuClockLock,
                      FaultFamily::MemoryThrash, FaultFamily::NvlinkSaturation,
                      FaultFamily::PcieBottleneck, FaultFamily::BusContention}) {
    if (s == to_string(family)) return family;
  }
  throw ConfigError("unknown fault family '" + s + "'");
}

double default_severity(FaultFamily family) {
  switch (family) {
    case FaultFamily::CpuContention: return 12.0;
    case FaultFamily::CpuFreqDrop: return 8.0;
    case FaultFamily::GpuContention: return 5.0;
    case FaultFamily::GpuClockLock: return 5.0;
    case FaultFamily::MemoryThrash: return 14.0;
    case FaultFamily::NvlinkSaturation: return 18.0;
    case FaultFamily::PcieBottleneck: return 16.0;
    case FaultFamily::BusContention: return 20.0;
  }
  return 4.0;
}

const FaultEffect& fault_effect(FaultFamily family) {
  static const std::map<FaultFamily, FaultEffect> table = {
      {FaultFamily::CpuContention, {"oncpu", "cpu_usage", false}},
      {FaultFamily::CpuFreqDrop, {"oncpu", "frequency", true}},
      {FaultFamily::GpuContention, {"gemm_kernel", "gpu_usage", false}},
      {FaultFamily::GpuClockLock, {"attn_kernel", "gpu_clock", true}},
      {FaultFamily::MemoryThrash, {"oncpu", "page_activity", false}},
      {FaultFamily::NvlinkSaturation, {"reduce", "tx_bytes", false}},
      {FaultFamily::PcieBottleneck, {"memcpy_h2d", "pcie_util", false}},
      {FaultFamily::BusContention, {"memcpy_d2d", "bus_util", false}},
  };
  return table.at(family);
}

namespace {

constexpr Nanos kNsPerSecond = 1'000'000'000;

Nanos to_ns(double seconds) {
  return static_cast<Nanos>(std::llround(seconds * 1e9));
}

// per-cycle component multipliers and counter shifts implied by active faults
struct CycleEffects {
  double oncpu = 1.0;
  double post = 1.0;
  double gemm = 1.0;
  double attn = 1.0;
  double memcpy_h2d = 1.0;
  double memcpy_d2d = 1.0;
  double reduce_straggler = 1.0;
  double reduce_others = 1.0;
  int straggler_rank = 0;
  bool anomalous = false;

  double cpu_usage_add = 0.0;     // external stressor load
  bool cpu_iowait = false;        // thrash: busy% collapses to io-wait
  bool cpu_saturated = false;     // freq drop: busy% pegs near 100
  double gpu_usage_add = 0.0;     // contender kernels
  double gpu_clock_mult = 1.0;
  double frequency_mult = 1.0;
  double page_activity_mult = 1.0;
  double tx_bytes_mult = 1.0;
  double pcie_util_add = 0.0;
  double bus_util_add = 0.0;
};

CycleEffects effects_for(std::size_t cycle, std::span<const FaultSpec> faults,
                         Rng& rng) {
  CycleEffects fx;
  for (const auto& fault : faults) {
    if (!fault.covers(cycle)) continue;
    fx.anomalous = true;
    const double s = fault.severity;
    switch (fault.family) {
      case FaultFamily::CpuContention:
        fx.oncpu *= s;
        fx.cpu_usage_add += 16.0;
        break;
      case FaultFamily::CpuFreqDrop:
        fx.oncpu *= s;
        fx.post *= s;
        fx.frequency_mult *= 1.0 / s;
        fx.cpu_saturated = true;
        break;
      case FaultFamily::GpuContention:
        fx.gemm *= s;
        fx.attn *= s;
        fx.gpu_usage_add += 35.0;
        break;
      case FaultFamily::GpuClockLock:
        fx.gemm *= s;
        fx.attn *= s;
        fx.gpu_clock_mult *= 1.0 / s;
        break;
      case FaultFamily::MemoryThrash:
        // bursty: the paging stall varies cycle to cycle
        fx.oncpu *= s * rng.uniform(0.8, 1.6);
        fx.page_activity_mult *= 12.0;
        fx.cpu_iowait = true;
        break;
      case FaultFamily::NvlinkSaturation:
        fx.reduce_straggler *= s;
        fx.reduce_others *= 1.0 + 0.5 * (s - 1.0);
        fx.straggler_rank = fault.target_rank;
        fx.tx_bytes_mult *= s;
        break;
      case FaultFamily::PcieBottleneck:
        fx.memcpy_h2d *= s;
        fx.pcie_util_add += 58.0;
        break;
      case FaultFamily::BusContention:
        fx.memcpy_d2d *= s;
        fx.bus_util_add += 60.0;
        break;
    }
  }
  return fx;
}

struct EventWriter {
  Trace& trace;
  EventId next_id = 1;

  TraceEvent& emit(EventKind kind, EventCategory category, std::string name,
                   Nanos start, Nanos duration, std::int64_t pid,
                   std::int64_t tid) {
    TraceEvent e;
    e.event_id = next_id++;
    e.kind = kind;
    e.category = category;
    e.name = std::move(name);
    e.start_ts = start;
    e.duration = kind == EventKind::Span ? duration : 0;
    e.track = {pid, tid};
    trace.events.push_back(std::move(e));
    return trace.events.back();
  }
};

std::string node_name(int rank, int gpus_per_node) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "node-%02d", rank / gpus_per_node);
  return buf;
}

}  // namespace

LabeledDataset synthesize_trace(std::span<const CycleWorkload> workloads,
                                const GroundTruthModel& model,
                                std::span<const FaultSpec> faults,
                                const SynthOptions& options,
                                std::uint64_t seed) {
  model.validate();
  for (const auto& fault : faults)
    if (fault.severity <= 0.0)
      throw ConfigConflict("fault severity must be positive");

  LabeledDataset dataset;
  dataset.labels.faults.assign(faults.begin(), faults.end());
  dataset.labels.anomalous.assign(workloads.size(), false);

  EventWriter writer{dataset.trace};
  Rng rng(seed);

  // track layout: pid 1 = python/host, pid 2 = gpu stream, pid 100+r = ranks
  constexpr std::int64_t kHostPid = 1, kHostTid = 1;
  constexpr std::int64_t kCpuTid = 2;
  constexpr std::int64_t kGpuPid = 2, kGpuTid = 1;

  const std::size_t n_ranks = std::max<std::size_t>(1, options.n_ranks);

  Nanos cursor = 0;
  for (const auto& w : workloads) {
    auto fx = effects_for(w.index, faults, rng);
    dataset.labels.anomalous[w.index] = fx.anomalous;

    // idle gap before a prefill models request arrival
    if (w.stage == Stage::Prefill && w.index > 0)
      cursor += to_ns(rng.uniform(2e-3, 8e-3));

    double latency_s;
    double gemm_s, attn_s, h2d_s, d2d_s;  // gpu-side parts
    double oncpu_s, reduce_s, post_s;     // comm-and-process parts
    if (w.stage == Stage::Prefill) {
      const double base = model.prefill_per_token *
                              static_cast<double>(w.batch * w.input_len) +
                          model.gpu_fixed + model.cpu_fixed;
      latency_s = base * rng.log_normal(model.prefill_noise);
      gemm_s = 0.55 * latency_s;
      attn_s = 0.30 * latency_s;
      h2d_s = 0.08 * latency_s;
      d2d_s = 0.04 * latency_s;
      oncpu_s = 0.20 * latency_s;
      reduce_s = 0.05 * latency_s;
      post_s = 0.05 * latency_s;
    } else {
      const auto kv = w.batch * (w.input_len + w.output_len);
      const double gpu_base = model.t_gpu(w.batch, kv);
      const double cpu_base = model.t_cpu(w.batch);
      // fixed component shares of each side; faults scale the parts before
      // the overlap max so a slow component moves the latency exactly when
      // its side becomes the bottleneck
      gemm_s = 0.40 * gpu_base * fx.gemm;
      attn_s = 0.30 * gpu_base * fx.attn;
      h2d_s = 0.18 * gpu_base * fx.memcpy_h2d;
      d2d_s = 0.12 * gpu_base * fx.memcpy_d2d;
      const double gpu_eff = gemm_s + attn_s + h2d_s + d2d_s;

      oncpu_s = 0.50 * cpu_base * fx.oncpu;
      reduce_s = 0.30 * cpu_base * fx.reduce_straggler;
      post_s = 0.20 * cpu_base * fx.post;
      const double cpu_eff = oncpu_s + reduce_s + post_s;

      const double exec =
          model.overlap ? std::max(gpu_eff, cpu_eff) : gpu_eff + cpu_eff;
      latency_s = exec * (model.noise > 0.0 ? rng.log_normal(model.noise) : 1.0);
    }

    const Nanos anchor_start = cursor;
    const Nanos run_ns = std::max<Nanos>(1000, to_ns(latency_s));

    // anchor span carries the workload args and the post_* pipeline metadata
    auto& anchor = writer.emit(EventKind::Span, EventCategory::PythonCall,
                               "run_batch", anchor_start, run_ns, kHostPid,
                               kHostTid);
    anchor.args["batch_size"] = w.batch;
    anchor.args["input_len"] = w.input_len;
    anchor.args["output_len"] = w.output_len;
    anchor.args["forward_mode"] =
        std::string(w.stage == Stage::Prefill ? "prefill" : "decode");
    anchor.args["post_run_latency"] = latency_s * rng.log_normal(0.01);
    anchor.args["post_max_in_len"] = w.input_len;
    anchor.args["post_fwd_mode"] =
        std::int64_t{w.stage == Stage::Prefill ? 1 : 0};

    // decode stage keyword event (name list match path)
    if (w.stage == Stage::Decode) {
      writer.emit(EventKind::Instant, EventCategory::PythonCall,
                  "process_batch_result_decode",
                  anchor_start + run_ns / 2, 0, kHostPid, kHostTid);
    } else {
      writer.emit(EventKind::Instant, EventCategory::PythonCall,
                  "forward_prefill", anchor_start + run_ns / 4, 0, kHostPid,
                  kHostTid);
    }

    // counters carry instantaneous values sampled at the span midpoints they
    // describe, so the diagnosis-side duration-weighted means see what the
    // hardware looked like while that class was executing
    auto counter_at = [&](const char* metric, Nanos ts, double value) {
      auto& e = writer.emit(EventKind::Counter, EventCategory::CounterTelemetry,
                            metric, ts, 0, kHostPid, 0);
      e.source.collector = Collector::Telemetry;
      e.args["value"] = std::max(0.0, value);
    };

    // GPU-side layout, scaled to fit inside the anchor span
    {
      const double gpu_total = gemm_s + attn_s + h2d_s + d2d_s;
      const double scale =
          gpu_total > 0.0 ? std::min(1.0, 0.96 * latency_s / gpu_total) : 1.0;
      Nanos gpu_cursor = anchor_start + run_ns / 100;
      // one correlated launch per cycle exercises host->device linking
      const std::uint64_t corr = 1000000 + w.index;
      auto& launch =
          writer.emit(EventKind::Span, EventCategory::RuntimeApi,
                      "cuLaunchKernel", anchor_start + run_ns / 200,
                      std::max<Nanos>(500, run_ns / 500), kHostPid, kCpuTid);
      launch.correlation_id = corr;

      auto gpu_span = [&](const char* name, EventCategory category,
                          double seconds) -> TraceEvent& {
        const Nanos dur = std::max<Nanos>(200, to_ns(seconds * scale));
        auto& e = writer.emit(EventKind::Span, category, name, gpu_cursor, dur,
                              kGpuPid, kGpuTid);
        gpu_cursor += dur + std::max<Nanos>(50, run_ns / 2000);
        return e;
      };

      auto& gemm = gpu_span("gemm_kernel", EventCategory::GpuKernel, gemm_s);
      gemm.correlation_id = corr;
      counter_at("gpu_usage", gemm.start_ts + gemm.duration / 2,
                 55.0 + fx.gpu_usage_add + rng.normal() * 3.0);
      const auto& attn = gpu_span("attn_kernel", EventCategory::GpuKernel, attn_s);
      counter_at("gpu_clock", attn.start_ts + attn.duration / 2,
                 1900.0 * fx.gpu_clock_mult + rng.normal() * 15.0);
      const auto& h2d = gpu_span("memcpy_h2d", EventCategory::MemCopy, h2d_s);
      counter_at("pcie_util", h2d.start_ts + h2d.duration / 2,
                 22.0 + fx.pcie_util_add + rng.normal() * 2.0);
      const auto& d2d = gpu_span("memcpy_d2d", EventCategory::MemCopy, d2d_s);
      counter_at("bus_util", d2d.start_ts + d2d.duration / 2,
                 18.0 + fx.bus_util_add + rng.normal() * 2.0);
    }

    // collective spans, one per rank; the straggler carries the full
    // inflation while its peers mostly wait on it
    {
      const double base_reduce = reduce_s / fx.reduce_straggler;
      const Nanos reduce_start = anchor_start + run_ns / 3;
      for (std::size_t r = 0; r < n_ranks; ++r) {
        double rank_reduce_s = reduce_s;
        if (n_ranks > 1) {
          rank_reduce_s = base_reduce *
                          ((static_cast<int>(r) == fx.straggler_rank)
                               ? fx.reduce_straggler
                               : fx.reduce_others);
        }
        const Nanos dur = std::max<Nanos>(
            200, to_ns(rank_reduce_s * rng.log_normal(0.02)));
        auto& reduce = writer.emit(EventKind::Span,
                                   EventCategory::CollectiveComm, "reduce",
                                   reduce_start, dur,
                                   100 + static_cast<std::int64_t>(r), 1);
        reduce.args["commHash"] = std::string("comm0");
        reduce.args["rank"] = static_cast<std::int64_t>(r);
        reduce.args["hostname"] =
            node_name(static_cast<int>(r), options.gpus_per_node);
        reduce.args["device"] =
            static_cast<std::int64_t>(r % options.gpus_per_node);
        if (r == 0)
          counter_at("tx_bytes", reduce.start_ts + reduce.duration / 2,
                     1e9 * fx.tx_bytes_mult + rng.normal() * 2e7);
      }
    }

    // host-side execution spans
    {
      const double cpu_total = oncpu_s + post_s;
      const double scale =
          cpu_total > 0.0 ? std::min(1.0, 0.96 * latency_s / cpu_total) : 1.0;
      const Nanos oncpu_total = std::max<Nanos>(400, to_ns(oncpu_s * scale));
      const Nanos oncpu1_start = anchor_start + run_ns / 50;
      const Nanos oncpu1_dur = oncpu_total / 2;
      writer.emit(EventKind::Span, EventCategory::OsSched, "oncpu",
                  oncpu1_start, oncpu1_dur, kHostPid, kCpuTid);
      writer.emit(EventKind::Span, EventCategory::OsSched, "oncpu",
                  anchor_start + run_ns / 2, oncpu_total - oncpu1_dur, kHostPid,
                  kCpuTid);

      double cpu_busy = 82.0 + rng.normal() * 3.0;
      if (fx.cpu_iowait) cpu_busy = 38.0 + rng.normal() * 6.0;
      if (fx.cpu_saturated) cpu_busy = 97.0 + rng.normal() * 1.0;
      cpu_busy = std::min(100.0, cpu_busy + fx.cpu_usage_add);
      counter_at("cpu_usage", oncpu1_start + oncpu1_dur / 2, cpu_busy);

      // the span length jitters far more than the latency share it stands
      // for: post-processing wall time depends on global scheduler state
      const Nanos post_ns = std::min<Nanos>(
          run_ns / 2,
          std::max<Nanos>(200, to_ns(post_s * scale * rng.log_normal(1.1))));
      const Nanos post_start = anchor_start + run_ns - post_ns;
      writer.emit(EventKind::Span, EventCategory::PythonCall,
                  "process_batch_result", post_start, post_ns, kHostPid,
                  kHostTid);
      counter_at("frequency", post_start + post_ns / 2,
                 2800.0 * fx.frequency_mult + rng.normal() * 25.0);
    }

    counter_at("page_activity", anchor_start + run_ns / 2,
               40.0 * fx.page_activity_mult + rng.normal() * 4.0);

    // next iteration's scheduling gap closes the cycle; heavy-tailed because
    // it tracks queue state, not the current batch
    const Nanos sched_ns = std::clamp<Nanos>(to_ns(60e-6 * rng.log_normal(1.3)),
                                             5'000, 5'000'000);
    writer.emit(EventKind::Span, EventCategory::PythonCall,
                "get_next_batch_to_run", anchor_start + run_ns, sched_ns,
                kHostPid, kHostTid);
    cursor = anchor_start + run_ns + sched_ns;
  }

  // closing anchor so the last real cycle is not dropped as partial
  writer.emit(EventKind::Span, EventCategory::PythonCall, "run_batch", cursor,
              1000, kHostPid, kHostTid);

  dataset.trace.sort_events();
  return dataset;
}

json TrialLabels::to_json() const {
  json fault_list = json::array();
  for (const auto& f : faults) {
    fault_list.push_back({{"family", to_string(f.family)},
                          {"onset", f.onset},
                          {"duration", f.duration},
                          {"severity", f.severity},
                          {"target_rank", f.target_rank},
                          {"target_class", fault_effect(f.family).target_class},
                          {"metric", fault_effect(f.family).counter_metric}});
  }
  json labels = json::array();
  for (bool b : anomalous) labels.push_back(b ? 1 : 0);
  return json{{"n_cycles", anomalous.size()},
              {"labels", std::move(labels)},
              {"faults", std::move(fault_list)}};
}

TrialLabels TrialLabels::from_json(const json& j) {
  TrialLabels labels;
  for (const auto& v : j.at("labels")) labels.anomalous.push_back(v.get<int>() != 0);
  for (const auto& f : j.at("faults")) {
    FaultSpec spec;
    spec.family = fault_family_from_string(f.at("family").get<std::string>());
    spec.onset = f.at("onset").get<std::size_t>();
    spec.duration = f.at("duration").get<std::size_t>();
    spec.severity = f.at("severity").get<double>();
    spec.target_rank = f.at("target_rank").get<int>();
    labels.faults.push_back(spec);
  }
  return labels;
}

void SuiteConfig::validate() const {
  profile.validate();
  model.validate();
  if (trials == 0) throw ConfigError("suite needs at least one trial");
  if (families.empty()) throw ConfigError("suite needs at least one fault family");
  if (train_cycles + detector.warmup + fault_onset_jitter >= fault_onset)
    throw ConfigError(
        "fault onset must fall after train_cycles + warmup + jitter");
  if (fault_onset + fault_duration >= cycles_per_trial)
    throw ConfigError("fault window must end before the trial does");
}

std::uint64_t fnv1a_hash(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t SuiteConfig::config_hash() const {
  return fnv1a_hash(to_json().dump());
}

json SuiteConfig::to_json() const {
  json families_json = json::array();
  for (auto f : families) families_json.push_back(to_string(f));
  return json{
      {"seed", seed},
      {"trials", trials},
      {"cycles_per_trial", cycles_per_trial},
      {"train_cycles", train_cycles},
      {"workload",
       {{"distribution",
         profile.distribution == WorkloadProfile::Distribution::Fixed
             ? "fixed"
             : "log_uniform"},
        {"batch_min", profile.batch_min},
        {"batch_max", profile.batch_max},
        {"input_min", profile.input_min},
        {"input_max", profile.input_max},
        {"output_min", profile.output_min},
        {"output_max", profile.output_max},
        {"fixed_batch", profile.fixed_batch},
        {"fixed_input", profile.fixed_input},
        {"fixed_output", profile.fixed_output}}},
      {"model",
       {{"gpu_per_token_slot", model.gpu_per_token_slot},
        {"gpu_per_batch", model.gpu_per_batch},
        {"gpu_fixed", model.gpu_fixed},
        {"cpu_fixed", model.cpu_fixed},
        {"cpu_per_batch", model.cpu_per_batch},
        {"overlap", model.overlap},
        {"noise", model.noise},
        {"prefill_per_token", model.prefill_per_token},
        {"prefill_noise", model.prefill_noise}}},
      {"detector",
       {{"strategy", to_string(detector.strategy)},
        {"window", detector.window},
        {"fixed_threshold", detector.fixed_threshold},
        {"sigma_k", detector.sigma_k},
        {"theta_max", detector.theta_max},
        {"min_ucl", detector.min_ucl},
        {"warmup", detector.warmup},
        {"epsilon", detector.epsilon}}},
      {"gbdt",
       {{"n_trees", gbdt.n_trees},
        {"max_depth", gbdt.max_depth},
        {"learning_rate", gbdt.learning_rate},
        {"min_samples_leaf", gbdt.min_samples_leaf},
        {"prediction_floor", gbdt.prediction_floor}}},
      {"escalation",
       {{"pre_roll", escalation.pre_roll}, {"post_roll", escalation.post_roll}}},
      {"families", std::move(families_json)},
      {"severity_overrides", severity_overrides},
      {"fault_onset", fault_onset},
      {"fault_onset_jitter", fault_onset_jitter},
      {"fault_duration", fault_duration},
      {"nvlink_ranks", nvlink_ranks},
      {"min_separability", min_separability},
  };
}

namespace {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                         const std::string& context) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) { ok = true; break; }
    if (!ok)
      throw ConfigError("unknown key '" + key + "' in " + context);
  }
}

}  // namespace

SuiteConfig SuiteConfig::from_json(const json& j) {
  reject_unknown_keys(
      j,
      {"seed", "trials", "cycles_per_trial", "train_cycles", "workload",
       "model", "detector", "gbdt", "escalation", "families",
       "severity_overrides", "fault_onset", "fault_onset_jitter",
       "fault_duration", "nvlink_ranks", "min_separability"},
      "suite config");

  SuiteConfig c;
  c.seed = j.value("seed", c.seed);
  c.trials = j.value("trials", c.trials);
  c.cycles_per_trial = j.value("cycles_per_trial", c.cycles_per_trial);
  c.train_cycles = j.value("train_cycles", c.train_cycles);

  if (j.contains("workload")) {
    const auto& w = j["workload"];
    reject_unknown_keys(w,
                        {"distribution", "batch_min", "batch_max", "input_min",
                         "input_max", "output_min", "output_max", "fixed_batch",
                         "fixed_input", "fixed_output"},
                        "workload profile");
    const std::string dist = w.value("distribution", "log_uniform");
    if (dist == "fixed")
      c.profile.distribution = WorkloadProfile::Distribution::Fixed;
    else if (dist == "log_uniform")
      c.profile.distribution = WorkloadProfile::Distribution::LogUniform;
    else
      throw ConfigError("unknown workload distribution '" + dist + "'");
    c.profile.batch_min = w.value("batch_min", c.profile.batch_min);
    c.profile.batch_max = w.value("batch_max", c.profile.batch_max);
    c.profile.input_min = w.value("input_min", c.profile.input_min);
    c.profile.input_max = w.value("input_max", c.profile.input_max);
    c.profile.output_min = w.value("output_min", c.profile.output_min);
    c.profile.output_max = w.value("output_max", c.profile.output_max);
    c.profile.fixed_batch = w.value("fixed_batch", c.profile.fixed_batch);
    c.profile.fixed_input = w.value("fixed_input", c.profile.fixed_input);
    c.profile.fixed_output = w.value("fixed_output", c.profile.fixed_output);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown_keys(m,
                        {"gpu_per_token_slot", "gpu_per_batch", "gpu_fixed",
                         "cpu_fixed", "cpu_per_batch", "overlap", "noise",
                         "prefill_per_token", "prefill_noise"},
                        "ground-truth model");
    c.model.gpu_per_token_slot = m.value("gpu_per_token_slot", c.model.gpu_per_token_slot);
    c.model.gpu_per_batch = m.value("gpu_per_batch", c.model.gpu_per_batch);
    c.model.gpu_fixed = m.value("gpu_fixed", c.model.gpu_fixed);
    c.model.cpu_fixed = m.value("cpu_fixed", c.model.cpu_fixed);
    c.model.cpu_per_batch = m.value("cpu_per_batch", c.model.cpu_per_batch);
    c.model.overlap = m.value("overlap", c.model.overlap);
    c.model.noise = m.value("noise", c.model.noise);
    c.model.prefill_per_token = m.value("prefill_per_token", c.model.prefill_per_token);
    c.model.prefill_noise = m.value("prefill_noise", c.model.prefill_noise);
  }
  if (j.contains("detector")) {
    const auto& d = j["detector"];
    reject_unknown_keys(d,
                        {"strategy", "window", "fixed_threshold", "sigma_k",
                         "theta_max", "min_ucl", "warmup", "epsilon"},
                        "detector config");
    c.detector.strategy =
        strategy_from_string(d.value("strategy", std::string("dynamic_window")));
    c.detector.window = d.value("window", c.detector.window);
    c.detector.fixed_threshold = d.value("fixed_threshold", c.detector.fixed_threshold);
    c.detector.sigma_k = d.value("sigma_k", c.detector.sigma_k);
    c.detector.theta_max = d.value("theta_max", c.detector.theta_max);
    c.detector.min_ucl = d.value("min_ucl", c.detector.min_ucl);
    c.detector.warmup = d.value("warmup", c.detector.warmup);
    c.detector.epsilon = d.value("epsilon", c.detector.epsilon);
  }
  if (j.contains("gbdt")) {
    const auto& g = j["gbdt"];
    reject_unknown_keys(g,
                        {"n_trees", "max_depth", "learning_rate",
                         "min_samples_leaf", "prediction_floor"},
                        "gbdt config");
    c.gbdt.n_trees = g.value("n_trees", c.gbdt.n_trees);
    c.gbdt.max_depth = g.value("max_depth", c.gbdt.max_depth);
    c.gbdt.learning_rate = g.value("learning_rate", c.gbdt.learning_rate);
    c.gbdt.min_samples_leaf = g.value("min_samples_leaf", c.gbdt.min_samples_leaf);
    c.gbdt.prediction_floor = g.value("prediction_floor", c.gbdt.prediction_floor);
  }
  if (j.contains("escalation")) {
    const auto& e = j["escalation"];
    reject_unknown_keys(e, {"pre_roll", "post_roll"}, "escalation policy");
    c.escalation.pre_roll = e.value("pre_roll", c.escalation.pre_roll);
    c.escalation.post_roll = e.value("post_roll", c.escalation.post_roll);
  }
  if (j.contains("families")) {
    c.families.clear();
    for (const auto& f : j["families"])
      c.families.push_back(fault_family_from_string(f.get<std::string>()));
  }
  if (j.contains("severity_overrides"))
    c.severity_overrides =
        j["severity_overrides"].get<std::map<std::string, double>>();
  c.fault_onset = j.value("fault_onset", c.fault_onset);
  c.fault_onset_jitter = j.value("fault_onset_jitter", c.fault_onset_jitter);
  c.fault_duration = j.value("fault_duration", c.fault_duration);
  c.nvlink_ranks = j.value("nvlink_ranks", c.nvlink_ranks);
  c.min_separability = j.value("min_separability", c.min_separability);
  c.validate();
  return c;
}

SuiteConfig SuiteConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& err) {
    throw ConfigError("cannot parse suite config " + path.string() + ": " +
                      err.what());
  }
  return from_json(j);
}

namespace {

FaultSpec make_trial_fault(const SuiteConfig& config, std::size_t trial,
                           FaultFamily family) {
  FaultSpec fault;
  fault.family = family;
  auto it = config.severity_overrides.find(to_string(family));
  fault.severity = it != config.severity_overrides.end()
                       ? it->second
                       : default_severity(family);
  Rng rng(Rng::substream_seed(config.seed, 0xfau + trial));
  const auto jitter = config.fault_onset_jitter > 0
                          ? static_cast<std::size_t>(rng.uniform_int(
                                0, static_cast<std::int64_t>(2 * config.fault_onset_jitter)))
                          : config.fault_onset_jitter;
  fault.onset = config.fault_onset - config.fault_onset_jitter + jitter;
  fault.duration = config.fault_duration;
  if (family == FaultFamily::NvlinkSaturation && config.nvlink_ranks > 1) {
    fault.target_rank = static_cast<int>(
        rng.uniform_int(0, static_cast<std::int64_t>(config.nvlink_ranks) - 1));
  }
  return fault;
}

LabeledDataset make_trial_dataset(const SuiteConfig& config, std::size_t trial,
                                  FaultFamily family, const FaultSpec& fault) {
  const auto seed = Rng::substream_seed(config.seed, trial);
  const auto workloads =
      generate_workload(config.profile, config.cycles_per_trial, seed);
  SynthOptions options;
  options.n_ranks =
      family == FaultFamily::NvlinkSaturation ? config.nvlink_ranks : 1;
  return synthesize_trace(workloads, config.model, {&fault, 1}, options,
                          Rng::substream_seed(seed, 1));
}

}  // namespace

TrialOutcome evaluate_trial(const SuiteConfig& config,
                            const LabeledDataset& dataset,
                            std::size_t trial_index, FaultFamily family) {
  TrialOutcome outcome;
  outcome.trial = trial_index;
  outcome.family = family;
  if (!dataset.labels.faults.empty()) outcome.fault = dataset.labels.faults.front();

  CycleConfig cycle_config;
  PipelineOptions pipeline;
  const auto cycles = segment_and_classify(dataset.trace, cycle_config);
  const auto records =
      build_cycle_records(dataset.trace, cycles, cycle_config, pipeline);

  // separability gate: a fault must actually move in-window latency;
  // medians, because the workload tail makes mean ratios noisy
  {
    std::vector<double> in_lat, out_lat;
    for (const auto& rec : records) {
      bool in_window = false;
      for (const auto& fault : dataset.labels.faults)
        in_window = in_window || fault.covers(rec.cycle_index);
      (in_window ? in_lat : out_lat).push_back(rec.latency_s);
    }
    if (!dataset.labels.faults.empty()) {
      if (in_lat.empty())
        throw ConfigConflict("fault window contains no monitored cycles");
      auto median = [](std::vector<double>& v) {
        std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
        return v[v.size() / 2];
      };
      const double ratio = median(in_lat) / median(out_lat);
      if (ratio < config.min_separability)
        throw ConfigConflict(
            "fault produced no labeled effect: in/out median latency ratio " +
            std::to_string(ratio) + " < " +
            std::to_string(config.min_separability));
    }
  }

  // train on the clean prefix, monitor everything after it
  std::vector<CycleRecord> train_records, monitor_records;
  for (const auto& rec : records) {
    (rec.cycle_index < config.train_cycles ? train_records : monitor_records)
        .push_back(rec);
  }
  const auto train_set =
      to_sample_set(train_records, FeatureSet::Physical);
  FitOptions fit_options;
  fit_options.ppe_epsilon = config.detector.epsilon;
  const auto model = fit_latency_model(train_set, config.gbdt, fit_options);

  // dynamic limit from the model's holdout residual statistics
  const double ucl = ucl_from_stats(model.mu_train, model.sigma_train,
                                    config.detector);

  LabeledStream stream;
  stream.residuals.reserve(monitor_records.size());
  stream.anomalous.reserve(monitor_records.size());
  std::vector<std::size_t> monitor_cycle_index;
  for (const auto& rec : monitor_records) {
    std::vector<double> row = {
        static_cast<double>(rec.workload.batch),
        static_cast<double>(rec.workload.kv_token_slots())};
    const double predicted = model.predict(row);
    stream.residuals.push_back(
        ppe(rec.latency_s, predicted, config.detector.epsilon));
    stream.anomalous.push_back(dataset.labels.anomalous[rec.cycle_index]);
    monitor_cycle_index.push_back(rec.cycle_index);
  }

  for (auto strategy : {Strategy::FixedPoint, Strategy::FixedWindow,
                        Strategy::DynamicWindow}) {
    ControlConfig cc = config.detector;
    cc.strategy = strategy;
    outcome.strategies.push_back(evaluate_strategy(stream, cc, ucl));
  }

  // deep-dive + RCA along the DynamicWindow detector's episodes
  ControlConfig dynamic = config.detector;
  dynamic.strategy = Strategy::DynamicWindow;
  Detector detector(dynamic, ucl);
  Escalator escalator(config.escalation);
  std::vector<bool> flagged(stream.residuals.size(), false);
  outcome.ebar_row.reserve(stream.residuals.size());
  for (std::size_t t = 0; t < stream.residuals.size(); ++t) {
    ResidualSample sample;
    sample.cycle = t;
    sample.error = stream.residuals[t];
    const auto result = detector.step(sample);
    outcome.ebar_row.push_back(result.statistic);
    flagged[t] = result.flagged;
    escalator.on_cycle(t);
    if (result.alert) escalator.on_alert(*result.alert);
  }

  // abnormal window: flagged monitored cycles; normal window: clean armed span
  std::vector<std::size_t> abnormal_cycles, normal_cycles;
  for (std::size_t t = 0; t < flagged.size(); ++t) {
    if (flagged[t]) abnormal_cycles.push_back(monitor_cycle_index[t]);
    else if (t >= dynamic.warmup && !stream.anomalous[t])
      normal_cycles.push_back(monitor_cycle_index[t]);
  }

  if (abnormal_cycles.size() >= 3 && normal_cycles.size() >= 10) {
    outcome.rca_ran = true;
    const auto counters = CounterTable::from_trace(dataset.trace);
    const auto metric_map = MetricMap::defaults();

    std::map<std::size_t, const Cycle*> by_index;
    for (const auto& c : cycles) by_index[c.index] = &c;

    auto stats_for = [&](const std::vector<std::size_t>& indices,
                         std::size_t cap) {
      std::vector<CycleClassStats> stats;
      for (auto idx : indices) {
        if (stats.size() >= cap) break;
        auto it = by_index.find(idx);
        if (it != by_index.end())
          stats.push_back(
              cycle_stats(*it->second, dataset.trace, counters, metric_map));
      }
      return stats;
    };
    // keep windows bounded so diagnosis cost stays flat
    const auto abn_stats = stats_for(abnormal_cycles, 200);
    std::vector<std::size_t> recent_normal = normal_cycles;
    if (recent_normal.size() > 300)
      recent_normal.erase(recent_normal.begin(),
                          recent_normal.end() - 300);
    const auto norm_stats = stats_for(recent_normal, 300);

    auto entries = suspicion_rank(norm_stats, abn_stats);
    const auto topology = resolve_topology(dataset.trace);
    attribute_straggler(entries, topology, norm_stats, abn_stats);

    if (!entries.empty()) {
      const auto& top = entries.front();
      outcome.rca_top_class = top.event_class;
      outcome.rca_top_p = top.welch_p;
      outcome.rca_delta_beta = top.delta_beta;
      outcome.rca_delta_mu = top.delta_mu;
      outcome.rca_score = top.score;
      outcome.rca_metric = top.metric;
      outcome.rca_top1 = top.event_class == fault_effect(family).target_class;

      if (family == FaultFamily::NvlinkSaturation && config.nvlink_ranks > 1) {
        bool hit = false;
        for (const auto& entry : entries) {
          if (entry.event_class != fault_effect(family).target_class) continue;
          if (entry.attribution)
            hit = entry.attribution->rank == outcome.fault.target_rank;
          break;
        }
        outcome.straggler_hit = hit;
      }
    }
  }
  return outcome;
}

namespace {

struct RunLock {
  std::filesystem::path path;

  explicit RunLock(const std::filesystem::path& dir) : path(dir / ".lock") {
    if (std::filesystem::exists(path))
      throw ConfigConflict("run directory is locked by another run: " +
                           path.string());
    std::ofstream lock(path);
    lock << "locked\n";
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path, ec);
  }
};

std::string trial_dir_name(std::size_t trial) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "trial_%03zu", trial);
  return buf;
}

}  // namespace

void simulate_suite(const SuiteConfig& config,
                    const std::filesystem::path& run_dir) {
  config.validate();
  std::filesystem::create_directories(run_dir);
  RunLock lock(run_dir);

  json manifest{{"format_version", 1},
                {"config", config.to_json()},
                {"config_hash", config.config_hash()},
                {"trials", json::array()}};

  for (std::size_t trial = 0; trial < config.trials; ++trial) {
    const auto family = config.families[trial % config.families.size()];
    const auto fault = make_trial_fault(config, trial, family);
    const auto dataset = make_trial_dataset(config, trial, family, fault);

    const auto dir = run_dir / trial_dir_name(trial);
    std::filesystem::create_directories(dir);
    save_trace(dataset.trace, dir / "trace.json");
    write_file(dir / "labels.json", dataset.labels.to_json().dump(2) + "\n");

    manifest["trials"].push_back({{"trial", trial},
                                  {"family", to_string(family)},
                                  {"dir", trial_dir_name(trial)}});
  }
  write_file(run_dir / "manifest.json", manifest.dump(2) + "\n");
}

BenchmarkResult evaluate_suite(const std::filesystem::path& run_dir) {
  const auto t_begin = std::chrono::steady_clock::now();
  json manifest;
  try {
    manifest = json::parse(read_file(run_dir / "manifest.json"));
  } catch (const json::exception& err) {
    throw ConfigError("cannot parse manifest: " + std::string(err.what()));
  }
  const auto config = SuiteConfig::from_json(manifest.at("config"));

  BenchmarkResult result;
  for (const auto& entry : manifest.at("trials")) {
    const auto trial = entry.at("trial").get<std::size_t>();
    const auto family =
        fault_family_from_string(entry.at("family").get<std::string>());
    const auto dir = run_dir / entry.at("dir").get<std::string>();

    LabeledDataset dataset;
    auto parsed = load_trace(dir / "trace.json");
    if (!validate_trace(parsed.trace, parsed.issues).ok())
      throw MalformedTrace("trial dataset failed validation: " + dir.string());
    dataset.trace = std::move(parsed.trace);
    dataset.labels = TrialLabels::from_json(json::parse(read_file(dir / "labels.json")));

    result.trials.push_back(evaluate_trial(config, dataset, trial, family));
  }

  // pooled confusion counts per strategy; lag averaged over trials
  for (std::size_t s = 0; s < 3; ++s) {
    StrategyMetrics agg;
    double lag_sum = 0.0;
    std::size_t alerts = 0;
    for (const auto& trial : result.trials) {
      const auto& m = trial.strategies[s];
      agg.strategy = m.strategy;
      agg.true_positives += m.true_positives;
      agg.false_positives += m.false_positives;
      agg.false_negatives += m.false_negatives;
      agg.true_negatives += m.true_negatives;
      lag_sum += m.mean_lag;
      alerts += m.alerts;
    }
    const auto tp = static_cast<double>(agg.true_positives);
    const auto fp = static_cast<double>(agg.false_positives);
    const auto fn = static_cast<double>(agg.false_negatives);
    const auto tn = static_cast<double>(agg.true_negatives);
    agg.precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
    agg.recall = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
    agg.f1 = agg.precision + agg.recall > 0.0
                 ? 2.0 * agg.precision * agg.recall / (agg.precision + agg.recall)
                 : 0.0;
    agg.fpr = fp + tn > 0.0 ? fp / (fp + tn) : 0.0;
    agg.mean_lag = result.trials.empty()
                       ? 0.0
                       : lag_sum / static_cast<double>(result.trials.size());
    agg.alerts = alerts;
    result.aggregate.push_back(agg);
  }

  for (const auto& trial : result.trials) {
    auto& family = result.families[to_string(trial.family)];
    family.trials++;
    if (trial.rca_top1) {
      family.top1_hits++;
      family.worst_top1_p = std::max(family.worst_top1_p, trial.rca_top_p);
    }
    if (trial.straggler_hit.has_value()) {
      family.straggler_trials++;
      if (*trial.straggler_hit) family.straggler_hits++;
    }
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin)
          .count();

  write_file(run_dir / "metrics.json", result.to_json().dump(2) + "\n");
  write_file(run_dir / "heatmap.csv", result.heatmap_csv());
  return result;
}

BenchmarkResult run_benchmark(const SuiteConfig& config,
                              const std::filesystem::path& run_dir) {
  simulate_suite(config, run_dir);
  return evaluate_suite(run_dir);
}

json BenchmarkResult::to_json() const {
  json strategies = json::array();
  for (const auto& m : aggregate) strategies.push_back(m.to_json());

  json family_json = json::object();
  for (const auto& [name, summary] : families) {
    family_json[name] = {
        {"trials", summary.trials},
        {"top1_hits", summary.top1_hits},
        {"top1_rate", summary.trials > 0
                          ? static_cast<double>(summary.top1_hits) /
                                static_cast<double>(summary.trials)
                          : 0.0},
        {"worst_top1_p", summary.worst_top1_p},
        {"straggler_trials", summary.straggler_trials},
        {"straggler_hits", summary.straggler_hits}};
  }

  json trials_json = json::array();
  for (const auto& trial : trials) {
    json strategy_rows = json::array();
    for (const auto& m : trial.strategies) strategy_rows.push_back(m.to_json());
    trials_json.push_back({{"trial", trial.trial},
                           {"family", to_string(trial.family)},
                           {"onset", trial.fault.onset},
                           {"duration", trial.fault.duration},
                           {"severity", trial.fault.severity},
                           {"target_rank", trial.fault.target_rank},
                           {"strategies", std::move(strategy_rows)},
                           {"rca_ran", trial.rca_ran},
                           {"rca_top1", trial.rca_top1},
                           {"rca_top_class", trial.rca_top_class},
                           {"rca_top_p", trial.rca_top_p},
                           {"rca_delta_beta", trial.rca_delta_beta},
                           {"rca_delta_mu", trial.rca_delta_mu},
                           {"rca_score", trial.rca_score},
                           {"rca_metric", trial.rca_metric},
                           {"straggler_hit",
                            trial.straggler_hit.has_value()
                                ? json(*trial.straggler_hit)
                                : json(nullptr)}});
  }

  // wall_seconds stays out: persisted artifacts must be hash-stable
  return json{{"strategies", std::move(strategies)},
              {"families", std::move(family_json)},
              {"trials", std::move(trials_json)}};
}

std::string BenchmarkResult::heatmap_csv() const {
  // rows: trial; columns: monitored cycle; value: smoothed error
  std::ostringstream os;
  std::size_t max_len = 0;
  for (const auto& trial : trials) max_len = std::max(max_len, trial.ebar_row.size());
  os << "trial";
  for (std::size_t c = 0; c < max_len; ++c) os << ",c" << c;
  os << "\n";
  for (const auto& trial : trials) {
    os << trial.trial;
    for (std::size_t c = 0; c < max_len; ++c) {
      os << ',';
      if (c < trial.ebar_row.size()) os << trial.ebar_row[c];
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace cyclescope
