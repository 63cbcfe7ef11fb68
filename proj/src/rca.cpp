#include "cyclescope/rca.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cyclescope/errors.hpp"

namespace cyclescope {

using nlohmann::json;

double interpolate_mean(const CounterSeries& series, Nanos t0, Nanos t1) {
  if (series.samples.empty())
    throw EmptySeries("counter series '" + series.metric + "' has no samples");
  if (t1 <= t0) throw EmptySeries("span must have positive length");

  const auto& s = series.samples;
  auto value_at = [&](double t) {
    if (t <= static_cast<double>(s.front().ts)) return s.front().value;
    if (t >= static_cast<double>(s.back().ts)) return s.back().value;
    auto it = std::lower_bound(
        s.begin(), s.end(), t, [](const CounterSample& sample, double ts) {
          return static_cast<double>(sample.ts) < ts;
        });
    const auto& hi = *it;
    const auto& lo = *(it - 1);
    const double f = (t - static_cast<double>(lo.ts)) /
                     static_cast<double>(hi.ts - lo.ts);
    return lo.value + f * (hi.value - lo.value);
  };

  // exact trapezoid integration over segment boundaries within [t0, t1]
  std::vector<double> knots;
  knots.push_back(static_cast<double>(t0));
  for (const auto& sample : s) {
    const auto ts = static_cast<double>(sample.ts);
    if (ts > static_cast<double>(t0) && ts < static_cast<double>(t1))
      knots.push_back(ts);
  }
  knots.push_back(static_cast<double>(t1));

  double integral = 0.0;
  for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
    const double a = knots[i], b = knots[i + 1];
    integral += 0.5 * (value_at(a) + value_at(b)) * (b - a);
  }
  return integral / (static_cast<double>(t1) - static_cast<double>(t0));
}

MetricMap MetricMap::defaults() {
  MetricMap map;
  map.class_to_metric = {
      {"oncpu", "cpu_usage"},
      {"gemm_kernel", "gpu_usage"},
      {"attn_kernel", "gpu_clock"},
      {"reduce", "tx_bytes"},
      {"memcpy_h2d", "pcie_util"},
      {"memcpy_d2d", "bus_util"},
      {"run_batch", "gpu_usage"},
      {"process_batch_result", "cpu_usage"},
      {"get_next_batch_to_run", "cpu_usage"},
  };
  return map;
}

CycleClassStats cycle_stats(const Cycle& cycle, const Trace& trace,
                            const CounterTable& counters,
                            const MetricMap& metrics) {
  CycleClassStats stats;
  stats.cycle_index = cycle.index;
  stats.cycle_duration = cycle.duration();
  if (stats.cycle_duration <= 0) return stats;

  struct Accumulator {
    Nanos duration = 0;
    double weighted_mu = 0.0;
    bool has_metric = false;
    std::string metric;
  };
  std::map<std::string, Accumulator> acc;

  for (std::size_t j = cycle.first_event; j < cycle.last_event; ++j) {
    const auto& e = trace.events[j];
    if (e.kind != EventKind::Span || e.duration <= 0) continue;
    const Nanos clipped_end = std::min(e.end_ts(), cycle.end_ts);
    const Nanos overlap = clipped_end - e.start_ts;
    if (overlap <= 0) continue;

    auto& a = acc[e.name];
    a.duration += overlap;

    auto metric_it = metrics.class_to_metric.find(e.name);
    if (metric_it != metrics.class_to_metric.end()) {
      if (const auto* series = counters.find(metric_it->second)) {
        const double mu = interpolate_mean(*series, e.start_ts, clipped_end);
        a.weighted_mu += mu * static_cast<double>(overlap);
        a.has_metric = true;
        a.metric = metric_it->second;
      }
      // missing series downgrades to a beta-only entry
    }

    if (e.category == EventCategory::CollectiveComm) {
      auto comm = arg_string(e, "commHash");
      auto rank = arg_int(e, "rank");
      if (comm && rank) {
        stats.collective_rank_beta[{e.name, *comm, static_cast<int>(*rank)}] +=
            static_cast<double>(overlap) / static_cast<double>(stats.cycle_duration);
      }
    }
  }

  for (const auto& [name, a] : acc) {
    ClassStat s;
    s.total_duration = a.duration;
    s.beta = static_cast<double>(a.duration) /
             static_cast<double>(stats.cycle_duration);
    if (a.has_metric && a.duration > 0) {
      s.mu = a.weighted_mu / static_cast<double>(a.duration);
      s.metric = a.metric;
    }
    stats.classes.emplace(name, s);
  }
  return stats;
}

namespace {

// regularized incomplete beta via Lentz's continued fraction
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 200;
  constexpr double kEps = 3e-12, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (df <= 0.0) return 1.0;
  const double x = df / (df + t * t);
  return incomplete_beta(df / 2.0, 0.5, x);
}

struct WindowStats {
  double mean = 0.0;
  double var = 0.0;  // sample variance
  std::size_t n = 0;
};

WindowStats summarize(const std::vector<double>& values) {
  WindowStats w;
  w.n = values.size();
  if (w.n == 0) return w;
  for (double v : values) w.mean += v;
  w.mean /= static_cast<double>(w.n);
  if (w.n > 1) {
    for (double v : values) w.var += (v - w.mean) * (v - w.mean);
    w.var /= static_cast<double>(w.n - 1);
  }
  return w;
}

double floored_sigma(const WindowStats& w) {
  return std::max({std::sqrt(w.var), 0.01 * std::abs(w.mean), 1e-12});
}

}  // namespace

double welch_p_value(double mean_a, double var_a, std::size_t n_a,
                     double mean_b, double var_b, std::size_t n_b) {
  if (n_a < 2 || n_b < 2) return 1.0;
  const double sa = var_a / static_cast<double>(n_a);
  const double sb = var_b / static_cast<double>(n_b);
  const double se = sa + sb;
  if (se <= 0.0) return mean_a == mean_b ? 1.0 : 0.0;
  const double t = (mean_a - mean_b) / std::sqrt(se);
  const double df = se * se /
                    (sa * sa / static_cast<double>(n_a - 1) +
                     sb * sb / static_cast<double>(n_b - 1));
  return student_t_two_sided(t, df);
}

std::vector<SuspicionEntry> suspicion_rank(
    std::span<const CycleClassStats> normal_cycles,
    std::span<const CycleClassStats> abnormal_cycles) {
  if (normal_cycles.size() < 10 || abnormal_cycles.size() < 3)
    throw InsufficientCycles(
        "need >= 10 normal and >= 3 abnormal cycles, got " +
        std::to_string(normal_cycles.size()) + "/" +
        std::to_string(abnormal_cycles.size()));

  std::set<std::string> class_names;
  for (const auto& c : normal_cycles)
    for (const auto& [name, stat] : c.classes) class_names.insert(name);
  for (const auto& c : abnormal_cycles)
    for (const auto& [name, stat] : c.classes) class_names.insert(name);

  std::vector<SuspicionEntry> entries;
  for (const auto& name : class_names) {
    SuspicionEntry entry;
    entry.event_class = name;

    // absent classes contribute beta = 0 in that cycle; mu only when present
    auto collect = [&](std::span<const CycleClassStats> cycles,
                       std::vector<double>& betas, std::vector<double>& mus) {
      for (const auto& c : cycles) {
        auto it = c.classes.find(name);
        betas.push_back(it == c.classes.end() ? 0.0 : it->second.beta);
        if (it != c.classes.end() && it->second.mu) {
          mus.push_back(*it->second.mu);
          if (entry.metric.empty()) entry.metric = it->second.metric;
        }
      }
    };

    std::vector<double> beta_norm, beta_abn, mu_norm, mu_abn;
    collect(normal_cycles, beta_norm, mu_norm);
    collect(abnormal_cycles, beta_abn, mu_abn);

    const auto bn = summarize(beta_norm);
    const auto ba = summarize(beta_abn);
    entry.beta_norm = bn.mean;
    entry.beta_abn = ba.mean;
    entry.delta_beta = ba.mean - bn.mean;
    entry.z_beta = (ba.mean - bn.mean) / floored_sigma(bn);
    entry.welch_p = welch_p_value(ba.mean, ba.var, ba.n, bn.mean, bn.var, bn.n);

    if (!mu_norm.empty() && !mu_abn.empty()) {
      const auto mn = summarize(mu_norm);
      const auto ma = summarize(mu_abn);
      entry.mu_norm = mn.mean;
      entry.mu_abn = ma.mean;
      entry.delta_mu = ma.mean - mn.mean;
      std::vector<double> log_norm, log_abn;
      log_norm.reserve(mu_norm.size());
      log_abn.reserve(mu_abn.size());
      for (double v : mu_norm) log_norm.push_back(std::log1p(std::max(0.0, v)));
      for (double v : mu_abn) log_abn.push_back(std::log1p(std::max(0.0, v)));
      const auto ln = summarize(log_norm);
      const auto la = summarize(log_abn);
      entry.z_log_mu = (la.mean - ln.mean) / floored_sigma(ln);
    }

    entry.score = std::abs(entry.delta_beta) *
                  (std::abs(entry.z_beta) + std::abs(entry.z_log_mu));
    entries.push_back(std::move(entry));
  }

  std::sort(entries.begin(), entries.end(),
            [](const SuspicionEntry& a, const SuspicionEntry& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.event_class < b.event_class;
            });
  return entries;
}

namespace {

std::map<std::pair<std::string, std::string>, std::map<int, std::vector<double>>>
rank_betas_by_group(std::span<const CycleClassStats> cycles) {
  // (class, comm) -> rank -> per-cycle betas
  std::map<std::pair<std::string, std::string>, std::map<int, std::vector<double>>>
      out;
  for (const auto& c : cycles)
    for (const auto& [key, beta] : c.collective_rank_beta) {
      const auto& [cls, comm, rank] = key;
      out[{cls, comm}][rank].push_back(beta);
    }
  return out;
}

}  // namespace

void attribute_straggler(std::vector<SuspicionEntry>& entries,
                         const TopologyMap& topology,
                         std::span<const CycleClassStats> normal_cycles,
                         std::span<const CycleClassStats> abnormal_cycles) {
  const auto norm_groups = rank_betas_by_group(normal_cycles);
  const auto abn_groups = rank_betas_by_group(abnormal_cycles);

  for (auto& entry : entries) {
    // candidate communicator groups for this class, from the abnormal window
    const std::pair<std::string, std::string>* best_group = nullptr;
    int best_rank = -1;
    double best_shift = 0.0;

    for (const auto& [group_key, abn_ranks] : abn_groups) {
      if (group_key.first != entry.event_class) continue;
      if (abn_ranks.size() < 2) continue;  // degenerate group, no attribution
      auto norm_it = norm_groups.find(group_key);
      for (const auto& [rank, abn_values] : abn_ranks) {
        const auto abn = summarize(abn_values);
        WindowStats norm;
        if (norm_it != norm_groups.end()) {
          auto rank_it = norm_it->second.find(rank);
          if (rank_it != norm_it->second.end()) norm = summarize(rank_it->second);
        }
        const double shift = std::abs(abn.mean - norm.mean);
        if (shift > best_shift) {
          best_shift = shift;
          best_rank = rank;
          best_group = &group_key;
        }
      }
    }

    if (best_group == nullptr) continue;
    StragglerAttribution attribution;
    attribution.comm_hash = best_group->second;
    attribution.rank = best_rank;
    attribution.rank_beta_shift = best_shift;
    if (const auto* loc = topology.find(best_group->second, best_rank))
      attribution.location = *loc;  // absent -> annotated unmapped, kept
    entry.attribution = attribution;
  }
}

json SuspicionEntry::to_json() const {
  json j{{"class", event_class},
         {"beta_norm", beta_norm},
         {"beta_abn", beta_abn},
         {"delta_beta", delta_beta},
         {"delta_beta_pct", 100.0 * delta_beta},
         {"z_beta", z_beta},
         {"z_log_mu", z_log_mu},
         {"score", score},
         {"metric", metric},
         {"mu_norm", mu_norm},
         {"mu_abn", mu_abn},
         {"delta_mu", delta_mu},
         {"p_value", welch_p}};
  if (attribution) {
    j["straggler"] = {{"comm", attribution->comm_hash},
                      {"rank", attribution->rank},
                      {"beta_shift", attribution->rank_beta_shift}};
    if (attribution->location) {
      j["straggler"]["node"] = attribution->location->node;
      j["straggler"]["device"] = attribution->location->device;
    } else {
      j["straggler"]["node"] = "unmapped";
    }
  }
  return j;
}

json render_json_report(std::span<const SuspicionEntry> entries) {
  json arr = json::array();
  for (const auto& e : entries) arr.push_back(e.to_json());
  return json{{"suspects", std::move(arr)}};
}

std::string render_text_report(std::span<const SuspicionEntry> entries,
                               std::size_t top_n) {
  std::ostringstream os;
  os << std::left << std::setw(26) << "class" << std::right << std::setw(9)
     << "dBeta%" << std::setw(14) << "metric" << std::setw(12) << "dMu"
     << std::setw(9) << "Z_b" << std::setw(9) << "Z_logu" << std::setw(10)
     << "score" << std::setw(10) << "p" << "  node/device\n";
  std::size_t shown = 0;
  for (const auto& e : entries) {
    if (shown++ >= top_n) break;
    os << std::left << std::setw(26) << e.event_class << std::right
       << std::fixed << std::setprecision(1) << std::setw(9)
       << 100.0 * e.delta_beta << std::setw(14) << (e.metric.empty() ? "-" : e.metric)
       << std::setprecision(3) << std::setw(12) << e.delta_mu << std::setw(9)
       << std::setprecision(1) << e.z_beta << std::setw(9) << e.z_log_mu
       << std::setprecision(3) << std::setw(10) << e.score
       << std::scientific << std::setprecision(1) << std::setw(10) << e.welch_p
       << std::defaultfloat << "  ";
    if (e.attribution) {
      if (e.attribution->location)
        os << e.attribution->location->label();
      else
        os << "rank " << e.attribution->rank << " (unmapped)";
    } else {
      os << "-";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace cyclescope
