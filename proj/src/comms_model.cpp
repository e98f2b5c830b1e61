#include "astra/comms_model.hpp"

#include <cstdio>
#include <ostream>

#include "astra/error.hpp"
#include "astra/vq.hpp"

namespace astra {

std::string method_name(Method m) {
  switch (m) {
    case Method::single: return "single";
    case Method::astra: return "astra";
    case Method::tp: return "tp";
    case Method::sp: return "sp";
    case Method::bp_ag: return "bp_ag";
    case Method::bp_sp: return "bp_sp";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::single, Method::astra, Method::tp, Method::sp, Method::bp_ag, Method::bp_sp}) {
    if (method_name(m) == name) return m;
  }
  throw ContractError("unknown method '" + std::string(name) + "'");
}

void CommsConfig::validate() const {
  if (precision_bits < 1 || hidden < 1 || layers < 1 || tokens < 1 || devices < 1 || codebook_size < 1 ||
      groups < 1 || bp_ag_rounds < 1 || bp_sp_rounds < 1) {
    throw ContractError("comms config fields must be positive");
  }
  if (!(bandwidth_bps > 0.0)) throw ContractError("bandwidth must be positive");
  if (message_latency < 0.0) throw ContractError("message latency must be non-negative");
}

void MethodSpec::validate(const CommsConfig& cfg) const {
  const bool bp = method == Method::bp_ag || method == Method::bp_sp;
  if (bp && (nb < 1 || nb > cfg.layers)) {
    throw ContractError("block-parallel Nb must be in [1, L], got " + std::to_string(nb));
  }
  if (!bp && nb != 0) throw ContractError(method_name(method) + " takes no Nb");
}

namespace {

std::int64_t index_width(const CommsConfig& cfg) {
  return static_cast<std::int64_t>(cfg.groups) * index_bits(static_cast<std::uint32_t>(cfg.codebook_size));
}

std::int64_t rounds(const CommsConfig& cfg, const MethodSpec& spec) {
  return spec.nb * (spec.method == Method::bp_ag ? cfg.bp_ag_rounds : cfg.bp_sp_rounds);
}

}  // namespace

Rational bits_per_token(const CommsConfig& cfg, const MethodSpec& spec) {
  cfg.validate();
  spec.validate(cfg);
  const std::int64_t l = cfg.layers;
  const std::int64_t dr = static_cast<std::int64_t>(cfg.hidden) * cfg.precision_bits;
  switch (spec.method) {
    case Method::single: return Rational(0);
    case Method::astra: return Rational(l * index_width(cfg));
    case Method::sp: return Rational(l * dr);
    case Method::tp: return Rational(2 * 2 * l * dr);
    case Method::bp_ag:
    case Method::bp_sp: return Rational(rounds(cfg, spec) * dr);
  }
  return Rational(0);
}

Rational compression_ratio(const CommsConfig& cfg) {
  cfg.validate();
  const std::int64_t w = index_width(cfg);
  if (w == 0) throw ContractError("compression ratio undefined for zero-bit indices (K=1)");
  return Rational(static_cast<std::int64_t>(cfg.hidden) * cfg.precision_bits, w);
}

double allgather_seconds(double shard_bits, int devices, double bandwidth_bps, double latency) {
  const double steps = devices - 1;
  return steps * shard_bits / bandwidth_bps + steps * latency;
}

double allreduce_seconds(double volume_bits, int devices, double bandwidth_bps, double latency) {
  const double n = devices;
  return 2.0 * (n - 1.0) / n * volume_bits / bandwidth_bps + 2.0 * (n - 1.0) * latency;
}

double comm_time(const CommsConfig& cfg, const MethodSpec& spec) {
  cfg.validate();
  spec.validate(cfg);
  if (cfg.devices == 1 || spec.method == Method::single) return 0.0;
  const double shard_tokens = static_cast<double>(cfg.tokens) / cfg.devices;
  const double dr = static_cast<double>(cfg.hidden) * cfg.precision_bits;
  auto gather = [&](double bits_per_token) {
    return allgather_seconds(shard_tokens * bits_per_token, cfg.devices, cfg.bandwidth_bps, cfg.message_latency);
  };
  switch (spec.method) {
    case Method::astra: return cfg.layers * gather(static_cast<double>(index_width(cfg)));
    case Method::sp: return cfg.layers * gather(dr);
    case Method::tp:
      return cfg.layers * 2.0 *
             allreduce_seconds(cfg.tokens * dr, cfg.devices, cfg.bandwidth_bps, cfg.message_latency);
    case Method::bp_ag:
    case Method::bp_sp: return static_cast<double>(rounds(cfg, spec)) * gather(dr);
    case Method::single: break;
  }
  return 0.0;
}

double layer_flops(double tokens, double hidden) {
  return 24.0 * tokens * hidden * hidden + 4.0 * tokens * tokens * hidden;
}

double compute_time(const CommsConfig& cfg, const MethodSpec& spec, const DeviceProfile& profile) {
  cfg.validate();
  spec.validate(cfg);
  if (profile.seconds_per_flop < 0.0 || (profile.layer_seconds && *profile.layer_seconds < 0.0)) {
    throw ContractError("device profile must be non-negative");
  }
  const double per_layer =
      profile.layer_seconds ? *profile.layer_seconds : layer_flops(cfg.tokens, cfg.hidden) * profile.seconds_per_flop;
  const double single = cfg.layers * per_layer;
  return spec.method == Method::single ? single : single / cfg.devices;
}

DeviceProfile calibrate_profile(const CommsConfig& cfg, double single_seconds) {
  cfg.validate();
  if (!(single_seconds > 0.0)) throw ContractError("calibration anchor must be positive");
  DeviceProfile p;
  p.seconds_per_flop = single_seconds / (cfg.layers * layer_flops(cfg.tokens, cfg.hidden));
  return p;
}

LatencyReport latency_breakdown(const CommsConfig& cfg, const MethodSpec& spec, const DeviceProfile& profile) {
  LatencyReport r;
  r.compute_s = compute_time(cfg, spec, profile);
  r.comm_s = comm_time(cfg, spec);
  r.total_s = r.compute_s + r.comm_s;
  const double single = compute_time(cfg, {Method::single, 0}, profile);
  r.speedup = r.total_s > 0.0 ? single / r.total_s : 1.0;
  return r;
}

std::vector<SpeedupRow> speedup_table(const CommsConfig& base, const SweepRanges& ranges,
                                      const std::vector<MethodSpec>& methods, const DeviceProfile& profile) {
  std::vector<SpeedupRow> rows;
  for (double mbps : ranges.bandwidth_mbps)
    for (int n : ranges.devices)
      for (int t : ranges.tokens)
        for (const MethodSpec& spec : methods) {
          CommsConfig cfg = base;
          cfg.bandwidth_bps = mbps * 1e6;
          cfg.devices = n;
          cfg.tokens = t;
          rows.push_back({spec, mbps, n, t, latency_breakdown(cfg, spec, profile)});
        }
  return rows;
}

void write_speedup_csv(std::ostream& os, const std::vector<SpeedupRow>& rows) {
  auto g = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  os << "method,Nb,bandwidth_mbps,devices,tokens,compute_s,comm_s,total_s,speedup\n";
  for (const auto& r : rows) {
    os << method_name(r.spec.method) << ',' << r.spec.nb << ',' << g(r.bandwidth_mbps) << ',' << r.devices << ','
       << r.tokens << ',' << g(r.report.compute_s) << ',' << g(r.report.comm_s) << ',' << g(r.report.total_s) << ','
       << g(r.report.speedup) << '\n';
  }
}

}  // namespace astra
