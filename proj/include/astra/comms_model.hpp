#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <boost/rational.hpp>

namespace astra {

using Rational = boost::rational<std::int64_t>;

enum class Method { single, astra, tp, sp, bp_ag, bp_sp };

std::string method_name(Method m);
Method parse_method(std::string_view name);

struct CommsConfig {
  int precision_bits = 32;
  int hidden = 768;
  int layers = 12;
  int tokens = 1024;
  int devices = 4;
  double bandwidth_bps = 1e7;
  double message_latency = 0.0;
  int codebook_size = 1024;
  int groups = 1;
  // Full-precision allgathers per retained block for the block-parallel
  // baselines.
  int bp_ag_rounds = 1;
  int bp_sp_rounds = 2;

  void validate() const;
};

struct MethodSpec {
  Method method = Method::astra;
  int nb = 0;  // retained blocks, block-parallel variants only

  void validate(const CommsConfig& cfg) const;
};

Rational bits_per_token(const CommsConfig& cfg, const MethodSpec& spec);
// Full-precision per-token volume over the ASTRA volume: D*r / (G*ceil(log2 K)).
Rational compression_ratio(const CommsConfig& cfg);

// Ring collectives. Allgather of an S-bit shard: (N-1)*S/B + (N-1)*latency.
double allgather_seconds(double shard_bits, int devices, double bandwidth_bps, double latency);
// Allreduce of V bits: 2(N-1)/N * V/B + 2(N-1)*latency.
double allreduce_seconds(double volume_bits, int devices, double bandwidth_bps, double latency);

double comm_time(const CommsConfig& cfg, const MethodSpec& spec);

// Either a per-FLOP cost or a measured single-device per-layer time.
struct DeviceProfile {
  double seconds_per_flop = 1e-12;
  std::optional<double> layer_seconds;
};

// 24*T*D^2 (projections and MLP) + 4*T^2*D (scores and weighted sum).
double layer_flops(double tokens, double hidden);
double compute_time(const CommsConfig& cfg, const MethodSpec& spec, const DeviceProfile& profile);
// Profile whose single-device compute time for `cfg` equals `single_seconds`.
DeviceProfile calibrate_profile(const CommsConfig& cfg, double single_seconds);

struct LatencyReport {
  double compute_s = 0.0;
  double comm_s = 0.0;
  double total_s = 0.0;
  double speedup = 1.0;
  double comm_fraction() const { return total_s > 0.0 ? comm_s / total_s : 0.0; }
};

LatencyReport latency_breakdown(const CommsConfig& cfg, const MethodSpec& spec, const DeviceProfile& profile);

struct SweepRanges {
  std::vector<double> bandwidth_mbps;
  std::vector<int> devices;
  std::vector<int> tokens;
};

struct SpeedupRow {
  MethodSpec spec;
  double bandwidth_mbps = 0.0;
  int devices = 0;
  int tokens = 0;
  LatencyReport report;
};

std::vector<SpeedupRow> speedup_table(const CommsConfig& base, const SweepRanges& ranges,
                                      const std::vector<MethodSpec>& methods, const DeviceProfile& profile);
// Columns: method,Nb,bandwidth_mbps,devices,tokens,compute_s,comm_s,total_s,speedup
void write_speedup_csv(std::ostream& os, const std::vector<SpeedupRow>& rows);

}  // namespace astra
