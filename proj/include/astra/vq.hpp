#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "astra/tape.hpp"
#include "astra/tensor.hpp"

namespace astra {

// ceil(log2(k)) for k >= 1; a single-entry codebook needs zero bits.
int index_bits(std::uint32_t k);

struct CodebookOptions {
  double decay = 0.99;
  double smoothing = 1e-5;
  friend bool operator==(const CodebookOptions&, const CodebookOptions&) = default;
};

// Per-layer grouped codebook: G tables of K centroids, each of width D/G, plus
// the exponential-moving-average accumulators that drive online updates.
class Codebook {
 public:
  Codebook() = default;
  Codebook(std::uint32_t layer_id, std::uint32_t groups, std::uint32_t size, std::uint32_t sub_dim,
           Precision precision = Precision::f32, CodebookOptions options = {});

  // Builds a codebook from a (G*K) x sub_dim table in group-major order. EMA
  // mass starts at `initial_count` per entry with sums = count * centroid.
  static Codebook from_centroids(std::uint32_t layer_id, std::uint32_t groups,
                                 const Tensor& table, double initial_count = 0.0,
                                 CodebookOptions options = {});

  std::uint32_t layer_id() const { return layer_id_; }
  std::uint32_t groups() const { return groups_; }
  std::uint32_t size() const { return size_; }
  std::uint32_t sub_dim() const { return sub_dim_; }
  std::uint32_t dim() const { return groups_ * sub_dim_; }
  Precision precision() const { return precision_; }
  const CodebookOptions& options() const { return options_; }
  int bits_per_token() const { return static_cast<int>(groups_) * index_bits(size_); }

  std::span<const double> centroid(std::uint32_t g, std::uint32_t k) const;
  std::span<double> centroid_mut(std::uint32_t g, std::uint32_t k);
  double ema_count(std::uint32_t g, std::uint32_t k) const { return counts_[g * size_ + k]; }
  std::span<const double> ema_sum(std::uint32_t g, std::uint32_t k) const;
  // Laplace-smoothed EMA count used as the centroid denominator.
  double smoothed_count(std::uint32_t g, std::uint32_t k) const;
  double total_mass(std::uint32_t g) const;

  // Table of all centroids, (G*K) x sub_dim, group-major.
  Tensor table() const;

  // Low-level accumulator access used by k-means seeding and EMA updates.
  void set_ema(std::uint32_t g, std::uint32_t k, double count, std::span<const double> sum);
  // centroid = sum / smoothed count; a no-op while the entry has no mass.
  void recompute_centroid(std::uint32_t g, std::uint32_t k);

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:

  std::uint32_t layer_id_ = 0;
  std::uint32_t groups_ = 1;
  std::uint32_t size_ = 1;
  std::uint32_t sub_dim_ = 1;
  Precision precision_ = Precision::f32;
  CodebookOptions options_;
  std::vector<double> centroids_;  // G*K*sub_dim
  std::vector<double> counts_;     // G*K
  std::vector<double> sums_;       // G*K*sub_dim
};

struct QuantizedTokens {
  std::uint32_t layer_id = 0;
  std::uint32_t token_count = 0;
  std::uint32_t groups = 1;
  std::uint32_t codebook_size = 1;
  std::vector<std::uint32_t> indices;  // token-major, token_count * groups

  std::uint32_t index(std::size_t token, std::size_t group) const {
    return indices[token * groups + group];
  }
  int bits_per_token() const { return static_cast<int>(groups) * index_bits(codebook_size); }
  std::uint64_t payload_bits() const {
    return static_cast<std::uint64_t>(token_count) * static_cast<std::uint64_t>(bits_per_token());
  }
  friend bool operator==(const QuantizedTokens&, const QuantizedTokens&) = default;
};

struct Quantized {
  QuantizedTokens tokens;
  Tensor reconstruction;
};

struct KMeansTrace {
  // distortion[g][it]: mean squared distance after the it-th assignment step.
  std::vector<std::vector<double>> distortion;
  std::vector<int> iterations_run;
};

// Per-group Lloyd's k-means with k-means++ seeding. Empty clusters are reseeded
// from the point farthest from its centroid. EMA accumulators are seeded from
// the final assignment.
Codebook kmeans_init(const Tensor& embeddings, std::uint32_t k, std::uint32_t groups,
                     int iterations = 25, std::uint64_t seed = 0, std::uint32_t layer_id = 0,
                     KMeansTrace* trace = nullptr);

// Nearest centroid per token and group; ties go to the lowest index.
Quantized quantize(const Codebook& cb, const Tensor& x);
Tensor dequantize(const Codebook& cb, const QuantizedTokens& q);

// One EMA step: counts and sums decay toward this batch's assignment histogram
// and per-cluster sums, then centroids are recomputed from the smoothed counts.
// Entries that have never received mass keep their centroid.
void ema_update(Codebook& cb, const Tensor& x, const QuantizedTokens& q);

// beta * ||x - sg(x_hat)||^2, gradient reaching x only.
Var commitment_loss(Var x, const Tensor& x_hat, double beta);

enum class CovarianceMode { isotropic, diagonal };

// Streaming moments of quantisation residuals x - x_hat. Variances are
// population (second central) moments.
class ResidualStats {
 public:
  ResidualStats() = default;
  ResidualStats(std::uint32_t layer_id, std::size_t dim, CovarianceMode mode = CovarianceMode::isotropic);

  void accumulate(const Tensor& x, const Tensor& x_hat);
  void reset();

  std::uint32_t layer_id() const { return layer_id_; }
  std::size_t dim() const { return mean_.size(); }
  CovarianceMode mode() const { return mode_; }
  std::uint64_t sample_count() const { return count_; }
  bool fitted() const { return count_ >= 2; }

  const std::vector<double>& mean() const { return mean_; }
  // Per-dimension variance; in isotropic mode every entry is the pooled value.
  std::vector<double> variance() const;
  double isotropic_variance() const;

  // Sets the moments directly (for tests and checkpoint restore).
  static ResidualStats from_moments(std::uint32_t layer_id, std::vector<double> mean,
                                    std::vector<double> variance, CovarianceMode mode,
                                    std::uint64_t count = 2);
  // Exact restore from raw Welford accumulators.
  static ResidualStats from_sums(std::uint32_t layer_id, std::vector<double> mean, std::vector<double> m2,
                                 CovarianceMode mode, std::uint64_t count);
  const std::vector<double>& squared_deviation_sums() const { return m2_; }

 private:
  std::uint32_t layer_id_ = 0;
  CovarianceMode mode_ = CovarianceMode::isotropic;
  std::uint64_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;  // Welford sum of squared deviations
};

ResidualStats fit_residual_stats(const Tensor& x, const Tensor& x_hat,
                                 CovarianceMode mode = CovarianceMode::isotropic,
                                 std::uint32_t layer_id = 0);

enum class RunMode { training, inference };

struct NoiseConfig {
  double lambda = 0.0;
  bool enabled = false;
  std::uint64_t stream_key = 0;
};

// x_hat + lambda * xi with xi ~ N(mu, Sigma) drawn per (stream, layer, token,
// dimension). `token_offset` is added to row indices to form the token key.
Tensor apply_noise(const Tensor& x_hat, const ResidualStats& stats, const NoiseConfig& cfg,
                   RunMode mode, std::size_t token_offset = 0);

// Flat binary record: "AVQ1", layer, G, K, D/G as u32 LE, then f32 LE
// centroids (group, index, dimension).
std::vector<std::uint8_t> serialize_codebook(const Codebook& cb);
Codebook deserialize_codebook(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);
void write_codebook(std::ostream& os, const Codebook& cb);
Codebook read_codebook(std::istream& is);

}  // namespace astra
