#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "astra/vq.hpp"

namespace astra {

enum class CovarianceKind { isotropic, diagonal, full };

struct GaussianSpec {
  std::vector<double> mean;
  CovarianceKind kind = CovarianceKind::isotropic;
  double variance = 1.0;           // isotropic
  std::vector<double> diagonal;    // diagonal
  std::vector<double> covariance;  // full, D x D row-major

  std::size_t dim() const { return mean.size(); }
  // Dense D x D covariance regardless of kind.
  std::vector<double> covariance_matrix() const;
  // Per-coordinate variances (the diagonal of the covariance).
  std::vector<double> variances() const;

  static GaussianSpec isotropic(std::vector<double> mean, double variance);
  static GaussianSpec diag(std::vector<double> mean, std::vector<double> variances);
  static GaussianSpec dense(std::vector<double> mean, std::vector<double> covariance);
};

struct SymmetricEigen {
  std::vector<double> values;
  std::vector<double> vectors;  // column k is the k-th eigenvector, row-major n x n
  int sweeps = 0;
  bool converged = false;
};

// Cyclic Jacobi; stops once the off-diagonal Frobenius norm is below 1e-10 or
// after 100 sweeps.
SymmetricEigen jacobi_eigen(std::span<const double> matrix, std::size_t n);

// Squared 2-Wasserstein distance between Gaussians. Uses the per-coordinate
// standard-deviation form when neither covariance is full, otherwise the
// Bures term through eigendecompositions. Non-PSD input raises DomainError.
double w2_gaussian(const GaussianSpec& a, const GaussianSpec& b);
// Always takes the dense path (for cross-checking).
double w2_gaussian_full(const GaussianSpec& a, const GaussianSpec& b);

struct Theorem1Instance {
  std::size_t dim = 0;
  double lambda = 0.0;
  double residual_variance = 0.0;
  double mean_shift_sq = 0.0;     // ||mu||^2
  double w2_true_vs_quantized = 0.0;
  double w2_true_vs_noisy = 0.0;
  double mean_term_gap = 0.0;      // ||m_X - m_Xhat||^2 - ||m_X - m_Xtilde||^2
  double expected_mean_gap = 0.0;  // (2 lambda - lambda^2) ||mu||^2
  bool ordering_holds = false;     // var(Xhat) <= var(Xtilde) <= var(X) per coordinate
  bool holds = false;              // strict W2 improvement
};

// Builds P_X, P_Xtilde from P_Xhat and isotropic residual moments and compares
// their distances to P_X.
Theorem1Instance theorem1_instance(const GaussianSpec& quantized, const ResidualStats& residual, double lambda);

struct Theorem1Report {
  std::vector<Theorem1Instance> instances;
  int violations = 0;
  double min_margin = 0.0;  // min over instances of w2(X, Xhat) - w2(X, Xtilde)
};

// Random instances with D <= max_dim, lambda in (0, 1], all covariance kinds.
Theorem1Report verify_theorem1(int trials, std::uint64_t seed, std::size_t max_dim = 8);

struct VarianceReductionResult {
  int tokens = 0;
  int devices = 0;
  int dim = 0;
  int trials = 0;
  double sigma_k = 0.0;
  double sigma_v = 0.0;
  double single_error = 0.0;       // mean ||h_single - h||^2
  double distributed_error = 0.0;  // mean ||h_dist - h||^2
  double ratio = 1.0;
};

// Monte Carlo estimate of E||h_dist - h||^2 / E||h_single - h||^2 for a
// single-head class-token query. Every trial draws fresh q, K, V; each replica
// sees independent key and value noise on its non-local tokens.
VarianceReductionResult mc_variance_reduction(int tokens, int devices, int dim, double sigma_k, double sigma_v,
                                              int trials, std::uint64_t seed);

struct BoundConstants {
  double c1 = 0.0;
  double c2 = 0.0;
};

// alpha: weights over the m non-local tokens; values: their value rows (m x d).
BoundConstants variance_bound_constants(std::span<const double> alpha, const Tensor& values, std::size_t coordinate);

struct BoundCheck {
  std::size_t coordinates = 0;
  std::size_t within_bound = 0;
  std::vector<double> measured;  // per coordinate
  std::vector<double> bound;     // C1 sigma_v^2 + C2 sigma_k^2
  double fraction_within() const {
    return coordinates ? static_cast<double>(within_bound) / static_cast<double>(coordinates) : 1.0;
  }
};

// Random query, keys and values; the last m tokens are non-local and receive
// logit noise of variance sigma_k^2 and value noise of variance sigma_v^2. The
// perturbed output uses the exact softmax.
BoundCheck check_variance_bound(int tokens, int nonlocal, int dim, double sigma_k, double sigma_v, int samples,
                                std::uint64_t seed);

void write_theorem1_csv(std::ostream& os, const Theorem1Report& report);
void write_theorem2_csv(std::ostream& os, std::span<const VarianceReductionResult> results);
void write_theorem_text(std::ostream& os, const Theorem1Report& t1, std::span<const VarianceReductionResult> t2,
                        const BoundCheck& bound);

}  // namespace astra
