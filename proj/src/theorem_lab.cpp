#include "astra/theorem_lab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

#include "astra/error.hpp"
#include "astra/rng.hpp"

namespace astra {

GaussianSpec GaussianSpec::isotropic(std::vector<double> mean, double variance) {
  GaussianSpec g;
  g.mean = std::move(mean);
  g.kind = CovarianceKind::isotropic;
  g.variance = variance;
  return g;
}

GaussianSpec GaussianSpec::diag(std::vector<double> mean, std::vector<double> variances) {
  if (variances.size() != mean.size()) throw DimensionError("diagonal covariance length differs from mean");
  GaussianSpec g;
  g.mean = std::move(mean);
  g.kind = CovarianceKind::diagonal;
  g.diagonal = std::move(variances);
  return g;
}

GaussianSpec GaussianSpec::dense(std::vector<double> mean, std::vector<double> covariance) {
  if (covariance.size() != mean.size() * mean.size()) throw DimensionError("covariance is not D x D");
  GaussianSpec g;
  g.mean = std::move(mean);
  g.kind = CovarianceKind::full;
  g.covariance = std::move(covariance);
  return g;
}

std::vector<double> GaussianSpec::variances() const {
  const std::size_t d = dim();
  switch (kind) {
    case CovarianceKind::isotropic: return std::vector<double>(d, variance);
    case CovarianceKind::diagonal: return diagonal;
    case CovarianceKind::full: {
      std::vector<double> v(d);
      for (std::size_t i = 0; i < d; ++i) v[i] = covariance[i * d + i];
      return v;
    }
  }
  return {};
}

std::vector<double> GaussianSpec::covariance_matrix() const {
  if (kind == CovarianceKind::full) return covariance;
  const std::size_t d = dim();
  std::vector<double> c(d * d, 0.0);
  const auto v = variances();
  for (std::size_t i = 0; i < d; ++i) c[i * d + i] = v[i];
  return c;
}

SymmetricEigen jacobi_eigen(std::span<const double> matrix, std::size_t n) {
  if (matrix.size() != n * n) throw DimensionError("jacobi_eigen: matrix is not n x n");
  std::vector<double> a(matrix.begin(), matrix.end());
  SymmetricEigen out;
  out.vectors.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out.vectors[i * n + i] = 1.0;
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a[i * n + j] * a[i * n + j];
    return std::sqrt(s);
  };
  while (off_norm() >= 1e-10 && out.sweeps < 100) {
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = out.vectors[k * n + p], vkq = out.vectors[k * n + q];
          out.vectors[k * n + p] = c * vkp - s * vkq;
          out.vectors[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  out.converged = off_norm() < 1e-10;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = a[i * n + i];
  return out;
}

namespace {

void check_mean_dims(const GaussianSpec& a, const GaussianSpec& b) {
  if (a.dim() != b.dim() || a.dim() == 0) throw DimensionError("Gaussians must share a positive dimension");
}

double mean_term(const GaussianSpec& a, const GaussianSpec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) s += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  return s;
}

void check_variances(std::span<const double> v) {
  for (double x : v) {
    if (!(x >= 0.0)) throw DomainError("covariance has a negative variance");
  }
}

// PSD square root through an eigendecomposition; raises DomainError when the
// input is asymmetric or has a clearly negative eigenvalue.
std::vector<double> psd_sqrt(std::span<const double> m, std::size_t n) {
  double scale = 1.0;
  for (double x : m) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m[i * n + j] - m[j * n + i]) > 1e-12 * scale) throw DomainError("covariance is not symmetric");
  const SymmetricEigen e = jacobi_eigen(m, n);
  std::vector<double> root(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    if (e.values[k] < -1e-9 * scale) {
      throw DomainError("covariance is not positive semi-definite (eigenvalue " + std::to_string(e.values[k]) + ")");
    }
    const double s = std::sqrt(std::max(e.values[k], 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) root[i * n + j] += s * e.vectors[i * n + k] * e.vectors[j * n + k];
  }
  return root;
}

std::vector<double> matmul_sq(std::span<const double> a, std::span<const double> b, std::size_t n) {
  std::vector<double> c(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * n + k] * b[k * n + j];
  return c;
}

}  // namespace

double w2_gaussian_full(const GaussianSpec& a, const GaussianSpec& b) {
  check_mean_dims(a, b);
  const std::size_t n = a.dim();
  const auto ca = a.covariance_matrix();
  const auto cb = b.covariance_matrix();
  const auto sb = psd_sqrt(cb, n);
  psd_sqrt(ca, n);
  auto inner = matmul_sq(matmul_sq(sb, ca, n), sb, n);
  // Symmetrise away rounding before the second square root.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) inner[i * n + j] = inner[j * n + i] = 0.5 * (inner[i * n + j] + inner[j * n + i]);
  const auto cross = psd_sqrt(inner, n);
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += ca[i * n + i] + cb[i * n + i] - 2.0 * cross[i * n + i];
  return std::max(0.0, mean_term(a, b) + trace);
}

double w2_gaussian(const GaussianSpec& a, const GaussianSpec& b) {
  check_mean_dims(a, b);
  if (a.kind == CovarianceKind::full || b.kind == CovarianceKind::full) return w2_gaussian_full(a, b);
  const auto va = a.variances();
  const auto vb = b.variances();
  check_variances(va);
  check_variances(vb);
  double s = mean_term(a, b);
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double d = std::sqrt(va[i]) - std::sqrt(vb[i]);
    s += d * d;
  }
  return s;
}

namespace {

GaussianSpec shifted(const GaussianSpec& base, std::span<const double> mean_shift, double mean_scale,
                     double added_variance) {
  GaussianSpec g = base;
  for (std::size_t i = 0; i < g.dim(); ++i) g.mean[i] += mean_scale * mean_shift[i];
  switch (g.kind) {
    case CovarianceKind::isotropic: g.variance += added_variance; break;
    case CovarianceKind::diagonal:
      for (double& v : g.diagonal) v += added_variance;
      break;
    case CovarianceKind::full:
      for (std::size_t i = 0; i < g.dim(); ++i) g.covariance[i * g.dim() + i] += added_variance;
      break;
  }
  return g;
}

}  // namespace

Theorem1Instance theorem1_instance(const GaussianSpec& quantized, const ResidualStats& residual, double lambda) {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw ContractError("lambda must lie in (0, 1]");
  if (residual.mode() != CovarianceMode::isotropic) throw ContractError("residual statistics must be isotropic");
  if (residual.dim() != quantized.dim()) throw DimensionError("residual and embedding dimensions differ");
  const auto& mu = residual.mean();
  const double sigma2 = residual.isotropic_variance();

  const GaussianSpec x = shifted(quantized, mu, 1.0, sigma2);
  const GaussianSpec x_tilde = shifted(quantized, mu, lambda, lambda * lambda * sigma2);

  Theorem1Instance r;
  r.dim = quantized.dim();
  r.lambda = lambda;
  r.residual_variance = sigma2;
  for (double m : mu) r.mean_shift_sq += m * m;
  r.w2_true_vs_quantized = w2_gaussian(x, quantized);
  r.w2_true_vs_noisy = w2_gaussian(x, x_tilde);
  r.mean_term_gap = mean_term(x, quantized) - mean_term(x, x_tilde);
  r.expected_mean_gap = (2.0 * lambda - lambda * lambda) * r.mean_shift_sq;
  const auto vq = quantized.variances(), vt = x_tilde.variances(), vx = x.variances();
  r.ordering_holds = true;
  for (std::size_t i = 0; i < vq.size(); ++i) r.ordering_holds &= vq[i] <= vt[i] && vt[i] <= vx[i];
  r.holds = r.w2_true_vs_noisy < r.w2_true_vs_quantized;
  return r;
}

Theorem1Report verify_theorem1(int trials, std::uint64_t seed, std::size_t max_dim) {
  if (trials < 1 || max_dim < 1) throw ContractError("verify_theorem1 needs positive trials and dimension");
  Theorem1Report report;
  report.min_margin = INFINITY;
  const Rng root = Rng(seed).stream("theorem1");
  for (int t = 0; t < trials; ++t) {
    Rng rng = root.stream(static_cast<std::uint64_t>(t));
    const std::size_t d = 1 + rng.below(max_dim);
    std::vector<double> mean(d), mu(d);
    for (double& m : mean) m = rng.normal();
    for (double& m : mu) m = rng.normal(0.0, 0.5);
    GaussianSpec q;
    switch (rng.below(3)) {
      case 0: q = GaussianSpec::isotropic(mean, rng.uniform(0.1, 2.0)); break;
      case 1: {
        std::vector<double> v(d);
        for (double& x : v) x = rng.uniform(0.05, 2.0);
        q = GaussianSpec::diag(mean, v);
        break;
      }
      default: {
        std::vector<double> a(d * d), c(d * d, 0.0);
        for (double& x : a) x = rng.normal() / std::sqrt(static_cast<double>(d));
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            for (std::size_t k = 0; k < d; ++k) c[i * d + j] += a[i * d + k] * a[j * d + k];
            if (i == j) c[i * d + j] += 0.05;
          }
        q = GaussianSpec::dense(mean, c);
      }
    }
    const double sigma2 = rng.uniform(0.01, 1.0);
    const double lambda = 1.0 - rng.uniform();
    const ResidualStats res =
        ResidualStats::from_moments(0, mu, std::vector<double>(d, sigma2), CovarianceMode::isotropic);
    Theorem1Instance inst = theorem1_instance(q, res, lambda);
    if (!inst.holds) ++report.violations;
    report.min_margin = std::min(report.min_margin, inst.w2_true_vs_quantized - inst.w2_true_vs_noisy);
    report.instances.push_back(inst);
  }
  return report;
}

namespace {

struct Instance {
  std::vector<double> q, k, v;  // d, T x d, T x d
};

Instance draw_instance(Rng& rng, int tokens, int dim) {
  Instance in;
  in.q.resize(static_cast<std::size_t>(dim));
  in.k.resize(static_cast<std::size_t>(tokens * dim));
  in.v.resize(static_cast<std::size_t>(tokens * dim));
  for (double& x : in.q) x = rng.normal();
  for (double& x : in.k) x = rng.normal();
  for (double& x : in.v) x = rng.normal();
  return in;
}

// Softmax attention of q over (k, v) with optional per-token logit offsets.
std::vector<double> attend(const Instance& in, std::span<const double> k, std::span<const double> v, int tokens,
                           int dim) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> a(static_cast<std::size_t>(tokens));
  double mx = -INFINITY;
  for (int j = 0; j < tokens; ++j) {
    double s = 0.0;
    for (int c = 0; c < dim; ++c) s += in.q[static_cast<std::size_t>(c)] * k[static_cast<std::size_t>(j * dim + c)];
    a[static_cast<std::size_t>(j)] = s * scale;
    mx = std::max(mx, a[static_cast<std::size_t>(j)]);
  }
  double z = 0.0;
  for (double& x : a) z += (x = std::exp(x - mx));
  std::vector<double> h(static_cast<std::size_t>(dim), 0.0);
  for (int j = 0; j < tokens; ++j)
    for (int c = 0; c < dim; ++c)
      h[static_cast<std::size_t>(c)] += a[static_cast<std::size_t>(j)] / z * v[static_cast<std::size_t>(j * dim + c)];
  return h;
}

std::vector<double> noisy_replica(const Instance& in, int tokens, int dim, int local_begin, int local_end,
                                  double sigma_k, double sigma_v, Rng& rng) {
  std::vector<double> k = in.k, v = in.v;
  for (int j = 0; j < tokens; ++j) {
    if (j >= local_begin && j < local_end) continue;
    for (int c = 0; c < dim; ++c) {
      k[static_cast<std::size_t>(j * dim + c)] += sigma_k * rng.normal();
      v[static_cast<std::size_t>(j * dim + c)] += sigma_v * rng.normal();
    }
  }
  return attend(in, k, v, tokens, dim);
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

VarianceReductionResult mc_variance_reduction(int tokens, int devices, int dim, double sigma_k, double sigma_v,
                                              int trials, std::uint64_t seed) {
  if (trials < 100) throw InsufficientDataError("need at least 100 trials, got " + std::to_string(trials));
  if (devices < 1 || tokens < devices || dim < 1) throw ContractError("invalid variance-reduction geometry");
  if (tokens % devices != 0) throw ContractError("device count must divide the token count");
  if (sigma_k < 0.0 || sigma_v < 0.0) throw ContractError("noise scales must be non-negative");

  VarianceReductionResult r{tokens, devices, dim, trials, sigma_k, sigma_v, 0.0, 0.0, 1.0};
  const int shard = tokens / devices;
  const Rng root = Rng(seed).stream("theorem2");
  double sum_single = 0.0, sum_dist = 0.0;
  for (int t = 0; t < trials; ++t) {
    Rng rng = root.stream(static_cast<std::uint64_t>(t));
    const Instance in = draw_instance(rng, tokens, dim);
    const auto h = attend(in, in.k, in.v, tokens, dim);
    const auto single = noisy_replica(in, tokens, dim, 0, shard, sigma_k, sigma_v, rng);
    std::vector<double> dist(static_cast<std::size_t>(dim), 0.0);
    for (int d = 0; d < devices; ++d) {
      const auto rep = noisy_replica(in, tokens, dim, d * shard, (d + 1) * shard, sigma_k, sigma_v, rng);
      for (int c = 0; c < dim; ++c) dist[static_cast<std::size_t>(c)] += rep[static_cast<std::size_t>(c)] / devices;
    }
    sum_single += sq_dist(single, h);
    sum_dist += sq_dist(dist, h);
  }
  r.single_error = sum_single / trials;
  r.distributed_error = sum_dist / trials;
  r.ratio = devices == 1 || sum_single == 0.0 ? 1.0 : sum_dist / sum_single;
  return r;
}

BoundConstants variance_bound_constants(std::span<const double> alpha, const Tensor& values, std::size_t coordinate) {
  if (values.rows() != alpha.size()) throw DimensionError("one value row per attention weight required");
  if (coordinate >= values.cols()) throw DimensionError("coordinate out of range");
  const double m = static_cast<double>(alpha.size());
  double max_a2 = 0.0, max_av2 = 0.0;
  for (std::size_t j = 0; j < alpha.size(); ++j) {
    if (alpha[j] < 0.0 || alpha[j] > 1.0) throw ContractError("attention weights must lie in [0, 1]");
    const double a2 = alpha[j] * alpha[j];
    const double v = values(j, coordinate);
    max_a2 = std::max(max_a2, a2);
    max_av2 = std::max(max_av2, a2 * v * v);
  }
  return {m * max_a2, 2.0 * m * max_av2};
}

BoundCheck check_variance_bound(int tokens, int nonlocal, int dim, double sigma_k, double sigma_v, int samples,
                                std::uint64_t seed) {
  if (samples < 100) throw InsufficientDataError("need at least 100 samples");
  if (nonlocal < 1 || nonlocal > tokens || dim < 1) throw ContractError("invalid bound-check geometry");
  Rng rng = Rng(seed).stream("bound");
  const Instance in = draw_instance(rng, tokens, dim);
  const std::size_t first = static_cast<std::size_t>(tokens - nonlocal);
  const std::size_t d = static_cast<std::size_t>(dim);

  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> logits(static_cast<std::size_t>(tokens));
  for (std::size_t j = 0; j < logits.size(); ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += in.q[c] * in.k[j * d + c];
    logits[j] = s * scale;
  }
  auto softmax = [](std::vector<double> a) {
    const double mx = *std::max_element(a.begin(), a.end());
    double z = 0.0;
    for (double& x : a) z += (x = std::exp(x - mx));
    for (double& x : a) x /= z;
    return a;
  };
  const auto alpha = softmax(logits);
  const std::vector<double> alpha_nl(alpha.begin() + static_cast<std::ptrdiff_t>(first), alpha.end());
  Tensor v_nl(static_cast<std::size_t>(nonlocal), d, Precision::f64);
  for (std::size_t j = 0; j < v_nl.rows(); ++j)
    for (std::size_t c = 0; c < d; ++c) v_nl(j, c) = in.v[(first + j) * d + c];

  std::vector<double> mean(d, 0.0), m2(d, 0.0);
  for (int s = 0; s < samples; ++s) {
    auto l = logits;
    auto v = in.v;
    for (std::size_t j = first; j < l.size(); ++j) {
      l[j] += sigma_k * rng.normal();
      for (std::size_t c = 0; c < d; ++c) v[j * d + c] += sigma_v * rng.normal();
    }
    const auto a = softmax(l);
    for (std::size_t c = 0; c < d; ++c) {
      double h = 0.0;
      for (std::size_t j = 0; j < a.size(); ++j) h += a[j] * v[j * d + c];
      const double delta = h - mean[c];
      mean[c] += delta / (s + 1);
      m2[c] += delta * (h - mean[c]);
    }
  }
  BoundCheck out;
  out.coordinates = d;
  for (std::size_t c = 0; c < d; ++c) {
    const BoundConstants k = variance_bound_constants(alpha_nl, v_nl, c);
    const double measured = m2[c] / samples;
    const double bound = k.c1 * sigma_v * sigma_v + k.c2 * sigma_k * sigma_k;
    out.measured.push_back(measured);
    out.bound.push_back(bound);
    if (measured <= bound) ++out.within_bound;
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void write_theorem1_csv(std::ostream& os, const Theorem1Report& report) {
  os << "instance,dim,lambda,residual_variance,mean_shift_sq,w2_x_xhat,w2_x_xtilde,mean_gap,expected_mean_gap,"
        "ordering,pass\n";
  for (std::size_t i = 0; i < report.instances.size(); ++i) {
    const auto& r = report.instances[i];
    os << i << ',' << r.dim << ',' << fmt(r.lambda) << ',' << fmt(r.residual_variance) << ',' << fmt(r.mean_shift_sq)
       << ',' << fmt(r.w2_true_vs_quantized) << ',' << fmt(r.w2_true_vs_noisy) << ',' << fmt(r.mean_term_gap) << ','
       << fmt(r.expected_mean_gap) << ',' << (r.ordering_holds ? "ok" : "violated") << ','
       << (r.holds ? "pass" : "fail") << '\n';
  }
}

void write_theorem2_csv(std::ostream& os, std::span<const VarianceReductionResult> results) {
  os << "tokens,devices,dim,trials,sigma_k,sigma_v,single_error,distributed_error,ratio,expected\n";
  for (const auto& r : results) {
    os << r.tokens << ',' << r.devices << ',' << r.dim << ',' << r.trials << ',' << fmt(r.sigma_k) << ','
       << fmt(r.sigma_v) << ',' << fmt(r.single_error) << ',' << fmt(r.distributed_error) << ',' << fmt(r.ratio)
       << ',' << fmt(1.0 / r.devices) << '\n';
  }
}

void write_theorem_text(std::ostream& os, const Theorem1Report& t1, std::span<const VarianceReductionResult> t2,
                        const BoundCheck& bound) {
  os << "noise-augmented embeddings: " << t1.instances.size() << " instances, " << t1.violations
     << " violations, min margin " << fmt(t1.min_margin) << '\n';
  for (const auto& r : t2) {
    os << "class-token variance ratio N=" << r.devices << ": " << fmt(r.ratio) << " (1/N = " << fmt(1.0 / r.devices)
       << ", sigma_k=" << fmt(r.sigma_k) << ", trials=" << r.trials << ")\n";
  }
  os << "variance bound: " << bound.within_bound << '/' << bound.coordinates << " coordinates within bound\n";
}

}  // namespace astra
