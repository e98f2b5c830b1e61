#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "astra/error.hpp"
#include "astra/ops.hpp"
#include "astra/rng.hpp"
#include "astra/vq.hpp"

using namespace astra;

namespace {

Tensor gaussian(std::size_t r, std::size_t c, std::uint64_t seed, Precision p = Precision::f32) {
  Rng rng(seed);
  Tensor t(r, c, p);
  for (double& v : t.values()) v = rng.normal();
  t.round();
  return t;
}

// Exhaustive nearest-centroid search written independently of the library.
std::vector<std::uint32_t> brute_force(const Tensor& table, std::uint32_t groups, const Tensor& x) {
  const std::uint32_t k = static_cast<std::uint32_t>(table.rows() / groups);
  const std::size_t sub = table.cols();
  std::vector<std::uint32_t> out;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::uint32_t g = 0; g < groups; ++g) {
      double best = std::numeric_limits<double>::infinity();
      std::uint32_t arg = 0;
      for (std::uint32_t i = 0; i < k; ++i) {
        double d = 0.0;
        for (std::size_t c = 0; c < sub; ++c) {
          const double e = x(r, g * sub + c) - table(g * k + i, c);
          d += e * e;
        }
        if (d < best) {
          best = d;
          arg = i;
        }
      }
      out.push_back(arg);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("index widths") {
  CHECK(index_bits(1) == 0);
  CHECK(index_bits(2) == 1);
  CHECK(index_bits(3) == 2);
  CHECK(index_bits(1000) == 10);
  CHECK(index_bits(1024) == 10);
  CHECK(index_bits(1025) == 11);
  CHECK_THROWS_AS(index_bits(0), ContractError);
}

TEST_CASE("quantize matches brute force for K up to 64") {
  for (std::uint32_t groups : {1u, 2u, 4u}) {
    for (std::uint32_t k : {1u, 2u, 7u, 64u}) {
      const Tensor table = gaussian(static_cast<std::size_t>(groups) * k, 8 / groups, 10 + k + groups);
      const Codebook cb = Codebook::from_centroids(0, groups, table);
      const Tensor x = gaussian(50, 8, 99 + k);
      const Quantized q = quantize(cb, x);
      CHECK(q.tokens.indices == brute_force(table, groups, x));
      CHECK(q.tokens.bits_per_token() == static_cast<int>(groups) * index_bits(k));
      CHECK(dequantize(cb, q.tokens) == q.reconstruction);
    }
  }
}

TEST_CASE("quantize ties resolve to the lowest index") {
  const Tensor table(3, 2, {1, 0, -1, 0, 1, 0});
  const Codebook cb = Codebook::from_centroids(0, 1, table);
  const Quantized q = quantize(cb, Tensor(2, 2, {0, 0, 1, 0}));
  CHECK(q.tokens.index(0, 0) == 0);
  CHECK(q.tokens.index(1, 0) == 0);
}

TEST_CASE("K=1 needs zero bits and maps everything to the single entry") {
  const Codebook cb = Codebook::from_centroids(0, 2, Tensor(2, 3, {1, 2, 3, 4, 5, 6}));
  const Quantized q = quantize(cb, gaussian(4, 6, 3));
  CHECK(q.tokens.payload_bits() == 0);
  for (auto i : q.tokens.indices) CHECK(i == 0);
}

TEST_CASE("dequantize rejects corrupt indices") {
  const Codebook cb = Codebook::from_centroids(0, 1, gaussian(4, 2, 1));
  QuantizedTokens q{0, 1, 1, 4, {4}};
  CHECK_THROWS_AS(dequantize(cb, q), CorruptIndexError);
  q.indices = {};
  CHECK_THROWS_AS(dequantize(cb, q), CorruptIndexError);
}

TEST_CASE("quantize rejects width mismatch") {
  const Codebook cb = Codebook::from_centroids(0, 2, gaussian(8, 3, 1));
  CHECK_THROWS_AS(quantize(cb, gaussian(2, 5, 2)), DimensionError);
}

TEST_CASE("k-means distortion never increases between iterations") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = gaussian(300, 8, 100 + seed);
    KMeansTrace trace;
    const Codebook cb = kmeans_init(x, 16, 2, 30, seed, 3, &trace);
    CHECK(cb.layer_id() == 3);
    for (const auto& d : trace.distortion) {
      REQUIRE(!d.empty());
      for (std::size_t i = 1; i < d.size(); ++i) CHECK(d[i] <= d[i - 1] + 1e-12);
    }
  }
}

TEST_CASE("k-means recovers well separated clusters and reports data shortfalls") {
  Rng rng(5);
  Tensor x(200, 2, Precision::f64);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double cx = (r % 4 < 2 ? -10.0 : 10.0), cy = (r % 2 == 0 ? -10.0 : 10.0);
    x(r, 0) = cx + 0.1 * rng.normal();
    x(r, 1) = cy + 0.1 * rng.normal();
  }
  const Codebook cb = kmeans_init(x, 4, 1, 20, 1);
  for (std::uint32_t k = 0; k < 4; ++k) CHECK(std::abs(std::abs(cb.centroid(0, k)[0]) - 10.0) < 0.1);
  CHECK_THROWS_AS(kmeans_init(gaussian(3, 2, 1), 4, 1), InsufficientDataError);
  CHECK_THROWS_AS(kmeans_init(gaussian(8, 3, 1), 2, 2), DimensionError);
}

TEST_CASE("EMA converges to stationary cluster means") {
  const Tensor means(3, 2, {2, 0, -2, 1, 0, -3}, Precision::f64);
  Rng rng(42);
  Tensor x(300, 2, Precision::f64);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < 2; ++c) x(r, c) = means(r % 3, c) + 0.2 * rng.normal();
  // The exact batch means, which are the stationary point.
  double mu[3][2] = {};
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < 2; ++c) mu[r % 3][c] += x(r, c) / 100.0;

  Tensor start = means;
  for (double& v : start.values()) v += 0.3;
  Codebook cb = Codebook::from_centroids(0, 1, start, 0.0, {});
  for (int step = 0; step < 500; ++step) ema_update(cb, x, quantize(cb, x).tokens);
  for (std::uint32_t k = 0; k < 3; ++k)
    for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(cb.centroid(0, k)[c] - mu[k][c]) < 1e-3);
}

TEST_CASE("EMA accumulators follow the geometric closed form") {
  // Fixed batch, fixed assignment: count_t = d^t c0 + (1 - d^t) n_k.
  const Tensor table(2, 1, {0.0, 10.0}, Precision::f64);
  const double c0 = 5.0, decay = 0.9;
  Codebook cb = Codebook::from_centroids(0, 1, table, c0, {decay, 1e-5});
  const Tensor x(3, 1, {1.0, 2.0, 9.0}, Precision::f64);
  const auto q = quantize(cb, x).tokens;
  for (int t = 1; t <= 20; ++t) {
    ema_update(cb, x, q);
    const double dt = std::pow(decay, t);
    const double count0 = dt * c0 + (1 - dt) * 2.0;
    const double count1 = dt * c0 + (1 - dt) * 1.0;
    const double sum0 = dt * c0 * 0.0 + (1 - dt) * 3.0;
    const double sum1 = dt * c0 * 10.0 + (1 - dt) * 9.0;
    CHECK(cb.ema_count(0, 0) == doctest::Approx(count0).epsilon(1e-12));
    CHECK(cb.ema_count(0, 1) == doctest::Approx(count1).epsilon(1e-12));
    const double n = count0 + count1, eps = 1e-5;
    const double smooth0 = (count0 + eps) / (n + 2 * eps) * n;
    const double smooth1 = (count1 + eps) / (n + 2 * eps) * n;
    CHECK(cb.centroid(0, 0)[0] == doctest::Approx(sum0 / smooth0).epsilon(1e-12));
    CHECK(cb.centroid(0, 1)[0] == doctest::Approx(sum1 / smooth1).epsilon(1e-12));
  }
}

TEST_CASE("EMA leaves unused zero-mass entries in place and stays finite") {
  Codebook cb = Codebook::from_centroids(0, 1, Tensor(2, 1, {0.0, 100.0}, Precision::f64));
  const Tensor x(2, 1, {1.0, -1.0}, Precision::f64);
  for (int i = 0; i < 10; ++i) ema_update(cb, x, quantize(cb, x).tokens);
  CHECK(cb.centroid(0, 1)[0] == 100.0);
  CHECK(std::isfinite(cb.centroid(0, 0)[0]));
  CHECK_THROWS_AS(Codebook(0, 1, 4, 2, Precision::f32, {1.0, 1e-5}), ContractError);
}

TEST_CASE("codebook serialisation round-trips bitwise") {
  const Codebook cb = kmeans_init(gaussian(64, 8, 7), 16, 4, 10, 3, 5);
  const auto bytes = serialize_codebook(cb);
  CHECK(bytes.size() == 20 + 4 * 16 * 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "AVQ1");
  CHECK(bytes[4] == 5);
  const Codebook back = deserialize_codebook(bytes);
  CHECK(serialize_codebook(back) == bytes);
  CHECK(back.table() == cb.table());
  std::stringstream ss;
  write_codebook(ss, cb);
  CHECK(serialize_codebook(read_codebook(ss)) == bytes);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_codebook(bad), FormatError);
  bad = bytes;
  bad.resize(bytes.size() - 1);
  CHECK_THROWS_AS(deserialize_codebook(bad), FormatError);
}

TEST_CASE("commitment loss value and gradient") {
  Tape tape;
  Var x = tape.leaf(Tensor(1, 2, {1.0, 3.0}, Precision::f64));
  const Tensor x_hat(1, 2, {0.0, 1.0}, Precision::f64);
  Var l = commitment_loss(x, x_hat, 0.5);
  CHECK(l.value().item() == doctest::Approx(0.5 * (1 + 4)));
  tape.backward(l);
  CHECK(x.grad()(0, 0) == doctest::Approx(1.0));
  CHECK(x.grad()(0, 1) == doctest::Approx(2.0));
  Tape t2;
  Var y = t2.leaf(Tensor(1, 2, {1.0, 3.0}, Precision::f64));
  Var zero = commitment_loss(y, x_hat, 0.0);
  CHECK(zero.value().item() == 0.0);
  t2.backward(zero);
  CHECK(y.grad()(0, 0) == 0.0);
  CHECK_THROWS_AS(commitment_loss(y, x_hat, -1.0), ContractError);
}

TEST_CASE("residual statistics use population moments") {
  const Tensor x(4, 2, {1, 0, 2, 0, 3, 0, 4, 0}, Precision::f64);
  const Tensor z(4, 2, Precision::f64);
  const ResidualStats diag = fit_residual_stats(x, z, CovarianceMode::diagonal);
  CHECK(diag.mean()[0] == doctest::Approx(2.5));
  CHECK(diag.variance()[0] == doctest::Approx(1.25));
  CHECK(diag.variance()[1] == 0.0);
  const ResidualStats iso = fit_residual_stats(x, z, CovarianceMode::isotropic);
  CHECK(iso.isotropic_variance() == doctest::Approx(0.625));
  CHECK(iso.variance()[1] == doctest::Approx(0.625));
  CHECK_THROWS_AS(fit_residual_stats(x.rows_slice(0, 1), z.rows_slice(0, 1)), InsufficientDataError);
}

TEST_CASE("noise augmentation contract") {
  const Tensor x_hat = gaussian(200, 4, 1, Precision::f64);
  const ResidualStats stats =
      ResidualStats::from_moments(2, {0.5, 0.0, 0.0, -0.5}, {1.0, 1.0, 4.0, 0.25}, CovarianceMode::diagonal);
  NoiseConfig cfg{0.5, true, 77};
  CHECK_THROWS_AS(apply_noise(x_hat, stats, cfg, RunMode::inference), ModeError);
  const Tensor a = apply_noise(x_hat, stats, cfg, RunMode::training);
  CHECK(a == apply_noise(x_hat, stats, cfg, RunMode::training));
  double m0 = 0, v2 = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    m0 += (a(r, 0) - x_hat(r, 0)) / 200.0;
    v2 += std::pow(a(r, 2) - x_hat(r, 2), 2) / 200.0;
  }
  CHECK(std::abs(m0 - 0.25) < 0.12);
  CHECK(std::abs(v2 - 1.0) < 0.3);
  NoiseConfig off{0.0, true, 77};
  CHECK(apply_noise(x_hat, stats, off, RunMode::training) == x_hat);
  CHECK_THROWS_AS(apply_noise(x_hat, ResidualStats(2, 4), cfg, RunMode::training), LifecycleError);
}
