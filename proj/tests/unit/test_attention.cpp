#include <doctest.h>

#include <cmath>
#include <vector>

#include "astra/attention.hpp"
#include "astra/error.hpp"
#include "astra/grad_check.hpp"
#include "astra/ops.hpp"
#include "astra/rng.hpp"

using namespace astra;

namespace {

Tensor rand64(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(r, c, Precision::f64);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

std::vector<std::size_t> active(const BoolMatrix& m, std::size_t row) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < m.cols(); ++c)
    if (m(row, c)) out.push_back(c);
  return out;
}

// Materialises the full rows x (2T) score matrix per head with plain loops.
Tensor dense_reference(const Tensor& q, const Tensor& k, const Tensor& kh, const Tensor& v,
                       const Tensor& vh, const BoolMatrix& mask, int heads) {
  const std::size_t rows = q.rows(), t = k.rows(), d = q.cols(), dk = d / heads;
  Tensor out(rows, d, Precision::f64);
  for (int h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < rows; ++i) {
      std::vector<double> s(2 * t);
      double mx = -1e300;
      for (std::size_t j = 0; j < 2 * t; ++j) {
        const Tensor& keys = j < t ? k : kh;
        double dot = 0;
        for (std::size_t c = 0; c < dk; ++c) dot += q(i, h * dk + c) * keys(j % t, h * dk + c);
        s[j] = dot / std::sqrt(static_cast<double>(dk));
        if (mask(i, j)) mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < 2 * t; ++j) {
        s[j] = mask(i, j) ? std::exp(s[j] - mx) : 0.0;
        z += s[j];
      }
      for (std::size_t j = 0; j < 2 * t; ++j) {
        const Tensor& vals = j < t ? v : vh;
        for (std::size_t c = 0; c < dk; ++c) out(i, h * dk + c) += s[j] / z * vals(j % t, h * dk + c);
      }
    }
  }
  return out;
}

std::vector<double> softmax_ref(std::vector<double> a) {
  double z = 0;
  for (double& x : a) z += (x = std::exp(x));
  for (double& x : a) x /= z;
  return a;
}

}  // namespace

TEST_CASE("mask examples") {
  const ShardPlan plan = partition_tokens(4, 2);
  const auto nc = build_mask(4, plan, false);
  CHECK(active(nc.matrix(), 0) == std::vector<std::size_t>{0, 1, 6, 7});
  const auto c = build_mask(4, plan, true);
  CHECK(active(c.matrix(), 2) == std::vector<std::size_t>{2, 4, 5});
  for (bool causal : {false, true}) {
    const auto one = build_mask(5, partition_tokens(5, 1), causal);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(one.full(i, j) == (!causal || j <= i));
        CHECK_FALSE(one.quantized(i, j));
      }
  }
  CHECK_THROWS_AS(build_mask(5, plan, false), PlanError);
}

TEST_CASE("mask invariants hold across shapes") {
  for (std::size_t t : {1u, 3u, 7u, 16u})
    for (std::size_t n = 1; n <= t && n <= 5; ++n)
      for (bool causal : {false, true}) {
        const ShardPlan plan = partition_tokens(t, n);
        const auto m = build_mask(t, plan, causal);
        for (std::size_t i = 0; i < t; ++i) {
          CHECK(m.matrix().row_count(i) >= 1);
          for (std::size_t j = 0; j < t; ++j) {
            const bool visible = !causal || j <= i;
            const bool same = plan.device_of(i) == plan.device_of(j);
            CHECK(m.full(i, j) == (visible && same));
            CHECK(m.quantized(i, j) == (visible && !same));
          }
        }
      }
}

TEST_CASE("mixed-precision attention matches a dense reference") {
  const std::size_t t = 8, d = 6;
  const ShardPlan plan = partition_tokens(t, 2);
  for (bool causal : {false, true}) {
    const auto mask = build_mask(t, plan, causal);
    const Tensor q = rand64(t, d, 1), k = rand64(t, d, 2), kh = rand64(t, d, 3), v = rand64(t, d, 4),
                 vh = rand64(t, d, 5);
    Tape tape;
    std::vector<Tensor> weights;
    Var out = mixed_precision_attention(tape.leaf(q), tape.leaf(k), tape.leaf(kh), tape.leaf(v),
                                        tape.leaf(vh), mask, 2, &weights);
    CHECK(max_abs_diff(out.value(), dense_reference(q, k, kh, v, vh, mask.matrix(), 2)) < 1e-5);
    REQUIRE(weights.size() == 2);
    for (const Tensor& w : weights)
      for (std::size_t i = 0; i < t; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 2 * t; ++j) {
          if (!mask.matrix()(i, j)) CHECK(w(i, j) == 0.0);
          s += w(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("identity quantisation collapses to standard attention") {
  std::uint64_t seed = 10;
  for (std::size_t t : {1u, 5u, 12u, 32u})
    for (std::size_t d : {4u, 16u})
      for (std::size_t n : {1u, 2u, 4u}) {
        if (n > t) continue;
        for (bool causal : {false, true}) {
          const Tensor q = rand64(t, d, ++seed), k = rand64(t, d, ++seed), v = rand64(t, d, ++seed);
          Tape tape;
          Var qv = tape.leaf(q), kv = tape.leaf(k), vv = tape.leaf(v);
          const auto mask = build_mask(t, partition_tokens(t, n), causal);
          Var mixed = mixed_precision_attention(qv, kv, kv, vv, vv, mask, 2);
          Var plain = standard_attention(qv, kv, vv, causal, 2);
          CHECK(max_abs_diff(mixed.value(), plain.value()) < 1e-5);
        }
      }
}

TEST_CASE("standard attention degenerate cases") {
  Tape tape;
  const Tensor v = rand64(4, 4, 7);
  Tensor k(4, 4, Precision::f64);
  for (double& x : k.values()) x = 0.3;
  Var out = standard_attention(tape.leaf(rand64(4, 4, 8)), tape.leaf(k), tape.leaf(v), false, 2);
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0;
    for (std::size_t r = 0; r < 4; ++r) m += v(r, c) / 4.0;
    CHECK(out.value()(2, c) == doctest::Approx(m).epsilon(1e-12));
  }
  Var causal = standard_attention(tape.leaf(rand64(4, 4, 9)), tape.leaf(rand64(4, 4, 10)),
                                  tape.leaf(v), true, 1);
  for (std::size_t c = 0; c < 4; ++c) CHECK(causal.value()(0, c) == doctest::Approx(v(0, c)));

  const Tensor one = rand64(1, 4, 11);
  const auto m1 = build_mask(1, partition_tokens(1, 1), false);
  Var single = mixed_precision_attention(tape.leaf(one), tape.leaf(one), tape.leaf(one),
                                         tape.leaf(v.rows_slice(0, 1)), tape.leaf(v.rows_slice(0, 1)),
                                         m1, 1);
  CHECK(max_abs_diff(single.value(), v.rows_slice(0, 1)) < 1e-12);
  CHECK_THROWS_AS(standard_attention(tape.leaf(rand64(2, 5, 1)), tape.leaf(rand64(2, 5, 1)),
                                     tape.leaf(rand64(2, 5, 1)), false, 2),
                  DimensionError);
}

TEST_CASE("fully masked row is rejected") {
  Tape tape;
  const Tensor x = rand64(2, 2, 1);
  BoolMatrix m(2, 4, false);
  m.set(0, 0, true);
  CHECK_THROWS_AS(mixed_precision_attention(tape.leaf(x), tape.leaf(x), tape.leaf(x), tape.leaf(x),
                                            tape.leaf(x), m, 1),
                  InvalidMaskError);
}

TEST_CASE("single-centroid codebook gives every query the same non-local row") {
  // With K=1 all quantised keys and values are identical, so the non-local
  // block contributes the same value row regardless of which token it stands for.
  const std::size_t t = 6, d = 4;
  Tensor kh(t, d, Precision::f64), vh(t, d, Precision::f64);
  const Tensor row_k = rand64(1, d, 3), row_v = rand64(1, d, 4);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      kh(r, c) = row_k(0, c);
      vh(r, c) = row_v(0, c);
    }
  const auto mask = build_mask(t, partition_tokens(t, 3), false);
  Tape tape;
  std::vector<Tensor> w;
  mixed_precision_attention(tape.leaf(rand64(t, d, 1)), tape.leaf(rand64(t, d, 2)), tape.leaf(kh),
                            tape.leaf(rand64(t, d, 5)), tape.leaf(vh), mask, 1, &w);
  // Equal logits for every quantised key on a row.
  for (std::size_t i = 0; i < t; ++i) {
    double first = -1;
    for (std::size_t j = t; j < 2 * t; ++j) {
      if (!mask.matrix()(i, j)) continue;
      if (first < 0) first = w[0](i, j);
      CHECK(w[0](i, j) == doctest::Approx(first).epsilon(1e-12));
    }
  }
}

TEST_CASE("mixed-precision attention gradients") {
  const auto mask = build_mask(4, partition_tokens(4, 2), true);
  const double err = grad_check(
      [&](Tape&, std::span<const Var> p) {
        return square_sum(mixed_precision_attention(p[0], p[1], p[2], p[3], p[4], mask, 2));
      },
      {rand64(4, 4, 1), rand64(4, 4, 2), rand64(4, 4, 3), rand64(4, 4, 4), rand64(4, 4, 5)}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("first-order softmax perturbation") {
  const std::vector<double> half{0.5, 0.5};
  const double eps = 1e-3;
  const auto d = softmax_perturbation_first_order(half, std::vector<double>{eps, -eps});
  CHECK(d[0] == doctest::Approx(0.5 * eps));
  CHECK(d[1] == doctest::Approx(-0.5 * eps));
  const auto a = softmax_ref({0.1, -0.3, 1.2, 0.0, 0.4});
  for (double x : softmax_perturbation_first_order(a, std::vector<double>(5, 0.7))) CHECK(std::abs(x) < 1e-15);

  Rng rng(3);
  std::vector<double> logits(6), dir(6);
  for (auto& x : logits) x = rng.normal();
  double norm = 0;
  for (auto& x : dir) norm += (x = rng.normal()) * x;
  norm = std::sqrt(norm);
  const auto alpha = softmax_ref(logits);
  auto remainder = [&](double scale) {
    std::vector<double> e(6), shifted(6);
    for (int i = 0; i < 6; ++i) {
      e[i] = scale * dir[i] / norm;
      shifted[i] = logits[i] + e[i];
    }
    const auto exact = softmax_ref(shifted);
    const auto lin = softmax_perturbation_first_order(alpha, e);
    double r = 0, total = 0;
    for (int i = 0; i < 6; ++i) {
      r += std::pow(exact[i] - alpha[i] - lin[i], 2);
      total += lin[i];
    }
    CHECK(std::abs(total) < 1e-10);
    return std::sqrt(r);
  };
  for (double eps2 : {1e-1, 5e-2, 2e-2}) {
    const double ratio = remainder(eps2) / remainder(eps2 / 2);
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
  }
}
