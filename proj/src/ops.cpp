#include "astra/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "astra/error.hpp"

namespace astra {
namespace {

constexpr double kMaskedLogit = -1e9;

Precision prec(Var a) { return a.value().precision(); }
Precision prec(Var a, Var b) { return widest(prec(a), prec(b)); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.rows(), t.cols(), Precision::f64); }

}  // namespace

Tensor gemm(const Tensor& a, bool ta, const Tensor& b, bool tb, Precision out_precision) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t kb = tb ? b.cols() : b.rows();
  const std::size_t n = tb ? b.rows() : b.cols();
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ (" + a.shape_string() +
                         (ta ? "^T" : "") + " x " + b.shape_string() + (tb ? "^T" : "") + ")");
  }
  Tensor out(m, n, Precision::f64);
  const auto av = a.values();
  const auto bv = b.values();
  auto ov = out.values();
  if (!tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = ov.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = ta ? av[p * a.cols() + i] : av[i * a.cols() + p];
        if (aip == 0.0) continue;
        const double* brow = bv.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = bv.data() + j * b.cols();
        double acc = 0.0;
        if (!ta) {
          const double* arow = av.data() + i * a.cols();
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) acc += av[p * a.cols() + i] * brow[p];
        }
        ov[i * n + j] = acc;
      }
    }
  }
  return out.with_precision(out_precision);
}

Var matmul(Var a, Var b) {
  Tensor out = gemm(a.value(), false, b.value(), false, prec(a, b));
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, gemm(g, false, t.value(ib), true));
    if (t.requires_grad(ib)) t.accumulate(ib, gemm(t.value(ia), true, g, false));
  });
}

Var matmul_nt(Var a, Var b) {
  Tensor out = gemm(a.value(), false, b.value(), true, prec(a, b));
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, gemm(g, false, t.value(ib), false));
    if (t.requires_grad(ib)) t.accumulate(ib, gemm(g, true, t.value(ia), false));
  });
}

Var transpose(Var x) {
  const Tensor& v = x.value();
  Tensor out(v.cols(), v.rows(), v.precision());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) out(c, r) = v(r, c);
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor gt(g.cols(), g.rows(), Precision::f64);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gt(c, r) = g(r, c);
    t.accumulate(ix, gt);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.rows(), a.cols(), prec(a, b));
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values()[i] = a.value().values()[i] + b.value().values()[i];
  out.round();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.rows(), a.cols(), prec(a, b));
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values()[i] = a.value().values()[i] - b.value().values()[i];
  out.round();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate_scaled(ib, g, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.rows(), a.cols(), prec(a, b));
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values()[i] = a.value().values()[i] * b.value().values()[i];
  out.round();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor ga = zeros_like(g);
      for (std::size_t i = 0; i < g.size(); ++i) ga.values()[i] = g.values()[i] * t.value(ib).values()[i];
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ib)) {
      Tensor gb = zeros_like(g);
      for (std::size_t i = 0; i < g.size(); ++i) gb.values()[i] = g.values()[i] * t.value(ia).values()[i];
      t.accumulate(ib, gb);
    }
  });
}

Var scale(Var x, double s) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= s;
  out.round();
  const int ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, s](Tape& t, const Tensor& g) { t.accumulate_scaled(ix, g, s); });
}

Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_row: bias " + bv.shape_string() + " incompatible with " +
                         xv.shape_string());
  }
  Tensor out(xv.rows(), xv.cols(), prec(x, bias));
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) = xv(r, c) + bv(0, c);
  out.round();
  const int ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib](Tape& t, const Tensor& g) {
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) {
      Tensor gb(1, g.cols(), Precision::f64);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
      t.accumulate(ib, gb);
    }
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  const int ix = x.id();
  const std::size_t rows = x.rows(), cols = x.cols();
  return x.tape().record(Tensor(1, 1, {acc}, prec(x)), {x},
                         [ix, rows, cols](Tape& t, const Tensor& g) {
                           Tensor gx(rows, cols, Precision::f64);
                           for (double& v : gx.values()) v = g.item();
                           t.accumulate(ix, gx);
                         });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var square_sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v * v;
  const int ix = x.id();
  return x.tape().record(Tensor(1, 1, {acc}, prec(x)), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor gx = zeros_like(t.value(ix));
    const auto xv = t.value(ix).values();
    for (std::size_t i = 0; i < xv.size(); ++i) gx.values()[i] = 2.0 * g.item() * xv[i];
    t.accumulate(ix, gx);
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = gelu_value(v);
  out.round();
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor gx = zeros_like(g);
    const auto xv = t.value(ix).values();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx.values()[i] = g.values()[i] * (cdf + v * pdf);
    }
    t.accumulate(ix, gx);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), d = xv.cols();
  if (gain.value().rows() != 1 || gain.value().cols() != d || !gain.value().same_shape(bias.value())) {
    throw DimensionError("layer_norm: gain/bias must be 1 x " + std::to_string(d));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  Tensor normed(rows, d, Precision::f64);
  std::vector<double> inv_std(rows);
  Tensor out(rows, d, widest(prec(x), prec(gain, bias)));
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xv(r, c);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      normed(r, c) = (xv(r, c) - mu) * inv_std[r];
      out(r, c) = normed(r, c) * gain.value()(0, c) + bias.value()(0, c);
    }
  }
  out.round();
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t,
                                                                            const Tensor& g) {
        const std::size_t rows = g.rows(), d = g.cols();
        const Tensor& gv = t.value(ig);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          Tensor dg(1, d, Precision::f64), db(1, d, Precision::f64);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              dg(0, c) += g(r, c) * normed(r, c);
              db(0, c) += g(r, c);
            }
          t.accumulate(ig, dg);
          t.accumulate(ib, db);
        }
        if (t.requires_grad(ix)) {
          Tensor dx(rows, d, Precision::f64);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dn = 0.0, mean_dn_n = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dn = g(r, c) * gv(0, c);
              mean_dn += dn;
              mean_dn_n += dn * normed(r, c);
            }
            mean_dn /= static_cast<double>(d);
            mean_dn_n /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              const double dn = g(r, c) * gv(0, c);
              dx(r, c) = inv_std[r] * (dn - mean_dn - normed(r, c) * mean_dn_n);
            }
          }
          t.accumulate(ix, dx);
        }
      });
}

namespace {

Var softmax_impl(Var logits, const BoolMatrix* mask) {
  const Tensor& lv = logits.value();
  if (mask && (mask->rows() != lv.rows() || mask->cols() != lv.cols())) {
    throw DimensionError("masked_softmax: mask shape does not match logits " + lv.shape_string());
  }
  Tensor out(lv.rows(), lv.cols(), prec(logits));
  std::vector<double> z(lv.cols());
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (mask && mask->row_count(r) == 0) {
      throw InvalidMaskError("masked_softmax: row " + std::to_string(r) + " has no active entry");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lv.cols(); ++c) {
      z[c] = lv(r, c) + ((mask && !(*mask)(r, c)) ? kMaskedLogit : 0.0);
      mx = std::max(mx, z[c]);
    }
    double denom = 0.0;
    for (std::size_t c = 0; c < lv.cols(); ++c) {
      z[c] = std::exp(z[c] - mx);
      denom += z[c];
    }
    for (std::size_t c = 0; c < lv.cols(); ++c) out(r, c) = z[c] / denom;
  }
  out.round();
  const int il = logits.id();
  const int iout = static_cast<int>(logits.tape().size());
  return logits.tape().record(std::move(out), {logits}, [il, iout](Tape& t, const Tensor& g) {
    const Tensor& p = t.value(iout);
    Tensor dl(g.rows(), g.cols(), Precision::f64);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += p(r, c) * g(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) dl(r, c) = p(r, c) * (g(r, c) - dot);
    }
    t.accumulate(il, dl);
  });
}

}  // namespace

Var masked_softmax(Var logits, const BoolMatrix& mask) { return softmax_impl(logits, &mask); }
Var softmax_rows(Var logits) { return softmax_impl(logits, nullptr); }

Var stop_gradient(Var x) {
  return x.tape().constant(x.tape().next_stop_gradient(x.value()));
}

Var straight_through(Var x, const Tensor& target) {
  require_same_shape(x.value(), target, "straight_through");
  Tensor offset(target.rows(), target.cols(), Precision::f64);
  for (std::size_t i = 0; i < offset.size(); ++i)
    offset.values()[i] = target.values()[i] - x.value().values()[i];
  Tape& t = x.tape();
  Var frozen = t.constant(t.next_stop_gradient(offset));
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += frozen.value().values()[i];
  out.round();
  const int ix = x.id();
  return t.record(std::move(out), {x, frozen},
                  [ix](Tape& tt, const Tensor& g) { tt.accumulate(ix, g); });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  Tensor out = x.value().rows_slice(start, count);
  const int ix = x.id();
  const std::size_t rows = x.rows(), cols = x.cols();
  return x.tape().record(std::move(out), {x},
                         [ix, start, rows, cols](Tape& t, const Tensor& g) {
                           Tensor gx(rows, cols, Precision::f64);
                           for (std::size_t r = 0; r < g.rows(); ++r)
                             for (std::size_t c = 0; c < cols; ++c) gx(start + r, c) = g(r, c);
                           t.accumulate(ix, gx);
                         });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& v = x.value();
  if (count == 0 || start + count > v.cols()) throw DimensionError("slice_cols out of range");
  Tensor out(v.rows(), count, v.precision());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = v(r, start + c);
  const int ix = x.id();
  const std::size_t cols = v.cols();
  return x.tape().record(std::move(out), {x}, [ix, start, cols](Tape& t, const Tensor& g) {
    Tensor gx(g.rows(), cols, Precision::f64);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx(r, start + c) = g(r, c);
    t.accumulate(ix, gx);
  });
}

namespace {

// Records a concat node whose parents are an arbitrary list.
Var record_concat(std::span<const Var> parts, Tensor out, bool by_rows) {
  Tape& tape = parts.front().tape();
  std::vector<int> ids;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    if (&p.tape() != &tape) throw ContractError("concat operands on different tapes");
    ids.push_back(p.id());
    extents.push_back(by_rows ? p.rows() : p.cols());
  }
  // The tape infers requires_grad from the listed parents, so list one that
  // needs a gradient if any does; the callback scatters to all of them.
  Var anchor = parts.front();
  for (const Var& p : parts) {
    if (p.requires_grad()) {
      anchor = p;
      break;
    }
  }
  return tape.record(std::move(out), {anchor},
                     [ids = std::move(ids), extents = std::move(extents), by_rows](
                         Tape& t, const Tensor& g) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (t.requires_grad(ids[k])) {
                           if (by_rows) {
                             Tensor gk(extents[k], g.cols(), Precision::f64);
                             for (std::size_t r = 0; r < extents[k]; ++r)
                               for (std::size_t c = 0; c < g.cols(); ++c)
                                 gk(r, c) = g(offset + r, c);
                             t.accumulate(ids[k], gk);
                           } else {
                             Tensor gk(g.rows(), extents[k], Precision::f64);
                             for (std::size_t r = 0; r < g.rows(); ++r)
                               for (std::size_t c = 0; c < extents[k]; ++c)
                                 gk(r, c) = g(r, offset + c);
                             t.accumulate(ids[k], gk);
                           }
                         }
                         offset += extents[k];
                       }
                     });
}

}  // namespace

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  Precision p = parts.front().value().precision();
  for (const Var& v : parts) {
    if (v.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += v.rows();
    p = widest(p, v.value().precision());
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& v : parts) data.insert(data.end(), v.value().values().begin(), v.value().values().end());
  return record_concat(parts, Tensor(rows, cols, std::move(data), p), true);
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  Precision p = parts.front().value().precision();
  for (const Var& v : parts) {
    if (v.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += v.cols();
    p = widest(p, v.value().precision());
  }
  Tensor out(rows, cols, p);
  std::size_t offset = 0;
  for (const Var& v : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, offset + c) = v.value()(r, c);
    offset += v.cols();
  }
  return record_concat(parts, std::move(out), false);
}

Var mean_rows(Var x) {
  const Tensor& v = x.value();
  Tensor out(1, v.cols(), v.precision());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) out(0, c) += v(r, c);
  for (double& e : out.values()) e /= static_cast<double>(v.rows());
  out.round();
  const int ix = x.id();
  const std::size_t rows = v.rows();
  return x.tape().record(std::move(out), {x}, [ix, rows](Tape& t, const Tensor& g) {
    Tensor gx(rows, g.cols(), Precision::f64);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) = g(0, c) / static_cast<double>(rows);
    t.accumulate(ix, gx);
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  if (ids.empty()) throw ContractError("gather_rows: empty id list");
  Tensor out(ids.size(), tv.cols(), tv.precision());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[r]) + " out of range");
    }
    for (std::size_t c = 0; c < tv.cols(); ++c) out(r, c) = tv(static_cast<std::size_t>(ids[r]), c);
  }
  const int it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t rows = tv.rows();
  return table.tape().record(std::move(out), {table},
                             [it, idv = std::move(idv), rows](Tape& t, const Tensor& g) {
                               Tensor gt(rows, g.cols(), Precision::f64);
                               for (std::size_t r = 0; r < idv.size(); ++r)
                                 for (std::size_t c = 0; c < g.cols(); ++c)
                                   gt(static_cast<std::size_t>(idv[r]), c) += g(r, c);
                               t.accumulate(it, gt);
                             });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  if (labels.size() != lv.rows()) throw DimensionError("cross_entropy: label count mismatch");
  Tensor probs(lv.rows(), lv.cols(), Precision::f64);
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= lv.cols()) throw DimensionError("cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lv.cols(); ++c) mx = std::max(mx, lv(r, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < lv.cols(); ++c) {
      probs(r, c) = std::exp(lv(r, c) - mx);
      denom += probs(r, c);
    }
    for (std::size_t c = 0; c < lv.cols(); ++c) probs(r, c) /= denom;
    loss += -(lv(r, static_cast<std::size_t>(y)) - mx - std::log(denom));
  }
  loss /= static_cast<double>(lv.rows());
  const int il = logits.id();
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor(1, 1, {loss}, prec(logits)), {logits},
      [il, ys = std::move(ys), probs = std::move(probs)](Tape& t, const Tensor& g) {
        Tensor dl = probs;
        const double inv = g.item() / static_cast<double>(ys.size());
        for (std::size_t r = 0; r < ys.size(); ++r) {
          dl(r, static_cast<std::size_t>(ys[r])) -= 1.0;
          for (std::size_t c = 0; c < dl.cols(); ++c) dl(r, c) *= inv;
        }
        t.accumulate(il, dl);
      });
}

}  // namespace astra
