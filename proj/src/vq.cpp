#include "astra/vq.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <iterator>
#include <limits>
#include <ostream>

#include "astra/error.hpp"
#include "astra/ops.hpp"
#include "astra/rng.hpp"

namespace astra {

int index_bits(std::uint32_t k) {
  if (k == 0) throw ContractError("codebook size must be positive");
  return k == 1 ? 0 : std::bit_width(k - 1);
}

Codebook::Codebook(std::uint32_t layer_id, std::uint32_t groups, std::uint32_t size,
                   std::uint32_t sub_dim, Precision precision, CodebookOptions options)
    : layer_id_(layer_id),
      groups_(groups),
      size_(size),
      sub_dim_(sub_dim),
      precision_(precision),
      options_(options),
      centroids_(static_cast<std::size_t>(groups) * size * sub_dim, 0.0),
      counts_(static_cast<std::size_t>(groups) * size, 0.0),
      sums_(static_cast<std::size_t>(groups) * size * sub_dim, 0.0) {
  if (groups == 0 || size == 0 || sub_dim == 0) {
    throw ContractError("codebook needs G >= 1, K >= 1 and a positive sub-dimension");
  }
  if (!(options.decay > 0.0 && options.decay < 1.0)) {
    throw ContractError("EMA decay must lie strictly inside (0, 1)");
  }
  if (!(options.smoothing > 0.0)) throw ContractError("Laplace smoothing must be positive");
}

Codebook Codebook::from_centroids(std::uint32_t layer_id, std::uint32_t groups, const Tensor& table,
                                  double initial_count, CodebookOptions options) {
  if (groups == 0 || table.rows() % groups != 0) {
    throw DimensionError("centroid table rows must be a multiple of the group count");
  }
  const auto k = static_cast<std::uint32_t>(table.rows() / groups);
  Codebook cb(layer_id, groups, k, static_cast<std::uint32_t>(table.cols()), table.precision(), options);
  for (std::uint32_t g = 0; g < groups; ++g) {
    for (std::uint32_t i = 0; i < k; ++i) {
      auto dst = cb.centroid_mut(g, i);
      const auto src = table.row(static_cast<std::size_t>(g) * k + i);
      std::copy(src.begin(), src.end(), dst.begin());
      std::vector<double> sum(src.begin(), src.end());
      for (double& v : sum) v *= initial_count;
      cb.set_ema(g, i, initial_count, sum);
    }
  }
  return cb;
}

std::span<const double> Codebook::centroid(std::uint32_t g, std::uint32_t k) const {
  return {centroids_.data() + (static_cast<std::size_t>(g) * size_ + k) * sub_dim_, sub_dim_};
}

std::span<double> Codebook::centroid_mut(std::uint32_t g, std::uint32_t k) {
  return {centroids_.data() + (static_cast<std::size_t>(g) * size_ + k) * sub_dim_, sub_dim_};
}

std::span<const double> Codebook::ema_sum(std::uint32_t g, std::uint32_t k) const {
  return {sums_.data() + (static_cast<std::size_t>(g) * size_ + k) * sub_dim_, sub_dim_};
}

double Codebook::total_mass(std::uint32_t g) const {
  double n = 0.0;
  for (std::uint32_t k = 0; k < size_; ++k) n += counts_[g * size_ + k];
  return n;
}

double Codebook::smoothed_count(std::uint32_t g, std::uint32_t k) const {
  const double n = total_mass(g);
  const double eps = options_.smoothing;
  return (counts_[g * size_ + k] + eps) / (n + static_cast<double>(size_) * eps) * n;
}

void Codebook::set_ema(std::uint32_t g, std::uint32_t k, double count, std::span<const double> sum) {
  if (sum.size() != sub_dim_) throw DimensionError("EMA sum width mismatch");
  counts_[g * size_ + k] = count;
  std::copy(sum.begin(), sum.end(), sums_.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(g) * size_ + k) * sub_dim_));
}

void Codebook::recompute_centroid(std::uint32_t g, std::uint32_t k) {
  if (counts_[g * size_ + k] <= 0.0) return;
  const double denom = smoothed_count(g, k);
  auto c = centroid_mut(g, k);
  const auto s = ema_sum(g, k);
  for (std::size_t d = 0; d < sub_dim_; ++d) c[d] = round_to(s[d] / denom, precision_);
}

Tensor Codebook::table() const {
  return Tensor(static_cast<std::size_t>(groups_) * size_, sub_dim_, centroids_, precision_);
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// Rows of one group's slice, copied out as an M x sub matrix.
std::vector<double> group_slice(const Tensor& x, std::size_t g, std::size_t sub) {
  std::vector<double> out(x.rows() * sub);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t d = 0; d < sub; ++d) out[r * sub + d] = x(r, g * sub + d);
  return out;
}

struct Assignment {
  std::vector<std::uint32_t> label;
  std::vector<double> dist;
};

Assignment assign(const std::vector<double>& pts, std::size_t m, std::size_t sub,
                  const std::vector<double>& centroids, std::size_t k) {
  Assignment a{std::vector<std::uint32_t>(m), std::vector<double>(m)};
  for (std::size_t i = 0; i < m; ++i) {
    std::span<const double> p(pts.data() + i * sub, sub);
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = sq_dist(p, {centroids.data() + c * sub, sub});
      if (d < best) {
        best = d;
        arg = static_cast<std::uint32_t>(c);
      }
    }
    a.label[i] = arg;
    a.dist[i] = best;
  }
  return a;
}

std::vector<double> kmeanspp_seed(const std::vector<double>& pts, std::size_t m, std::size_t sub,
                                  std::size_t k, Rng& rng) {
  std::vector<double> centroids(k * sub);
  std::vector<double> best(m, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(m);
  std::copy_n(pts.begin() + static_cast<std::ptrdiff_t>(first * sub), sub, centroids.begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      best[i] = std::min(best[i], sq_dist({pts.data() + i * sub, sub},
                                          {centroids.data() + (c - 1) * sub, sub}));
      total += best[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = m - 1;
      for (std::size_t i = 0; i < m; ++i) {
        if (best[i] <= 0.0) continue;
        u -= best[i];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
      while (best[pick] <= 0.0 && pick > 0) --pick;
    } else {
      pick = rng.below(m);
    }
    std::copy_n(pts.begin() + static_cast<std::ptrdiff_t>(pick * sub), sub,
                centroids.begin() + static_cast<std::ptrdiff_t>(c * sub));
  }
  return centroids;
}

}  // namespace

Codebook kmeans_init(const Tensor& embeddings, std::uint32_t k, std::uint32_t groups, int iterations,
                     std::uint64_t seed, std::uint32_t layer_id, KMeansTrace* trace) {
  const std::size_t m = embeddings.rows();
  if (groups == 0 || embeddings.cols() % groups != 0) {
    throw DimensionError("embedding width " + std::to_string(embeddings.cols()) +
                         " is not divisible by G=" + std::to_string(groups));
  }
  if (k == 0) throw ContractError("codebook size must be positive");
  if (m < k) {
    throw InsufficientDataError("k-means needs at least K=" + std::to_string(k) + " points, got " +
                                std::to_string(m));
  }
  if (iterations < 1) throw ContractError("k-means needs at least one iteration");
  const std::size_t sub = embeddings.cols() / groups;
  Codebook cb(layer_id, groups, k, static_cast<std::uint32_t>(sub), embeddings.precision());
  if (trace) {
    trace->distortion.assign(groups, {});
    trace->iterations_run.assign(groups, 0);
  }

  Rng root = Rng(seed).stream("kmeans");
  for (std::uint32_t g = 0; g < groups; ++g) {
    Rng rng = root.stream(g);
    const std::vector<double> pts = group_slice(embeddings, g, sub);
    std::vector<double> centroids = kmeanspp_seed(pts, m, sub, k, rng);
    Assignment a = assign(pts, m, sub, centroids, k);
    std::vector<std::uint32_t> previous;
    for (int it = 0; it < iterations; ++it) {
      if (it > 0) a = assign(pts, m, sub, centroids, k);
      double distortion = 0.0;
      for (double d : a.dist) distortion += d;
      distortion /= static_cast<double>(m);
      if (trace) {
        trace->distortion[g].push_back(distortion);
        trace->iterations_run[g] = it + 1;
      }
      if (it > 0 && a.label == previous) break;
      previous = a.label;

      std::vector<double> sums(k * sub, 0.0);
      std::vector<std::size_t> counts(k, 0);
      for (std::size_t i = 0; i < m; ++i) {
        ++counts[a.label[i]];
        for (std::size_t d = 0; d < sub; ++d) sums[a.label[i] * sub + d] += pts[i * sub + d];
      }
      std::vector<bool> taken(m, false);
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] > 0) {
          for (std::size_t d = 0; d < sub; ++d)
            centroids[c * sub + d] = sums[c * sub + d] / static_cast<double>(counts[c]);
          continue;
        }
        // Empty cluster: move it onto the point farthest from its centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
          if (!taken[i] && a.dist[i] > far_d) {
            far_d = a.dist[i];
            far = i;
          }
        }
        taken[far] = true;
        std::copy_n(pts.begin() + static_cast<std::ptrdiff_t>(far * sub), sub,
                    centroids.begin() + static_cast<std::ptrdiff_t>(c * sub));
      }
    }

    // Seed the EMA state from the final assignment against the final centroids.
    a = assign(pts, m, sub, centroids, k);
    std::vector<double> sums(k * sub, 0.0);
    std::vector<double> counts(k, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      counts[a.label[i]] += 1.0;
      for (std::size_t d = 0; d < sub; ++d) sums[a.label[i] * sub + d] += pts[i * sub + d];
    }
    for (std::uint32_t c = 0; c < k; ++c) {
      auto dst = cb.centroid_mut(g, c);
      for (std::size_t d = 0; d < sub; ++d) dst[d] = round_to(centroids[c * sub + d], cb.precision());
      cb.set_ema(g, c, counts[c], {sums.data() + c * sub, sub});
    }
  }
  return cb;
}

Quantized quantize(const Codebook& cb, const Tensor& x) {
  if (x.cols() != cb.dim()) {
    throw DimensionError("quantize: token width " + std::to_string(x.cols()) +
                         " does not match codebook width " + std::to_string(cb.dim()));
  }
  const std::size_t t = x.rows();
  const std::size_t sub = cb.sub_dim();
  Quantized out{QuantizedTokens{cb.layer_id(), static_cast<std::uint32_t>(t), cb.groups(), cb.size(),
                                std::vector<std::uint32_t>(t * cb.groups())},
                Tensor(t, x.cols(), cb.precision())};
  for (std::size_t r = 0; r < t; ++r) {
    for (std::uint32_t g = 0; g < cb.groups(); ++g) {
      std::span<const double> p(x.row(r).data() + g * sub, sub);
      double best = std::numeric_limits<double>::infinity();
      std::uint32_t arg = 0;
      for (std::uint32_t k = 0; k < cb.size(); ++k) {
        const double d = sq_dist(p, cb.centroid(g, k));
        if (d < best) {
          best = d;
          arg = k;
        }
      }
      out.tokens.indices[r * cb.groups() + g] = arg;
      const auto c = cb.centroid(g, arg);
      for (std::size_t d = 0; d < sub; ++d) out.reconstruction(r, g * sub + d) = c[d];
    }
  }
  return out;
}

Tensor dequantize(const Codebook& cb, const QuantizedTokens& q) {
  if (q.groups != cb.groups()) throw DimensionError("dequantize: group count mismatch");
  if (q.indices.size() != static_cast<std::size_t>(q.token_count) * q.groups || q.token_count == 0) {
    throw CorruptIndexError("dequantize: index payload has the wrong length");
  }
  const std::size_t sub = cb.sub_dim();
  Tensor out(q.token_count, cb.dim(), cb.precision());
  for (std::size_t r = 0; r < q.token_count; ++r) {
    for (std::uint32_t g = 0; g < cb.groups(); ++g) {
      const std::uint32_t k = q.index(r, g);
      if (k >= cb.size()) {
        throw CorruptIndexError("index " + std::to_string(k) + " >= K=" + std::to_string(cb.size()));
      }
      const auto c = cb.centroid(g, k);
      for (std::size_t d = 0; d < sub; ++d) out(r, g * sub + d) = c[d];
    }
  }
  return out;
}

void ema_update(Codebook& cb, const Tensor& x, const QuantizedTokens& q) {
  if (x.cols() != cb.dim() || x.rows() != q.token_count || q.groups != cb.groups()) {
    throw DimensionError("ema_update: batch does not match codebook or assignment");
  }
  const double decay = cb.options().decay;
  const std::size_t sub = cb.sub_dim();
  for (std::uint32_t g = 0; g < cb.groups(); ++g) {
    std::vector<double> hist(cb.size(), 0.0);
    std::vector<double> sums(static_cast<std::size_t>(cb.size()) * sub, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const std::uint32_t k = q.index(r, g);
      if (k >= cb.size()) throw CorruptIndexError("ema_update: index out of range");
      hist[k] += 1.0;
      for (std::size_t d = 0; d < sub; ++d) sums[k * sub + d] += x(r, g * sub + d);
    }
    for (std::uint32_t k = 0; k < cb.size(); ++k) {
      std::vector<double> s(cb.ema_sum(g, k).begin(), cb.ema_sum(g, k).end());
      for (std::size_t d = 0; d < sub; ++d) s[d] = decay * s[d] + (1.0 - decay) * sums[k * sub + d];
      cb.set_ema(g, k, decay * cb.ema_count(g, k) + (1.0 - decay) * hist[k], s);
    }
    for (std::uint32_t k = 0; k < cb.size(); ++k) cb.recompute_centroid(g, k);
  }
}

Var commitment_loss(Var x, const Tensor& x_hat, double beta) {
  if (!(beta >= 0.0)) throw ContractError("commitment weight must be non-negative");
  if (!x.value().same_shape(x_hat)) throw DimensionError("commitment_loss: shape mismatch");
  Var target = stop_gradient(x.tape().constant(x_hat));
  return scale(square_sum(sub(x, target)), beta);
}

ResidualStats::ResidualStats(std::uint32_t layer_id, std::size_t dim, CovarianceMode mode)
    : layer_id_(layer_id), mode_(mode), mean_(dim, 0.0), m2_(dim, 0.0) {}

void ResidualStats::reset() {
  count_ = 0;
  std::fill(mean_.begin(), mean_.end(), 0.0);
  std::fill(m2_.begin(), m2_.end(), 0.0);
}

void ResidualStats::accumulate(const Tensor& x, const Tensor& x_hat) {
  if (!x.same_shape(x_hat) || x.cols() != mean_.size()) {
    throw DimensionError("residual statistics: shape mismatch");
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    ++count_;
    const double n = static_cast<double>(count_);
    for (std::size_t d = 0; d < mean_.size(); ++d) {
      const double e = x(r, d) - x_hat(r, d);
      const double delta = e - mean_[d];
      mean_[d] += delta / n;
      m2_[d] += delta * (e - mean_[d]);
    }
  }
}

std::vector<double> ResidualStats::variance() const {
  std::vector<double> v(mean_.size(), 0.0);
  if (count_ == 0) return v;
  for (std::size_t d = 0; d < v.size(); ++d) v[d] = std::max(0.0, m2_[d] / static_cast<double>(count_));
  if (mode_ == CovarianceMode::isotropic) std::fill(v.begin(), v.end(), isotropic_variance());
  return v;
}

double ResidualStats::isotropic_variance() const {
  if (count_ == 0 || mean_.empty()) return 0.0;
  double acc = 0.0;
  for (double m2 : m2_) acc += std::max(0.0, m2 / static_cast<double>(count_));
  return acc / static_cast<double>(mean_.size());
}

ResidualStats ResidualStats::from_moments(std::uint32_t layer_id, std::vector<double> mean,
                                          std::vector<double> variance, CovarianceMode mode,
                                          std::uint64_t count) {
  if (mean.size() != variance.size()) throw DimensionError("moment vectors differ in length");
  for (double v : variance) {
    if (!(v >= 0.0)) throw DomainError("variances must be non-negative");
  }
  ResidualStats s(layer_id, mean.size(), mode);
  s.count_ = count;
  s.mean_ = std::move(mean);
  for (std::size_t d = 0; d < variance.size(); ++d) s.m2_[d] = variance[d] * static_cast<double>(count);
  return s;
}

ResidualStats ResidualStats::from_sums(std::uint32_t layer_id, std::vector<double> mean,
                                       std::vector<double> m2, CovarianceMode mode, std::uint64_t count) {
  if (mean.size() != m2.size()) throw DimensionError("moment vectors differ in length");
  ResidualStats s(layer_id, mean.size(), mode);
  s.count_ = count;
  s.mean_ = std::move(mean);
  s.m2_ = std::move(m2);
  return s;
}

ResidualStats fit_residual_stats(const Tensor& x, const Tensor& x_hat, CovarianceMode mode,
                                 std::uint32_t layer_id) {
  if (x.rows() < 2) throw InsufficientDataError("residual statistics need at least two tokens");
  ResidualStats s(layer_id, x.cols(), mode);
  s.accumulate(x, x_hat);
  return s;
}

Tensor apply_noise(const Tensor& x_hat, const ResidualStats& stats, const NoiseConfig& cfg,
                   RunMode mode, std::size_t token_offset) {
  if (!cfg.enabled || cfg.lambda == 0.0) return x_hat;
  if (mode == RunMode::inference) {
    throw ModeError("noise augmentation is a training-time operation; disable it for inference");
  }
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw ContractError("lambda must lie in [0, 1]");
  if (!stats.fitted()) throw LifecycleError("residual statistics have not been fitted");
  if (stats.dim() != x_hat.cols()) throw DimensionError("apply_noise: width mismatch");
  const std::vector<double> var = stats.variance();
  const auto& mu = stats.mean();
  Tensor out = x_hat;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t d = 0; d < out.cols(); ++d) {
      const double z = keyed_normal(cfg.stream_key, stats.layer_id(), token_offset + r, d);
      out(r, d) += cfg.lambda * (mu[d] + std::sqrt(var[d]) * z);
    }
  }
  out.round();
  return out;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("codebook record truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[pos + static_cast<std::size_t>(i)]) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_codebook(const Codebook& cb) {
  std::vector<std::uint8_t> out = {'A', 'V', 'Q', '1'};
  put_u32(out, cb.layer_id());
  put_u32(out, cb.groups());
  put_u32(out, cb.size());
  put_u32(out, cb.sub_dim());
  for (std::uint32_t g = 0; g < cb.groups(); ++g)
    for (std::uint32_t k = 0; k < cb.size(); ++k)
      for (double v : cb.centroid(g, k)) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

Codebook deserialize_codebook(std::span<const std::uint8_t> bytes, std::size_t* consumed) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "AVQ1", 4) != 0) {
    throw FormatError("codebook record: bad magic");
  }
  std::size_t pos = 4;
  const std::uint32_t layer = get_u32(bytes, pos);
  const std::uint32_t groups = get_u32(bytes, pos);
  const std::uint32_t k = get_u32(bytes, pos);
  const std::uint32_t sub = get_u32(bytes, pos);
  if (groups == 0 || k == 0 || sub == 0) throw FormatError("codebook record: zero dimension");
  const std::size_t n = static_cast<std::size_t>(groups) * k * sub;
  if (bytes.size() - pos < n * 4) throw FormatError("codebook record truncated");
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<float>(get_u32(bytes, pos));
  Tensor table(static_cast<std::size_t>(groups) * k, sub, std::move(values), Precision::f32);
  if (consumed) *consumed = pos;
  return Codebook::from_centroids(layer, groups, table);
}

void write_codebook(std::ostream& os, const Codebook& cb) {
  const auto bytes = serialize_codebook(cb);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Codebook read_codebook(std::istream& is) {
  std::vector<std::uint8_t> header(20);
  if (!is.read(reinterpret_cast<char*>(header.data()), 20)) throw FormatError("codebook record truncated");
  std::size_t pos = 8;
  const std::uint32_t groups = get_u32(header, pos);
  const std::uint32_t k = get_u32(header, pos);
  const std::uint32_t sub = get_u32(header, pos);
  const std::size_t n = static_cast<std::size_t>(groups) * k * sub * 4;
  header.resize(20 + n);
  if (!is.read(reinterpret_cast<char*>(header.data() + 20), static_cast<std::streamsize>(n))) {
    throw FormatError("codebook record truncated");
  }
  return deserialize_codebook(header);
}

}  // namespace astra
