#include "astra/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "astra/error.hpp"

namespace astra {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { bytes.insert(bytes.end(), b.begin(), b.end()); }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (static_cast<std::uint64_t>(u32()) << 32);
  }
  double f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> rest() const { return bytes_.subspan(pos_); }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_config(Writer& w, const ModelConfig& c) {
  for (int v : {c.layers, c.hidden, c.heads, c.mlp_expansion, c.outputs, c.input_dim, c.max_tokens,
                c.causal ? 1 : 0, c.codebook_size, c.groups, c.precision == Precision::f64 ? 1 : 0}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  for (int* p : {&c.layers, &c.hidden, &c.heads, &c.mlp_expansion, &c.outputs, &c.input_dim,
                 &c.max_tokens}) {
    *p = static_cast<int>(r.u32());
  }
  c.causal = r.u32() != 0;
  c.codebook_size = static_cast<int>(r.u32());
  c.groups = static_cast<int>(r.u32());
  c.precision = r.u32() != 0 ? Precision::f64 : Precision::f32;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  Writer w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("ASTM"), 4));
  w.u32(kCheckpointVersion);
  write_config(w, model.config);
  model.weights.each([&](const Tensor& t) {
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (double v : t.values()) w.f32(v);
  });
  w.u32(static_cast<std::uint32_t>(model.codebooks.size()));
  for (const Codebook& cb : model.codebooks) w.raw(serialize_codebook(cb));
  w.u32(static_cast<std::uint32_t>(model.residuals.size()));
  for (const ResidualStats& s : model.residuals) {
    w.u32(s.layer_id());
    w.u32(s.mode() == CovarianceMode::diagonal ? 1 : 0);
    w.u64(s.sample_count());
    w.u32(static_cast<std::uint32_t>(s.dim()));
    for (double v : s.mean()) w.f64(v);
    for (double v : s.squared_deviation_sums()) w.f64(v);
  }
  return std::move(w.bytes);
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ASTM", 4) != 0) {
    throw FormatError("not a model checkpoint (bad magic)");
  }
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Model model = init_model(read_config(r), 0);
  model.weights.each([&](Tensor& t) {
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows != t.rows() || cols != t.cols()) {
      throw FormatError("checkpoint tensor is " + std::to_string(rows) + "x" + std::to_string(cols) +
                        ", config expects " + t.shape_string());
    }
    std::vector<double> values(t.size());
    for (double& v : values) v = r.f32();
    t = Tensor(rows, cols, std::move(values), model.config.precision);
  });
  const std::uint32_t n_codebooks = r.u32();
  for (std::uint32_t i = 0; i < n_codebooks; ++i) {
    std::size_t used = 0;
    model.codebooks.push_back(deserialize_codebook(r.rest(), &used));
    r.skip(used);
  }
  const std::uint32_t n_stats = r.u32();
  for (std::uint32_t i = 0; i < n_stats; ++i) {
    const std::uint32_t layer = r.u32();
    const auto mode = r.u32() != 0 ? CovarianceMode::diagonal : CovarianceMode::isotropic;
    const std::uint64_t count = r.u64();
    const std::uint32_t dim = r.u32();
    std::vector<double> mean(dim), m2(dim);
    for (double& v : mean) v = r.f64();
    for (double& v : m2) v = r.f64();
    model.residuals.push_back(ResidualStats::from_sums(layer, std::move(mean), std::move(m2), mode, count));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint");
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace astra
