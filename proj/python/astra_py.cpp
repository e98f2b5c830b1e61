#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "astra/cli.hpp"
#include "astra/comms_model.hpp"
#include "astra/error.hpp"
#include "astra/shard_plan.hpp"
#include "astra/theorem_lab.hpp"
#include "astra/vq.hpp"

namespace py = pybind11;
using namespace astra;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return Tensor(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols), Precision::f64);
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::object fraction(const Rational& r) {
  return py::module_::import("fractions").attr("Fraction")(r.numerator(), r.denominator());
}

CommsConfig comms_config(int hidden, int layers, int tokens, int devices, double bandwidth_mbps,
                         int codebook_size, int groups) {
  CommsConfig c;
  c.hidden = hidden;
  c.layers = layers;
  c.tokens = tokens;
  c.devices = devices;
  c.bandwidth_bps = bandwidth_mbps * 1e6;
  c.codebook_size = codebook_size;
  c.groups = groups;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mixed-precision sequence-parallel inference: analytical models and kernels";

  static py::exception<Error> base(m, "AstraError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      base(e.what());
    }
  });

  m.def(
      "bits_per_token",
      [](const std::string& method, int hidden, int layers, int tokens, int devices, int codebook_size,
         int groups, int nb) {
        const CommsConfig c = comms_config(hidden, layers, tokens, devices, 10.0, codebook_size, groups);
        return fraction(bits_per_token(c, {parse_method(method), nb}));
      },
      py::arg("method"), py::arg("hidden") = 768, py::arg("layers") = 12, py::arg("tokens") = 1024,
      py::arg("devices") = 4, py::arg("codebook_size") = 1024, py::arg("groups") = 1, py::arg("nb") = 0);

  m.def(
      "compression_ratio",
      [](int hidden, int layers, int codebook_size, int groups) {
        return fraction(compression_ratio(comms_config(hidden, layers, 1024, 4, 10.0, codebook_size, groups)));
      },
      py::arg("hidden") = 768, py::arg("layers") = 12, py::arg("codebook_size") = 1024, py::arg("groups") = 1);

  m.def(
      "latency",
      [](const std::string& method, double bandwidth_mbps, int devices, int tokens, int hidden, int layers,
         int codebook_size, int groups, int nb, double seconds_per_flop) {
        const CommsConfig c = comms_config(hidden, layers, tokens, devices, bandwidth_mbps, codebook_size, groups);
        const LatencyReport r = latency_breakdown(c, {parse_method(method), nb}, DeviceProfile{seconds_per_flop, {}});
        py::dict d;
        d["compute_s"] = r.compute_s;
        d["comm_s"] = r.comm_s;
        d["total_s"] = r.total_s;
        d["speedup"] = r.speedup;
        d["comm_fraction"] = r.comm_fraction();
        return d;
      },
      py::arg("method"), py::arg("bandwidth_mbps") = 10.0, py::arg("devices") = 4, py::arg("tokens") = 1024,
      py::arg("hidden") = 768, py::arg("layers") = 12, py::arg("codebook_size") = 1024, py::arg("groups") = 1,
      py::arg("nb") = 0, py::arg("seconds_per_flop") = 1e-12);

  m.def(
      "partition_tokens",
      [](std::size_t tokens, std::size_t devices) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (const TokenRange& r : partition_tokens(tokens, devices).ranges) out.emplace_back(r.begin, r.end);
        return out;
      },
      py::arg("tokens"), py::arg("devices"));

  m.def(
      "kmeans",
      [](const Array& x, std::uint32_t k, std::uint32_t groups, int iterations, std::uint64_t seed) {
        return to_array(kmeans_init(to_tensor(x), k, groups, iterations, seed).table());
      },
      py::arg("x"), py::arg("k"), py::arg("groups") = 1, py::arg("iterations") = 25, py::arg("seed") = 0,
      "Group-major (groups*k) x (dim/groups) centroid table.");

  m.def(
      "quantize",
      [](const Array& table, std::uint32_t groups, const Array& x) {
        const Codebook cb = Codebook::from_centroids(0, groups, to_tensor(table));
        const Quantized q = quantize(cb, to_tensor(x));
        py::array_t<std::uint32_t> idx({static_cast<std::size_t>(q.tokens.token_count), static_cast<std::size_t>(groups)});
        std::copy(q.tokens.indices.begin(), q.tokens.indices.end(), idx.mutable_data());
        return py::make_tuple(idx, to_array(q.reconstruction));
      },
      py::arg("table"), py::arg("groups"), py::arg("x"));

  m.def(
      "w2_squared_isotropic",
      [](std::vector<double> mean_a, double var_a, std::vector<double> mean_b, double var_b) {
        GaussianSpec a{std::move(mean_a), CovarianceKind::isotropic, var_a, {}, {}};
        GaussianSpec b{std::move(mean_b), CovarianceKind::isotropic, var_b, {}, {}};
        return w2_gaussian(a, b);
      },
      py::arg("mean_a"), py::arg("var_a"), py::arg("mean_b"), py::arg("var_b"));

  m.def(
      "variance_reduction",
      [](int tokens, int devices, int dim, double sigma_k, double sigma_v, int trials, std::uint64_t seed) {
        const VarianceReductionResult r = mc_variance_reduction(tokens, devices, dim, sigma_k, sigma_v, trials, seed);
        py::dict d;
        d["single_error"] = r.single_error;
        d["distributed_error"] = r.distributed_error;
        d["ratio"] = r.ratio;
        return d;
      },
      py::arg("tokens") = 16, py::arg("devices") = 4, py::arg("dim") = 8, py::arg("sigma_k") = 1e-3,
      py::arg("sigma_v") = 1e-3, py::arg("trials") = 10000, py::arg("seed") = 0);

  m.def(
      "run",
      [](const std::string& command, const std::string& config_json, const std::vector<std::string>& overrides) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_command(command, nlohmann::json::parse(config_json), overrides, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("command"), py::arg("config_json"), py::arg("overrides") = std::vector<std::string>{},
      "Runs a CLI subcommand in-process; returns (exit_code, stdout, stderr).");
}
