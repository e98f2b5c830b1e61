#include "astra/tasks.hpp"

#include <cmath>
#include <numbers>

#include "astra/error.hpp"
#include "astra/rng.hpp"

namespace astra {

std::string task_name(TaskKind k) { return k == TaskKind::blob_classify ? "blob-classify" : "toy-lm"; }

TaskKind parse_task(std::string_view name) {
  if (name == "blob-classify") return TaskKind::blob_classify;
  if (name == "toy-lm") return TaskKind::toy_lm;
  throw ContractError("unknown task '" + std::string(name) + "'");
}

void SyntheticTask::validate() const {
  if (tokens < 2 || outputs < 2 || input_dim < 2 || clusters < 2) throw ContractError("task sizes too small");
  if (kind == TaskKind::toy_lm && outputs > 64) throw ContractError("toy-lm vocabulary is limited to 64");
  if (cluster_noise < 0.0 || !(transition_temperature > 0.0)) throw ContractError("invalid task noise settings");
}

namespace {

struct BlobStructure {
  std::vector<double> centres;               // clusters x 2
  std::vector<std::vector<int>> patterns;    // class -> cluster id per token
  Tensor lift;                               // 2 x input_dim
};

BlobStructure blob_structure(const SyntheticTask& t) {
  Rng rng = Rng(t.seed).stream("blob-structure");
  BlobStructure s;
  for (int c = 0; c < t.clusters; ++c) {
    const double angle = 2.0 * std::numbers::pi * c / t.clusters;
    s.centres.push_back(2.0 * std::cos(angle));
    s.centres.push_back(2.0 * std::sin(angle));
  }
  for (int k = 0; k < t.outputs; ++k) {
    std::vector<int> p(static_cast<std::size_t>(t.tokens));
    for (int& x : p) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(t.clusters)));
    s.patterns.push_back(std::move(p));
  }
  s.lift = Tensor(2, static_cast<std::size_t>(t.input_dim), Precision::f64);
  for (double& v : s.lift.values()) v = rng.normal();
  return s;
}

Example blob_example(const SyntheticTask& t, const BlobStructure& s, Rng& rng) {
  Example ex;
  ex.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(t.outputs)));
  Tensor x(static_cast<std::size_t>(t.tokens), static_cast<std::size_t>(t.input_dim), Precision::f32);
  for (int i = 0; i < t.tokens; ++i) {
    const int c = s.patterns[static_cast<std::size_t>(ex.label)][static_cast<std::size_t>(i)];
    const double px = s.centres[static_cast<std::size_t>(2 * c)] + t.cluster_noise * rng.normal();
    const double py = s.centres[static_cast<std::size_t>(2 * c + 1)] + t.cluster_noise * rng.normal();
    for (std::size_t d = 0; d < x.cols(); ++d) x(static_cast<std::size_t>(i), d) = px * s.lift(0, d) + py * s.lift(1, d);
  }
  x.round();
  ex.input = std::move(x);
  return ex;
}

std::vector<std::vector<double>> transitions(const SyntheticTask& t) {
  Rng rng = Rng(t.seed).stream("lm-structure");
  std::vector<std::vector<double>> rows;
  for (int a = 0; a < t.outputs; ++a) {
    std::vector<double> r(static_cast<std::size_t>(t.outputs));
    double z = 0.0;
    for (double& p : r) z += (p = std::exp(rng.normal() / t.transition_temperature));
    for (double& p : r) p /= z;
    rows.push_back(std::move(r));
  }
  return rows;
}

Example lm_example(const SyntheticTask& t, const std::vector<std::vector<double>>& trans, Rng& rng) {
  std::vector<int> ids;
  int cur = static_cast<int>(rng.below(static_cast<std::uint64_t>(t.outputs)));
  ids.push_back(cur);
  while (static_cast<int>(ids.size()) < t.tokens) {
    const double u = rng.uniform();
    double acc = 0.0;
    int next = t.outputs - 1;
    for (int b = 0; b < t.outputs; ++b) {
      acc += trans[static_cast<std::size_t>(cur)][static_cast<std::size_t>(b)];
      if (u < acc) {
        next = b;
        break;
      }
    }
    ids.push_back(cur = next);
  }
  Example ex;
  ex.input = std::move(ids);
  return ex;
}

}  // namespace

TaskSplits make_task(const SyntheticTask& task, std::size_t train_size, std::size_t val_size) {
  task.validate();
  TaskSplits out;
  Rng train_rng = Rng(task.seed).stream("train-samples");
  Rng val_rng = Rng(task.seed).stream("val-samples");
  if (task.kind == TaskKind::blob_classify) {
    const BlobStructure s = blob_structure(task);
    for (std::size_t i = 0; i < train_size; ++i) out.train.push_back(blob_example(task, s, train_rng));
    for (std::size_t i = 0; i < val_size; ++i) out.val.push_back(blob_example(task, s, val_rng));
  } else {
    const auto trans = transitions(task);
    for (std::size_t i = 0; i < train_size; ++i) out.train.push_back(lm_example(task, trans, train_rng));
    for (std::size_t i = 0; i < val_size; ++i) out.val.push_back(lm_example(task, trans, val_rng));
  }
  return out;
}

}  // namespace astra
