#include "astra/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <thread>

#include "astra/checkpoint.hpp"
#include "astra/error.hpp"
#include "astra/ops.hpp"
#include "astra/rng.hpp"

namespace astra {

void TrainConfig::validate() const {
  if (!(beta >= 0.0)) throw ContractError("beta must be non-negative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("lambda must lie in [0, 1]");
  if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
  if (epochs < 1 || batch_size < 1 || devices < 1 || kmeans_iterations < 1 || kmeans_examples < 1) {
    throw ContractError("epochs, batch size, devices and k-means settings must be positive");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0)) {
    throw ContractError("invalid Adam moments");
  }
}

Adam::Adam(const ModelWeights<Tensor>& shape, const TrainConfig& cfg)
    : lr_(cfg.learning_rate), b1_(cfg.adam_beta1), b2_(cfg.adam_beta2), eps_(cfg.adam_eps) {
  shape.each([&](const Tensor& t) {
    m_.emplace_back(t.rows(), t.cols(), Precision::f64);
    v_.emplace_back(t.rows(), t.cols(), Precision::f64);
  });
}

void Adam::step(ModelWeights<Tensor>& weights, std::span<const Tensor> grads) {
  if (grads.size() != m_.size()) throw ContractError("gradient count does not match the parameter count");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  std::size_t i = 0;
  weights.each([&](Tensor& p) {
    const Tensor& g = grads[i];
    auto m = m_[i].values();
    auto v = v_[i].values();
    auto pv = p.values();
    const auto gv = g.values();
    for (std::size_t k = 0; k < pv.size(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * gv[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * gv[k] * gv[k];
      pv[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
    p.round();
    ++i;
  });
}

Var example_task_loss(const Model& model, const ForwardTrace& trace, const Example& ex) {
  if (!model.config.causal) {
    const int label[] = {ex.label};
    return cross_entropy(trace.logits, label);
  }
  const auto& ids = std::get<std::vector<int>>(ex.input);
  const std::vector<int> targets(ids.begin() + 1, ids.end());
  return cross_entropy(slice_rows(trace.logits, 0, ids.size() - 1), targets);
}

Var batch_objective(Tape& tape, const Model& model, const ModelWeights<Var>& w, std::span<const Example> batch,
                    const ShardPlan& plan, const ForwardOptions& base, std::uint64_t noise_key,
                    std::vector<ForwardTrace>* traces, double* task_loss) {
  if (batch.empty()) throw ContractError("empty batch");
  Var total = tape.constant(Tensor::scalar(0.0, Precision::f64));
  double task_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ForwardOptions opts = base;
    opts.noise.stream_key = hash_key(noise_key, i);
    ForwardTrace trace = forward(tape, model, w, batch[i].input, plan, opts);
    Var task = example_task_loss(model, trace, batch[i]);
    task_sum += task.value().item();
    total = add(total, add(task, trace.commitment));
    if (traces) traces->push_back(std::move(trace));
  }
  if (task_loss) *task_loss = task_sum / static_cast<double>(batch.size());
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

namespace {

std::vector<Tensor> layer_inputs(const Model& model, std::span<const Example> examples, const ShardPlan& plan) {
  const std::size_t layers = static_cast<std::size_t>(model.config.layers);
  std::vector<std::vector<double>> rows(layers);
  std::size_t count = 0;
  const std::size_t d = static_cast<std::size_t>(model.config.hidden);
  for (const Example& ex : examples) {
    Tape tape(false);
    const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
    ForwardOptions opts;
    opts.quantize = false;
    const ForwardTrace trace = forward(tape, model, w, ex.input, plan, opts);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto v = trace.attention_inputs[l].values();
      rows[l].insert(rows[l].end(), v.begin(), v.end());
    }
    count += trace.attention_inputs[0].rows();
  }
  std::vector<Tensor> out;
  for (auto& r : rows) out.emplace_back(count, d, std::move(r), model.config.precision);
  return out;
}

}  // namespace

void initialize_codebooks(Model& model, const Dataset& train, const ShardPlan& plan, const TrainConfig& cfg) {
  if (train.empty()) throw ContractError("cannot initialise codebooks from an empty split");
  const std::size_t n = std::min(train.size(), static_cast<std::size_t>(cfg.kmeans_examples));
  const auto inputs = layer_inputs(model, std::span<const Example>(train).first(n), plan);
  model.codebooks.clear();
  model.residuals.clear();
  for (std::size_t l = 0; l < inputs.size(); ++l) {
    const auto layer = static_cast<std::uint32_t>(l);
    model.codebooks.push_back(kmeans_init(inputs[l], static_cast<std::uint32_t>(model.config.codebook_size),
                                          static_cast<std::uint32_t>(model.config.groups), cfg.kmeans_iterations,
                                          hash_key(cfg.seed, l), layer));
    ResidualStats stats(layer, inputs[l].cols(), CovarianceMode::isotropic);
    stats.accumulate(inputs[l], quantize(model.codebooks.back(), inputs[l]).reconstruction);
    model.residuals.push_back(std::move(stats));
  }
}

StepResult train_step(Model& model, Adam& adam, std::span<const Example> batch, const ShardPlan& plan,
                      const TrainConfig& cfg, std::uint64_t step, std::vector<ResidualStats>* residual_accumulator) {
  cfg.validate();
  const bool quantizing = plan.devices() > 1;
  if (quantizing && !model.codebooks_ready()) {
    throw LifecycleError("codebooks are not initialised; call initialize_codebooks first");
  }
  Tape tape;
  const ModelWeights<Var> w = bind_weights(tape, model.weights, true);
  ForwardOptions opts;
  opts.class_tokens = cfg.class_tokens;
  opts.mode = RunMode::training;
  opts.noise.lambda = cfg.lambda;
  opts.noise.enabled = cfg.lambda > 0.0;
  opts.beta = cfg.beta;
  std::vector<ForwardTrace> traces;
  StepResult result;
  Var objective = batch_objective(tape, model, w, batch, plan, opts, hash_key(cfg.seed, step, 0x6e6f697365ULL),
                                  &traces, &result.task_loss);
  result.commitment = objective.value().item() - result.task_loss;
  tape.backward(objective);

  std::vector<Tensor> grads;
  w.each([&](const Var& v) { grads.push_back(v.grad()); });
  adam.step(model.weights, grads);

  if (quantizing) {
    for (const ForwardTrace& t : traces) {
      for (std::size_t l = 0; l < t.quantized.size(); ++l) {
        if (cfg.ema_updates) ema_update(model.codebooks[l], t.attention_inputs[l], t.quantized[l].tokens);
        if (residual_accumulator) {
          (*residual_accumulator)[l].accumulate(t.attention_inputs[l], t.quantized[l].reconstruction);
        }
      }
    }
  }
  return result;
}

double evaluate(const Model& model, const Dataset& split, const ShardPlan& plan, ClassTokenMode mode) {
  if (split.empty()) throw ContractError("cannot evaluate an empty split");
  if (!model.config.causal) {
    std::size_t correct = 0;
    for (const Example& ex : split) {
      const Tensor logits = classify(model, std::get<Tensor>(ex.input), plan, mode);
      if (argmax_token(logits) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
  }
  double nll = 0.0;
  std::size_t count = 0;
  for (const Example& ex : split) {
    Tape tape(false);
    const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
    const ForwardTrace trace = forward(tape, model, w, ex.input, plan, ForwardOptions{});
    const std::size_t n = std::get<std::vector<int>>(ex.input).size() - 1;
    nll += example_task_loss(model, trace, ex).value().item() * static_cast<double>(n);
    count += n;
  }
  return std::exp(nll / static_cast<double>(count));
}

ModelConfig model_config_for(const SyntheticTask& task, ModelConfig base) {
  base.causal = task.kind == TaskKind::toy_lm;
  base.outputs = task.outputs;
  base.input_dim = task.input_dim;
  base.max_tokens = std::max(base.max_tokens, task.tokens);
  return base;
}

namespace {

std::size_t sequence_length(const Example& ex) {
  return std::visit(
      [](const auto& v) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, Tensor>) {
          return v.rows();
        } else {
          return v.size();
        }
      },
      ex.input);
}

}  // namespace

TrainResult train_model(Model& model, const TaskSplits& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw ContractError("empty training split");
  const ShardPlan plan = partition_tokens(sequence_length(data.train.front()), static_cast<std::size_t>(cfg.devices));
  if (plan.devices() > 1) initialize_codebooks(model, data.train, plan, cfg);

  Adam adam(model.weights, cfg);
  TrainResult result;
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  const Rng shuffle_root = Rng(cfg.seed).stream("shuffle");
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = shuffle_root.stream(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<ResidualStats> pending;
    for (std::size_t l = 0; l < static_cast<std::size_t>(model.config.layers); ++l) {
      pending.emplace_back(static_cast<std::uint32_t>(l), static_cast<std::size_t>(model.config.hidden));
    }
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      Dataset batch;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t i = start; i < end; ++i) batch.push_back(data.train[order[i]]);
      const StepResult r = train_step(model, adam, batch, plan, cfg, step++, &pending);
      result.step_losses.push_back(r.total());
    }
    if (cfg.refresh_residuals && plan.devices() > 1 && std::all_of(pending.begin(), pending.end(), [](const auto& s) { return s.fitted(); })) {
      model.residuals = std::move(pending);
    }
  }
  result.train_metric = evaluate(model, data.train, plan, cfg.class_tokens);
  result.val_metric = data.val.empty() ? 0.0 : evaluate(model, data.val, plan, cfg.class_tokens);
  return result;
}

std::string mode_name(ClassTokenMode m) { return m == ClassTokenMode::single ? "single" : "distributed"; }

ClassTokenMode parse_mode(std::string_view name) {
  if (name == "single") return ClassTokenMode::single;
  if (name == "distributed") return ClassTokenMode::distributed;
  throw ContractError("unknown class-token mode '" + std::string(name) + "'");
}

std::vector<AblationRow> run_ablation(const AblationGrid& grid) {
  struct Cell {
    double lambda, beta;
    ClassTokenMode mode;
    int groups;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (double lambda : grid.lambdas)
    for (double beta : grid.betas)
      for (ClassTokenMode mode : grid.modes)
        for (int g : grid.groups)
          for (std::uint64_t seed : grid.seeds) cells.push_back({lambda, beta, mode, g, seed});

  std::vector<AblationRow> rows(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  auto run = [&](std::size_t i) {
    try {
      const Cell& c = cells[i];
      SyntheticTask task = grid.task;
      task.seed = hash_key(grid.task.seed, c.seed);
      const TaskSplits data = make_task(task, grid.train_size, grid.val_size);
      ModelConfig mc = model_config_for(task, grid.model);
      mc.groups = c.groups;
      Model model = init_model(mc, hash_key(c.seed, 1));
      TrainConfig tc = grid.train;
      tc.lambda = c.lambda;
      tc.beta = c.beta;
      tc.class_tokens = c.mode;
      tc.seed = c.seed;
      const TrainResult r = train_model(model, data, tc);
      if (!grid.checkpoint_dir.empty()) {
        save_model(model, grid.checkpoint_dir / ("cell_" + std::to_string(i) + ".astm"));
      }
      rows[i] = {task_name(task.kind), c.lambda, c.beta, c.groups, c.mode, c.seed,
                 r.train_metric, r.val_metric, r.train_metric - r.val_metric};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(cells.size(), static_cast<std::size_t>(std::max(grid.threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run(i);
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

namespace {

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows) {
  os << "task,lambda,beta,groups,cls_mode,seed,train_metric,val_metric,gap\n";
  for (const auto& r : rows) {
    os << r.task << ',' << g6(r.lambda) << ',' << g6(r.beta) << ',' << r.groups << ',' << mode_name(r.mode) << ','
       << r.seed << ',' << g6(r.train_metric) << ',' << g6(r.val_metric) << ',' << g6(r.gap) << '\n';
  }
}

void write_ablation_summary(std::ostream& os, std::span<const AblationRow> rows) {
  struct Key {
    double lambda, beta;
    int groups;
    int mode;
    auto operator<=>(const Key&) const = default;
  };
  struct Acc {
    std::vector<double> train, val, gap;
  };
  std::map<Key, Acc> cells;
  std::vector<Key> order;
  for (const auto& r : rows) {
    const Key k{r.lambda, r.beta, r.groups, static_cast<int>(r.mode)};
    if (!cells.count(k)) order.push_back(k);
    auto& a = cells[k];
    a.train.push_back(r.train_metric);
    a.val.push_back(r.val_metric);
    a.gap.push_back(r.gap);
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  auto stddev = [&](const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1));
  };
  const double first_lambda = rows.empty() ? 0.0 : rows.front().lambda;
  os << "lambda,beta,groups,cls_mode,seeds,train_mean,train_std,val_mean,val_std,gap_mean,gap_std,"
        "delta_val_vs_single,delta_gap_vs_first_lambda\n";
  for (const Key& k : order) {
    const Acc& a = cells[k];
    os << g6(k.lambda) << ',' << g6(k.beta) << ',' << k.groups << ',' << mode_name(static_cast<ClassTokenMode>(k.mode))
       << ',' << a.val.size() << ',' << g6(mean(a.train)) << ',' << g6(stddev(a.train)) << ',' << g6(mean(a.val))
       << ',' << g6(stddev(a.val)) << ',' << g6(mean(a.gap)) << ',' << g6(stddev(a.gap)) << ',';
    const Key single{k.lambda, k.beta, k.groups, static_cast<int>(ClassTokenMode::single)};
    if (cells.count(single)) os << g6(mean(a.val) - mean(cells[single].val));
    os << ',';
    const Key base{first_lambda, k.beta, k.groups, k.mode};
    if (cells.count(base)) os << g6(mean(a.gap) - mean(cells[base].gap));
    os << '\n';
  }
}

}  // namespace astra
