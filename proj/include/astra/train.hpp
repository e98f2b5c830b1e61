#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "astra/model.hpp"
#include "astra/tasks.hpp"

namespace astra {

struct TrainConfig {
  double beta = 0.0005;
  double lambda = 1.0;
  double learning_rate = 3e-3;
  int epochs = 20;
  int batch_size = 8;
  std::uint64_t seed = 0;
  ClassTokenMode class_tokens = ClassTokenMode::distributed;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Simulated devices the training forward partitions tokens over.
  int devices = 4;
  int kmeans_iterations = 15;
  // Points sampled from the training split for k-means initialisation.
  int kmeans_examples = 64;
  bool ema_updates = true;
  // Refit NAVQ residual statistics from each epoch's residuals; when false the
  // statistics fitted at codebook initialisation stay frozen.
  bool refresh_residuals = true;

  void validate() const;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ModelWeights<Tensor>& shape, const TrainConfig& cfg);

  // One update from per-parameter gradients in ModelWeights::each order.
  void step(ModelWeights<Tensor>& weights, std::span<const Tensor> grads);
  long steps() const { return t_; }

 private:
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct StepResult {
  double task_loss = 0.0;
  double commitment = 0.0;
  double total() const { return task_loss + commitment; }
};

// Task loss for one example: cross-entropy of the class logits, or mean
// next-token cross-entropy for a causal model.
Var example_task_loss(const Model& model, const ForwardTrace& trace, const Example& ex);

// Mean over the batch of task loss plus commitment; the scalar differentiated
// by train_step.
Var batch_objective(Tape& tape, const Model& model, const ModelWeights<Var>& w, std::span<const Example> batch,
                    const ShardPlan& plan, const ForwardOptions& base, std::uint64_t noise_key,
                    std::vector<ForwardTrace>* traces = nullptr, double* task_loss = nullptr);

// k-means codebooks and residual statistics fitted on attention inputs from a
// full-precision forward pass over (a sample of) the training split.
void initialize_codebooks(Model& model, const Dataset& train, const ShardPlan& plan, const TrainConfig& cfg);

// Forward with the simulated partition, NAVQ noise and commitment loss,
// backward with straight-through quantisation, Adam update, then EMA codebook
// updates from this step's assignments. Residuals observed in the step are
// accumulated into `residual_accumulator` when non-null.
StepResult train_step(Model& model, Adam& adam, std::span<const Example> batch, const ShardPlan& plan,
                      const TrainConfig& cfg, std::uint64_t step,
                      std::vector<ResidualStats>* residual_accumulator = nullptr);

// Accuracy for a classifier, perplexity for a causal model, using quantised
// inference on `plan`.
double evaluate(const Model& model, const Dataset& split, const ShardPlan& plan,
                ClassTokenMode mode = ClassTokenMode::distributed);

struct TrainResult {
  std::vector<double> step_losses;
  double train_metric = 0.0;
  double val_metric = 0.0;
};

ModelConfig model_config_for(const SyntheticTask& task, ModelConfig base);

// Full run: init codebooks, epochs of shuffled mini-batches, residual refresh at
// each epoch boundary, final evaluation on both splits.
TrainResult train_model(Model& model, const TaskSplits& data, const TrainConfig& cfg);

struct AblationGrid {
  SyntheticTask task;
  ModelConfig model;
  TrainConfig train;
  std::vector<double> lambdas = {1.0};
  std::vector<double> betas = {0.0005};
  std::vector<ClassTokenMode> modes = {ClassTokenMode::distributed};
  std::vector<int> groups = {1};
  std::vector<std::uint64_t> seeds = {0};
  std::size_t train_size = 64;
  std::size_t val_size = 128;
  int threads = 1;
  // When set, each cell's trained model is saved as cell_<index>.astm here.
  std::filesystem::path checkpoint_dir;
};

struct AblationRow {
  std::string task;
  double lambda = 0.0;
  double beta = 0.0;
  int groups = 1;
  ClassTokenMode mode = ClassTokenMode::distributed;
  std::uint64_t seed = 0;
  double train_metric = 0.0;
  double val_metric = 0.0;
  double gap = 0.0;  // train - val
};

std::vector<AblationRow> run_ablation(const AblationGrid& grid);
std::string mode_name(ClassTokenMode m);
ClassTokenMode parse_mode(std::string_view name);
// Columns: task,lambda,beta,groups,cls_mode,seed,train_metric,val_metric,gap
void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows);
// Per-cell mean and standard deviation over seeds plus deltas against the
// first lambda and against single class tokens.
void write_ablation_summary(std::ostream& os, std::span<const AblationRow> rows);

}  // namespace astra
