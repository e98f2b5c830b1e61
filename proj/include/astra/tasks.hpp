#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "astra/model.hpp"

namespace astra {

enum class TaskKind { blob_classify, toy_lm };

std::string task_name(TaskKind k);
TaskKind parse_task(std::string_view name);

struct SyntheticTask {
  TaskKind kind = TaskKind::blob_classify;
  int tokens = 16;
  // Classes (blob-classify) or vocabulary size (toy-lm, at most 64).
  int outputs = 4;
  // Width of the lifted token embeddings (blob-classify only).
  int input_dim = 32;
  std::uint64_t seed = 0;
  // Standard deviation of the 2-D cluster samples.
  double cluster_noise = 0.6;
  // Number of 2-D cluster centres a token can be drawn from.
  int clusters = 4;
  // Softmax temperature of Markov transition rows; lower is more predictable.
  double transition_temperature = 0.5;

  void validate() const;
};

struct Example {
  SequenceInput input;
  int label = 0;  // blob-classify only
};

using Dataset = std::vector<Example>;

struct TaskSplits {
  Dataset train;
  Dataset val;
};

// The task structure (cluster centres, class patterns, lift, transitions) is
// drawn from `task.seed`; the two splits use separate sample streams.
TaskSplits make_task(const SyntheticTask& task, std::size_t train_size, std::size_t val_size);

}  // namespace astra
