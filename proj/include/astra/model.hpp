#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "astra/attention.hpp"
#include "astra/shard_plan.hpp"
#include "astra/tape.hpp"
#include "astra/tensor.hpp"
#include "astra/vq.hpp"

namespace astra {

enum class ClassTokenMode { single, distributed };

struct ModelConfig {
  int layers = 2;
  int hidden = 32;
  int heads = 2;
  int mlp_expansion = 4;
  // Classes for a classifier, vocabulary size for a causal language model.
  int outputs = 4;
  // Width of raw input embeddings for a classifier; ignored when causal.
  int input_dim = 32;
  int max_tokens = 16;
  bool causal = false;
  int codebook_size = 16;
  int groups = 1;
  Precision precision = Precision::f32;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct BlockWeights {
  T ln1_gain, ln1_bias;
  T wq, wk, wv, wo;  // attention projections carry no bias
  T ln2_gain, ln2_bias;
  T w1, b1, w2, b2;

  // Visits members in declaration order (the checkpoint order).
  template <class F>
  void each(F&& f) {
    for (T* p : {&ln1_gain, &ln1_bias, &wq, &wk, &wv, &wo, &ln2_gain,
                 &ln2_bias, &w1, &b1, &w2, &b2})
      f(*p);
  }
  template <class F>
  void each(F&& f) const {
    for (const T* p : {&ln1_gain, &ln1_bias, &wq, &wk, &wv, &wo, &ln2_gain,
                       &ln2_bias, &w1, &b1, &w2, &b2})
      f(*p);
  }
};

template <class T>
struct ModelWeights {
  T embed;  // vocab x D (causal) or input_dim x D projection (classifier)
  T pos;    // max_tokens x D
  T cls;    // 1 x D
  std::vector<BlockWeights<T>> blocks;
  T lnf_gain, lnf_bias;
  T head_w, head_b;

  template <class F>
  void each(F&& f) {
    f(embed);
    f(pos);
    f(cls);
    for (auto& b : blocks) b.each(f);
    f(lnf_gain);
    f(lnf_bias);
    f(head_w);
    f(head_b);
  }
  template <class F>
  void each(F&& f) const {
    f(embed);
    f(pos);
    f(cls);
    for (const auto& b : blocks) b.each(f);
    f(lnf_gain);
    f(lnf_bias);
    f(head_w);
    f(head_b);
  }
};

// Weights are replicated on every device; codebooks and residual statistics
// are per layer.
struct Model {
  ModelConfig config;
  ModelWeights<Tensor> weights;
  std::vector<Codebook> codebooks;
  std::vector<ResidualStats> residuals;

  bool codebooks_ready() const { return codebooks.size() == static_cast<std::size_t>(config.layers); }
  std::size_t parameter_count() const;
};

Model init_model(const ModelConfig& config, std::uint64_t seed);

ModelWeights<Var> bind_weights(Tape& tape, const ModelWeights<Tensor>& weights, bool requires_grad);

// Classifier input (T x input_dim embeddings) or language-model token ids.
using SequenceInput = std::variant<Tensor, std::vector<int>>;

struct ForwardOptions {
  ClassTokenMode class_tokens = ClassTokenMode::distributed;
  // When false, non-local keys use exact embeddings instead of codebook
  // reconstructions (the full-precision reference).
  bool quantize = true;
  RunMode mode = RunMode::inference;
  NoiseConfig noise;
  double beta = 0.0;
};

struct ForwardTrace {
  // Classifier: 1 x classes. Language model: T x vocab.
  Var logits;
  // Sum over layers of beta * ||X - sg(X_hat)||^2 (a zero scalar if unused).
  Var commitment;
  // Per layer: the attention inputs of the content tokens (the embeddings that
  // get quantised) and their quantisation.
  std::vector<Tensor> attention_inputs;
  std::vector<Quantized> quantized;
};

// Rows handled by one device or by the whole sequence: class-token replicas
// first, then content tokens. Returns R x (R + T) where the first R columns are
// the full-precision keys of these rows and the last T the quantised keys of
// every content token.
BoolMatrix block_mask(const ShardPlan& plan, bool causal, bool class_tokens, ClassTokenMode mode);
BoolMatrix device_block_mask(const ShardPlan& plan, std::size_t device, bool causal,
                             bool class_tokens, ClassTokenMode mode);

// Number of class-token rows a device holds.
std::size_t class_rows_on_device(const ShardPlan& plan, std::size_t device, ClassTokenMode mode);

// Whole-sequence forward on one process. Device partitioning is realised
// through the attention mask: each row attends to full-precision keys from its
// own shard and quantised keys from the others.
ForwardTrace forward(Tape& tape, const Model& model, const ModelWeights<Var>& w,
                     const SequenceInput& input, const ShardPlan& plan, const ForwardOptions& opts);

// Embedded token rows (T x D) before the first block.
Var embed_tokens(const Model& model, const ModelWeights<Var>& w, const SequenceInput& input,
                 std::size_t position_offset = 0);

// One pre-norm block over `rows` given their precomputed attention input
// (LN1 of rows) and the quantised key set.
Var block_forward_rows(const BlockWeights<Var>& w, Var rows, Var attention_input, Var quantized,
                       const BoolMatrix& mask, int heads);

struct DeviceBlockOutput {
  Tensor tokens;
  std::optional<Tensor> class_replica;
};

// One block on one device. `payloads[s]` holds the indices sender s
// transmitted for this layer; every device other than `device` must be
// present. The device's own payload slot is ignored.
DeviceBlockOutput block_forward_device(const Model& model, std::size_t layer, const Codebook& codebook,
                                       const ShardPlan& plan, std::size_t device,
                                       const Tensor& local_tokens,
                                       const std::optional<Tensor>& class_replica,
                                       std::span<const std::optional<QuantizedTokens>> payloads,
                                       ClassTokenMode mode);

// LN1 of local content tokens; the embeddings a device quantises and sends.
Tensor attention_input(const Model& model, std::size_t layer, const Tensor& tokens);

Tensor aggregate_class_tokens(std::span<const Tensor> replicas);

// Prediction head applied to the pooled class token (1 x D) -> 1 x classes.
Tensor classifier_head(const Model& model, const Tensor& pooled);

Tensor classify(const Model& model, const Tensor& input, const ShardPlan& plan,
                ClassTokenMode mode = ClassTokenMode::distributed);

// Key/value state held by the decoding device: full precision for its own
// tokens, codebook reconstructions for everyone else's.
struct DecodeCache {
  struct Layer {
    Tensor local_k, local_v;
    std::optional<Tensor> remote_k, remote_v;
  };
  std::vector<Layer> layers;
  std::size_t next_position = 0;
};

// Prefill-side helpers: build one layer's cache from its attention inputs.
DecodeCache::Layer make_cache_layer(const Model& model, std::size_t layer, const Tensor& local_inputs,
                                    const std::optional<Tensor>& remote_reconstruction);

// Appends `token` at the next position, runs every block against the cache and
// returns the 1 x vocab logits.
Tensor decode_step(const Model& model, DecodeCache& cache, int token);

// Greedy argmax with ties to the lowest id.
int argmax_token(const Tensor& logits_row);

std::vector<int> generate(const Model& model, std::span<const int> prompt, int steps,
                          const ShardPlan& plan);

}  // namespace astra
