#pragma once

#include <variant>
#include <vector>

#include "astra/model.hpp"
#include "astra/rng.hpp"

namespace fixture {

// Per-layer codebooks whose entries are exactly the attention inputs of a
// full-precision run, so every quantised token reconstructs without error.
inline std::vector<astra::Codebook> identity_codebooks(const astra::Model& model,
                                                       const astra::SequenceInput& input) {
  using namespace astra;
  const std::size_t t = std::holds_alternative<Tensor>(input) ? std::get<Tensor>(input).rows()
                                                              : std::get<std::vector<int>>(input).size();
  Tape tape(false);
  const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
  ForwardOptions opts;
  opts.quantize = false;
  opts.class_tokens = ClassTokenMode::single;
  const ForwardTrace trace = forward(tape, model, w, input, partition_tokens(t, 1), opts);
  const auto g = static_cast<std::size_t>(model.config.groups);
  std::vector<Codebook> out;
  for (std::size_t l = 0; l < trace.attention_inputs.size(); ++l) {
    const Tensor& x = trace.attention_inputs[l];
    const std::size_t sub = x.cols() / g;
    Tensor table(g * t, sub, x.precision());
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < sub; ++c) table(gi * t + i, c) = x(i, gi * sub + c);
    out.push_back(Codebook::from_centroids(static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(g), table));
  }
  return out;
}

inline astra::Tensor random_input(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                  astra::Precision p = astra::Precision::f32) {
  astra::Rng rng(seed);
  astra::Tensor t(rows, cols, p);
  for (double& v : t.values()) v = rng.normal();
  t.round();
  return t;
}

inline astra::ModelConfig small_classifier(astra::Precision p = astra::Precision::f64) {
  astra::ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.outputs = 5;
  c.input_dim = 8;
  c.max_tokens = 16;
  c.codebook_size = 16;
  c.precision = p;
  return c;
}

inline astra::ModelConfig small_lm(astra::Precision p = astra::Precision::f64) {
  astra::ModelConfig c = small_classifier(p);
  c.causal = true;
  c.outputs = 11;
  c.max_tokens = 24;
  return c;
}

}  // namespace fixture
