#include "astra/model.hpp"

#include <cmath>
#include <string>

#include "astra/error.hpp"
#include "astra/ops.hpp"
#include "astra/rng.hpp"

namespace astra {

void ModelConfig::validate() const {
  if (layers < 1) throw ContractError("model needs at least one layer");
  if (hidden < 1 || heads < 1 || hidden % heads != 0) {
    throw ContractError("hidden width must be a positive multiple of the head count");
  }
  if (groups < 1 || hidden % groups != 0) {
    throw ContractError("hidden width must be divisible by the codebook group count");
  }
  if (mlp_expansion < 1 || outputs < 1 || max_tokens < 1 || codebook_size < 1) {
    throw ContractError("model sizes must be positive");
  }
  if (!causal && input_dim < 1) throw ContractError("classifier input width must be positive");
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  weights.each([&](const Tensor& t) { n += t.size(); });
  return n;
}

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng, Precision p) {
  Tensor t(rows, cols, p);
  for (double& v : t.values()) v = stddev * rng.normal();
  t.round();
  return t;
}

Tensor filled(std::size_t rows, std::size_t cols, double value, Precision p) {
  Tensor t(rows, cols, p);
  for (double& v : t.values()) v = value;
  return t;
}

}  // namespace

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.hidden);
  const auto hidden_mlp = d * static_cast<std::size_t>(config.mlp_expansion);
  const Precision p = config.precision;
  Rng rng = Rng(seed).stream("init");
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));

  Model m;
  m.config = config;
  auto& w = m.weights;
  if (config.causal) {
    w.embed = gaussian(static_cast<std::size_t>(config.outputs), d, 1.0, rng, p);
  } else {
    w.embed = gaussian(static_cast<std::size_t>(config.input_dim), d,
                       1.0 / std::sqrt(static_cast<double>(config.input_dim)), rng, p);
  }
  w.pos = gaussian(static_cast<std::size_t>(config.max_tokens), d, 0.1, rng, p);
  w.cls = gaussian(1, d, 0.1, rng, p);
  for (int l = 0; l < config.layers; ++l) {
    BlockWeights<Tensor> b;
    b.ln1_gain = filled(1, d, 1.0, p);
    b.ln1_bias = Tensor(1, d, p);
    b.wq = gaussian(d, d, proj, rng, p);
    b.wk = gaussian(d, d, proj, rng, p);
    b.wv = gaussian(d, d, proj, rng, p);
    b.wo = gaussian(d, d, proj, rng, p);
    b.ln2_gain = filled(1, d, 1.0, p);
    b.ln2_bias = Tensor(1, d, p);
    b.w1 = gaussian(d, hidden_mlp, proj, rng, p);
    b.b1 = Tensor(1, hidden_mlp, p);
    b.w2 = gaussian(hidden_mlp, d, 1.0 / std::sqrt(static_cast<double>(hidden_mlp)), rng, p);
    b.b2 = Tensor(1, d, p);
    w.blocks.push_back(std::move(b));
  }
  w.lnf_gain = filled(1, d, 1.0, p);
  w.lnf_bias = Tensor(1, d, p);
  w.head_w = gaussian(d, static_cast<std::size_t>(config.outputs), proj, rng, p);
  w.head_b = Tensor(1, static_cast<std::size_t>(config.outputs), p);
  return m;
}

namespace {

BlockWeights<Var> bind_block(Tape& tape, const BlockWeights<Tensor>& b, bool requires_grad) {
  BlockWeights<Var> out;
  std::vector<Var> vars;
  b.each([&](const Tensor& t) { vars.push_back(tape.leaf(t, requires_grad)); });
  std::size_t i = 0;
  out.each([&](Var& v) { v = vars[i++]; });
  return out;
}

}  // namespace

ModelWeights<Var> bind_weights(Tape& tape, const ModelWeights<Tensor>& weights, bool requires_grad) {
  std::vector<Var> vars;
  weights.each([&](const Tensor& t) { vars.push_back(tape.leaf(t, requires_grad)); });
  ModelWeights<Var> out;
  out.blocks.resize(weights.blocks.size());
  std::size_t i = 0;
  out.each([&](Var& v) { v = vars[i++]; });
  return out;
}

std::size_t class_rows_on_device(const ShardPlan& plan, std::size_t device, ClassTokenMode mode) {
  (void)plan;
  return mode == ClassTokenMode::distributed || device == 0 ? 1 : 0;
}

BoolMatrix block_mask(const ShardPlan& plan, bool causal, bool class_tokens, ClassTokenMode mode) {
  const std::size_t t = plan.total_tokens;
  const MixedPrecisionMask m = build_mask(t, plan, causal);
  const std::size_t c = class_tokens ? (mode == ClassTokenMode::distributed ? plan.devices() : 1) : 0;
  const std::size_t r = c + t;
  BoolMatrix out(r, r + t);
  for (std::size_t ci = 0; ci < c; ++ci) {
    const TokenRange& home = plan.ranges[ci];
    out.set(ci, ci, true);
    for (std::size_t j = 0; j < t; ++j) {
      if (home.contains(j)) {
        out.set(ci, c + j, true);
      } else {
        out.set(ci, r + j, true);
      }
    }
  }
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t dev = plan.device_of(i);
    if (c > 0 && (mode == ClassTokenMode::distributed || dev == 0)) {
      out.set(c + i, mode == ClassTokenMode::distributed ? dev : 0, true);
    }
    for (std::size_t j = 0; j < t; ++j) {
      if (m.full(i, j)) out.set(c + i, c + j, true);
      if (m.quantized(i, j)) out.set(c + i, r + j, true);
    }
  }
  return out;
}

BoolMatrix device_block_mask(const ShardPlan& plan, std::size_t device, bool causal,
                             bool class_tokens, ClassTokenMode mode) {
  const std::size_t t = plan.total_tokens;
  const MixedPrecisionMask m = build_mask(t, plan, causal);
  const TokenRange& range = plan.ranges.at(device);
  const std::size_t c = class_tokens ? class_rows_on_device(plan, device, mode) : 0;
  const std::size_t r = c + range.size();
  BoolMatrix out(r, r + t);
  if (c > 0) {
    out.set(0, 0, true);
    for (std::size_t j = 0; j < t; ++j) {
      if (range.contains(j)) {
        out.set(0, c + (j - range.begin), true);
      } else {
        out.set(0, r + j, true);
      }
    }
  }
  for (std::size_t li = 0; li < range.size(); ++li) {
    const std::size_t i = range.begin + li;
    if (c > 0) out.set(c + li, 0, true);
    for (std::size_t lj = 0; lj < range.size(); ++lj) {
      if (m.full(i, range.begin + lj)) out.set(c + li, c + lj, true);
    }
    for (std::size_t j = 0; j < t; ++j) {
      if (m.quantized(i, j)) out.set(c + li, r + j, true);
    }
  }
  return out;
}

Var embed_tokens(const Model& model, const ModelWeights<Var>& w, const SequenceInput& input,
                 std::size_t position_offset) {
  Tape& tape = w.embed.tape();
  Var x;
  if (model.config.causal) {
    const auto* ids = std::get_if<std::vector<int>>(&input);
    if (!ids) throw ContractError("a causal model takes token ids");
    x = gather_rows(w.embed, *ids);
  } else {
    const auto* emb = std::get_if<Tensor>(&input);
    if (!emb) throw ContractError("a classifier takes input embeddings");
    if (emb->cols() != static_cast<std::size_t>(model.config.input_dim)) {
      throw DimensionError("classifier input width " + std::to_string(emb->cols()) +
                           " does not match input_dim " + std::to_string(model.config.input_dim));
    }
    x = matmul(tape.constant(*emb), w.embed);
  }
  if (position_offset + x.rows() > static_cast<std::size_t>(model.config.max_tokens)) {
    throw ContractError("sequence exceeds max_tokens=" + std::to_string(model.config.max_tokens));
  }
  return add(x, slice_rows(w.pos, position_offset, x.rows()));
}

Var block_forward_rows(const BlockWeights<Var>& w, Var rows, Var attention_input, Var quantized,
                       const BoolMatrix& mask, int heads) {
  Var q = matmul(attention_input, w.wq);
  Var k = matmul(attention_input, w.wk);
  Var v = matmul(attention_input, w.wv);
  Var k_hat = matmul(quantized, w.wk);
  Var v_hat = matmul(quantized, w.wv);
  Var attn = mixed_precision_attention(q, k, k_hat, v, v_hat, mask, heads);
  Var x = add(rows, matmul(attn, w.wo));
  Var h2 = layer_norm(x, w.ln2_gain, w.ln2_bias);
  Var mlp = add_row(matmul(gelu(add_row(matmul(h2, w.w1), w.b1)), w.w2), w.b2);
  return add(x, mlp);
}

ForwardTrace forward(Tape& tape, const Model& model, const ModelWeights<Var>& w,
                     const SequenceInput& input, const ShardPlan& plan, const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  Var x = embed_tokens(model, w, input);
  const std::size_t t = x.rows();
  if (plan.total_tokens != t) {
    throw PlanError("shard plan covers " + std::to_string(plan.total_tokens) + " tokens, input has " +
                    std::to_string(t));
  }
  const std::size_t n = plan.devices();
  const bool has_cls = !cfg.causal;
  const std::size_t c = has_cls ? (opts.class_tokens == ClassTokenMode::distributed ? n : 1) : 0;
  const bool quantizing = opts.quantize && n > 1;
  if (quantizing && !model.codebooks_ready()) {
    throw LifecycleError("codebooks are not initialised; run k-means initialisation first");
  }

  Var rows = x;
  if (c > 0) {
    std::vector<Var> parts(c, w.cls);
    parts.push_back(x);
    rows = concat_rows(parts);
  }
  const BoolMatrix mask = block_mask(plan, cfg.causal, has_cls, opts.class_tokens);

  ForwardTrace trace;
  trace.commitment = tape.constant(Tensor::scalar(0.0, cfg.precision));
  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.layers); ++l) {
    const BlockWeights<Var>& b = w.blocks[l];
    Var h = layer_norm(rows, b.ln1_gain, b.ln1_bias);
    Var h_tok = c > 0 ? slice_rows(h, c, t) : h;
    Var quantized = h_tok;
    if (quantizing) {
      Quantized qz = quantize(model.codebooks[l], h_tok.value());
      Tensor target = qz.reconstruction;
      if (opts.noise.enabled && opts.noise.lambda != 0.0) {
        if (model.residuals.size() <= l) throw LifecycleError("residual statistics missing");
        target = apply_noise(target, model.residuals[l], opts.noise, opts.mode);
      }
      quantized = straight_through(h_tok, target);
      if (opts.beta > 0.0) {
        trace.commitment = add(trace.commitment, commitment_loss(h_tok, qz.reconstruction, opts.beta));
      }
      trace.quantized.push_back(std::move(qz));
    }
    trace.attention_inputs.push_back(h_tok.value());
    rows = block_forward_rows(b, rows, h, quantized, mask, cfg.heads);
  }

  Var final_rows = c > 0 ? mean_rows(slice_rows(rows, 0, c)) : rows;
  Var normed = layer_norm(final_rows, w.lnf_gain, w.lnf_bias);
  trace.logits = add_row(matmul(normed, w.head_w), w.head_b);
  return trace;
}

namespace {

BlockWeights<Var> bind_block_const(Tape& tape, const BlockWeights<Tensor>& b) {
  return bind_block(tape, b, false);
}

}  // namespace

Tensor attention_input(const Model& model, std::size_t layer, const Tensor& tokens) {
  Tape tape(false);
  const auto& b = model.weights.blocks.at(layer);
  return layer_norm(tape.constant(tokens), tape.constant(b.ln1_gain), tape.constant(b.ln1_bias))
      .value();
}

DeviceBlockOutput block_forward_device(const Model& model, std::size_t layer, const Codebook& codebook,
                                       const ShardPlan& plan, std::size_t device,
                                       const Tensor& local_tokens,
                                       const std::optional<Tensor>& class_replica,
                                       std::span<const std::optional<QuantizedTokens>> payloads,
                                       ClassTokenMode mode) {
  const ModelConfig& cfg = model.config;
  const TokenRange& range = plan.ranges.at(device);
  const std::size_t n = plan.devices();
  const std::size_t t = plan.total_tokens;
  if (local_tokens.rows() != range.size()) {
    throw DimensionError("device " + std::to_string(device) + " holds " +
                         std::to_string(local_tokens.rows()) + " tokens, plan says " +
                         std::to_string(range.size()));
  }
  const bool has_cls = !cfg.causal;
  const std::size_t c = has_cls ? class_rows_on_device(plan, device, mode) : 0;
  if (c > 0 && !class_replica) throw ContractError("device is missing its class-token replica");
  if (n > 1 && payloads.size() != n) {
    throw ProtocolError("expected " + std::to_string(n) + " payload slots, got " +
                        std::to_string(payloads.size()));
  }

  Tape tape(false);
  const BlockWeights<Var> b = bind_block_const(tape, model.weights.blocks.at(layer));
  Var rows = tape.constant(local_tokens);
  if (c > 0) {
    const Var parts[] = {tape.constant(*class_replica), rows};
    rows = concat_rows(parts);
  }
  Var h = layer_norm(rows, b.ln1_gain, b.ln1_bias);
  Var h_tok = c > 0 ? slice_rows(h, c, range.size()) : h;

  // Quantised key set over all T tokens. Own rows are never attended through
  // the quantised half, but are filled with the device's own reconstruction.
  Tensor keys(t, static_cast<std::size_t>(cfg.hidden), cfg.precision);
  if (n == 1) {
    keys = h_tok.value();
  } else {
    for (std::size_t s = 0; s < n; ++s) {
      const TokenRange& r = plan.ranges[s];
      Tensor rec;
      if (s == device) {
        rec = quantize(codebook, h_tok.value()).reconstruction;
      } else {
        const auto& payload = payloads[s];
        if (!payload) {
          throw ProtocolError("device " + std::to_string(device) + " has no layer " +
                              std::to_string(layer) + " indices from device " + std::to_string(s));
        }
        if (payload->layer_id != layer || payload->token_count != r.size()) {
          throw ProtocolError("payload from device " + std::to_string(s) +
                              " does not match layer/shard");
        }
        rec = dequantize(codebook, *payload);
      }
      for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t d = 0; d < keys.cols(); ++d) keys(r.begin + i, d) = rec(i, d);
    }
  }

  const BoolMatrix mask = device_block_mask(plan, device, cfg.causal, has_cls, mode);
  Var out = block_forward_rows(b, rows, h, tape.constant(keys), mask, cfg.heads);
  DeviceBlockOutput result;
  if (c > 0) {
    result.class_replica = out.value().rows_slice(0, 1);
    result.tokens = out.value().rows_slice(1, range.size());
  } else {
    result.tokens = out.value();
  }
  return result;
}

Tensor aggregate_class_tokens(std::span<const Tensor> replicas) {
  if (replicas.empty()) throw ContractError("no class-token replicas to aggregate");
  Tape tape(false);
  std::vector<Var> parts;
  for (const Tensor& r : replicas) parts.push_back(tape.constant(r));
  return mean_rows(concat_rows(parts)).value();
}

Tensor classifier_head(const Model& model, const Tensor& pooled) {
  Tape tape(false);
  const auto& w = model.weights;
  Var normed = layer_norm(tape.constant(pooled), tape.constant(w.lnf_gain), tape.constant(w.lnf_bias));
  return add_row(matmul(normed, tape.constant(w.head_w)), tape.constant(w.head_b)).value();
}

Tensor classify(const Model& model, const Tensor& input, const ShardPlan& plan, ClassTokenMode mode) {
  if (model.config.causal) throw ContractError("classify needs a non-causal classifier config");
  Tape tape(false);
  const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
  ForwardOptions opts;
  opts.class_tokens = mode;
  return forward(tape, model, w, input, plan, opts).logits.value();
}

DecodeCache::Layer make_cache_layer(const Model& model, std::size_t layer, const Tensor& local_inputs,
                                    const std::optional<Tensor>& remote_reconstruction) {
  Tape tape(false);
  const auto& b = model.weights.blocks.at(layer);
  auto project = [&](const Tensor& x, const Tensor& w) {
    return matmul(tape.constant(x), tape.constant(w)).value();
  };
  DecodeCache::Layer out{project(local_inputs, b.wk), project(local_inputs, b.wv),
                         std::nullopt, std::nullopt};
  if (remote_reconstruction) {
    out.remote_k = project(*remote_reconstruction, b.wk);
    out.remote_v = project(*remote_reconstruction, b.wv);
  }
  return out;
}

namespace {

Tensor append_row(const Tensor& a, const Tensor& row) {
  std::vector<double> v(a.values().begin(), a.values().end());
  v.insert(v.end(), row.values().begin(), row.values().end());
  return Tensor(a.rows() + 1, a.cols(), std::move(v), a.precision());
}

}  // namespace

Tensor decode_step(const Model& model, DecodeCache& cache, int token) {
  const ModelConfig& cfg = model.config;
  if (!cfg.causal) throw ContractError("decoding needs a causal model");
  if (cache.layers.size() != static_cast<std::size_t>(cfg.layers)) {
    throw ContractError("decode cache does not cover every layer");
  }
  Tape tape(false);
  const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
  const std::vector<int> ids = {token};
  Var x = embed_tokens(model, w, SequenceInput(ids), cache.next_position);
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    auto& layer = cache.layers[l];
    const BlockWeights<Var>& b = w.blocks[l];
    Var h = layer_norm(x, b.ln1_gain, b.ln1_bias);
    Var q = matmul(h, b.wq);
    layer.local_k = append_row(layer.local_k, matmul(h, b.wk).value());
    layer.local_v = append_row(layer.local_v, matmul(h, b.wv).value());
    Var attn;
    if (layer.remote_k) {
      BoolMatrix mask(1, layer.local_k.rows() + layer.remote_k->rows(), true);
      attn = mixed_precision_attention(q, tape.constant(layer.local_k), tape.constant(*layer.remote_k),
                                       tape.constant(layer.local_v), tape.constant(*layer.remote_v),
                                       mask, cfg.heads);
    } else {
      BoolMatrix mask(1, layer.local_k.rows(), true);
      attn = masked_attention(q, tape.constant(layer.local_k), tape.constant(layer.local_v), mask,
                              cfg.heads);
    }
    x = add(x, matmul(attn, b.wo));
    Var h2 = layer_norm(x, b.ln2_gain, b.ln2_bias);
    x = add(x, add_row(matmul(gelu(add_row(matmul(h2, b.w1), b.b1)), b.w2), b.b2));
  }
  ++cache.next_position;
  Var normed = layer_norm(x, w.lnf_gain, w.lnf_bias);
  return add_row(matmul(normed, w.head_w), w.head_b).value();
}

int argmax_token(const Tensor& logits_row) {
  const auto v = logits_row.row(logits_row.rows() - 1);
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

std::vector<int> generate(const Model& model, std::span<const int> prompt, int steps,
                          const ShardPlan& plan) {
  const ModelConfig& cfg = model.config;
  if (!cfg.causal) throw ContractError("generate needs a causal config");
  if (steps < 0) throw ContractError("generation steps must be non-negative");
  if (steps == 0) return {};
  if (prompt.size() < plan.devices()) throw ContractError("prompt must hold at least one token per device");
  if (prompt.size() + static_cast<std::size_t>(steps) - 1 > static_cast<std::size_t>(cfg.max_tokens)) {
    throw ContractError("prompt plus generated tokens exceed max_tokens");
  }

  Tape tape(false);
  const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
  const std::vector<int> ids(prompt.begin(), prompt.end());
  ForwardOptions opts;
  const ForwardTrace trace = forward(tape, model, w, SequenceInput(ids), plan, opts);

  // The decoding device is the one holding the final prompt token.
  const TokenRange& home = plan.ranges.back();
  DecodeCache cache;
  cache.next_position = prompt.size();
  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.layers); ++l) {
    const Tensor local = trace.attention_inputs[l].rows_slice(home.begin, home.size());
    std::optional<Tensor> remote;
    if (plan.devices() > 1) remote = trace.quantized[l].reconstruction.rows_slice(0, home.begin);
    cache.layers.push_back(make_cache_layer(model, l, local, remote));
  }

  std::vector<int> out;
  int next = argmax_token(trace.logits.value());
  out.push_back(next);
  while (static_cast<int>(out.size()) < steps) {
    next = argmax_token(decode_step(model, cache, next));
    out.push_back(next);
  }
  return out;
}

}  // namespace astra
