#include "astra/cluster_sim.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <ostream>
#include <string>
#include <thread>

namespace astra {

std::size_t ShardPlan::device_of(std::size_t token) const {
  for (std::size_t d = 0; d < ranges.size(); ++d) {
    if (ranges[d].contains(token)) return d;
  }
  throw PlanError("token " + std::to_string(token) + " is not covered by the shard plan");
}

void ShardPlan::validate() const {
  if (ranges.empty()) throw PlanError("shard plan has no devices");
  std::size_t next = 0;
  for (std::size_t d = 0; d < ranges.size(); ++d) {
    const TokenRange& r = ranges[d];
    if (r.begin != next || r.end <= r.begin) {
      throw PlanError("device " + std::to_string(d) + " range [" + std::to_string(r.begin) + ", " +
                      std::to_string(r.end) + ") breaks contiguity");
    }
    next = r.end;
  }
  if (next != total_tokens) {
    throw PlanError("shard plan covers " + std::to_string(next) + " of " + std::to_string(total_tokens) +
                    " tokens");
  }
}

ShardPlan partition_tokens(std::size_t tokens, std::size_t devices) {
  if (devices < 1) throw ContractError("need at least one device");
  if (tokens < devices) {
    throw ContractError("cannot shard " + std::to_string(tokens) + " tokens over " +
                        std::to_string(devices) + " devices");
  }
  ShardPlan plan;
  plan.total_tokens = tokens;
  const std::size_t base = tokens / devices;
  const std::size_t extra = tokens % devices;
  std::size_t begin = 0;
  for (std::size_t d = 0; d < devices; ++d) {
    const std::size_t size = base + (d >= devices - extra ? 1 : 0);
    plan.ranges.push_back({begin, begin + size});
    begin += size;
  }
  return plan;
}

std::uint64_t CommsLedger::total_bits_sent() const {
  std::uint64_t s = 0;
  for (const auto& e : entries) s += e.bits_sent;
  return s;
}

std::uint64_t CommsLedger::total_bits_received() const {
  std::uint64_t s = 0;
  for (const auto& e : entries) s += e.bits_received;
  return s;
}

double CommsLedger::bits_per_token(std::size_t tokens) const {
  if (tokens == 0) throw ContractError("bits_per_token needs a positive token count");
  return static_cast<double>(total_bits_sent()) / static_cast<double>(tokens);
}

void CommsLedger::write_csv(std::ostream& os) const {
  os << "layer,device,bits_sent,bits_received,messages\n";
  for (const auto& e : entries) {
    os << e.layer << ',' << e.device << ',' << e.bits_sent << ',' << e.bits_received << ','
       << e.messages << '\n';
  }
}

void allgather_indices(std::span<DeviceState> devices, std::uint32_t layer, CommsLedger& ledger) {
  const std::size_t n = devices.size();
  if (n <= 1) {
    for (const auto& d : devices) ledger.entries.push_back({layer, d.id, 0, 0, 0});
    return;
  }
  for (const auto& d : devices) {
    if (!d.outbox) {
      throw ProtocolError("layer " + std::to_string(layer) + ": device " + std::to_string(d.id) +
                          " produced no index payload; exchange stalled");
    }
    if (d.outbox->layer_id != layer) {
      throw ProtocolError("layer " + std::to_string(layer) + ": device " + std::to_string(d.id) +
                          " sent indices for layer " + std::to_string(d.outbox->layer_id));
    }
  }
  std::vector<LedgerEntry> entries;
  for (auto& receiver : devices) {
    receiver.inbox.clear();
    LedgerEntry e{layer, receiver.id, receiver.outbox->payload_bits(), 0, n - 1};
    for (const auto& sender : devices) {
      if (sender.id == receiver.id) continue;
      IndexMessage m{sender.id, layer, *sender.outbox, sender.outbox->payload_bits()};
      e.bits_received += m.payload_bits;
      receiver.inbox.push_back(std::move(m));
    }
    std::sort(receiver.inbox.begin(), receiver.inbox.end(),
              [](const IndexMessage& a, const IndexMessage& b) { return a.sender < b.sender; });
    entries.push_back(e);
  }
  for (auto& d : devices) d.outbox.reset();
  ledger.entries.insert(ledger.entries.end(), entries.begin(), entries.end());
}

void check_codebook_consistency(std::span<const DeviceState> devices) {
  for (const auto& d : devices) {
    if (d.codebooks.size() != devices.front().codebooks.size()) {
      throw ContractError("device " + std::to_string(d.id) + " holds a different number of codebooks");
    }
    for (std::size_t l = 0; l < d.codebooks.size(); ++l) {
      if (serialize_codebook(d.codebooks[l]) != serialize_codebook(devices.front().codebooks[l])) {
        throw ContractError("codebook for layer " + std::to_string(l) + " diverged on device " +
                            std::to_string(d.id));
      }
    }
  }
}

namespace {

// Runs fn(device) for every device on up to `threads` workers. The first
// failure by device id is rethrown so errors are deterministic too.
template <class F>
void for_each_device(std::size_t n, int threads, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t d) {
    try {
      fn(d);
    } catch (...) {
      errors[d] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t d = 0; d < n; ++d) guarded(d);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t d = next++; d < n; d = next++) guarded(d);
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<std::optional<QuantizedTokens>> payload_slots(const DeviceState& dev, std::size_t n) {
  std::vector<std::optional<QuantizedTokens>> slots(n);
  for (const auto& m : dev.inbox) slots.at(m.sender) = m.payload;
  return slots;
}

}  // namespace

InferenceResult run_inference(const Model& model, const SequenceInput& input, const ShardPlan& plan,
                              const InferenceOptions& opts) {
  const ModelConfig& cfg = model.config;
  plan.validate();
  const std::size_t n = plan.devices();
  const bool generating = opts.mode == InferenceMode::generate;
  if (generating != cfg.causal) {
    throw ContractError(generating ? "generate needs a causal config" : "classify needs a non-causal config");
  }
  if (n > 1 && !model.codebooks_ready()) throw LifecycleError("model has no codebooks for distributed inference");
  if (generating && opts.steps < 0) throw ContractError("generation steps must be non-negative");

  // Embedding is position-wise, so it can happen once before sharding.
  Tensor embedded;
  {
    Tape tape(false);
    const ModelWeights<Var> w = bind_weights(tape, model.weights, false);
    embedded = embed_tokens(model, w, input).value();
  }
  if (embedded.rows() != plan.total_tokens) {
    throw PlanError("shard plan covers " + std::to_string(plan.total_tokens) + " tokens, input has " +
                    std::to_string(embedded.rows()));
  }
  if (generating && opts.steps > 0 &&
      plan.total_tokens + static_cast<std::size_t>(opts.steps) - 1 > static_cast<std::size_t>(cfg.max_tokens)) {
    throw ContractError("prompt plus generated tokens exceed max_tokens");
  }

  const Rng root(opts.seed);
  std::vector<DeviceState> devices(n);
  for (std::size_t d = 0; d < n; ++d) {
    DeviceState& dev = devices[d];
    dev.id = d;
    dev.tokens = embedded.rows_slice(plan.ranges[d].begin, plan.ranges[d].size());
    if (!cfg.causal && class_rows_on_device(plan, d, opts.class_tokens) > 0) dev.class_replica = model.weights.cls;
    if (n > 1) dev.codebooks = model.codebooks;
    dev.rng = root.stream(static_cast<std::uint64_t>(d));
  }

  // The decoding device keeps its layer inputs and what it received.
  std::vector<Tensor> decode_local(static_cast<std::size_t>(cfg.layers));
  std::vector<std::optional<Tensor>> decode_remote(static_cast<std::size_t>(cfg.layers));

  InferenceResult result;
  for (std::uint32_t l = 0; l < static_cast<std::uint32_t>(cfg.layers); ++l) {
    std::vector<Tensor> inputs(n);
    for_each_device(n, opts.worker_threads, [&](std::size_t d) {
      DeviceState& dev = devices[d];
      inputs[d] = attention_input(model, l, dev.tokens);
      if (n > 1) dev.outbox = quantize(dev.codebooks[l], inputs[d]).tokens;
    });
    if (opts.drop_payload && opts.drop_payload->first == l) devices.at(opts.drop_payload->second).outbox.reset();
    try {
      allgather_indices(devices, l, result.ledger);
    } catch (const ProtocolError& e) {
      throw ProtocolAbort(e.what(), l, result.ledger);
    }

    if (generating) {
      const DeviceState& last = devices.back();
      decode_local[l] = inputs.back();
      if (n > 1) {
        const std::size_t before = plan.ranges.back().begin;
        Tensor remote(before, static_cast<std::size_t>(cfg.hidden), cfg.precision);
        for (const auto& m : last.inbox) {
          const Tensor rec = dequantize(last.codebooks[l], m.payload);
          const std::size_t off = plan.ranges[m.sender].begin;
          for (std::size_t i = 0; i < rec.rows(); ++i)
            for (std::size_t c = 0; c < rec.cols(); ++c) remote(off + i, c) = rec(i, c);
        }
        decode_remote[l] = std::move(remote);
      }
    }

    for_each_device(n, opts.worker_threads, [&](std::size_t d) {
      DeviceState& dev = devices[d];
      const auto slots = payload_slots(dev, n);
      static const Codebook unused;
      const Codebook& cb = n > 1 ? dev.codebooks[l] : unused;
      DeviceBlockOutput out = block_forward_device(model, l, cb, plan, d, dev.tokens, dev.class_replica,
                                                   slots, opts.class_tokens);
      dev.tokens = std::move(out.tokens);
      dev.class_replica = std::move(out.class_replica);
      dev.inbox.clear();
    });
    check_codebook_consistency(devices);
  }

  if (!generating) {
    std::vector<Tensor> replicas;
    for (const auto& dev : devices) {
      if (dev.class_replica) replicas.push_back(*dev.class_replica);
    }
    result.logits = classifier_head(model, aggregate_class_tokens(replicas));
    return result;
  }

  const Tensor& last_tokens = devices.back().tokens;
  result.logits = classifier_head(model, last_tokens.rows_slice(last_tokens.rows() - 1, 1));
  if (opts.steps == 0) return result;
  DecodeCache cache;
  cache.next_position = plan.total_tokens;
  for (std::size_t l = 0; l < decode_local.size(); ++l) {
    cache.layers.push_back(make_cache_layer(model, l, decode_local[l], decode_remote[l]));
  }
  int next = argmax_token(result.logits);
  result.tokens.push_back(next);
  while (static_cast<int>(result.tokens.size()) < opts.steps) {
    next = argmax_token(decode_step(model, cache, next));
    result.tokens.push_back(next);
  }
  return result;
}

}  // namespace astra
