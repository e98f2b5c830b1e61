#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "astra/error.hpp"
#include "astra/model.hpp"
#include "astra/rng.hpp"
#include "astra/shard_plan.hpp"
#include "astra/vq.hpp"

namespace astra {

struct IndexMessage {
  std::size_t sender = 0;
  std::uint32_t layer = 0;
  QuantizedTokens payload;
  // Bit-packed size: token_count * G * ceil(log2 K).
  std::uint64_t payload_bits = 0;
};

struct DeviceState {
  std::size_t id = 0;
  Tensor tokens;
  std::optional<Tensor> class_replica;
  std::vector<Codebook> codebooks;
  Rng rng{0};
  std::optional<QuantizedTokens> outbox;
  std::vector<IndexMessage> inbox;
};

struct LedgerEntry {
  std::uint32_t layer = 0;
  std::size_t device = 0;
  std::uint64_t bits_sent = 0;
  std::uint64_t bits_received = 0;
  std::uint64_t messages = 0;
  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

struct CommsLedger {
  std::vector<LedgerEntry> entries;

  std::uint64_t total_bits_sent() const;
  std::uint64_t total_bits_received() const;
  // Broadcast bits divided by the number of content tokens.
  double bits_per_token(std::size_t tokens) const;
  void write_csv(std::ostream& os) const;
  friend bool operator==(const CommsLedger&, const CommsLedger&) = default;
};

// Protocol failure during a simulated run; carries the ledger of every layer
// completed before the failing one.
class ProtocolAbort : public ProtocolError {
 public:
  ProtocolAbort(const std::string& what, std::uint32_t layer, CommsLedger ledger)
      : ProtocolError(what), layer_(layer), ledger_(std::move(ledger)) {}
  std::uint32_t layer() const { return layer_; }
  const CommsLedger& ledger() const { return ledger_; }

 private:
  std::uint32_t layer_;
  CommsLedger ledger_;
};

// Moves each device's outbox into every peer's inbox, sorted by sender, and
// appends one ledger entry per device. A device with an empty outbox stalls the
// exchange with a ProtocolError.
void allgather_indices(std::span<DeviceState> devices, std::uint32_t layer, CommsLedger& ledger);

enum class InferenceMode { classify, generate };

struct InferenceOptions {
  InferenceMode mode = InferenceMode::classify;
  ClassTokenMode class_tokens = ClassTokenMode::distributed;
  int worker_threads = 1;
  int steps = 0;  // generate only
  std::uint64_t seed = 0;
  // Fault injection: drop this (layer, sender) payload before delivery.
  std::optional<std::pair<std::uint32_t, std::size_t>> drop_payload;
};

struct InferenceResult {
  Tensor logits;            // classify: 1 x classes; generate: logits of the last prefill token
  std::vector<int> tokens;  // generate only
  CommsLedger ledger;
};

// Lockstep simulation: per layer every device quantises its attention inputs,
// indices are all-gathered, then each device runs its block locally.
InferenceResult run_inference(const Model& model, const SequenceInput& input, const ShardPlan& plan,
                              const InferenceOptions& opts = {});

// Throws ContractError unless every device holds bitwise-identical codebooks.
void check_codebook_consistency(std::span<const DeviceState> devices);

}  // namespace astra
