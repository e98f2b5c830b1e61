#include <doctest.h>

#include <sstream>

#include "astra/cluster_sim.hpp"
#include "astra/error.hpp"
#include "fixtures.hpp"

using namespace astra;

namespace {

std::vector<std::size_t> sizes(const ShardPlan& p) {
  std::vector<std::size_t> out;
  for (const auto& r : p.ranges) out.push_back(r.size());
  return out;
}

std::vector<DeviceState> devices_with_payloads(std::size_t n, std::uint32_t per_device, std::uint32_t k) {
  std::vector<DeviceState> devs(n);
  for (std::size_t d = 0; d < n; ++d) {
    devs[d].id = d;
    devs[d].outbox = QuantizedTokens{0, per_device, 1, k, std::vector<std::uint32_t>(per_device, 0)};
  }
  return devs;
}

}  // namespace

TEST_CASE("partition examples") {
  CHECK(sizes(partition_tokens(1024, 4)) == std::vector<std::size_t>{256, 256, 256, 256});
  CHECK(sizes(partition_tokens(5, 2)) == std::vector<std::size_t>{2, 3});
  CHECK(sizes(partition_tokens(7, 1)) == std::vector<std::size_t>{7});
  CHECK(sizes(partition_tokens(10, 4)) == std::vector<std::size_t>{2, 2, 3, 3});
  CHECK_THROWS_AS(partition_tokens(3, 4), ContractError);
  CHECK_THROWS_AS(partition_tokens(3, 0), ContractError);
  for (std::size_t t = 1; t < 40; ++t)
    for (std::size_t n = 1; n <= t; ++n) {
      const ShardPlan p = partition_tokens(t, n);
      p.validate();
      const auto s = sizes(p);
      CHECK(*std::max_element(s.begin(), s.end()) - *std::min_element(s.begin(), s.end()) <= 1);
    }
  ShardPlan gap{4, {{0, 1}, {2, 4}}};
  CHECK_THROWS_AS(gap.validate(), PlanError);
}

TEST_CASE("allgather accounting for the reference configuration") {
  auto devs = devices_with_payloads(4, 256, 1024);
  CommsLedger ledger;
  allgather_indices(devs, 0, ledger);
  REQUIRE(ledger.entries.size() == 4);
  for (const auto& e : ledger.entries) {
    CHECK(e.bits_sent == 2560);
    CHECK(e.bits_received == 7680);
    CHECK(e.messages == 3);
  }
  CHECK(ledger.total_bits_sent() * 3 == ledger.total_bits_received());
  for (const auto& d : devs) {
    REQUIRE(d.inbox.size() == 3);
    for (std::size_t i = 1; i < 3; ++i) CHECK(d.inbox[i - 1].sender < d.inbox[i].sender);
    for (const auto& m : d.inbox) CHECK(m.payload_bits == m.payload.payload_bits());
    CHECK_FALSE(d.outbox.has_value());
  }
  std::ostringstream csv;
  ledger.write_csv(csv);
  CHECK(csv.str().rfind("layer,device,bits_sent,bits_received,messages\n0,0,2560,7680,3\n", 0) == 0);
}

TEST_CASE("allgather conservation with uneven shards and single device") {
  std::vector<DeviceState> devs(3);
  for (std::size_t d = 0; d < 3; ++d) {
    devs[d].id = d;
    devs[d].outbox = QuantizedTokens{2, static_cast<std::uint32_t>(d + 1), 2, 16,
                                     std::vector<std::uint32_t>((d + 1) * 2, 1)};
  }
  CommsLedger ledger;
  allgather_indices(devs, 2, ledger);
  CHECK(ledger.total_bits_sent() * 2 == ledger.total_bits_received());
  CHECK(ledger.entries[0].bits_received == (2 + 3) * 8);

  auto one = devices_with_payloads(1, 5, 8);
  CommsLedger empty;
  allgather_indices(one, 0, empty);
  REQUIRE(empty.entries.size() == 1);
  CHECK(empty.entries[0] == LedgerEntry{0, 0, 0, 0, 0});
}

TEST_CASE("missing payload stalls the exchange") {
  auto devs = devices_with_payloads(3, 4, 8);
  devs[1].outbox.reset();
  CommsLedger ledger;
  CHECK_THROWS_AS(allgather_indices(devs, 0, ledger), ProtocolError);
  CHECK(ledger.entries.empty());
  auto wrong = devices_with_payloads(2, 4, 8);
  CHECK_THROWS_AS(allgather_indices(wrong, 1, ledger), ProtocolError);
}

TEST_CASE("codebook consistency check") {
  std::vector<DeviceState> devs(2);
  const Codebook cb = Codebook::from_centroids(0, 1, fixture::random_input(4, 3, 1));
  devs[0].codebooks = {cb};
  devs[1].codebooks = {cb};
  check_codebook_consistency(devs);
  devs[1].codebooks[0].centroid_mut(0, 2)[1] += 1e-3;
  CHECK_THROWS_AS(check_codebook_consistency(devs), ContractError);
}

TEST_CASE("simulated classifier equals the oracle under identity quantisation") {
  Model m = init_model(fixture::small_classifier(), 41);
  const Tensor x = fixture::random_input(12, 8, 42, Precision::f64);
  m.codebooks = fixture::identity_codebooks(m, x);
  const Tensor oracle = classify(m, x, partition_tokens(12, 1));
  for (std::size_t n : {1u, 2u, 3u, 4u}) {
    const InferenceResult r = run_inference(m, x, partition_tokens(12, n));
    CHECK(max_abs_diff(r.logits, oracle) < 1e-5);
    CHECK(r.ledger.entries.size() == 2 * n);
  }
}

TEST_CASE("simulated run equals the mask-based forward for real codebooks") {
  Model m = init_model(fixture::small_classifier(Precision::f32), 43);
  const Tensor x = fixture::random_input(12, 8, 44);
  for (std::uint32_t l = 0; l < 2; ++l)
    m.codebooks.push_back(kmeans_init(fixture::random_input(64, 16, 45 + l), 8, 2, 5, l, l));
  for (auto mode : {ClassTokenMode::single, ClassTokenMode::distributed}) {
    const ShardPlan plan = partition_tokens(12, 3);
    InferenceOptions opts;
    opts.class_tokens = mode;
    CHECK(max_abs_diff(run_inference(m, x, plan, opts).logits, classify(m, x, plan, mode)) < 1e-5);
  }
}

TEST_CASE("simulated generation matches the single-process path") {
  Model m = init_model(fixture::small_lm(), 51);
  const std::vector<int> prompt{2, 7, 1, 8, 2, 8, 1, 8};
  for (std::uint32_t l = 0; l < 2; ++l)
    m.codebooks.push_back(kmeans_init(fixture::random_input(64, 16, 60 + l, Precision::f64), 8, 1, 5, l, l));
  const ShardPlan plan = partition_tokens(prompt.size(), 4);
  InferenceOptions opts;
  opts.mode = InferenceMode::generate;
  opts.steps = 6;
  const InferenceResult r = run_inference(m, SequenceInput(prompt), plan, opts);
  CHECK(r.tokens == generate(m, prompt, 6, plan));

  m.codebooks = fixture::identity_codebooks(m, SequenceInput(prompt));
  const auto single = generate(m, prompt, 6, partition_tokens(prompt.size(), 1));
  CHECK(run_inference(m, SequenceInput(prompt), plan, opts).tokens == single);
}

TEST_CASE("thread count does not change outputs or ledgers") {
  Model m = init_model(fixture::small_classifier(Precision::f32), 61);
  const Tensor x = fixture::random_input(16, 8, 62);
  for (std::uint32_t l = 0; l < 2; ++l)
    m.codebooks.push_back(kmeans_init(fixture::random_input(64, 16, 63 + l), 16, 1, 5, l, l));
  const ShardPlan plan = partition_tokens(16, 4);
  InferenceOptions a, b;
  a.worker_threads = 1;
  b.worker_threads = 4;
  const auto ra = run_inference(m, x, plan, a), rb = run_inference(m, x, plan, b);
  CHECK(ra.logits == rb.logits);
  CHECK(ra.ledger == rb.ledger);
}

TEST_CASE("dropped payload aborts with a partial ledger") {
  Model m = init_model(fixture::small_classifier(Precision::f32), 71);
  const Tensor x = fixture::random_input(8, 8, 72);
  m.codebooks = fixture::identity_codebooks(m, x);
  InferenceOptions opts;
  opts.drop_payload = std::make_pair(1u, std::size_t{2});
  try {
    run_inference(m, x, partition_tokens(8, 4), opts);
    FAIL("expected a protocol abort");
  } catch (const ProtocolAbort& e) {
    CHECK(e.layer() == 1);
    CHECK(e.ledger().entries.size() == 4);
    for (const auto& entry : e.ledger().entries) CHECK(entry.layer == 0);
  }
  Model bare = init_model(fixture::small_classifier(Precision::f32), 71);
  CHECK_THROWS_AS(run_inference(bare, x, partition_tokens(8, 2)), LifecycleError);
}

TEST_CASE("twelve layers, 1024 tokens, K=1024 gives 120 bits per token") {
  ModelConfig cfg;
  cfg.layers = 12;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.mlp_expansion = 1;
  cfg.outputs = 2;
  cfg.input_dim = 4;
  cfg.max_tokens = 1024;
  cfg.codebook_size = 1024;
  Model m = init_model(cfg, 81);
  for (std::uint32_t l = 0; l < 12; ++l)
    m.codebooks.push_back(Codebook::from_centroids(l, 1, fixture::random_input(1024, 8, 90 + l)));
  InferenceOptions opts;
  opts.worker_threads = 4;
  const InferenceResult r = run_inference(m, fixture::random_input(1024, 4, 82), partition_tokens(1024, 4), opts);
  CHECK(r.ledger.bits_per_token(1024) == 120.0);
  CHECK(r.ledger.entries.size() == 48);
  for (const auto& e : r.ledger.entries) CHECK(e.bits_received == 7680);
}
