#include <doctest.h>

#include <cmath>
#include <numeric>

#include "astra/checkpoint.hpp"
#include "astra/error.hpp"
#include "astra/model.hpp"
#include "astra/ops.hpp"
#include "fixtures.hpp"
#include "reference_transformer.hpp"

using namespace astra;

namespace {

double max_diff(const Tensor& a, const std::vector<double>& b, std::size_t row = 0) {
  double m = 0;
  for (std::size_t c = 0; c < b.size(); ++c) m = std::max(m, std::abs(a(row, c) - b[c]));
  return m;
}

Tensor lm_logits(const Model& m, const std::vector<int>& ids, const ShardPlan& plan) {
  Tape tape(false);
  const auto w = bind_weights(tape, m.weights, false);
  return forward(tape, m, w, SequenceInput(ids), plan, ForwardOptions{}).logits.value();
}

}  // namespace

TEST_CASE("config validation and parameter count") {
  ModelConfig c = fixture::small_classifier();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = fixture::small_classifier();
  c.groups = 3;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = fixture::small_classifier();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);

  const Model m = init_model(fixture::small_classifier(), 1);
  std::size_t count = 0;
  m.weights.each([&](const Tensor& t) { count += t.size(); });
  CHECK(m.parameter_count() == count);
  CHECK(m.weights.blocks.size() == 2);
  CHECK(m.weights.embed.rows() == 8);
  CHECK(m.weights.head_w.cols() == 5);
}

TEST_CASE("initialisation is seed-deterministic") {
  const Model a = init_model(fixture::small_lm(), 3), b = init_model(fixture::small_lm(), 3),
              c = init_model(fixture::small_lm(), 4);
  CHECK(serialize_model(a) == serialize_model(b));
  CHECK(serialize_model(a) != serialize_model(c));
}

TEST_CASE("single-device classifier matches the loop reference") {
  const Model m = init_model(fixture::small_classifier(), 5);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Tensor x = fixture::random_input(9, 8, 100 + s, Precision::f64);
    const std::vector<double> expected = ref::classify_logits(m, x);
    for (auto mode : {ClassTokenMode::single, ClassTokenMode::distributed}) {
      const Tensor got = classify(m, x, partition_tokens(9, 1), mode);
      REQUIRE(got.rows() == 1);
      REQUIRE(got.cols() == 5);
      CHECK(max_diff(got, expected) < 1e-5);
    }
  }
}

TEST_CASE("identity quantisation: N=4 classifier equals N=1") {
  for (int groups : {1, 2}) {
    ModelConfig cfg = fixture::small_classifier();
    cfg.groups = groups;
    Model m = init_model(cfg, 6);
    const Tensor x = fixture::random_input(10, 8, 7, Precision::f64);
    m.codebooks = fixture::identity_codebooks(m, x);
    const Tensor one = classify(m, x, partition_tokens(10, 1));
    for (std::size_t n : {2u, 4u}) {
      const Tensor many = classify(m, x, partition_tokens(10, n), ClassTokenMode::distributed);
      CHECK(max_abs_diff(one, many) < 1e-5);
    }
    double z = 0;
    for (double v : one.values()) z += std::exp(v);
    double total = 0;
    for (double v : one.values()) total += std::exp(v) / z;
    CHECK(total == doctest::Approx(1.0));
  }
}

TEST_CASE("quantisation changes the output when codebooks are coarse") {
  Model m = init_model(fixture::small_classifier(), 8);
  const Tensor x = fixture::random_input(8, 8, 9, Precision::f64);
  m.codebooks.clear();
  for (std::uint32_t l = 0; l < 2; ++l) m.codebooks.push_back(Codebook::from_centroids(l, 1, Tensor(1, 16, Precision::f64)));
  CHECK(max_abs_diff(classify(m, x, partition_tokens(8, 1)), classify(m, x, partition_tokens(8, 4))) > 1e-4);
  Model bare = init_model(fixture::small_classifier(), 8);
  CHECK_THROWS_AS(classify(bare, x, partition_tokens(8, 2)), LifecycleError);
}

TEST_CASE("class-token aggregation") {
  const Tensor r(1, 2, {1, 1});
  CHECK(aggregate_class_tokens(std::vector<Tensor>{r}) == r);
  const Tensor a(1, 2, {1, 1}), b(1, 2, {3, 3}), c(1, 2, {-2, 5});
  const Tensor ab = aggregate_class_tokens(std::vector<Tensor>{a, b});
  CHECK(ab(0, 0) == 2.0);
  CHECK(ab(0, 1) == 2.0);
  CHECK(aggregate_class_tokens(std::vector<Tensor>{a, b, c}) ==
        aggregate_class_tokens(std::vector<Tensor>{c, a, b}));
  CHECK_THROWS_AS(aggregate_class_tokens(std::vector<Tensor>{}), ContractError);
}

TEST_CASE("block mask layout with distributed class tokens") {
  const ShardPlan plan = partition_tokens(4, 2);
  const BoolMatrix m = block_mask(plan, false, true, ClassTokenMode::distributed);
  REQUIRE(m.rows() == 6);
  REQUIRE(m.cols() == 10);
  auto on = [&](std::size_t r) {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < m.cols(); ++c)
      if (m(r, c)) out.push_back(c);
    return out;
  };
  CHECK(on(0) == std::vector<std::size_t>{0, 2, 3, 8, 9});
  CHECK(on(1) == std::vector<std::size_t>{1, 4, 5, 6, 7});
  CHECK(on(2) == std::vector<std::size_t>{0, 2, 3, 8, 9});
  CHECK(on(5) == std::vector<std::size_t>{1, 4, 5, 6, 7});
  // Replicas never see each other.
  CHECK_FALSE(m(0, 1));
  const BoolMatrix s = block_mask(plan, false, true, ClassTokenMode::single);
  CHECK(s.rows() == 5);
  CHECK(s(1, 0));
  CHECK_FALSE(s(3, 0));
}

TEST_CASE("zero MLP with identity projections is attention plus residual") {
  const std::size_t d = 4, t = 3;
  Tape tape;
  auto leaf = [&](Tensor x) { return tape.leaf(std::move(x)); };
  auto zeros = [&](std::size_t r, std::size_t c) { return leaf(Tensor(r, c, Precision::f64)); };
  auto ones = [&](std::size_t c) {
    Tensor g(1, c, Precision::f64);
    for (double& v : g.values()) v = 1.0;
    return leaf(g);
  };
  auto eye = [&] { return leaf(Tensor::identity(d, Precision::f64)); };
  BlockWeights<Var> w{ones(d),  zeros(1, d),      eye(),           eye(),      eye(), eye(),
                      ones(d),  zeros(1, d),      zeros(d, 4 * d), zeros(1, 4 * d),
                      zeros(4 * d, d), zeros(1, d)};
  const Tensor rows = fixture::random_input(t, d, 3, Precision::f64);
  Var x = leaf(rows);
  Var h = layer_norm(x, w.ln1_gain, w.ln1_bias);
  BoolMatrix mask(t, 2 * t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j) mask.set(i, j, true);
  Var out = block_forward_rows(w, x, h, h, mask, 2);
  Var expected = add(x, standard_attention(h, h, h, false, 2));
  CHECK(max_abs_diff(out.value(), expected.value()) < 1e-12);
}

TEST_CASE("device block with N=1 equals a standard block") {
  Model m = init_model(fixture::small_classifier(), 11);
  const Tensor tokens = fixture::random_input(5, 16, 12, Precision::f64);
  const Tensor cls = fixture::random_input(1, 16, 13, Precision::f64);
  const ShardPlan plan = partition_tokens(5, 1);
  const std::vector<std::optional<QuantizedTokens>> payloads(1);
  const Codebook unused = Codebook::from_centroids(0, 1, Tensor(1, 16, Precision::f64));
  const DeviceBlockOutput out =
      block_forward_device(m, 0, unused, plan, 0, tokens, cls, payloads, ClassTokenMode::distributed);
  ref::Rows rows;
  rows.push_back(std::vector<double>(cls.values().begin(), cls.values().end()));
  for (std::size_t r = 0; r < 5; ++r) rows.emplace_back(tokens.row(r).begin(), tokens.row(r).end());
  const ref::Rows expected = ref::block_full(m.weights.blocks[0], rows, 2, false);
  REQUIRE(out.class_replica.has_value());
  CHECK(max_diff(*out.class_replica, expected[0]) < 1e-5);
  for (std::size_t r = 0; r < 5; ++r) CHECK(max_diff(out.tokens, expected[r + 1], r) < 1e-5);
}

TEST_CASE("device block rejects missing payloads") {
  Model m = init_model(fixture::small_classifier(), 11);
  const ShardPlan plan = partition_tokens(4, 2);
  const Codebook cb = Codebook::from_centroids(0, 1, fixture::random_input(4, 16, 1, Precision::f64));
  const std::vector<std::optional<QuantizedTokens>> payloads(2);
  const Tensor tokens = fixture::random_input(2, 16, 2, Precision::f64);
  CHECK_THROWS_AS(block_forward_device(m, 0, cb, plan, 0, tokens, tokens.rows_slice(0, 1), payloads,
                                       ClassTokenMode::distributed),
                  ProtocolError);
}

TEST_CASE("language model logits and generation match the loop reference") {
  const Model m = init_model(fixture::small_lm(), 21);
  const std::vector<int> prompt{1, 4, 4, 9, 0, 3, 7};
  const Tensor logits = lm_logits(m, prompt, partition_tokens(prompt.size(), 1));
  const ref::Rows expected = ref::lm_logits(m, prompt);
  for (std::size_t r = 0; r < prompt.size(); ++r) CHECK(max_diff(logits, expected[r], r) < 1e-5);

  const auto ours = generate(m, prompt, 10, partition_tokens(prompt.size(), 1));
  CHECK(ours == ref::greedy_generate(m, prompt, 10));
  CHECK(generate(m, prompt, 10, partition_tokens(prompt.size(), 1)) == ours);
  CHECK(generate(m, prompt, 0, partition_tokens(prompt.size(), 1)).empty());
  CHECK_THROWS_AS(generate(m, prompt, -1, partition_tokens(prompt.size(), 1)), ContractError);
  CHECK_THROWS_AS(generate(m, prompt, 30, partition_tokens(prompt.size(), 1)), ContractError);
}

TEST_CASE("identity quantisation: N=4 generation equals N=1") {
  Model m = init_model(fixture::small_lm(), 22);
  const std::vector<int> prompt{3, 1, 4, 1, 5, 9, 2, 6, 5};
  m.codebooks = fixture::identity_codebooks(m, SequenceInput(prompt));
  const auto one = generate(m, prompt, 12, partition_tokens(prompt.size(), 1));
  for (std::size_t n : {2u, 4u}) {
    CHECK(generate(m, prompt, 12, partition_tokens(prompt.size(), n)) == one);
    CHECK(max_abs_diff(lm_logits(m, prompt, partition_tokens(prompt.size(), n)),
                       lm_logits(m, prompt, partition_tokens(prompt.size(), 1))) < 1e-5);
  }
  CHECK_THROWS_AS(generate(m, std::vector<int>{1, 2, 3}, 2, partition_tokens(3, 4)), ContractError);
}

TEST_CASE("argmax ties resolve to the lowest id") {
  CHECK(argmax_token(Tensor(1, 4, {0.5, 2.0, 2.0, 1.0})) == 1);
  CHECK(argmax_token(Tensor(2, 3, {9, 9, 9, 0, 0, 0})) == 0);
}

TEST_CASE("sequences longer than max_tokens are rejected") {
  const Model m = init_model(fixture::small_classifier(), 1);
  CHECK_THROWS_AS(classify(m, fixture::random_input(17, 8, 1), partition_tokens(17, 1)), ContractError);
  CHECK_THROWS_AS(classify(m, fixture::random_input(4, 7, 1), partition_tokens(4, 1)), DimensionError);
}

TEST_CASE("checkpoint round trip") {
  Model m = init_model(fixture::small_classifier(Precision::f32), 31);
  const Tensor x = fixture::random_input(8, 8, 2);
  m.codebooks = fixture::identity_codebooks(m, x);
  m.residuals.push_back(ResidualStats::from_moments(0, std::vector<double>(16, 0.1),
                                                    std::vector<double>(16, 0.2), CovarianceMode::isotropic, 9));
  const auto bytes = serialize_model(m);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "ASTM");
  const Model back = deserialize_model(bytes);
  CHECK(back.config == m.config);
  CHECK(serialize_model(back) == bytes);
  CHECK(back.codebooks.size() == 2);
  CHECK(back.residuals.size() == 1);
  CHECK(back.residuals[0].sample_count() == 9);
  CHECK(classify(back, x, partition_tokens(8, 4)) == classify(m, x, partition_tokens(8, 4)));

  auto bad = bytes;
  bad[0] = 'B';
  CHECK_THROWS_AS(deserialize_model(bad), FormatError);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_model(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(deserialize_model(bad), FormatError);
  bad = bytes;
  bad[4] = 99;
  CHECK_THROWS_AS(deserialize_model(bad), FormatError);
}
