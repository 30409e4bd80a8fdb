#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "cfair.hpp"
#include "oracle.hpp"

using namespace cfair;

namespace {

ModelConfig tiny(std::uint64_t seed, std::size_t blocks = 2) {
  return {.vocab_size = 23, .d_model = 12, .n_heads = 3, .n_blocks = blocks, .max_seq_len = 9, .seed = seed};
}

std::vector<int> random_tokens(SplitMix64& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(vocab));
  return t;
}

// Larger init so logits are far from uniform and differences show up.
template <typename T>
TransformerLM<T> random_model(const ModelConfig& c) {
  auto m = init_model<T>(c, 0.4);
  SplitMix64 rng(c.seed + 99);
  for (auto& [name, p] : m.params)
    if (name.ends_with(".b") || name.ends_with(".g"))
      for (auto& x : p.data) x += static_cast<T>(0.3 * rng.normal());
  return m;
}

}  // namespace

TEST(Config, Validation) {
  ModelConfig c = tiny(1);
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny(1);
  c.n_blocks = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, TextRoundTrip) {
  ModelConfig c{.vocab_size = 257, .d_model = 48, .n_heads = 6, .n_blocks = 5, .d_ff = 100, .max_seq_len = 31,
                .seed = 0xFFFFFFFFFFFFFFFFULL};
  EXPECT_EQ(config_from_text(to_text(c)), c);
  EXPECT_THROW(config_from_text("d_model=abc\n"), SchemaError);
}

TEST(Forward, MatchesStraightLineOracle) {
  // 1-block model on a 2-token input, then a deeper one on a longer input.
  for (const auto& [cfg, len] : {std::pair{tiny(5, 1), std::size_t{2}}, std::pair{tiny(6, 3), std::size_t{9}}}) {
    const auto m = random_model<double>(cfg);
    SplitMix64 rng(cfg.seed);
    const auto toks = random_tokens(rng, len, cfg.vocab_size);
    const auto got = logits(m, std::span<const int>(toks));
    const auto ref = oracle::run(m, toks);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) EXPECT_NEAR(got.at(i, v), ref.logits[i][v], 1e-10);
  }
}

TEST(Forward, RejectsBadInput) {
  const auto m = init_model<float>(tiny(1));
  const std::vector<int> too_long(10, 1), bad_id{1, 23};
  EXPECT_THROW(logits(m, std::span<const int>(too_long)), std::invalid_argument);
  EXPECT_THROW(logits(m, std::span<const int>(bad_id)), std::out_of_range);
}

TEST(Forward, CausalPrefixesAreBitwiseStable) {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_model<float>(tiny(100 + trial));
    const auto toks = random_tokens(rng, 9, 23);
    const auto full = logits(m, std::span<const int>(toks));
    for (std::size_t n = 1; n < 9; ++n) {
      const auto pre = logits(m, std::span<const int>(toks.data(), n));
      for (std::size_t i = 0; i < n * 23; ++i) ASSERT_EQ(pre[i], full[i]) << "prefix " << n;
    }
  }
}

TEST(Forward, BatchedSequencesMatchSingleSequences) {
  SplitMix64 rng(8);
  const auto m = random_model<float>(tiny(3));
  const auto toks = random_tokens(rng, 3 * 7, 23);
  GradTape<float> tape;
  const auto batched = forward(tape, m, std::span<const int>(toks), 3).logits.value();
  for (std::size_t s = 0; s < 3; ++s) {
    const auto one = logits(m, std::span<const int>(toks.data() + s * 7, 7));
    for (std::size_t i = 0; i < one.size(); ++i) ASSERT_EQ(one[i], batched[s * 7 * 23 + i]);
  }
}

TEST(Forward, ZeroGateEqualsZeroedHeadOutput) {
  SplitMix64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto gated = random_model<float>(tiny(200 + trial));
    auto zeroed = gated;
    const std::size_t b = rng.below(2), h = rng.below(3), hd = gated.config.head_dim(), d = gated.config.d_model;
    gated.gates[b * 3 + h] = 0.0f;
    auto& w = zeroed.param(block_name(b, "attn.proj.w"));
    for (std::size_t r = h * hd; r < (h + 1) * hd; ++r)
      for (std::size_t j = 0; j < d; ++j) w[r * d + j] = 0.0f;
    const auto toks = random_tokens(rng, 9, 23);
    EXPECT_EQ(logits(gated, std::span<const int>(toks)), logits(zeroed, std::span<const int>(toks)));
  }
}

TEST(Forward, TiedOutputHead) {
  // The output head follows the token embedding: editing wte moves the logits.
  auto m = random_model<double>(tiny(10, 1));
  const std::vector<int> toks{1, 2, 3};
  const auto before = logits(m, std::span<const int>(toks));
  m.param("wte")[5 * 12 + 0] += 1.0;
  const auto after = logits(m, std::span<const int>(toks));
  const auto ref = oracle::run(m, toks);
  for (std::size_t v = 0; v < 23; ++v) EXPECT_NEAR(after.at(2, v), ref.logits[2][v], 1e-10);
  EXPECT_NE(before.at(2, 5), after.at(2, 5));
  EXPECT_EQ(m.params.count("lm_head.w"), 0u);
}

TEST(ParamCount, Width768Block) {
  ModelConfig c{.vocab_size = 50257, .d_model = 768, .n_heads = 12, .n_blocks = 12, .max_seq_len = 1024};
  const auto pc = param_count(c);
  EXPECT_EQ(pc.per_block, 7087872u);
  EXPECT_LE(std::abs(static_cast<double>(pc.per_block) - 7e6) / 7e6, 0.02);
  EXPECT_EQ(pc.total, pc.embedding + pc.positional + pc.final_norm + 12 * pc.per_block);
}

TEST(ParamCount, UnitWidth) {
  ModelConfig c{.vocab_size = 3, .d_model = 1, .n_heads = 1, .n_blocks = 1, .max_seq_len = 2};
  EXPECT_EQ(param_count(c).per_block, 25u);
}

TEST(ParamCount, MatchesEnumerationOnRandomConfigs) {
  SplitMix64 rng(11);
  for (int i = 0; i < 20; ++i) {
    const std::size_t heads = 1 + rng.below(4);
    ModelConfig c{.vocab_size = 2 + rng.below(40), .d_model = heads * (1 + rng.below(5)), .n_heads = heads,
                  .n_blocks = 1 + rng.below(4), .d_ff = rng.below(2) ? 0 : 1 + rng.below(30), .max_seq_len = 1 + rng.below(20),
                  .seed = rng.next()};
    const auto m = init_model<float>(c);
    std::size_t n = 0, per_block0 = 0;
    for (const auto& [name, t] : m.params) {
      n += t.size();
      if (name.starts_with("h0.")) per_block0 += t.size();
    }
    EXPECT_EQ(param_count(c).total, n);
    EXPECT_EQ(param_count(c).per_block, per_block0);
    EXPECT_EQ(stored_param_count(m), n);
  }
}

TEST(FlopCount, MatchesOracleCounter) {
  SplitMix64 rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = random_model<double>(tiny(300 + trial));
    const std::size_t S = 1 + rng.below(9);
    const auto toks = random_tokens(rng, S, 23);
    const auto ref = oracle::run(m, toks);
    const auto f = flop_count(m, S);
    EXPECT_EQ(f.attention, ref.macs_attention);
    EXPECT_EQ(f.mlp, ref.macs_mlp);
    EXPECT_EQ(f.lm_head, ref.macs_head);
    // Compacted models too: the oracle walks only the heads that remain.
    m.gates[1] = 0;
    const auto cm = compact(m);
    const auto ref2 = oracle::run(cm, toks);
    EXPECT_EQ(flop_count(cm, S).attention, ref2.macs_attention);
  }
}

TEST(FlopCount, AttentionLinearInHeads) {
  ModelConfig c{.vocab_size = 50, .d_model = 48, .n_heads = 4, .n_blocks = 3, .max_seq_len = 32};
  const std::vector<std::size_t> all{4, 4, 4}, half{2, 2, 2};
  const auto f_all = flop_count(c, all, 32), f_half = flop_count(c, half, 32);
  EXPECT_EQ(f_all.attention, 2 * f_half.attention);
  EXPECT_EQ(f_all.mlp, f_half.mlp);
  EXPECT_EQ(f_all.lm_head, f_half.lm_head);
  const auto m = init_model<float>(c);
  EXPECT_EQ(flop_count(m, 32).total(), f_all.total());
}

TEST(Truncation, SourceIndices) {
  EXPECT_EQ(truncation_sources(12, 6), (std::vector<std::size_t>{0, 2, 4, 6, 8, 10}));
  EXPECT_EQ(truncation_sources(12, 4), (std::vector<std::size_t>{0, 3, 6, 9}));
  EXPECT_EQ(truncation_sources(6, 6), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_THROW(truncation_sources(4, 5), std::invalid_argument);
}

TEST(Truncation, CopiesBlocksAndShared) {
  auto t = random_model<float>(tiny(13, 4));
  t.gates[2] = 0;  // truncation resets gates to 1
  const auto s = truncate_teacher(t, 2);
  EXPECT_EQ(s.config.n_blocks, 2u);
  EXPECT_EQ(s.param("wte"), t.param("wte"));
  EXPECT_EQ(s.param("wpe"), t.param("wpe"));
  EXPECT_EQ(s.param("lnf.g"), t.param("lnf.g"));
  EXPECT_EQ(s.param("h1.mlp.fc.w"), t.param("h2.mlp.fc.w"));
  EXPECT_EQ(s.param("h0.attn.qkv.w"), t.param("h0.attn.qkv.w"));
  for (float g : s.gates.data) EXPECT_EQ(g, 1.0f);
  const auto same = truncate_teacher(random_model<float>(tiny(14, 3)), 3);
  EXPECT_EQ(same.params, random_model<float>(tiny(14, 3)).params);
  EXPECT_THROW(truncate_teacher(t, 5), std::invalid_argument);
}

TEST(Init, SeededAndDistinct) {
  const auto a = init_model<float>(tiny(1)), b = init_model<float>(tiny(1)), c = init_model<float>(tiny(2));
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, c.params);
  EXPECT_NE(a.param("h0.attn.qkv.w"), a.param("h1.attn.qkv.w"));
}

TEST(Training, LossDropsOnToyCorpus) {
  ModelConfig c{.vocab_size = 257, .d_model = 32, .n_heads = 2, .n_blocks = 2, .max_seq_len = 32, .seed = 5};
  auto m = init_model<float>(c);
  const auto corpus = synth::corpus_tokens(10000, 1);
  TrainPlan plan;
  plan.epochs = 100;
  plan.batch_size = 8;
  plan.max_steps = 200;
  plan.seed = 3;
  const auto run = train_lm(m, std::span<const int>(corpus), {}, plan);
  ASSERT_EQ(run.steps, 200u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) first += run.loss_trace[i], last += run.loss_trace[run.steps - 1 - i];
  EXPECT_LE(last, 0.7 * first) << "first " << first / 5 << " last " << last / 5;
}

TEST(Training, DeterministicUnderSeed) {
  ModelConfig c{.vocab_size = 257, .d_model = 16, .n_heads = 2, .n_blocks = 1, .max_seq_len = 16, .seed = 5};
  const auto corpus = synth::corpus_tokens(3000, 2);
  TrainPlan plan;
  plan.max_steps = 10;
  plan.seed = 9;
  auto a = init_model<float>(c), b = init_model<float>(c);
  const auto ra = train_lm(a, std::span<const int>(corpus), {}, plan);
  const auto rb = train_lm(b, std::span<const int>(corpus), {}, plan);
  EXPECT_EQ(ra.loss_trace, rb.loss_trace);
  EXPECT_EQ(a.params, b.params);
}
