#include <set>

#include <gtest/gtest.h>

#include "cfair.hpp"

using namespace cfair;

namespace {

std::vector<TokenBatch> random_batches(SplitMix64& rng, std::size_t vocab, std::size_t seq, std::size_t n_seq, std::size_t count) {
  std::vector<int> corpus(count * n_seq * seq + 1);
  for (auto& t : corpus) t = static_cast<int>(rng.below(vocab));
  return sequential_batches(std::span<const int>(corpus), seq, n_seq);
}

ModelConfig grid(std::size_t blocks, std::size_t heads, std::uint64_t seed) {
  return {.vocab_size = 13, .d_model = heads * 2, .n_heads = heads, .n_blocks = blocks, .max_seq_len = 6, .seed = seed};
}

double loss_at(const TransformerLM<double>& m, const TokenBatch& b) {
  GradTape<double> tape;
  auto fp = forward(tape, m, b.inputs, b.n_seq);
  return cross_entropy(fp.logits, std::span<const int>(b.targets)).value()[0];
}

}  // namespace

TEST(Schedule, CumulativeTargets) {
  EXPECT_EQ(cumulative_mask_target(144, 0.05, 3), 22u);
  EXPECT_EQ(144 - cumulative_mask_target(144, 0.05, 3), 122u);
  EXPECT_EQ(cumulative_mask_target(144, 0.05, 1), 7u);
  EXPECT_EQ(cumulative_mask_target(144, 0.05, 2), 14u);
  EXPECT_EQ(cumulative_mask_target(12, 0.05, 3), 2u);
  EXPECT_EQ(cumulative_mask_target(10, 0.05, 1), 1u);  // 0.5 rounds away from zero
  EXPECT_THROW(cumulative_mask_target(12, 0.05, 0), ScheduleError);
}

TEST(Schedule, Validation) {
  PruneSchedule s;
  EXPECT_NO_THROW(s.validate());
  s.iterations = 0;
  EXPECT_THROW(s.validate(), ScheduleError);
  s = {};
  s.rate_per_iteration = 1.0;
  EXPECT_THROW(s.validate(), ScheduleError);
  s.rate_per_iteration = 0.0;
  EXPECT_THROW(s.validate(), ScheduleError);
  const auto m = init_model<float>(grid(1, 2, 1));
  SplitMix64 rng(1);
  const auto b = random_batches(rng, 13, 6, 2, 1);
  s = {};
  s.iterations = 0;
  EXPECT_THROW(iterative_prune(m, s, std::span<const TokenBatch>(b)), ScheduleError);
}

TEST(Importance, ZeroValueHeadScoresZero) {
  auto m = init_model<double>(grid(2, 3, 2), 0.3);
  const std::size_t d = 6, hd = 2, A = 6, h = 1;
  auto& w = m.param("h1.attn.qkv.w");
  auto& bias = m.param("h1.attn.qkv.b");
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < hd; ++c) w[r * 3 * A + 2 * A + h * hd + c] = 0;
  for (std::size_t c = 0; c < hd; ++c) bias[2 * A + h * hd + c] = 0;
  SplitMix64 rng(3);
  const auto b = random_batches(rng, 13, 6, 3, 2);
  const auto s = head_importance(m, std::span<const TokenBatch>(b));
  EXPECT_LE(s[1 * 3 + h], 1e-8);
  EXPECT_GT(s[0], 1e-6);
  EXPECT_THROW(head_importance(m, std::span<const TokenBatch>()), std::invalid_argument);
}

TEST(Importance, DuplicatedBatchGivesSameScores) {
  const auto m = init_model<double>(grid(2, 2, 4), 0.3);
  SplitMix64 rng(5);
  const auto b = random_batches(rng, 13, 6, 2, 1);
  const std::vector<TokenBatch> twice{b[0], b[0]};
  const auto one = head_importance(m, std::span<const TokenBatch>(b)), two = head_importance(m, std::span<const TokenBatch>(twice));
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(one[i], two[i], 1e-15);
}

TEST(Importance, MatchesOneSidedFiniteDifference) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = init_model<double>(grid(1, 2, 10 + trial), 0.4);
    const auto b = random_batches(rng, 13, 6, 2, 1);
    const auto s = head_importance(m, std::span<const TokenBatch>(b));
    const double eps = 1e-7, base = loss_at(m, b[0]);
    for (std::size_t h = 0; h < 2; ++h) {
      auto p = m;
      p.gates[h] = 1 - eps;
      const double fd = std::abs((base - loss_at(p, b[0])) / eps);
      EXPECT_LE(std::abs(s[h] - fd) / fd, 1e-3) << "head " << h;
    }
  }
}

TEST(Importance, NearSilentHeadMaskedFirst) {
  // A head whose output projection is tiny noise carries almost no signal.
  const auto corpus = synth::corpus_tokens(6000, 3);
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig c{.vocab_size = 257, .d_model = 16, .n_heads = 4, .n_blocks = 2, .max_seq_len = 16, .seed = seed};
    auto m = init_model<float>(c);
    TrainPlan tp;
    tp.max_steps = 40;
    tp.seed = seed;
    train_lm(m, std::span<const int>(corpus), {}, tp);
    SplitMix64 rng(seed);
    const std::size_t b = rng.below(2), h = rng.below(4);
    auto& w = m.param(block_name(b, "attn.proj.w"));
    for (std::size_t r = h * 4; r < h * 4 + 4; ++r)
      for (std::size_t j = 0; j < 16; ++j) w[r * 16 + j] = static_cast<float>(1e-4 * rng.normal());
    const auto batches = sampled_batches(std::span<const int>(corpus), 16, 8, 16, seed);
    auto table = make_importance_table(m);
    PruneSchedule s;
    s.rate_per_iteration = 0.1;
    s.iterations = 1;
    prune_iteration(m, table, s, std::span<const TokenBatch>(batches), 1);
    ASSERT_FALSE(table.iteration_log.empty());
    hits += table.iteration_log[0].block == b && table.iteration_log[0].head == h;
  }
  EXPECT_GE(hits, 9u);
}

TEST(PruneIteration, ExactTargetsAndMonotoneMasking) {
  const auto m = init_model<float>(grid(12, 12, 7), 0.1);
  SplitMix64 rng(8);
  const auto b = random_batches(rng, 13, 6, 2, 1);
  auto work = m;
  auto table = make_importance_table(work);
  PruneSchedule s;
  std::set<std::size_t> prev;
  for (std::size_t k = 1; k <= 3; ++k) {
    prune_iteration(work, table, s, std::span<const TokenBatch>(b), k);
    EXPECT_EQ(table.masked_count(), cumulative_mask_target(144, 0.05, k));
    std::set<std::size_t> now;
    for (std::size_t i = 0; i < 144; ++i)
      if (table.masked[i]) {
        now.insert(i);
        EXPECT_EQ(work.gates[i], 0.0f);
      }
    EXPECT_TRUE(std::includes(now.begin(), now.end(), prev.begin(), prev.end()));
    prev = now;
  }
  EXPECT_EQ(work.heads_retained(), 122u);
  EXPECT_EQ(table.iteration_log.size(), 22u);
  EXPECT_THROW(prune_iteration(work, table, s, std::span<const TokenBatch>(b), 4), ScheduleError);
}

TEST(PruneIteration, DefaultScheduleRetains122Of144) {
  const auto m = init_model<float>(grid(12, 12, 9), 0.1);
  SplitMix64 rng(10);
  const auto b = random_batches(rng, 13, 6, 2, 2);
  const auto r = iterative_prune(m, PruneSchedule{}, std::span<const TokenBatch>(b));
  EXPECT_EQ(r.model.heads_retained(), 122u);
  EXPECT_EQ(r.table.masked_count(), 22u);
  EXPECT_EQ(r.ppl_after_iteration.size(), 3u);
  EXPECT_EQ(m.heads_retained(), 144u);
}

TEST(PruneIteration, TiesGoToLowerIndex) {
  // All-zero value weights make every head score exactly 0.
  auto m = init_model<double>(grid(3, 4, 11), 0.3);
  for (std::size_t b = 0; b < 3; ++b) {
    auto& w = m.param(block_name(b, "attn.qkv.w"));
    auto& bias = m.param(block_name(b, "attn.qkv.b"));
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 16; c < 24; ++c) w[r * 24 + c] = 0;
    for (std::size_t c = 16; c < 24; ++c) bias[c] = 0;
  }
  SplitMix64 rng(12);
  const auto b = random_batches(rng, 13, 6, 2, 1);
  auto table = make_importance_table(m);
  PruneSchedule s;
  s.rate_per_iteration = 0.25;
  s.iterations = 1;
  prune_iteration(m, table, s, std::span<const TokenBatch>(b), 1);
  ASSERT_EQ(table.iteration_log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(table.iteration_log[i].block, 0u);
    EXPECT_EQ(table.iteration_log[i].head, i);
  }
}

TEST(PruneIteration, GuardKeepsOneHeadPerBlock) {
  const auto m = init_model<float>(grid(2, 2, 13), 0.3);
  SplitMix64 rng(14);
  const auto b = random_batches(rng, 13, 6, 2, 1);
  PruneSchedule s;
  s.rate_per_iteration = 0.5;
  s.iterations = 1;
  const auto r = iterative_prune(m, s, std::span<const TokenBatch>(b));
  EXPECT_EQ(r.model.heads_retained(), 2u);
  for (std::size_t blk = 0; blk < 2; ++blk) EXPECT_TRUE(r.model.gate(blk, 0) != 0 || r.model.gate(blk, 1) != 0);
  // Asking for 3 of 4 heads cannot be met without emptying a block.
  s.rate_per_iteration = 0.75;
  EXPECT_THROW(iterative_prune(m, s, std::span<const TokenBatch>(b)), ScheduleError);
  auto table = make_importance_table(m);
  auto work = m;
  s.rate_per_iteration = 0.5;
  prune_iteration(work, table, s, std::span<const TokenBatch>(b), 1);
  ASSERT_EQ(table.guard_skips.size(), 1u);
  EXPECT_LE(table.guard_skips[0], 1u);
}

TEST(IterativePrune, LossThresholdStopsEarly) {
  const auto m = init_model<float>(grid(4, 4, 15), 0.3);
  SplitMix64 rng(16);
  const auto b = random_batches(rng, 13, 6, 2, 2);
  PruneSchedule s;
  s.rate_per_iteration = 0.1;
  s.iterations = 5;
  s.loss_threshold = 0.0;
  const auto r = iterative_prune(m, s, std::span<const TokenBatch>(b));
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.loss_after_iteration.size(), 1u);
  EXPECT_NEAR(r.ppl_after_iteration[0], std::exp(r.loss_after_iteration[0]), 1e-9);
}

TEST(IterativePrune, SubsetSizeLimitsWindows) {
  const auto m = init_model<float>(grid(2, 4, 17), 0.3);
  SplitMix64 rng(18);
  const auto b = random_batches(rng, 13, 6, 2, 4);
  PruneSchedule s;
  s.rate_per_iteration = 0.125;
  s.iterations = 1;
  s.validation_subset_size = 2;
  const auto small = iterative_prune(m, s, std::span<const TokenBatch>(b));
  const auto first = iterative_prune(m, PruneSchedule{.rate_per_iteration = 0.125, .iterations = 1},
                                     std::span<const TokenBatch>(b.data(), 1));
  EXPECT_EQ(small.table.scores, first.table.scores);
  EXPECT_EQ(small.loss_after_iteration, first.loss_after_iteration);
}

TEST(Compact, BitwiseEquivalentAndFlopRatio) {
  SplitMix64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c{.vocab_size = 29, .d_model = 12, .n_heads = 4, .n_blocks = 3, .max_seq_len = 10, .seed = rng.next()};
    auto m = init_model<float>(c, 0.3);
    std::size_t kept = 12;
    for (std::size_t i = 0; i < 12; ++i)
      if (rng.uniform() < 0.4 && m.gates[i] != 0) {
        const std::size_t blk = i / 4;
        std::size_t alive = 0;
        for (std::size_t h = 0; h < 4; ++h) alive += m.gates[blk * 4 + h] != 0;
        if (alive > 1) m.gates[i] = 0, --kept;
      }
    const auto cm = compact(m);
    EXPECT_EQ(cm.heads_retained(), kept);
    std::vector<int> toks(10);
    for (auto& t : toks) t = static_cast<int>(rng.below(29));
    EXPECT_EQ(logits(m, std::span<const int>(toks)), logits(cm, std::span<const int>(toks)));
    const auto fm = flop_count(init_model<float>(c), 10), fc = flop_count(cm, 10);
    EXPECT_EQ(fc.attention * 12, fm.attention * kept);
    EXPECT_EQ(compact(cm).params, cm.params);
    if (kept < 12) { EXPECT_LT(fc.total(), fm.total()); }
  }
}

TEST(Compact, NoMaskIsIdentity) {
  const auto m = init_model<float>(grid(2, 3, 20));
  const auto cm = compact(m);
  EXPECT_EQ(cm.params, m.params);
  EXPECT_FALSE(cm.compacted());
  EXPECT_EQ(flop_count(cm, 6).total(), flop_count(m, 6).total());
}

TEST(Compact, TwelveByTwelveGridFlopRatio) {
  ModelConfig c = grid(12, 12, 21);
  std::vector<std::size_t> full(12, 12), pruned(12, 12);
  for (std::size_t i = 0; i < 22; ++i) --pruned[i % 12];
  const auto a = flop_count(c, full, 6).attention, b = flop_count(c, pruned, 6).attention;
  EXPECT_EQ(b * 144, a * 122);
}
