#pragma once

// Attention-head pruning: gate-gradient importance, globally sorted masking
// against cumulative targets, and structural removal of masked heads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "cfair/corpus.hpp"
#include "cfair/errors.hpp"
#include "cfair/inference.hpp"
#include "cfair/losses.hpp"
#include "cfair/model.hpp"

namespace cfair {

struct PruneSchedule {
  double rate_per_iteration = 0.05;
  std::size_t iterations = 3;
  std::size_t validation_subset_size = 0;  // windows used for importance; 0 = all supplied
  std::optional<double> loss_threshold;

  void validate() const {
    if (!(rate_per_iteration > 0.0 && rate_per_iteration < 1.0))
      throw ScheduleError("prune schedule: rate must be in (0, 1), got " + std::to_string(rate_per_iteration));
    if (iterations < 1) throw ScheduleError("prune schedule: iterations must be >= 1");
  }
};

struct MaskedHead {
  std::size_t iteration = 0;
  std::size_t block = 0;
  std::size_t head = 0;
  double score = 0.0;
};

struct HeadImportanceTable {
  std::size_t n_blocks = 0;
  std::size_t n_heads = 0;
  std::vector<double> scores;   // [n_blocks * n_heads]; masked heads keep their last score
  std::vector<char> masked;     // same layout
  std::vector<MaskedHead> iteration_log;
  std::vector<std::size_t> guard_skips;  // per iteration: heads passed over to keep a block alive

  HeadImportanceTable() = default;
  HeadImportanceTable(std::size_t blocks, std::size_t heads)
      : n_blocks(blocks), n_heads(heads), scores(blocks * heads, 0.0), masked(blocks * heads, 0) {}

  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), 1)); }
  double score(std::size_t b, std::size_t h) const { return scores[b * n_heads + h]; }
  bool is_masked(std::size_t b, std::size_t h) const { return masked[b * n_heads + h] != 0; }
};

// round-half-away-from-zero(iteration * rate * total_heads)
inline std::size_t cumulative_mask_target(std::size_t total_heads, double rate, std::size_t iteration) {
  if (iteration < 1) throw ScheduleError("cumulative_mask_target: iteration index starts at 1");
  return static_cast<std::size_t>(std::llround(static_cast<double>(iteration) * rate * static_cast<double>(total_heads)));
}

// Mean over batches of |dL/dg_h| at the model's current gates, with L the
// next-token cross-entropy of the batch. Returns [n_blocks * n_heads];
// heads not structurally present score 0.
template <typename T>
std::vector<double> head_importance(const TransformerLM<T>& m, std::span<const TokenBatch> batches) {
  if (batches.empty()) throw std::invalid_argument("head_importance: empty validation set");
  std::vector<double> acc(m.config.n_blocks * m.config.n_heads, 0.0);
  for (const auto& batch : batches) {
    GradTape<T> tape;
    auto fp = forward(tape, m, batch.inputs, batch.n_seq, GradMode{.gates = true});
    tape.backward(cross_entropy(fp.logits, std::span<const int>(batch.targets)));
    const Tensor<T> g = tape.grad(fp.gates);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::abs(static_cast<double>(g[i]));
  }
  for (auto& x : acc) x /= static_cast<double>(batches.size());
  return acc;
}

template <typename T>
double mean_loss(const TransformerLM<T>& m, std::span<const TokenBatch> batches) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& b : batches) {
    GradTape<T> tape;
    auto fp = forward(tape, m, b.inputs, b.n_seq);
    total += static_cast<double>(cross_entropy(fp.logits, std::span<const int>(b.targets)).value()[0]) *
             static_cast<double>(b.targets.size());
    n += b.targets.size();
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

template <typename T>
HeadImportanceTable make_importance_table(const TransformerLM<T>& m) {
  HeadImportanceTable t(m.config.n_blocks, m.config.n_heads);
  for (std::size_t b = 0; b < t.n_blocks; ++b)
    for (std::size_t h = 0; h < t.n_heads; ++h) t.masked[b * t.n_heads + h] = m.gate(b, h) == T(0);
  return t;
}

// Rescores unmasked heads, sorts them ascending across all blocks (ties by
// block then head), and masks until the cumulative target for iteration k is
// met. A head whose masking would leave its block without an active head is
// skipped and counted in guard_skips.
template <typename T>
void prune_iteration(TransformerLM<T>& m, HeadImportanceTable& table, const PruneSchedule& schedule,
                     std::span<const TokenBatch> batches, std::size_t k) {
  schedule.validate();
  if (k < 1 || k > schedule.iterations)
    throw ScheduleError("prune_iteration: iteration " + std::to_string(k) + " outside schedule of " +
                        std::to_string(schedule.iterations));
  const std::size_t H = table.n_heads, total = table.n_blocks * H;
  const std::size_t target = cumulative_mask_target(total, schedule.rate_per_iteration, k);
  const auto scores = head_importance(m, batches);

  std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
  std::vector<std::size_t> active(table.n_blocks, 0);
  for (std::size_t b = 0; b < table.n_blocks; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      if (table.masked[b * H + h]) continue;
      table.scores[b * H + h] = scores[b * H + h];
      cand.emplace_back(scores[b * H + h], b, h);
      ++active[b];
    }
  std::sort(cand.begin(), cand.end());

  std::size_t count = table.masked_count(), skips = 0;
  for (const auto& [score, b, h] : cand) {
    if (count >= target) break;
    if (active[b] <= 1) {
      ++skips;
      continue;
    }
    table.masked[b * H + h] = 1;
    m.gates[b * H + h] = T(0);
    --active[b];
    ++count;
    table.iteration_log.push_back({k, b, h, score});
  }
  table.guard_skips.push_back(skips);
  if (count < target)
    throw ScheduleError("prune_iteration: target of " + std::to_string(target) + " masked heads exceeds the " +
                        std::to_string(count) + " that can be masked");
}

template <typename T>
struct PruneResult {
  TransformerLM<T> model;
  HeadImportanceTable table;
  std::vector<double> ppl_after_iteration;
  std::vector<double> loss_after_iteration;
  bool stopped_early = false;
};

// Runs the schedule's iterations without any retraining in between. After
// each iteration the validation loss/PPL is measured on `eval_tokens` (or on
// the importance batches when eval_tokens is empty); a set loss_threshold ends
// the run once exceeded.
template <typename T>
PruneResult<T> iterative_prune(const TransformerLM<T>& model, const PruneSchedule& schedule,
                               std::span<const TokenBatch> importance_batches, std::span<const int> eval_tokens = {}) {
  schedule.validate();
  PruneResult<T> r{model, make_importance_table(model), {}, {}, false};
  std::vector<TokenBatch> subset(importance_batches.begin(), importance_batches.end());
  if (schedule.validation_subset_size) {
    std::size_t windows = 0;
    std::vector<TokenBatch> kept;
    for (const auto& b : subset) {
      if (windows >= schedule.validation_subset_size) break;
      kept.push_back(b);
      windows += b.n_seq;
    }
    subset = std::move(kept);
  }
  for (std::size_t k = 1; k <= schedule.iterations; ++k) {
    prune_iteration(r.model, r.table, schedule, subset, k);
    double loss;
    if (eval_tokens.size() >= 2) {
      const auto pr = perplexity_detail(r.model, eval_tokens);
      loss = pr.nll_sum / static_cast<double>(pr.n_scored);
    } else {
      loss = mean_loss(r.model, std::span<const TokenBatch>(subset));
    }
    r.loss_after_iteration.push_back(loss);
    r.ppl_after_iteration.push_back(std::exp(loss));
    if (schedule.loss_threshold && loss > *schedule.loss_threshold) {
      r.stopped_early = k < schedule.iterations;
      break;
    }
  }
  return r;
}

// Removes the parameter slices of masked heads. The compacted model computes
// the same logits as the gated one.
template <typename T>
TransformerLM<T> compact(const TransformerLM<T>& m) {
  TransformerLM<T> out = m;
  const std::size_t d = m.config.d_model, hd = m.config.head_dim();
  for (std::size_t b = 0; b < m.config.n_blocks; ++b) {
    const auto& heads = m.block_heads[b];
    std::vector<std::size_t> keep;
    for (std::size_t s = 0; s < heads.size(); ++s)
      if (m.gate(b, static_cast<std::size_t>(heads[s])) != T(0)) keep.push_back(s);
    if (keep.size() == heads.size()) continue;
    const std::size_t A_old = heads.size() * hd, A_new = keep.size() * hd;

    const auto& w = m.param(block_name(b, "attn.qkv.w"));
    const auto& bias = m.param(block_name(b, "attn.qkv.b"));
    Tensor<T> nw({d, 3 * A_new}), nb({3 * A_new});
    for (std::size_t sec = 0; sec < 3; ++sec)
      for (std::size_t i = 0; i < keep.size(); ++i)
        for (std::size_t c = 0; c < hd; ++c) {
          const std::size_t src = sec * A_old + keep[i] * hd + c, dst = sec * A_new + i * hd + c;
          for (std::size_t r = 0; r < d; ++r) nw[r * 3 * A_new + dst] = w[r * 3 * A_old + src];
          nb[dst] = bias[src];
        }
    const auto& pw = m.param(block_name(b, "attn.proj.w"));
    Tensor<T> npw({A_new, d});
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t c = 0; c < hd; ++c)
        std::copy_n(pw.data.data() + (keep[i] * hd + c) * d, d, npw.data.data() + (i * hd + c) * d);

    out.param(block_name(b, "attn.qkv.w")) = std::move(nw);
    out.param(block_name(b, "attn.qkv.b")) = std::move(nb);
    out.param(block_name(b, "attn.proj.w")) = std::move(npw);
    std::vector<int> kept_ids;
    for (std::size_t s : keep) kept_ids.push_back(heads[s]);
    out.block_heads[b] = std::move(kept_ids);
  }
  return out;
}

}  // namespace cfair
