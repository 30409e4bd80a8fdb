#pragma once

// Language-model training loop shared by teacher training and distillation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cfair/adam.hpp"
#include "cfair/corpus.hpp"
#include "cfair/errors.hpp"
#include "cfair/inference.hpp"
#include "cfair/losses.hpp"
#include "cfair/model.hpp"

namespace cfair {

struct TrainPlan {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::size_t seq_len = 0;  // 0: model max_seq_len
  AdamConfig adam{.lr = 3e-3};
  double warmup_fraction = 0.05;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;    // 0: no cap
  std::size_t eval_every = 0;   // 0: evaluate at epoch ends only
  std::size_t eval_windows = 0;  // 0: whole validation corpus
};

struct EvalRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double ppl = 0.0;
};

struct TrainRun {
  std::vector<double> loss_trace;
  std::vector<EvalRecord> evals;
  std::size_t steps = 0;
};

// Linear warmup over the first ceil(fraction * total) steps, then constant.
inline double lr_at(std::size_t step, std::size_t total_steps, double base, double warmup_fraction) {
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup == 0 || step >= warmup) return base;
  return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

template <typename T>
std::map<std::string, Tensor<T>> collect_grads(const GradTape<T>& tape, const ForwardPass<T>& fp) {
  std::map<std::string, Tensor<T>> grads;
  for (const auto& [name, v] : fp.param_vars) grads.emplace(name, tape.grad(v));
  return grads;
}

template <typename T>
double validation_ppl(const TransformerLM<T>& m, std::span<const int> val, std::size_t max_windows = 0) {
  if (max_windows) {
    const std::size_t n = std::min(val.size(), max_windows * m.config.max_seq_len + 1);
    val = val.first(n);
  }
  return perplexity(m, val);
}

namespace detail {

// Drives epochs of shuffled windows. `step` returns the scalar training loss
// after applying its update; `eval` is called at epoch ends and every
// plan.eval_every steps.
template <typename T, typename StepFn, typename EvalFn>
TrainRun run_epochs(const TransformerLM<T>& m, std::span<const int> corpus, const TrainPlan& plan, StepFn&& step,
                    EvalFn&& eval) {
  const std::size_t seq_len = plan.seq_len ? plan.seq_len : m.config.max_seq_len;
  if (plan.epochs < 1) throw std::invalid_argument("training: epochs must be >= 1");
  if (plan.batch_size < 1) throw std::invalid_argument("training: batch_size must be >= 1");
  if (seq_len > m.config.max_seq_len) throw std::invalid_argument("training: seq_len exceeds max_seq_len");
  const std::size_t n_windows = window_count(corpus.size(), seq_len);
  if (n_windows == 0) throw std::invalid_argument("training: corpus shorter than one window");
  const std::size_t per_epoch = (n_windows + plan.batch_size - 1) / plan.batch_size;
  std::size_t total = per_epoch * plan.epochs;
  if (plan.max_steps) total = std::min(total, plan.max_steps);

  TrainRun run;
  for (std::size_t epoch = 0; epoch < plan.epochs && run.steps < total; ++epoch) {
    const auto order = epoch_order(n_windows, plan.seed, epoch);
    for (std::size_t b = 0; b < per_epoch && run.steps < total; ++b) {
      const std::span<const std::size_t> ids(order.data() + b * plan.batch_size,
                                             std::min(plan.batch_size, n_windows - b * plan.batch_size));
      const TokenBatch batch = make_batch(corpus, ids, seq_len, b);
      const double lr = lr_at(run.steps, total, plan.adam.lr, plan.warmup_fraction);
      const double loss = step(batch, lr, run.steps);
      if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", run.steps, lr, batch.id);
      run.loss_trace.push_back(loss);
      ++run.steps;
      if (plan.eval_every && run.steps % plan.eval_every == 0 && b + 1 < per_epoch) run.evals.push_back({epoch, run.steps, eval()});
    }
    run.evals.push_back({epoch, run.steps, eval()});
  }
  return run;
}

}  // namespace detail

// Plain next-token cross-entropy training with Adam.
template <typename T>
TrainRun train_lm(TransformerLM<T>& m, std::span<const int> corpus, std::span<const int> val, const TrainPlan& plan) {
  AdamState<T> state;
  auto step = [&](const TokenBatch& batch, double lr, std::size_t) {
    GradTape<T> tape;
    auto fp = forward(tape, m, batch.inputs, batch.n_seq, GradMode{.params = true});
    Var<T> loss = cross_entropy(fp.logits, std::span<const int>(batch.targets));
    const double value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(value)) return value;
    tape.backward(loss);
    adam_step(m.params, collect_grads(tape, fp), state, lr, plan.adam);
    return value;
  };
  auto eval = [&] { return val.size() >= 2 ? validation_ppl(m, val, plan.eval_windows) : std::numeric_limits<double>::quiet_NaN(); };
  return detail::run_epochs(m, corpus, plan, step, eval);
}

}  // namespace cfair
