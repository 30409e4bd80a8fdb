#pragma once

// Students from a trained teacher: truncated or random initialization, then
// training on soft targets, hard labels and a hidden-state cosine term.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfair/checkpoint.hpp"
#include "cfair/training.hpp"

namespace cfair {

enum class InitMode { truncate, random };

inline std::string to_string(InitMode m) { return m == InitMode::truncate ? "truncate" : "random"; }

inline InitMode init_mode_from_string(const std::string& s) {
  if (s == "truncate") return InitMode::truncate;
  if (s == "random") return InitMode::random;
  throw std::invalid_argument("init mode must be 'truncate' or 'random', got '" + s + "'");
}

struct DistillPlan {
  std::size_t student_blocks = 1;
  InitMode init_mode = InitMode::truncate;
  std::size_t epochs = 3;
  double corpus_fraction = 1.0;
  DistillLossParts loss;
  TrainPlan train;  // batch size, optimizer, warmup, seed, eval cadence; epochs taken from above
  std::filesystem::path checkpoint_path;  // best student is written here when non-empty

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("distill plan: epochs must be >= 1");
    if (!(corpus_fraction > 0.0 && corpus_fraction <= 1.0))
      throw std::invalid_argument("distill plan: corpus_fraction must be in (0, 1]");
    if (student_blocks < 1) throw std::invalid_argument("distill plan: student_blocks must be >= 1");
    loss.validate();
  }
};

template <typename T>
struct DistillRun {
  DistillPlan plan;
  std::filesystem::path checkpoint;
  std::vector<EvalRecord> evals;  // validation PPL per evaluation point
  std::size_t best_index = 0;
  std::vector<double> loss_trace;
  std::vector<DistillLossParts> parts_trace;
  TransformerLM<T> student;  // best-by-validation-PPL parameters

  double best_ppl() const { return evals.empty() ? std::numeric_limits<double>::quiet_NaN() : evals[best_index].ppl; }
};

template <typename T>
TransformerLM<T> make_student(const TransformerLM<T>& teacher, const DistillPlan& plan) {
  if (plan.student_blocks < 1 || plan.student_blocks > teacher.config.n_blocks)
    throw std::invalid_argument("make_student: " + std::to_string(plan.student_blocks) + " blocks requested from a " +
                                std::to_string(teacher.config.n_blocks) + "-block teacher");
  if (plan.init_mode == InitMode::truncate) return truncate_teacher(teacher, plan.student_blocks);
  ModelConfig cfg = teacher.config;
  cfg.n_blocks = plan.student_blocks;
  cfg.seed = mix_seed(plan.train.seed, 0x5EEDULL, plan.student_blocks);
  return init_model<T>(cfg);
}

// Teacher block whose output the student's last block is aligned with.
inline std::size_t aligned_teacher_block(std::size_t teacher_blocks, std::size_t student_blocks) {
  return (student_blocks - 1) * teacher_blocks / student_blocks;
}

template <typename T>
DistillRun<T> distill_train(const TransformerLM<T>& teacher, const DistillPlan& plan, std::span<const int> train_corpus,
                            std::span<const int> val_corpus) {
  plan.validate();
  const std::uint32_t teacher_sum = model_checksum(teacher);

  DistillRun<T> run;
  run.plan = plan;
  run.checkpoint = plan.checkpoint_path;
  TransformerLM<T> student = make_student(teacher, plan);
  const std::size_t seq_len = plan.train.seq_len ? plan.train.seq_len : teacher.config.max_seq_len;

  std::vector<int> sampled;
  if (plan.corpus_fraction < 1.0) {
    sampled = sample_fraction(train_corpus, plan.corpus_fraction, mix_seed(plan.train.seed, 0xF7AC7ULL), seq_len + 1);
    train_corpus = sampled;
  }

  const std::size_t hidden_src = aligned_teacher_block(teacher.config.n_blocks, student.config.n_blocks);
  AdamState<T> state;
  DistillLossParts parts = plan.loss;

  auto step = [&](const TokenBatch& batch, double lr, std::size_t) {
    Tensor<T> t_logits, t_hidden;
    {
      GradTape<T> t_tape;
      auto tfp = forward(t_tape, teacher, batch.inputs, batch.n_seq);
      t_logits = tfp.logits.value();
      t_hidden = tfp.block_outputs[hidden_src].value();
    }
    GradTape<T> tape;
    auto fp = forward(tape, student, batch.inputs, batch.n_seq, GradMode{.params = true});
    Var<T> loss = distill_loss(fp.logits, t_logits, std::span<const int>(batch.targets), fp.block_outputs.back(), t_hidden, parts);
    const double value = static_cast<double>(loss.value()[0]);
    run.parts_trace.push_back(parts);
    if (!std::isfinite(value)) return value;
    tape.backward(loss);
    adam_step(student.params, collect_grads(tape, fp), state, lr, plan.train.adam);
    return value;
  };

  double best = std::numeric_limits<double>::infinity();
  std::size_t n_evals = 0;
  auto eval = [&] {
    if (val_corpus.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const double ppl = validation_ppl(student, val_corpus, plan.train.eval_windows);
    if (ppl < best) {
      best = ppl;
      run.student = student;
      run.best_index = n_evals;
      if (!plan.checkpoint_path.empty()) save_checkpoint(student, plan.checkpoint_path);
    }
    ++n_evals;
    return ppl;
  };

  TrainPlan tp = plan.train;
  tp.epochs = plan.epochs;
  const TrainRun tr = detail::run_epochs(student, train_corpus, tp, step, eval);
  run.evals = tr.evals;
  run.loss_trace = tr.loss_trace;
  if (run.student.params.empty()) {
    run.student = student;
    if (!plan.checkpoint_path.empty()) save_checkpoint(student, plan.checkpoint_path);
  }

  if (model_checksum(teacher) != teacher_sum) throw std::logic_error("distill_train: teacher parameters changed");
  return run;
}

struct ChainEntry {
  std::size_t blocks = 1;
  InitMode init = InitMode::truncate;
};

inline std::string student_id(const ChainEntry& e) {
  return "L" + std::to_string(e.blocks) + (e.init == InitMode::truncate ? "" : "-random");
}

// One independent student per entry, each distilled from the same teacher.
template <typename T>
std::vector<DistillRun<T>> distill_chain(const TransformerLM<T>& teacher, std::span<const ChainEntry> entries,
                                         const DistillPlan& templ, std::span<const int> train_corpus,
                                         std::span<const int> val_corpus,
                                         const std::filesystem::path& checkpoint_dir = {}) {
  for (const auto& e : entries)
    if (e.blocks < 1 || e.blocks > teacher.config.n_blocks)
      throw std::invalid_argument("distill_chain: student of " + std::to_string(e.blocks) + " blocks exceeds teacher");
  std::vector<DistillRun<T>> runs;
  for (const auto& e : entries) {
    DistillPlan plan = templ;
    plan.student_blocks = e.blocks;
    plan.init_mode = e.init;
    if (!checkpoint_dir.empty()) plan.checkpoint_path = checkpoint_dir / (student_id(e) + ".ckpt");
    runs.push_back(distill_train(teacher, plan, train_corpus, val_corpus));
  }
  return runs;
}

}  // namespace cfair
