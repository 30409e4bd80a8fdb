// cfair command-line tool: train, distill, prune, evaluate and sweep.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cfair.hpp"

namespace fs = std::filesystem;
using namespace cfair;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  std::size_t threads = 1;
  std::string precision = "f32";
};

std::uint64_t need_seed(const Globals& g, const char* cmd) {
  if (!g.seed) throw UsageError(std::string(cmd) + " needs --seed");
  return *g.seed;
}

std::string need_out(const Globals& g, const char* cmd) {
  if (g.out.empty()) throw UsageError(std::string(cmd) + " needs --out");
  return g.out;
}

// Token stream from a UTF-8 text file, or the synthetic corpus when no path is given.
std::vector<int> corpus_or_synthetic(const std::string& path, std::size_t tokens, std::uint64_t seed) {
  if (!path.empty()) return tokenize(read_text_file(path));
  return synth::corpus_tokens(tokens, seed);
}

void print_model(const TransformerLM<float>& m, std::ostream& os) {
  const auto pc = param_count(m.config);
  os << to_text(m.config);
  os << "param_count=" << pc.total << "\n";
  os << "stored_params=" << stored_param_count(m) << "\n";
  os << "heads_retained=" << m.heads_retained() << "/" << m.total_heads() << "\n";
  os << "compacted=" << (m.compacted() ? "yes" : "no") << "\n";
  for (std::size_t b = 0; b < m.config.n_blocks; ++b) {
    os << "block " << b << " heads:";
    for (std::size_t h = 0; h < m.config.n_heads; ++h)
      if (m.gate(b, h) != 0.0f) os << ' ' << h;
    os << "\n";
  }
  os << "checksum=" << model_checksum(m) << "\n";
}

struct TrainArgs {
  std::size_t d_model = 64, heads = 4, blocks = 6, seq_len = 64, d_ff = 0;
  std::string corpus, val;
  std::size_t tokens = 100000, val_tokens = 10000;
  TrainPlan plan;
};

template <typename T>
int cmd_train(const Globals& g, TrainArgs a) {
  const auto seed = need_seed(g, "train");
  const auto out = need_out(g, "train");
  ModelConfig cfg{.d_model = a.d_model, .n_heads = a.heads, .n_blocks = a.blocks, .d_ff = a.d_ff, .max_seq_len = a.seq_len,
                  .seed = mix_seed(seed, 0x7EAC4E2ULL)};
  cfg.validate();
  const auto train = corpus_or_synthetic(a.corpus, a.tokens, mix_seed(seed, 1));
  const auto val = corpus_or_synthetic(a.val, a.val_tokens, mix_seed(seed, 2));
  auto m = init_model<T>(cfg);
  a.plan.seed = mix_seed(seed, 0x7A1ULL);
  const auto run = train_lm(m, std::span<const int>(train), std::span<const int>(val), a.plan);
  for (const auto& e : run.evals) std::cout << "epoch " << e.epoch << " step " << e.step << " val_ppl " << fmt_real(e.ppl) << "\n";
  save_checkpoint(m, out);
  std::cout << "saved " << out << "\n";
  return kOk;
}

struct DistillArgs {
  std::string teacher, corpus, val;
  std::size_t tokens = 100000, val_tokens = 10000;
  std::size_t blocks = 3;
  std::string init = "truncate";
  DistillPlan plan;
};

template <typename T>
int cmd_distill(const Globals& g, DistillArgs a) {
  const auto seed = need_seed(g, "distill");
  const auto out = need_out(g, "distill");
  const auto teacher = load_checkpoint<T>(a.teacher);
  a.plan.student_blocks = a.blocks;
  a.plan.init_mode = init_mode_from_string(a.init);
  a.plan.train.seed = mix_seed(seed, 0xD157ULL, a.blocks, static_cast<int>(a.plan.init_mode));
  const auto train = corpus_or_synthetic(a.corpus, a.tokens, mix_seed(seed, 1));
  const auto val = corpus_or_synthetic(a.val, a.val_tokens, mix_seed(seed, 2));
  const auto run = distill_train(teacher, a.plan, std::span<const int>(train), std::span<const int>(val));
  for (const auto& e : run.evals) std::cout << "epoch " << e.epoch << " step " << e.step << " val_ppl " << fmt_real(e.ppl) << "\n";
  std::cout << "best val_ppl " << fmt_real(run.best_ppl()) << "\n";
  save_checkpoint(run.student, out);
  std::cout << "saved " << out << "\n";
  return kOk;
}

struct PruneArgs {
  std::string model, corpus, val, log;
  std::size_t tokens = 100000, val_tokens = 10000;
  std::size_t windows = 256, batch = 8;
  std::optional<double> threshold;
  bool compact = false;
  PruneSchedule schedule;
};

template <typename T>
int cmd_prune(const Globals& g, PruneArgs a) {
  const auto seed = need_seed(g, "prune");
  const auto out = need_out(g, "prune");
  a.schedule.loss_threshold = a.threshold;
  a.schedule.validate();
  const auto model = load_checkpoint<T>(a.model);
  const auto train = corpus_or_synthetic(a.corpus, a.tokens, mix_seed(seed, 1));
  const auto val = corpus_or_synthetic(a.val, a.val_tokens, mix_seed(seed, 2));
  const auto batches = sampled_batches(std::span<const int>(train), model.config.max_seq_len, a.batch, a.windows,
                                       mix_seed(seed, 0x9B0EULL, a.windows));
  auto r = iterative_prune(model, a.schedule, std::span<const TokenBatch>(batches), std::span<const int>(val));
  for (std::size_t k = 0; k < r.ppl_after_iteration.size(); ++k)
    std::cout << "iteration " << k + 1 << " masked " << cumulative_mask_target(model.total_heads(), a.schedule.rate_per_iteration, k + 1)
              << " val_ppl " << fmt_real(r.ppl_after_iteration[k]) << "\n";
  if (!a.log.empty()) {
    std::vector<CsvRow> rows;
    for (const auto& mh : r.table.iteration_log)
      rows.push_back({std::to_string(mh.iteration), std::to_string(mh.block), std::to_string(mh.head), fmt_real(mh.score, 9),
                      fmt_real(r.ppl_after_iteration[mh.iteration - 1])});
    write_csv(a.log, {"iteration", "block", "head", "score", "val_ppl"}, rows);
  }
  save_checkpoint(a.compact ? compact(r.model) : r.model, out);
  std::cout << "heads retained " << r.model.heads_retained() << "/" << r.model.total_heads() << "\n";
  return kOk;
}

struct GenerateArgs {
  std::string model, prompt;
  GenerationSettings settings;
  bool greedy = false;
};

template <typename T>
int cmd_generate(const Globals& g, GenerateArgs a) {
  a.settings.seed = need_seed(g, "generate");
  a.settings.sample = !a.greedy;
  const auto m = load_checkpoint<T>(a.model);
  auto prompt = tokenize(a.prompt);
  if (prompt.empty()) prompt.push_back(kEndOfText);
  const auto cont = generate(m, std::span<const int>(prompt), a.settings);
  std::cout << a.prompt << detokenize(cont) << "\n";
  return kOk;
}

struct ToxArgs {
  std::string model, prompts, strategy = "toxic", scorer = "lexicon", scorer_url;
  std::size_t n = 100, generations = 3, synthetic = 2000;
  bool fallback = false;
  GenerationSettings settings{.top_k = 10, .max_new_tokens = 32};
};

template <typename T>
int cmd_eval_tox(const Globals& g, ToxArgs a) {
  const auto seed = need_seed(g, "eval-tox");
  const auto m = load_checkpoint<T>(a.model);
  const auto records = a.prompts.empty() ? synth::prompt_records(a.synthetic, mix_seed(seed, 3)) : load_prompt_file(a.prompts).records;
  const auto set = curate(std::span<const PromptRecord>(records), strategy_from_string(a.strategy), a.n, mix_seed(seed, 0xC0EA7EULL));
  std::unique_ptr<ToxicityScorer> scorer;
  if (a.scorer == "lexicon") {
    scorer = std::make_unique<LexiconScorer>();
  } else {
    if (a.scorer_url.empty()) throw UsageError("--scorer remote needs --scorer-url");
    scorer = std::make_unique<RemoteScorer>(RemoteScorerOptions{.url = a.scorer_url, .fallback_to_lexicon = a.fallback});
  }
  ToxicityEvalOptions opt{a.generations, mix_seed(seed, 0x70C5ULL), g.threads, fs::path(a.model).stem().string()};
  const auto res = toxicity_eval(m, set, a.settings, *scorer, opt);
  const auto& r = res.report;
  json j{{"model_id", r.model_id}, {"prompt_set", r.prompt_set}, {"scoring_scope", to_string(set.scoring_scope)},
         {"toxic_count", r.toxic_count}, {"toxic_score", r.toxic_score}, {"mean_generation_length", r.mean_generation_length},
         {"n_samples", r.n_samples}, {"n_failed", r.n_failed}, {"partial", r.partial}};
  std::cout << j.dump(2) << "\n";
  if (!g.out.empty()) {
    std::ofstream os(g.out);
    for (const auto& gen : res.generations) {
      json row{{"prompt_id", gen.prompt_id}, {"sample_index", gen.sample_index}, {"continuation", gen.continuation},
               {"token_length", gen.token_length}};
      row["toxicity_prob"] = gen.toxicity_prob ? json(*gen.toxicity_prob) : json(nullptr);
      os << row.dump(-1, ' ', false, json::error_handler_t::replace) << "\n";
    }
  }
  return kOk;
}

struct BiasArgs {
  std::string model, triples, pairs;
  std::size_t n_triples = 144, n_pairs = 1584;
};

json bias_json(const BiasReport& r) {
  json j{{"n_items", r.n_items}, {"anti_count", r.anti_count}, {"stereotype_count", r.stereotype_count},
         {"unrelated_count", r.unrelated_count}, {"anti_fraction", r.anti_fraction()}};
  for (const auto& [cat, c] : r.by_category)
    j["by_category"][cat] = {{"n_items", c.n_items}, {"anti_count", c.anti_count}, {"stereotype_count", c.stereotype_count},
                             {"unrelated_count", c.unrelated_count}};
  return j;
}

template <typename T>
int cmd_eval_bias(const Globals& g, BiasArgs a) {
  const auto m = load_checkpoint<T>(a.model);
  const auto triples = a.triples.empty() ? synth::triples(a.n_triples) : load_triples(a.triples).records;
  const auto pairs = a.pairs.empty() ? synth::pronoun_pairs(a.n_pairs, g.seed.value_or(0)) : load_pairs(a.pairs).records;
  json j;
  j["triples"] = bias_json(bias_eval_triples(m, std::span<const BiasTriple>(triples), a.model, g.threads));
  j["pairs"] = bias_json(bias_eval_pairs(m, std::span<const BiasPair>(pairs), a.model, g.threads));
  std::cout << j.dump(2) << "\n";
  return kOk;
}

SweepConfig sweep_config(const Globals& g) {
  if (g.config.empty()) throw UsageError("needs --config");
  auto c = load_sweep_config(g.config);
  if (g.seed) c.seed = g.seed;
  if (!g.out.empty()) c.output_dir = g.out;
  return c;
}

template <typename T>
int cmd_sweep(const Globals& g, bool fail_fast) {
  auto c = sweep_config(g);
  std::ofstream log;
  SweepOptions opt{g.threads, fail_fast, nullptr};
  if (!c.output_dir.empty()) {
    fs::create_directories(c.output_dir);
    log.open(c.output_dir / "sweep.log.jsonl", std::ios::app);
    opt.log = &log;
  }
  const auto s = run_sweep<T>(c, opt);
  std::cout << "cells " << s.cells << " computed " << s.computed << " reused " << s.reused << " failed " << s.failed << "\n";
  std::cout << "results " << s.results_csv.string() << "\n";
  return s.failed ? kRuntime : kOk;
}

int cmd_inspect_config(const Globals& g) {
  auto c = sweep_config(g);
  c.validate();
  std::cout << "seed " << *c.seed << "\n";
  std::cout << "output_dir " << c.output_dir.string() << "\n";
  std::cout << "teacher " << (c.teacher_checkpoint.empty() ? "train " + std::to_string(c.teacher.n_blocks) + " blocks"
                                                           : "load " + c.teacher_checkpoint.string())
            << "\n";
  for (const auto& e : c.students) std::cout << "student " << student_id(e) << "\n";
  for (const auto& m : c.prune_models)
    for (auto w : c.prune_subset_sizes) std::cout << "pruned " << m << "-pruned-w" << w << "\n";
  for (const auto& s : c.strategies) std::cout << "prompts " << to_string(s.strategy) << " n=" << s.n << "\n";
  std::cout << "bias triples=" << (c.eval_triples ? "yes" : "no") << " pairs=" << (c.eval_pairs ? "yes" : "no") << "\n";
  std::cout << "config ok\n";
  return kOk;
}

struct SynthArgs {
  std::size_t tokens = 100000, prompts = 2000, triples = 144, pairs = 1584;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  const auto seed = need_seed(g, "synth");
  const fs::path dir = need_out(g, "synth");
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "corpus.txt", std::ios::binary);
    const auto toks = synth::corpus_tokens(a.tokens, mix_seed(seed, 1));
    for (int t : toks) os << (t == kEndOfText ? std::string("\n") : detokenize(std::span<const int>(&t, 1)));
  }
  write_jsonl(dir / "prompts.jsonl", synth::prompt_records(a.prompts, mix_seed(seed, 3)));
  write_jsonl(dir / "triples.jsonl", synth::triples(a.triples));
  write_jsonl(dir / "pairs.jsonl", synth::pronoun_pairs(a.pairs, mix_seed(seed, 4)));
  std::cout << "wrote corpus.txt prompts.jsonl triples.jsonl pairs.jsonl to " << dir.string() << "\n";
  return kOk;
}

void add_train_plan(CLI::App* sc, TrainPlan& p) {
  sc->add_option("--epochs", p.epochs, "training epochs");
  sc->add_option("--batch", p.batch_size, "sequences per step");
  sc->add_option("--lr", p.adam.lr, "Adam learning rate");
  sc->add_option("--max-steps", p.max_steps, "stop after this many steps (0: no cap)");
  sc->add_option("--eval-windows", p.eval_windows, "validation windows per evaluation (0: all)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cfair: small transformer LMs, distillation, head pruning and fairness evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "run seed (required for stochastic commands)");
  app.add_option("--config", g.config, "sweep config file (JSON)");
  app.add_option("--out", g.out, "output path or directory");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--precision", g.precision, "compute precision")->check(CLI::IsMember({"f32", "f64"}));

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a teacher LM");
  train->add_option("--d-model", ta.d_model);
  train->add_option("--heads", ta.heads);
  train->add_option("--blocks", ta.blocks);
  train->add_option("--d-ff", ta.d_ff, "MLP width (0: 4*d_model)");
  train->add_option("--seq-len", ta.seq_len);
  train->add_option("--corpus", ta.corpus, "training text (synthetic when omitted)")->check(CLI::ExistingFile);
  train->add_option("--val", ta.val, "validation text (synthetic when omitted)")->check(CLI::ExistingFile);
  train->add_option("--tokens", ta.tokens, "synthetic training tokens");
  train->add_option("--val-tokens", ta.val_tokens, "synthetic validation tokens");
  add_train_plan(train, ta.plan);

  DistillArgs da;
  auto* distill = app.add_subcommand("distill", "distill a student from a teacher checkpoint");
  distill->add_option("--teacher", da.teacher)->required()->check(CLI::ExistingFile);
  distill->add_option("--blocks", da.blocks, "student depth");
  distill->add_option("--init", da.init, "truncate or random")->check(CLI::IsMember({"truncate", "random"}));
  distill->add_option("--distill-epochs", da.plan.epochs);
  distill->add_option("--fraction", da.plan.corpus_fraction, "share of training windows used");
  distill->add_option("--temperature", da.plan.loss.temperature);
  distill->add_option("--alpha-kd", da.plan.loss.alpha_kd);
  distill->add_option("--alpha-lm", da.plan.loss.alpha_lm);
  distill->add_option("--alpha-cos", da.plan.loss.alpha_cos);
  distill->add_option("--corpus", da.corpus)->check(CLI::ExistingFile);
  distill->add_option("--val", da.val)->check(CLI::ExistingFile);
  distill->add_option("--tokens", da.tokens);
  distill->add_option("--val-tokens", da.val_tokens);
  add_train_plan(distill, da.plan.train);

  PruneArgs pa;
  auto* prune = app.add_subcommand("prune", "iteratively mask low-importance attention heads");
  prune->add_option("--model", pa.model)->required()->check(CLI::ExistingFile);
  prune->add_option("--rate", pa.schedule.rate_per_iteration, "share of all heads masked per iteration");
  prune->add_option("--iterations", pa.schedule.iterations);
  prune->add_option("--windows", pa.windows, "validation windows used for importance");
  prune->add_option("--batch", pa.batch);
  prune->add_option("--loss-threshold", pa.threshold, "stop once validation loss exceeds this");
  prune->add_flag("--compact", pa.compact, "remove masked heads' parameters from the saved model");
  prune->add_option("--log", pa.log, "iteration log CSV");
  prune->add_option("--corpus", pa.corpus)->check(CLI::ExistingFile);
  prune->add_option("--val", pa.val)->check(CLI::ExistingFile);
  prune->add_option("--tokens", pa.tokens);
  prune->add_option("--val-tokens", pa.val_tokens);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "sample a continuation");
  gen->add_option("--model", ga.model)->required()->check(CLI::ExistingFile);
  gen->add_option("--prompt", ga.prompt)->required();
  gen->add_option("--top-k", ga.settings.top_k);
  gen->add_option("--max-new", ga.settings.max_new_tokens);
  gen->add_flag("--greedy", ga.greedy);

  ToxArgs xa;
  auto* tox = app.add_subcommand("eval-tox", "toxicity of generations from a curated prompt set");
  tox->add_option("--model", xa.model)->required()->check(CLI::ExistingFile);
  tox->add_option("--prompts", xa.prompts, "prompt records (synthetic when omitted)")->check(CLI::ExistingFile);
  tox->add_option("--synthetic-prompts", xa.synthetic);
  tox->add_option("--strategy", xa.strategy)->check(CLI::IsMember({"toxic", "random", "safe", "trigger"}));
  tox->add_option("--n", xa.n, "prompts to sample");
  tox->add_option("--generations", xa.generations, "continuations per prompt");
  tox->add_option("--top-k", xa.settings.top_k);
  tox->add_option("--max-new", xa.settings.max_new_tokens);
  tox->add_option("--scorer", xa.scorer)->check(CLI::IsMember({"lexicon", "remote"}));
  tox->add_option("--scorer-url", xa.scorer_url);
  tox->add_flag("--fallback", xa.fallback, "use the lexicon scorer when the remote scorer fails");

  BiasArgs ba;
  auto* bias = app.add_subcommand("eval-bias", "stereotype preference counts");
  bias->add_option("--model", ba.model)->required()->check(CLI::ExistingFile);
  bias->add_option("--triples", ba.triples)->check(CLI::ExistingFile);
  bias->add_option("--pairs", ba.pairs)->check(CLI::ExistingFile);
  bias->add_option("--n-triples", ba.n_triples);
  bias->add_option("--n-pairs", ba.n_pairs);

  bool fail_fast = false;
  auto* sweep = app.add_subcommand("sweep", "run a configured experiment grid");
  sweep->add_flag("--fail-fast", fail_fast);

  std::string result_dir;
  auto* rep = app.add_subcommand("report", "per-figure CSVs and correlations from a sweep directory");
  rep->add_option("dir", result_dir)->required()->check(CLI::ExistingDirectory);

  std::string ckpt;
  auto* inspect = app.add_subcommand("inspect", "print checkpoint metadata");
  inspect->add_option("checkpoint", ckpt)->required()->check(CLI::ExistingFile);

  auto* inspect_config = app.add_subcommand("inspect-config", "validate a sweep config");

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "write the synthetic corpus and evaluation sets");
  synth_cmd->add_option("--tokens", sa.tokens);
  synth_cmd->add_option("--prompts", sa.prompts);
  synth_cmd->add_option("--triples", sa.triples);
  synth_cmd->add_option("--pairs", sa.pairs);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  const bool f64 = g.precision == "f64";
  try {
    if (*train) return f64 ? cmd_train<double>(g, ta) : cmd_train<float>(g, ta);
    if (*distill) return f64 ? cmd_distill<double>(g, da) : cmd_distill<float>(g, da);
    if (*prune) return f64 ? cmd_prune<double>(g, pa) : cmd_prune<float>(g, pa);
    if (*gen) return f64 ? cmd_generate<double>(g, ga) : cmd_generate<float>(g, ga);
    if (*tox) return f64 ? cmd_eval_tox<double>(g, xa) : cmd_eval_tox<float>(g, xa);
    if (*bias) return f64 ? cmd_eval_bias<double>(g, ba) : cmd_eval_bias<float>(g, ba);
    if (*sweep) return f64 ? cmd_sweep<double>(g, fail_fast) : cmd_sweep<float>(g, fail_fast);
    if (*rep) {
      const auto r = report(result_dir);
      for (const auto& f : r.files) std::cout << "wrote " << f.string() << "\n";
      for (const auto& n : r.notices) std::cout << "notice: " << n << "\n";
      for (const auto& c : r.correlations)
        if (c.pearson)
          std::cout << c.metric << " n=" << c.n << " pearson=" << fmt_real(*c.pearson, 4)
                    << " spearman=" << (c.spearman ? fmt_real(*c.spearman, 4) : "") << "\n";
      return kOk;
    }
    if (*inspect) {
      print_model(load_checkpoint<float>(ckpt), std::cout);
      return kOk;
    }
    if (*inspect_config) return cmd_inspect_config(g);
    if (*synth_cmd) return cmd_synth(g, sa);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ScheduleError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShortageError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
