#pragma once

// Experiment sweep: teacher, distilled students, pruned variants, and the
// toxicity/bias evaluations of every model, with per-cell resumability.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cfair/checkpoint.hpp"
#include "cfair/csv.hpp"
#include "cfair/distillation.hpp"
#include "cfair/faireval.hpp"
#include "cfair/parallel.hpp"
#include "cfair/pruning.hpp"
#include "cfair/records.hpp"
#include "cfair/synthetic.hpp"
#include "cfair/tokenizer.hpp"

namespace cfair {

inline constexpr const char* kCodeVersion = "cfair-1";
inline constexpr int kResultsSchemaVersion = 1;

using json = nlohmann::json;

struct StrategySpec {
  PromptStrategy strategy = PromptStrategy::random;
  std::size_t n = 100;
};

struct SweepConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir;

  // data
  std::filesystem::path corpus_path, val_path;  // UTF-8 text; synthetic corpus when empty
  std::size_t corpus_tokens = 60000;
  std::size_t val_tokens = 8000;
  std::filesystem::path prompts_path;
  std::size_t synthetic_prompts = 2000;
  std::filesystem::path triples_path, pairs_path;
  std::size_t n_triples = 144;
  std::size_t n_pairs = 1584;

  // teacher
  std::filesystem::path teacher_checkpoint;
  ModelConfig teacher;
  TrainPlan teacher_train;

  // distillation
  std::vector<ChainEntry> students;
  DistillPlan distill;

  // pruning
  std::vector<std::string> prune_models{"teacher"};
  PruneSchedule prune;
  std::vector<std::size_t> prune_subset_sizes;
  std::size_t prune_batch_size = 8;

  // evaluation
  std::vector<StrategySpec> strategies;
  std::size_t generations_per_prompt = 3;
  GenerationSettings generation{.top_k = 10, .max_new_tokens = 32};
  bool eval_triples = true;
  bool eval_pairs = true;
  std::size_t ppl_windows = 0;  // 0: whole validation corpus

  json source;  // the parsed document, used for cell hashing

  void validate() const;
};

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw SchemaError("sweep config: '" + where + "' must be an object", where);
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw SchemaError("sweep config: unknown key '" + k + "' in '" + where + "'", where.empty() ? k : where + "." + k);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    const std::string field = where.empty() ? key : where + "." + key;
    throw SchemaError("sweep config: field '" + field + "' has the wrong type", field);
  }
}

inline void read_path(const json& j, const char* key, std::filesystem::path& out, const std::filesystem::path& base,
                      const std::string& where) {
  std::string s;
  read(j, key, s, where);
  if (!s.empty()) out = std::filesystem::path(s).is_absolute() ? std::filesystem::path(s) : base / s;
}

inline void read_train(const json& j, TrainPlan& p, const std::string& where) {
  reject_unknown(j, {"epochs", "batch_size", "lr", "warmup_fraction", "max_steps", "eval_every", "eval_windows"}, where);
  read(j, "epochs", p.epochs, where);
  read(j, "batch_size", p.batch_size, where);
  read(j, "lr", p.adam.lr, where);
  read(j, "warmup_fraction", p.warmup_fraction, where);
  read(j, "max_steps", p.max_steps, where);
  read(j, "eval_every", p.eval_every, where);
  read(j, "eval_windows", p.eval_windows, where);
}

}  // namespace detail

// Keys mirror the fields above; see configs/ for complete examples.
inline SweepConfig sweep_config_from_json(const json& j, const std::filesystem::path& base = ".") {
  using namespace detail;
  SweepConfig c;
  c.source = j;
  reject_unknown(j, {"seed", "output_dir", "data", "teacher", "distill", "prune", "toxicity", "bias"}, "");
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    read(j, "seed", s, "");
    c.seed = s;
  }
  read_path(j, "output_dir", c.output_dir, base, "");

  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"corpus_path", "val_path", "corpus_tokens", "val_tokens", "prompts_path", "synthetic_prompts",
                       "triples_path", "pairs_path", "n_triples", "n_pairs"}, "data");
    read_path(d, "corpus_path", c.corpus_path, base, "data");
    read_path(d, "val_path", c.val_path, base, "data");
    read(d, "corpus_tokens", c.corpus_tokens, "data");
    read(d, "val_tokens", c.val_tokens, "data");
    read_path(d, "prompts_path", c.prompts_path, base, "data");
    read(d, "synthetic_prompts", c.synthetic_prompts, "data");
    read_path(d, "triples_path", c.triples_path, base, "data");
    read_path(d, "pairs_path", c.pairs_path, base, "data");
    read(d, "n_triples", c.n_triples, "data");
    read(d, "n_pairs", c.n_pairs, "data");
  }
  if (j.contains("teacher")) {
    const auto& t = j["teacher"];
    reject_unknown(t, {"checkpoint", "d_model", "n_heads", "n_blocks", "d_ff", "max_seq_len", "train"}, "teacher");
    read_path(t, "checkpoint", c.teacher_checkpoint, base, "teacher");
    read(t, "d_model", c.teacher.d_model, "teacher");
    read(t, "n_heads", c.teacher.n_heads, "teacher");
    read(t, "n_blocks", c.teacher.n_blocks, "teacher");
    read(t, "d_ff", c.teacher.d_ff, "teacher");
    read(t, "max_seq_len", c.teacher.max_seq_len, "teacher");
    if (t.contains("train")) read_train(t["train"], c.teacher_train, "teacher.train");
  }
  if (j.contains("distill")) {
    const auto& d = j["distill"];
    reject_unknown(d, {"students", "epochs", "corpus_fraction", "alpha_kd", "alpha_lm", "alpha_cos", "temperature", "train"},
                   "distill");
    if (d.contains("students")) {
      if (!d["students"].is_array()) throw SchemaError("sweep config: 'distill.students' must be a list", "distill.students");
      for (const auto& s : d["students"]) {
        reject_unknown(s, {"blocks", "init"}, "distill.students");
        ChainEntry e;
        read(s, "blocks", e.blocks, "distill.students");
        std::string init = "truncate";
        read(s, "init", init, "distill.students");
        try {
          e.init = init_mode_from_string(init);
        } catch (const std::invalid_argument& ex) {
          throw SchemaError(ex.what(), "distill.students.init");
        }
        c.students.push_back(e);
      }
    }
    read(d, "epochs", c.distill.epochs, "distill");
    read(d, "corpus_fraction", c.distill.corpus_fraction, "distill");
    read(d, "alpha_kd", c.distill.loss.alpha_kd, "distill");
    read(d, "alpha_lm", c.distill.loss.alpha_lm, "distill");
    read(d, "alpha_cos", c.distill.loss.alpha_cos, "distill");
    read(d, "temperature", c.distill.loss.temperature, "distill");
    if (d.contains("train")) read_train(d["train"], c.distill.train, "distill.train");
  }
  if (j.contains("prune")) {
    const auto& p = j["prune"];
    reject_unknown(p, {"models", "rate", "iterations", "subset_sizes", "loss_threshold", "batch_size"}, "prune");
    read(p, "models", c.prune_models, "prune");
    read(p, "rate", c.prune.rate_per_iteration, "prune");
    read(p, "iterations", c.prune.iterations, "prune");
    read(p, "subset_sizes", c.prune_subset_sizes, "prune");
    read(p, "batch_size", c.prune_batch_size, "prune");
    if (p.contains("loss_threshold")) {
      double v = 0;
      read(p, "loss_threshold", v, "prune");
      c.prune.loss_threshold = v;
    }
  }
  if (j.contains("toxicity")) {
    const auto& t = j["toxicity"];
    reject_unknown(t, {"strategies", "generations_per_prompt", "top_k", "max_new_tokens"}, "toxicity");
    if (t.contains("strategies")) {
      if (!t["strategies"].is_array()) throw SchemaError("sweep config: 'toxicity.strategies' must be a list", "toxicity.strategies");
      for (const auto& s : t["strategies"]) {
        reject_unknown(s, {"strategy", "n"}, "toxicity.strategies");
        StrategySpec spec;
        std::string name;
        read(s, "strategy", name, "toxicity.strategies");
        try {
          spec.strategy = strategy_from_string(name);
        } catch (const std::invalid_argument& ex) {
          throw SchemaError(ex.what(), "toxicity.strategies.strategy");
        }
        read(s, "n", spec.n, "toxicity.strategies");
        c.strategies.push_back(spec);
      }
    }
    read(t, "generations_per_prompt", c.generations_per_prompt, "toxicity");
    read(t, "top_k", c.generation.top_k, "toxicity");
    read(t, "max_new_tokens", c.generation.max_new_tokens, "toxicity");
  }
  if (j.contains("bias")) {
    const auto& b = j["bias"];
    reject_unknown(b, {"triples", "pairs", "ppl_windows"}, "bias");
    read(b, "triples", c.eval_triples, "bias");
    read(b, "pairs", c.eval_pairs, "bias");
    read(b, "ppl_windows", c.ppl_windows, "bias");
  }
  return c;
}

inline SweepConfig load_sweep_config(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw DataError("sweep config " + path.string() + " is not valid JSON");
  return sweep_config_from_json(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

inline void SweepConfig::validate() const {
  if (!seed) throw SchemaError("sweep config: 'seed' is required", "seed");
  for (const auto* p : {&corpus_path, &val_path, &prompts_path, &triples_path, &pairs_path, &teacher_checkpoint})
    if (!p->empty() && !std::filesystem::exists(*p)) throw DataError("sweep config: path does not exist: " + p->string());
  if (teacher_checkpoint.empty()) teacher.validate();
  if (corpus_path.empty() && corpus_tokens < 2) throw SchemaError("sweep config: data.corpus_tokens too small", "data.corpus_tokens");
  if (val_path.empty() && val_tokens < 2) throw SchemaError("sweep config: data.val_tokens too small", "data.val_tokens");
  std::set<std::string> ids;
  for (const auto& e : students) {
    if (e.blocks < 1) throw SchemaError("sweep config: student blocks must be >= 1", "distill.students.blocks");
    if (teacher_checkpoint.empty() && e.blocks > teacher.n_blocks)
      throw SchemaError("sweep config: student deeper than teacher", "distill.students.blocks");
    if (!ids.insert(student_id(e)).second) throw SchemaError("sweep config: duplicate student " + student_id(e), "distill.students");
  }
  if (!students.empty()) {
    DistillPlan p = distill;
    p.validate();
  }
  if (!prune_subset_sizes.empty()) {
    prune.validate();
    for (const auto& m : prune_models)
      if (m != "teacher" && !ids.count(m)) throw SchemaError("sweep config: prune model '" + m + "' is not configured", "prune.models");
    for (auto s : prune_subset_sizes)
      if (s < 1) throw SchemaError("sweep config: prune subset sizes must be >= 1", "prune.subset_sizes");
  }
  std::set<PromptStrategy> seen;
  for (const auto& s : strategies)
    if (!seen.insert(s.strategy).second)
      throw SchemaError("sweep config: strategy '" + to_string(s.strategy) + "' listed twice", "toxicity.strategies");
  generation.validate();
  if (generations_per_prompt < 1) throw SchemaError("sweep config: generations_per_prompt must be >= 1", "toxicity.generations_per_prompt");
}

// ---------------------------------------------------------------------------
// Results table

inline const CsvRow& results_header() {
  static const CsvRow h{"schema_version", "model_id", "kind", "n_blocks", "init_mode", "heads_retained", "params",
                        "val_ppl", "flop_ratio", "evaluation", "prompt_set", "n_samples", "toxic_count", "toxic_score",
                        "mean_length", "triple_anti", "triple_stereotype", "triple_unrelated", "pair_anti", "pair_n",
                        "partial"};
  return h;
}

struct ModelInfo {
  std::string id;
  std::string kind;  // teacher, student, pruned
  std::size_t n_blocks = 0;
  std::string init_mode;
  std::size_t heads_retained = 0;
  std::size_t params = 0;
  double val_ppl = 0.0;
  double flop_ratio = 1.0;
};

inline json to_json(const ModelInfo& m) {
  return {{"id", m.id}, {"kind", m.kind}, {"n_blocks", m.n_blocks}, {"init_mode", m.init_mode},
          {"heads_retained", m.heads_retained}, {"params", m.params}, {"val_ppl", m.val_ppl}, {"flop_ratio", m.flop_ratio}};
}

inline ModelInfo model_info_from_json(const json& j) {
  return {j.at("id"), j.at("kind"), j.at("n_blocks"), j.at("init_mode"), j.at("heads_retained"), j.at("params"),
          j.at("val_ppl"), j.at("flop_ratio")};
}

inline CsvRow result_row(const ModelInfo& m, const std::string& evaluation, const json& r) {
  auto num = [&](const char* k) { return r.contains(k) ? std::to_string(r[k].get<std::size_t>()) : std::string(); };
  auto real = [&](const char* k) { return r.contains(k) ? fmt_real(r[k].get<double>()) : std::string(); };
  return {std::to_string(kResultsSchemaVersion), m.id, m.kind, std::to_string(m.n_blocks), m.init_mode,
          std::to_string(m.heads_retained), std::to_string(m.params), fmt_real(m.val_ppl), fmt_real(m.flop_ratio),
          evaluation, r.value("prompt_set", std::string()), num("n_samples"), num("toxic_count"), real("toxic_score"),
          real("mean_length"), num("triple_anti"), num("triple_stereotype"), num("triple_unrelated"), num("pair_anti"),
          num("pair_n"), r.contains("partial") ? (r["partial"].get<bool>() ? "1" : "0") : std::string()};
}

// ---------------------------------------------------------------------------
// Sweep execution

struct SweepOptions {
  std::size_t threads = 1;
  bool fail_fast = false;
  std::ostream* log = nullptr;  // line-delimited JSON events
};

struct SweepSummary {
  std::size_t cells = 0;
  std::size_t computed = 0;
  std::size_t reused = 0;
  std::size_t failed = 0;
  std::filesystem::path results_csv;
};

namespace detail {

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << text;
  }
  std::filesystem::rename(tmp, path);
}

struct Data {
  std::vector<int> train, val;
  std::vector<PromptRecord> prompts;
  std::vector<BiasTriple> triples;
  std::vector<BiasPair> pairs;
  std::string fingerprint;  // hash material for cells that consume data
};

inline Data load_data(const SweepConfig& c) {
  Data d;
  const std::uint64_t seed = *c.seed;
  d.train = c.corpus_path.empty() ? synth::corpus_tokens(c.corpus_tokens, mix_seed(seed, 1))
                                  : tokenize(read_text_file(c.corpus_path));
  d.val = c.val_path.empty() ? synth::corpus_tokens(c.val_tokens, mix_seed(seed, 2)) : tokenize(read_text_file(c.val_path));
  d.prompts = c.prompts_path.empty() ? synth::prompt_records(c.synthetic_prompts, mix_seed(seed, 3))
                                     : load_prompt_file(c.prompts_path).records;
  d.triples = c.triples_path.empty() ? synth::triples(c.n_triples) : load_triples(c.triples_path).records;
  d.pairs = c.pairs_path.empty() ? synth::pronoun_pairs(c.n_pairs, mix_seed(seed, 4)) : load_pairs(c.pairs_path).records;
  auto crc = [](const std::vector<int>& v) {
    return crc32_of(reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(int));
  };
  std::ostringstream fp;
  fp << crc(d.train) << ':' << crc(d.val);
  for (const auto* p : {&c.prompts_path, &c.triples_path, &c.pairs_path})
    if (!p->empty()) {
      const auto bytes = read_file_bytes(*p);
      fp << ':' << crc32_of(bytes.data(), bytes.size());
    }
  fp << ':' << c.synthetic_prompts << ':' << c.n_triples << ':' << c.n_pairs;
  d.fingerprint = fp.str();
  return d;
}

}  // namespace detail

template <typename T = float>
class Sweep {
 public:
  Sweep(SweepConfig config, SweepOptions opt) : c_(std::move(config)), opt_(opt) {
    c_.validate();
    if (c_.output_dir.empty()) throw SchemaError("sweep: no output directory", "output_dir");
  }

  SweepSummary run() {
    namespace fs = std::filesystem;
    const fs::path out = c_.output_dir;
    fs::create_directories(out / "cells");
    fs::create_directories(out / "models");
    data_ = detail::load_data(c_);

    // Stage 1: teacher.
    run_model_cells({teacher_cell()});
    // Stage 2: students.
    std::vector<ModelCell> students;
    for (const auto& e : c_.students) students.push_back(student_cell(e));
    run_model_cells(students);
    // Stage 3: pruned variants.
    std::vector<ModelCell> pruned;
    if (c_.prune_subset_sizes.size())
      for (const auto& src : c_.prune_models)
        for (auto size : c_.prune_subset_sizes) pruned.push_back(prune_cell(src, size));
    run_model_cells(pruned);
    // Stage 4: evaluations of every model.
    prepare_prompt_sets();
    std::vector<EvalCell> evals;
    for (const auto& id : model_order_)
      for (const auto& e : evaluations()) evals.push_back({id, e});
    run_eval_cells(evals);
    merge();
    summary_.results_csv = out / "results.csv";
    return summary_;
  }

 private:
  struct ModelCell {
    std::string id, kind, key;
    std::string upstream;  // model id this cell derives from, empty for the teacher
    std::function<void(const ModelCell&)> build;
  };
  struct EvalCell {
    std::string model_id, evaluation;
  };
  struct Failure {
    std::string cell, error;
  };

  std::string hash_key(const std::string& key) const { return detail::hex64(fnv1a(std::string(kCodeVersion) + "|" + key)); }
  std::filesystem::path cell_path(const std::string& key) const { return c_.output_dir / "cells" / (hash_key(key) + ".json"); }
  std::filesystem::path model_path(const std::string& id) const { return c_.output_dir / "models" / (id + ".ckpt"); }

  void log(const json& event) {
    if (!opt_.log) return;
    std::lock_guard lock(log_mu_);
    *opt_.log << event.dump() << '\n';
    opt_.log->flush();
  }

  std::optional<json> completed(const std::string& key) const {
    const auto p = cell_path(key);
    if (!std::filesystem::exists(p)) return std::nullopt;
    const json j = json::parse(read_text_file(p), nullptr, false);
    if (j.is_discarded() || j.value("key", std::string()) != key || !j.contains("result")) return std::nullopt;
    return j["result"];
  }

  void mark_done(const std::string& key, const json& result) {
    detail::write_text_atomic(cell_path(key), json{{"key", key}, {"result", result}}.dump(1) + "\n");
  }

  std::string train_key(const TrainPlan& p) const {
    std::ostringstream os;
    os << p.epochs << ',' << p.batch_size << ',' << fmt_real(p.adam.lr, 12) << ',' << fmt_real(p.warmup_fraction, 12)
       << ',' << p.max_steps << ',' << p.eval_every << ',' << p.eval_windows;
    return os.str();
  }

  std::uint64_t seed() const { return *c_.seed; }

  ModelInfo describe(const TransformerLM<T>& m, const std::string& id, const std::string& kind, const std::string& init) {
    ModelInfo info{id, kind, m.config.n_blocks, init, m.heads_retained(), stored_param_count(m)};
    info.val_ppl = validation_ppl(m, std::span<const int>(data_.val), c_.ppl_windows);
    // Masked heads count as removed: FLOPs of the compacted equivalent.
    const auto fc = flop_count(compact(m), m.config.max_seq_len).total();
    info.flop_ratio = teacher_flops_ ? static_cast<double>(fc) / static_cast<double>(teacher_flops_) : 1.0;
    return info;
  }

  ModelCell teacher_cell() {
    ModelCell cell{"teacher", "teacher", {}, {}, {}};
    if (!c_.teacher_checkpoint.empty()) {
      const auto bytes = read_file_bytes(c_.teacher_checkpoint);
      cell.key = "teacher|load|" + std::to_string(crc32_of(bytes.data(), bytes.size())) + "|" + data_.fingerprint;
    } else {
      cell.key = "teacher|train|" + to_text(c_.teacher) + "|" + train_key(c_.teacher_train) + "|" + std::to_string(seed()) +
                 "|" + data_.fingerprint;
    }
    cell.build = [this](const ModelCell& self) {
      TransformerLM<T> m;
      if (!c_.teacher_checkpoint.empty()) {
        m = load_checkpoint<T>(c_.teacher_checkpoint);
      } else {
        ModelConfig cfg = c_.teacher;
        cfg.seed = mix_seed(seed(), 0x7EAC4E2ULL);
        m = init_model<T>(cfg);
        TrainPlan plan = c_.teacher_train;
        plan.seed = mix_seed(seed(), 0x7A1ULL);
        train_lm(m, std::span<const int>(data_.train), {}, plan);
      }
      save_checkpoint(m, model_path(self.id));
    };
    return cell;
  }

  ModelCell student_cell(const ChainEntry& e) {
    ModelCell cell{student_id(e), "student", {}, "teacher", {}};
    const auto& d = c_.distill;
    std::ostringstream os;
    os << "student|" << e.blocks << '|' << to_string(e.init) << '|' << d.epochs << '|' << fmt_real(d.corpus_fraction, 12)
       << '|' << fmt_real(d.loss.alpha_kd, 12) << ',' << fmt_real(d.loss.alpha_lm, 12) << ','
       << fmt_real(d.loss.alpha_cos, 12) << ',' << fmt_real(d.loss.temperature, 12) << '|' << train_key(d.train) << '|'
       << seed();
    cell.key = os.str();
    cell.build = [this, e](const ModelCell& self) {
      const auto teacher = load_checkpoint<T>(model_path("teacher"));
      DistillPlan plan = c_.distill;
      plan.student_blocks = e.blocks;
      plan.init_mode = e.init;
      plan.train.seed = mix_seed(seed(), 0xD157ULL, e.blocks, static_cast<int>(e.init));
      // val PPL picks the best epoch, so distillation watches the validation corpus.
      auto run = distill_train(teacher, plan, std::span<const int>(data_.train), std::span<const int>(data_.val));
      save_checkpoint(run.student, model_path(self.id));
    };
    return cell;
  }

  ModelCell prune_cell(const std::string& src, std::size_t windows) {
    ModelCell cell{src + "-pruned-w" + std::to_string(windows), "pruned", {}, src, {}};
    std::ostringstream os;
    os << "pruned|" << windows << '|' << fmt_real(c_.prune.rate_per_iteration, 12) << '|' << c_.prune.iterations << '|'
       << (c_.prune.loss_threshold ? fmt_real(*c_.prune.loss_threshold, 12) : "none") << '|' << c_.prune_batch_size << '|'
       << seed();
    cell.key = os.str();
    cell.build = [this, src, windows](const ModelCell& self) {
      const auto model = load_checkpoint<T>(model_path(src));
      const auto batches = sampled_batches(std::span<const int>(data_.train), model.config.max_seq_len, c_.prune_batch_size,
                                           windows, mix_seed(seed(), 0x9B0EULL, windows));
      auto r = iterative_prune(model, c_.prune, std::span<const TokenBatch>(batches), std::span<const int>(data_.val));
      std::vector<CsvRow> rows;
      for (const auto& mh : r.table.iteration_log)
        rows.push_back({std::to_string(mh.iteration), std::to_string(mh.block), std::to_string(mh.head),
                        fmt_real(mh.score, 9), fmt_real(r.ppl_after_iteration[mh.iteration - 1])});
      std::filesystem::create_directories(c_.output_dir / "logs");
      write_csv((c_.output_dir / "logs" / (self.id + "-prune.csv")).string(), {"iteration", "block", "head", "score", "val_ppl"},
                rows);
      save_checkpoint(r.model, model_path(self.id));
    };
    return cell;
  }

  void run_model_cells(const std::vector<ModelCell>& cells) {
    std::vector<std::optional<Failure>> failures(cells.size());
    parallel_for(cells.size(), opt_.threads, [&](std::size_t i) {
      const auto& cell = cells[i];
      const std::string full_key = cell.key + "|" + (cell.upstream.empty() ? "" : keys_.at(cell.upstream));
      try {
        if (!cell.upstream.empty() && failed_models_.count(cell.upstream))
          throw std::runtime_error("upstream model " + cell.upstream + " failed");
        if (auto done = completed(full_key); done && std::filesystem::exists(model_path(cell.id))) {
          std::lock_guard lock(mu_);
          infos_[cell.id] = model_info_from_json(*done);
          ++summary_.reused;
          return;
        }
        const auto t0 = std::chrono::steady_clock::now();
        cell.build(cell);
        const auto m = load_checkpoint<T>(model_path(cell.id));
        if (cell.id == "teacher") teacher_flops_ = flop_count(m, m.config.max_seq_len).total();
        const std::string init = cell.kind == "student" ? (cell.id.ends_with("-random") ? "random" : "truncate")
                                 : cell.kind == "pruned" ? infos_init(cell.upstream)
                                                         : "";
        const ModelInfo info = describe(m, cell.id, cell.kind, init);
        mark_done(full_key, to_json(info));
        std::lock_guard lock(mu_);
        infos_[cell.id] = info;
        ++summary_.computed;
        log({{"event", "model_done"}, {"cell", cell.id},
             {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
      } catch (const std::exception& ex) {
        if (opt_.fail_fast) throw;
        failures[i] = Failure{cell.id, ex.what()};
        log({{"event", "cell_failed"}, {"cell", cell.id}, {"error", ex.what()}});
      }
    });
    for (std::size_t i = 0; i < cells.size(); ++i) {
      ++summary_.cells;
      keys_[cells[i].id] = cells[i].key + "|" + (cells[i].upstream.empty() ? "" : keys_.at(cells[i].upstream));
      if (failures[i]) {
        failed_models_.insert(cells[i].id);
        failures_.push_back(*failures[i]);
        ++summary_.failed;
      } else {
        model_order_.push_back(cells[i].id);
        if (cells[i].id == "teacher" && !teacher_flops_) {
          const auto m = load_checkpoint<T>(model_path("teacher"));
          teacher_flops_ = flop_count(m, m.config.max_seq_len).total();
        }
      }
    }
  }

  std::string infos_init(const std::string& id) {
    std::lock_guard lock(mu_);
    return infos_.count(id) ? infos_[id].init_mode : "";
  }

  std::vector<std::string> evaluations() const {
    std::vector<std::string> e{"lm"};
    for (const auto& s : c_.strategies) e.push_back("tox:" + to_string(s.strategy));
    if (c_.eval_triples) e.push_back("bias:triples");
    if (c_.eval_pairs) e.push_back("bias:pairs");
    return e;
  }

  void prepare_prompt_sets() {
    for (const auto& s : c_.strategies) {
      const std::string name = to_string(s.strategy);
      try {
        auto set = curate(std::span<const PromptRecord>(data_.prompts), s.strategy, s.n, mix_seed(seed(), 0xC0EA7EULL));
        write_jsonl(c_.output_dir / "data" / ("prompts-" + name + ".jsonl"), set.records);
        prompt_sets_.emplace(name, std::move(set));
      } catch (const ShortageError& ex) {
        prompt_errors_[name] = ex.what();
      }
    }
  }

  std::string eval_key(const EvalCell& e) const {
    std::ostringstream os;
    os << "eval|" << e.evaluation << '|' << keys_.at(e.model_id) << '|' << data_.fingerprint << '|' << seed();
    if (e.evaluation.starts_with("tox:")) {
      for (const auto& s : c_.strategies)
        if ("tox:" + to_string(s.strategy) == e.evaluation) os << '|' << s.n;
      os << '|' << c_.generations_per_prompt << '|' << c_.generation.top_k << '|' << c_.generation.max_new_tokens;
    }
    if (e.evaluation == "lm") os << '|' << c_.ppl_windows;
    return os.str();
  }

  json evaluate(const TransformerLM<T>& m, const EvalCell& e) {
    if (e.evaluation == "lm") return json::object();
    if (e.evaluation.starts_with("tox:")) {
      const std::string name = e.evaluation.substr(4);
      const auto& set = prompt_sets_.at(name);
      LexiconScorer scorer;
      ToxicityEvalOptions o{c_.generations_per_prompt, mix_seed(seed(), 0x70C5ULL), 1, e.model_id};
      const auto res = toxicity_eval(m, set, c_.generation, scorer, o);
      std::ostringstream gen;
      for (const auto& g : res.generations) {
        json j{{"prompt_id", g.prompt_id}, {"sample_index", g.sample_index}, {"continuation", g.continuation},
               {"token_length", g.token_length}};
        j["toxicity_prob"] = g.toxicity_prob ? json(*g.toxicity_prob) : json(nullptr);
        gen << j.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
      }
      detail::write_text_atomic(c_.output_dir / "generations" / (e.model_id + "-" + name + ".jsonl"), gen.str());
      const auto& r = res.report;
      return {{"prompt_set", r.prompt_set}, {"n_samples", r.n_samples}, {"toxic_count", r.toxic_count},
              {"toxic_score", r.toxic_score}, {"mean_length", r.mean_generation_length}, {"partial", r.partial}};
    }
    if (e.evaluation == "bias:triples") {
      const auto r = bias_eval_triples(m, std::span<const BiasTriple>(data_.triples), e.model_id);
      return {{"triple_anti", r.anti_count}, {"triple_stereotype", r.stereotype_count}, {"triple_unrelated", r.unrelated_count}};
    }
    if (e.evaluation == "bias:pairs") {
      const auto r = bias_eval_pairs(m, std::span<const BiasPair>(data_.pairs), e.model_id);
      return {{"pair_anti", r.anti_count}, {"pair_n", r.n_items}};
    }
    throw std::logic_error("unknown evaluation " + e.evaluation);
  }

  void run_eval_cells(const std::vector<EvalCell>& cells) {
    std::vector<std::optional<Failure>> failures(cells.size());
    std::vector<json> results(cells.size());
    std::map<std::string, TransformerLM<T>> models;
    for (const auto& id : model_order_) models.emplace(id, load_checkpoint<T>(model_path(id)));
    std::vector<char> reused(cells.size(), 0);
    parallel_for(cells.size(), opt_.threads, [&](std::size_t i) {
      const auto& cell = cells[i];
      const std::string key = eval_key(cell);
      const std::string name = cell.model_id + "/" + cell.evaluation;
      try {
        if (auto done = completed(key)) {
          results[i] = *done;
          reused[i] = 1;
          return;
        }
        const auto t0 = std::chrono::steady_clock::now();
        if (cell.evaluation.starts_with("tox:") && prompt_errors_.count(cell.evaluation.substr(4)))
          throw std::runtime_error(prompt_errors_.at(cell.evaluation.substr(4)));
        results[i] = evaluate(models.at(cell.model_id), cell);
        mark_done(key, results[i]);
        log({{"event", "eval_done"}, {"cell", name},
             {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
      } catch (const std::exception& ex) {
        if (opt_.fail_fast) throw;
        failures[i] = Failure{name, ex.what()};
        log({{"event", "cell_failed"}, {"cell", name}, {"error", ex.what()}});
      }
    });
    for (std::size_t i = 0; i < cells.size(); ++i) {
      ++summary_.cells;
      if (failures[i]) {
        failures_.push_back(*failures[i]);
        ++summary_.failed;
        continue;
      }
      reused[i] ? ++summary_.reused : ++summary_.computed;
      rows_.push_back(result_row(infos_.at(cells[i].model_id), cells[i].evaluation, results[i]));
    }
  }

  void merge() {
    write_csv((c_.output_dir / "results.csv").string(), results_header(), rows_);
    std::ostringstream os;
    for (const auto& f : failures_) os << json{{"cell", f.cell}, {"error", f.error}}.dump() << '\n';
    detail::write_text_atomic(c_.output_dir / "failures.jsonl", os.str());
  }

  SweepConfig c_;
  SweepOptions opt_;
  detail::Data data_;
  std::mutex mu_, log_mu_;
  std::map<std::string, ModelInfo> infos_;
  std::map<std::string, std::string> keys_;
  std::set<std::string> failed_models_;
  std::vector<std::string> model_order_;
  std::map<std::string, PromptSet> prompt_sets_;
  std::map<std::string, std::string> prompt_errors_;
  std::vector<Failure> failures_;
  std::vector<CsvRow> rows_;
  std::uint64_t teacher_flops_ = 0;
  SweepSummary summary_;
};

template <typename T = float>
SweepSummary run_sweep(const SweepConfig& config, const SweepOptions& opt = {}) {
  return Sweep<T>(config, opt).run();
}

}  // namespace cfair
