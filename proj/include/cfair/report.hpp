#pragma once

// Per-figure CSVs and PPL-vs-fairness correlations from a sweep's results.csv.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfair/csv.hpp"
#include "cfair/errors.hpp"
#include "cfair/records.hpp"
#include "cfair/stats.hpp"

namespace cfair {

struct CorrelationEntry {
  std::string metric;
  std::size_t n = 0;
  std::optional<double> pearson;
  std::optional<double> spearman;
  std::string note;  // why a coefficient is missing
};

inline CorrelationEntry correlate(std::string metric, std::span<const double> ppl, std::span<const double> values) {
  CorrelationEntry e;
  e.metric = std::move(metric);
  e.n = ppl.size();
  if (e.n < 3) {
    e.note = "fewer than 3 models";
    return e;
  }
  e.pearson = pearson(ppl, values);
  e.spearman = spearman(ppl, values);
  if (!e.pearson) e.note = "zero variance";
  return e;
}

struct ReportSummary {
  std::vector<CorrelationEntry> correlations;
  std::vector<std::string> notices;
  std::vector<std::filesystem::path> files;
};

namespace detail {

struct Table {
  CsvRow header;
  std::vector<CsvRow> rows;
  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw SchemaError("results table has no column '" + name + "'", name);
  }
};

inline double to_real(const std::string& s) { return s.empty() ? 0.0 : std::stod(s); }

}  // namespace detail

inline ReportSummary report(const std::filesystem::path& result_dir) {
  namespace fs = std::filesystem;
  const auto text = read_text_file(result_dir / "results.csv");
  auto all = parse_csv(text);
  if (all.empty()) throw DataError("results.csv is empty");
  detail::Table t{all.front(), {all.begin() + 1, all.end()}};
  for (const auto& r : t.rows)
    if (r.size() != t.header.size()) throw DataError("results.csv has a row of the wrong width");
  if (t.rows.empty()) throw DataError("results.csv has no rows");

  const auto c_model = t.col("model_id"), c_eval = t.col("evaluation"), c_ppl = t.col("val_ppl");
  auto get = [&](const CsvRow& r, const char* name) { return r[t.col(name)]; };

  ReportSummary out;
  auto emit = [&](const std::string& name, const CsvRow& header, const std::vector<CsvRow>& rows) {
    const auto p = result_dir / name;
    write_csv(p.string(), header, rows);
    out.files.push_back(p);
  };

  std::vector<CsvRow> ppl_rows, tox_rows, len_rows, bias_rows;
  std::vector<std::string> models;
  std::map<std::string, double> model_ppl;
  std::map<std::string, std::map<std::string, double>> metrics;  // metric -> model -> value
  std::map<std::string, CsvRow> bias_by_model;
  for (const auto& r : t.rows) {
    const auto& m = r[c_model];
    if (!model_ppl.count(m)) {
      models.push_back(m);
      model_ppl[m] = detail::to_real(r[c_ppl]);
      ppl_rows.push_back({m, get(r, "kind"), get(r, "n_blocks"), get(r, "init_mode"), get(r, "heads_retained"),
                          get(r, "params"), get(r, "val_ppl"), get(r, "flop_ratio")});
    }
    const auto& ev = r[c_eval];
    if (ev.starts_with("tox:")) {
      const auto set = get(r, "prompt_set");
      tox_rows.push_back({m, set, get(r, "n_samples"), get(r, "toxic_count"), get(r, "toxic_score")});
      len_rows.push_back({m, set, get(r, "mean_length")});
      metrics["toxic_count:" + set][m] = detail::to_real(get(r, "toxic_count"));
      metrics["toxic_score:" + set][m] = detail::to_real(get(r, "toxic_score"));
    } else if (ev == "bias:triples" || ev == "bias:pairs") {
      auto& row = bias_by_model[m];
      if (row.empty()) row = {m, "", "", "", "", ""};
      if (ev == "bias:triples") {
        row[1] = get(r, "triple_anti");
        row[2] = get(r, "triple_stereotype");
        row[3] = get(r, "triple_unrelated");
        const double n = detail::to_real(row[1]) + detail::to_real(row[2]) + detail::to_real(row[3]);
        if (n > 0) metrics["triple_anti_fraction"][m] = detail::to_real(row[1]) / n;
      } else {
        row[4] = get(r, "pair_anti");
        row[5] = get(r, "pair_n");
        const double n = detail::to_real(row[5]);
        if (n > 0) metrics["pair_anti_fraction"][m] = detail::to_real(row[4]) / n;
      }
    }
  }
  for (const auto& m : models)
    if (bias_by_model.count(m)) bias_rows.push_back(bias_by_model[m]);

  emit("fig_ppl.csv", {"model_id", "kind", "n_blocks", "init_mode", "heads_retained", "params", "val_ppl", "flop_ratio"}, ppl_rows);
  emit("fig_toxicity.csv", {"model_id", "prompt_set", "n_samples", "toxic_count", "toxic_score"}, tox_rows);
  emit("table_lengths.csv", {"model_id", "prompt_set", "mean_length"}, len_rows);
  emit("fig_bias.csv", {"model_id", "triple_anti", "triple_stereotype", "triple_unrelated", "pair_anti", "pair_n"}, bias_rows);

  std::vector<CsvRow> corr_rows;
  for (const auto& [metric, by_model] : metrics) {
    std::vector<double> x, y;
    for (const auto& m : models)
      if (by_model.count(m)) {
        x.push_back(model_ppl[m]);
        y.push_back(by_model.at(m));
      }
    auto e = correlate(metric, x, y);
    if (!e.note.empty()) out.notices.push_back(metric + ": correlation omitted (" + e.note + ")");
    corr_rows.push_back({e.metric, std::to_string(e.n), e.pearson ? fmt_real(*e.pearson, 9) : "",
                         e.spearman ? fmt_real(*e.spearman, 9) : "", e.note});
    out.correlations.push_back(std::move(e));
  }
  emit("correlation.csv", {"metric", "n", "pearson", "spearman", "note"}, corr_rows);
  return out;
}

}  // namespace cfair
