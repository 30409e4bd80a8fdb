#pragma once

// Prompt, stereotype-triple and pronoun-pair records, stored one JSON object
// per line (UTF-8).

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cfair/errors.hpp"

namespace cfair {

enum class ToxicLabel { toxic, nontoxic };

struct PromptRecord {
  std::string id;
  std::string text;
  std::optional<double> source_toxicity_score;
  std::optional<ToxicLabel> source_label;
  // Toxicity of the record's original continuation, when the source has one.
  std::optional<double> continuation_toxicity;
};

struct BiasTriple {
  std::string context;
  std::string stereotype;
  std::string anti_stereotype;
  std::string unrelated;
  std::string category;
};

struct BiasPair {
  std::string context;
  std::string stereotype;
  std::string anti_stereotype;
  std::string category;
};

inline bool is_pronoun(std::string_view w) {
  static constexpr std::string_view kPronouns[] = {"he", "she", "him", "her", "his", "hers", "himself", "herself"};
  std::string lw(w);
  std::transform(lw.begin(), lw.end(), lw.begin(), [](unsigned char c) { return std::tolower(c); });
  return std::find(std::begin(kPronouns), std::end(kPronouns), lw) != std::end(kPronouns);
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

namespace detail {

// Splits "her." into {"", "her", "."}.
inline void split_punct(const std::string& w, std::string& pre, std::string& core, std::string& post) {
  std::size_t b = 0, e = w.size();
  while (b < e && !std::isalnum(static_cast<unsigned char>(w[b]))) ++b;
  while (e > b && !std::isalnum(static_cast<unsigned char>(w[e - 1]))) --e;
  pre = w.substr(0, b);
  core = w.substr(b, e - b);
  post = w.substr(e);
}

}  // namespace detail

// Word index of the first difference outside pronoun positions, if any.
inline std::optional<std::size_t> pair_violation(const BiasPair& p) {
  const auto a = split_words(p.stereotype), b = split_words(p.anti_stereotype);
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] == b[i]) continue;
    std::string pa, ca, sa, pb, cb, sb;
    detail::split_punct(a[i], pa, ca, sa);
    detail::split_punct(b[i], pb, cb, sb);
    if (pa == pb && sa == sb && is_pronoun(ca) && is_pronoun(cb)) continue;
    return i;
  }
  if (a.size() != b.size()) return n;
  if (p.stereotype == p.anti_stereotype) return 0;
  return std::nullopt;
}

inline void validate_pair(const BiasPair& p) {
  if (auto pos = pair_violation(p))
    throw ValidationError("bias pair sentences differ outside pronoun tokens at word " + std::to_string(*pos) + ": '" +
                              p.stereotype + "' vs '" + p.anti_stereotype + "'",
                          *pos);
}

inline void validate_triple(const BiasTriple& t) {
  if (t.stereotype == t.anti_stereotype || t.stereotype == t.unrelated || t.anti_stereotype == t.unrelated)
    throw ValidationError("bias triple sentences must be pairwise distinct (context '" + t.context + "')", 0);
}

// ---------------------------------------------------------------------------
// JSON conversion

inline nlohmann::json to_json(const PromptRecord& r) {
  nlohmann::json j{{"id", r.id}, {"text", r.text}};
  if (r.source_toxicity_score) j["source_toxicity_score"] = *r.source_toxicity_score;
  if (r.source_label) j["source_label"] = *r.source_label == ToxicLabel::toxic ? "toxic" : "nontoxic";
  if (r.continuation_toxicity) j["continuation_toxicity"] = *r.continuation_toxicity;
  return j;
}

inline nlohmann::json to_json(const BiasTriple& t) {
  return {{"context", t.context}, {"stereotype", t.stereotype}, {"anti_stereotype", t.anti_stereotype},
          {"unrelated", t.unrelated}, {"category", t.category}};
}

inline nlohmann::json to_json(const BiasPair& p) {
  return {{"context", p.context}, {"stereotype", p.stereotype}, {"anti_stereotype", p.anti_stereotype}, {"category", p.category}};
}

namespace detail {

inline std::string req_string(const nlohmann::json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || !it->is_string()) throw SchemaError(std::string("missing required string field '") + field + "'", field);
  return it->get<std::string>();
}

inline std::string opt_string(const nlohmann::json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return {};
  if (!it->is_string()) throw SchemaError(std::string("field '") + field + "' must be a string", field);
  return it->get<std::string>();
}

inline std::optional<double> opt_unit(const nlohmann::json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_number()) throw SchemaError(std::string("field '") + field + "' must be a number", field);
  const double v = it->get<double>();
  if (!(v >= 0.0 && v <= 1.0)) throw SchemaError(std::string("field '") + field + "' must lie in [0,1]", field);
  return v;
}

}  // namespace detail

inline PromptRecord prompt_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("prompt record must be a JSON object", "");
  PromptRecord r;
  r.id = detail::req_string(j, "id");
  r.text = detail::req_string(j, "text");
  if (r.text.empty()) throw SchemaError("prompt text must be non-empty", "text");
  r.source_toxicity_score = detail::opt_unit(j, "source_toxicity_score");
  r.continuation_toxicity = detail::opt_unit(j, "continuation_toxicity");
  const std::string label = detail::opt_string(j, "source_label");
  if (label == "toxic") r.source_label = ToxicLabel::toxic;
  else if (label == "nontoxic") r.source_label = ToxicLabel::nontoxic;
  else if (!label.empty()) throw SchemaError("source_label must be 'toxic' or 'nontoxic'", "source_label");
  return r;
}

inline BiasTriple triple_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("triple record must be a JSON object", "");
  BiasTriple t{detail::opt_string(j, "context"), detail::req_string(j, "stereotype"), detail::req_string(j, "anti_stereotype"),
               detail::req_string(j, "unrelated"), detail::opt_string(j, "category")};
  validate_triple(t);
  return t;
}

inline BiasPair pair_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("pair record must be a JSON object", "");
  BiasPair p{detail::opt_string(j, "context"), detail::req_string(j, "stereotype"), detail::req_string(j, "anti_stereotype"),
             detail::opt_string(j, "category")};
  validate_pair(p);
  return p;
}

// ---------------------------------------------------------------------------
// Line-delimited files

enum class LoadMode { strict, lenient };

struct LineIssue {
  std::size_t line = 0;  // 1-based
  std::string message;
};

template <typename R>
struct LoadResult {
  std::vector<R> records;
  std::size_t skipped = 0;
  std::vector<LineIssue> issues;
};

template <typename R, typename Parse>
LoadResult<R> parse_jsonl(std::string_view content, LoadMode mode, Parse parse) {
  LoadResult<R> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string_view::npos) end = content.size();
    std::string_view line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.records.push_back(parse(j));
    } catch (const nlohmann::json::exception& e) {
      if (mode == LoadMode::strict) throw DataError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
      out.issues.push_back({line_no, e.what()});
      ++out.skipped;
    } catch (const SchemaError& e) {
      if (mode == LoadMode::strict) throw SchemaError("line " + std::to_string(line_no) + ": " + e.what(), e.field());
      out.issues.push_back({line_no, e.what()});
      ++out.skipped;
    } catch (const ValidationError& e) {
      if (mode == LoadMode::strict) throw ValidationError("line " + std::to_string(line_no) + ": " + e.what(), e.position());
      out.issues.push_back({line_no, e.what()});
      ++out.skipped;
    }
  }
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline LoadResult<PromptRecord> load_prompt_file(const std::filesystem::path& path, LoadMode mode = LoadMode::strict) {
  return parse_jsonl<PromptRecord>(read_text_file(path), mode, prompt_from_json);
}

inline LoadResult<BiasTriple> load_triples(const std::filesystem::path& path, LoadMode mode = LoadMode::strict) {
  return parse_jsonl<BiasTriple>(read_text_file(path), mode, triple_from_json);
}

inline LoadResult<BiasPair> load_pairs(const std::filesystem::path& path, LoadMode mode = LoadMode::strict) {
  return parse_jsonl<BiasPair>(read_text_file(path), mode, pair_from_json);
}

template <typename R>
void write_jsonl(const std::filesystem::path& path, const std::vector<R>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

}  // namespace cfair
