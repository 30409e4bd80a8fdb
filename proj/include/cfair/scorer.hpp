#pragma once

// Toxicity scorers: a deterministic lexicon scorer and a client for a remote
// classifier speaking POST /score {"texts": [...]} -> {"scores": [...]}.

#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "cfair/parallel.hpp"
#include "cfair/synthetic.hpp"

namespace cfair {

class ToxicityScorer {
 public:
  virtual ~ToxicityScorer() = default;
  // One entry per text; nullopt marks a text that could not be scored.
  virtual std::vector<std::optional<double>> score(const std::vector<std::string>& texts) = 0;
};

// Lowercased alphanumeric runs (apostrophes kept inside words).
inline std::vector<std::string> lexicon_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || (c == '\'' && !cur.empty())) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class LexiconScorer : public ToxicityScorer {
 public:
  explicit LexiconScorer(std::vector<std::string> terms = synth::default_lexicon(), double lambda = 1.0)
      : lambda_(lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("lexicon scorer: lambda must be positive");
    for (auto& t : terms) {
      auto words = lexicon_words(t);
      if (words.size() != 1) throw std::invalid_argument("lexicon scorer: term '" + t + "' is not a single word");
      terms_.insert(words[0]);
    }
  }

  std::size_t hits(std::string_view text) const {
    std::size_t n = 0;
    for (const auto& w : lexicon_words(text)) n += terms_.count(w);
    return n;
  }

  double score_one(std::string_view text) const {
    return 1.0 - std::exp(-lambda_ * static_cast<double>(hits(text)));
  }

  std::vector<std::optional<double>> score(const std::vector<std::string>& texts) override {
    std::vector<std::optional<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.emplace_back(score_one(t));
    return out;
  }

 private:
  std::set<std::string> terms_;
  double lambda_;
};

inline double lexicon_score(std::string_view text, double lambda = 1.0) {
  static const LexiconScorer scorer;
  return lambda == 1.0 ? scorer.score_one(text) : LexiconScorer(synth::default_lexicon(), lambda).score_one(text);
}

struct RemoteScorerOptions {
  std::string url = "http://127.0.0.1:8080";  // scheme://host:port
  std::size_t batch_size = 32;
  std::size_t max_in_flight = 8;
  std::size_t max_retries = 3;
  std::chrono::milliseconds backoff_base{100};
  std::chrono::milliseconds timeout{10000};
  bool fallback_to_lexicon = false;
};

class RemoteScorer : public ToxicityScorer {
 public:
  explicit RemoteScorer(RemoteScorerOptions opt, std::shared_ptr<const LexiconScorer> fallback = nullptr)
      : opt_(std::move(opt)), fallback_(std::move(fallback)) {
    if (opt_.batch_size < 1 || opt_.max_in_flight < 1)
      throw std::invalid_argument("remote scorer: batch_size and max_in_flight must be >= 1");
    if (opt_.fallback_to_lexicon && !fallback_) fallback_ = std::make_shared<LexiconScorer>();
  }

  std::vector<std::optional<double>> score(const std::vector<std::string>& texts) override {
    std::vector<std::optional<double>> out(texts.size());
    const std::size_t n_batches = (texts.size() + opt_.batch_size - 1) / opt_.batch_size;
    parallel_for(n_batches, opt_.max_in_flight, [&](std::size_t b) {
      const std::size_t lo = b * opt_.batch_size, hi = std::min(texts.size(), lo + opt_.batch_size);
      std::vector<std::string> chunk(texts.begin() + static_cast<std::ptrdiff_t>(lo),
                                     texts.begin() + static_cast<std::ptrdiff_t>(hi));
      auto scores = request_with_retries(chunk);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        if (scores) out[lo + i] = (*scores)[i];
        else if (opt_.fallback_to_lexicon) out[lo + i] = fallback_->score_one(chunk[i]);
      }
      if (!scores) failed_batches_.fetch_add(1);
    });
    return out;
  }

  std::size_t attempts() const { return attempts_.load(); }
  std::size_t failed_batches() const { return failed_batches_.load(); }

 private:
  std::optional<std::vector<double>> request_once(httplib::Client& cli, const std::string& body, std::size_t n) {
    attempts_.fetch_add(1);
    auto res = cli.Post("/score", body, "application/json");
    if (!res || res->status != 200) return std::nullopt;
    const auto j = nlohmann::json::parse(res->body, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("scores") || !j["scores"].is_array() || j["scores"].size() != n)
      return std::nullopt;
    std::vector<double> s;
    for (const auto& v : j["scores"]) {
      if (!v.is_number()) return std::nullopt;
      const double x = v.get<double>();
      if (!(x >= 0.0 && x <= 1.0)) return std::nullopt;
      s.push_back(x);
    }
    return s;
  }

  std::optional<std::vector<double>> request_with_retries(const std::vector<std::string>& chunk) {
    httplib::Client cli(opt_.url);
    cli.set_connection_timeout(opt_.timeout);
    cli.set_read_timeout(opt_.timeout);
    const std::string body = nlohmann::json{{"texts", chunk}}.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    auto delay = opt_.backoff_base;
    for (std::size_t attempt = 0;; ++attempt) {
      if (auto s = request_once(cli, body, chunk.size())) return s;
      if (attempt >= opt_.max_retries) return std::nullopt;
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
  }

  RemoteScorerOptions opt_;
  std::shared_ptr<const LexiconScorer> fallback_;
  std::atomic<std::size_t> attempts_{0};
  std::atomic<std::size_t> failed_batches_{0};
};

}  // namespace cfair
