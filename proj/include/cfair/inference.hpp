#pragma once

// Likelihood scoring, sliding-window perplexity, and seeded top-k decoding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "cfair/model.hpp"

namespace cfair {

struct LogLikelihood {
  double total = 0.0;  // Σ log P(t_i | t_<i), i = 1..n-1
  double mean = 0.0;   // total / (n-1)
};

template <typename T>
LogLikelihood log_likelihood(const TransformerLM<T>& m, std::span<const int> tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("log_likelihood: need at least 2 tokens");
  const Tensor<T> lg = logits(m, tokens);
  const std::size_t V = lg.shape[1];
  LogLikelihood ll;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const T* row = lg.data.data() + i * V;
    ll.total += static_cast<double>(row[tokens[i + 1]] - kern::log_sum_exp(row, V));
  }
  ll.mean = ll.total / static_cast<double>(tokens.size() - 1);
  return ll;
}

struct PerplexityResult {
  double nll_sum = 0.0;
  std::size_t n_scored = 0;
  double ppl() const { return n_scored ? std::exp(nll_sum / static_cast<double>(n_scored)) : 1.0; }
};

// Windows of at most max_seq_len tokens advanced by `stride`. Every target
// position 1..n-1 is scored exactly once, with as much left context as the
// current window provides.
template <typename T>
PerplexityResult perplexity_detail(const TransformerLM<T>& m, std::span<const int> corpus, std::size_t stride = 0) {
  const std::size_t S = m.config.max_seq_len;
  if (corpus.size() < 2) throw std::invalid_argument("perplexity: corpus needs at least 2 tokens");
  if (stride == 0) stride = S;
  if (stride > S) throw std::invalid_argument("perplexity: stride exceeds max_seq_len");
  const std::size_t n = corpus.size();
  PerplexityResult r;
  std::size_t next_target = 1;
  for (std::size_t begin = 0; next_target < n; begin += stride) {
    // A target needs its predecessor inside the window.
    begin = std::min(begin, next_target - 1);
    const std::size_t end = std::min(begin + S, n);
    if (end <= next_target) continue;
    const auto window = corpus.subspan(begin, end - begin);
    const Tensor<T> lg = logits(m, window);
    const std::size_t V = lg.shape[1];
    for (std::size_t t = std::max(next_target, begin + 1); t < end; ++t) {
      const T* row = lg.data.data() + (t - 1 - begin) * V;
      r.nll_sum += static_cast<double>(kern::log_sum_exp(row, V) - row[corpus[t]]);
      ++r.n_scored;
    }
    next_target = end;
  }
  return r;
}

template <typename T>
double perplexity(const TransformerLM<T>& m, std::span<const int> corpus, std::size_t stride = 0) {
  return perplexity_detail(m, corpus, stride).ppl();
}

// Incremental decoder with a per-block cache of qkv rows. Produces the same
// logits, bit for bit, as the tape forward on the same prefix.
template <typename T>
class DecodeSession {
 public:
  explicit DecodeSession(const TransformerLM<T>& m) : m_(m) {
    const auto& c = m.config;
    wte_t_.resize(c.vocab_size * c.d_model);
    kern::transpose(m.param("wte").data.data(), wte_t_.data(), c.vocab_size, c.d_model);
    for (const auto& hs : m.block_heads) cache_.emplace_back(c.max_seq_len * 3 * hs.size() * c.head_dim());
  }

  std::size_t position() const { return pos_; }

  // Consumes one token, returns next-token logits.
  std::vector<T> step(int token) {
    const auto& c = m_.config;
    if (pos_ >= c.max_seq_len) throw std::invalid_argument("decode: context exceeds max_seq_len");
    if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) throw std::out_of_range("decode: token id outside vocabulary");
    const std::size_t d = c.d_model, hd = c.head_dim(), ff = c.ff();
    std::vector<T> h(d), a(d), u(ff), o(d);
    const T* te = m_.param("wte").data.data() + static_cast<std::size_t>(token) * d;
    const T* pe = m_.param("wpe").data.data() + pos_ * d;
    for (std::size_t j = 0; j < d; ++j) h[j] = te[j] + pe[j];
    const T eps = static_cast<T>(Tolerances::layer_norm_eps);
    std::vector<T> probs(pos_ + 1);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
      const auto& heads = m_.block_heads[b];
      const std::size_t A = heads.size() * hd, W = 3 * A;
      auto P = [&](const char* leaf) { return m_.param(block_name(b, leaf)).data.data(); };
      kern::layer_norm_row(h.data(), P("ln1.g"), P("ln1.b"), a.data(), d, eps, static_cast<T*>(nullptr), static_cast<T*>(nullptr));
      T* qkv = cache_[b].data() + pos_ * W;
      kern::matmul(a.data(), P("attn.qkv.w"), P("attn.qkv.b"), qkv, 1, d, W);
      std::vector<T> att(A);
      for (std::size_t s = 0; s < heads.size(); ++s) {
        kern::attend(qkv + s * hd, cache_[b].data() + A + s * hd, cache_[b].data() + 2 * A + s * hd, W, pos_ + 1, hd,
                     T(1) / std::sqrt(static_cast<T>(hd)), probs.data(), att.data() + s * hd);
        const T g = m_.gate(b, static_cast<std::size_t>(heads[s]));
        for (std::size_t k = 0; k < hd; ++k) att[s * hd + k] = g * att[s * hd + k];
      }
      kern::matmul(att.data(), P("attn.proj.w"), P("attn.proj.b"), o.data(), 1, A, d);
      for (std::size_t j = 0; j < d; ++j) h[j] = h[j] + o[j];
      kern::layer_norm_row(h.data(), P("ln2.g"), P("ln2.b"), a.data(), d, eps, static_cast<T*>(nullptr), static_cast<T*>(nullptr));
      kern::matmul(a.data(), P("mlp.fc.w"), P("mlp.fc.b"), u.data(), 1, d, ff);
      for (auto& x : u) x = kern::gelu(x);
      kern::matmul(u.data(), P("mlp.proj.w"), P("mlp.proj.b"), o.data(), 1, ff, d);
      for (std::size_t j = 0; j < d; ++j) h[j] = h[j] + o[j];
    }
    kern::layer_norm_row(h.data(), m_.param("lnf.g").data.data(), m_.param("lnf.b").data.data(), a.data(), d, eps,
                         static_cast<T*>(nullptr), static_cast<T*>(nullptr));
    std::vector<T> out(c.vocab_size);
    kern::matmul(a.data(), wte_t_.data(), static_cast<const T*>(nullptr), out.data(), 1, d, c.vocab_size);
    ++pos_;
    return out;
  }

 private:
  const TransformerLM<T>& m_;
  std::vector<T> wte_t_;
  std::vector<std::vector<T>> cache_;
  std::size_t pos_ = 0;
};

struct GenerationSettings {
  std::size_t top_k = 10;
  std::size_t max_new_tokens = 64;
  bool sample = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (top_k < 1) throw std::invalid_argument("generation: top_k must be >= 1");
    if (max_new_tokens < 1) throw std::invalid_argument("generation: max_new_tokens must be >= 1");
  }
};

// Restricts to the k largest logits (ties: lower id first), renormalizes at
// temperature 1 and draws with one uniform variate. Greedy when !sample.
template <typename T>
int pick_token(std::span<const T> row, std::size_t top_k, bool sample, SplitMix64& rng) {
  const std::size_t V = row.size();
  const std::size_t k = sample ? std::min(top_k, V) : 1;
  std::vector<int> idx(V);
  std::iota(idx.begin(), idx.end(), 0);
  auto better = [&](int a, int b) { return row[a] > row[b] || (row[a] == row[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  if (k == 1) return idx[0];
  std::vector<T> sel(k), p(k);
  for (std::size_t i = 0; i < k; ++i) sel[i] = row[idx[i]];
  kern::softmax(sel.data(), p.data(), k);
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += static_cast<double>(p[i]);
    if (u < acc) return idx[i];
  }
  return idx[k - 1];
}

// Continuation tokens after `prompt`, stopping at max_new_tokens, at the end
// of the context window, or before an end-of-text token.
template <typename T>
std::vector<int> generate(const TransformerLM<T>& m, std::span<const int> prompt, const GenerationSettings& settings) {
  settings.validate();
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  if (prompt.size() > m.config.max_seq_len)
    throw std::invalid_argument("generate: prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len");
  DecodeSession<T> session(m);
  SplitMix64 rng(settings.seed);
  std::vector<T> row;
  for (int t : prompt) row = session.step(t);
  std::vector<int> out;
  while (out.size() < settings.max_new_tokens) {
    const int next = pick_token<T>(row, settings.top_k, settings.sample, rng);
    if (next == kEndOfText) break;
    out.push_back(next);
    if (session.position() >= m.config.max_seq_len) break;
    row = session.step(next);
  }
  return out;
}

}  // namespace cfair
