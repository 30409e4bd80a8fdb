#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfair/rng.hpp"

namespace cfair {

struct CorpusSample {
  std::string source;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  std::size_t token_count = 0;
  std::size_t windows_selected = 0;
  std::size_t windows_total = 0;
};

// Keeps round(fraction * n_windows) windows of `window` tokens chosen
// uniformly without replacement, concatenated in corpus order. A fraction of 1
// returns the corpus unchanged (including any partial trailing window).
inline std::vector<int> sample_fraction(std::span<const int> corpus, double fraction, std::uint64_t seed,
                                        std::size_t window, CorpusSample* info = nullptr) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("sample_fraction: fraction must be in (0, 1], got " + std::to_string(fraction));
  if (window == 0) throw std::invalid_argument("sample_fraction: window must be positive");
  const std::size_t n_windows = corpus.size() / window;
  CorpusSample s;
  s.fraction = fraction;
  s.seed = seed;
  s.windows_total = n_windows;
  std::vector<int> out;
  if (fraction == 1.0) {
    out.assign(corpus.begin(), corpus.end());
    s.windows_selected = n_windows;
  } else {
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_windows))));
    SplitMix64 rng(seed);
    const auto picked = rng.sample_indices(n_windows, k);
    for (std::size_t w : picked) out.insert(out.end(), corpus.begin() + w * window, corpus.begin() + (w + 1) * window);
    s.windows_selected = picked.size();
  }
  s.token_count = out.size();
  if (info) *info = s;
  return out;
}

// A batch of next-token examples: n_seq rows of seq_len inputs and targets.
struct TokenBatch {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::size_t id = 0;
};

// Window w covers tokens [w*seq_len, w*seq_len + seq_len] (seq_len + 1 tokens).
inline std::size_t window_count(std::size_t corpus_tokens, std::size_t seq_len) {
  return corpus_tokens > seq_len ? (corpus_tokens - 1) / seq_len : 0;
}

inline TokenBatch make_batch(std::span<const int> corpus, std::span<const std::size_t> windows, std::size_t seq_len,
                             std::size_t id = 0) {
  TokenBatch b;
  b.n_seq = windows.size();
  b.seq_len = seq_len;
  b.id = id;
  for (std::size_t w : windows) {
    const std::size_t start = w * seq_len;
    if (start + seq_len + 1 > corpus.size()) throw std::out_of_range("make_batch: window beyond corpus");
    b.inputs.insert(b.inputs.end(), corpus.begin() + start, corpus.begin() + start + seq_len);
    b.targets.insert(b.targets.end(), corpus.begin() + start + 1, corpus.begin() + start + seq_len + 1);
  }
  return b;
}

// Window order for one epoch: a seeded shuffle keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n_windows, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n_windows);
  for (std::size_t i = 0; i < n_windows; ++i) order[i] = i;
  SplitMix64 rng(mix_seed(seed, 0xE90C4ULL, epoch));
  rng.shuffle(order);
  return order;
}

// The first `max_windows` windows (all if 0) in order, grouped into batches.
inline std::vector<TokenBatch> sequential_batches(std::span<const int> corpus, std::size_t seq_len, std::size_t batch_size,
                                                  std::size_t max_windows = 0) {
  std::size_t n = window_count(corpus.size(), seq_len);
  if (max_windows) n = std::min(n, max_windows);
  std::vector<TokenBatch> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> ids;
    for (std::size_t w = start; w < std::min(n, start + batch_size); ++w) ids.push_back(w);
    out.push_back(make_batch(corpus, ids, seq_len, out.size()));
  }
  return out;
}

// `count` windows drawn without replacement (seeded), grouped into batches.
inline std::vector<TokenBatch> sampled_batches(std::span<const int> corpus, std::size_t seq_len, std::size_t batch_size,
                                               std::size_t count, std::uint64_t seed) {
  const std::size_t n = window_count(corpus.size(), seq_len);
  if (count > n) throw std::invalid_argument("sampled_batches: requested " + std::to_string(count) + " windows, corpus has " + std::to_string(n));
  SplitMix64 rng(seed);
  const auto ids = rng.sample_indices(n, count);
  std::vector<TokenBatch> out;
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    std::vector<std::size_t> chunk(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                   ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + batch_size)));
    out.push_back(make_batch(corpus, chunk, seq_len, out.size()));
  }
  return out;
}

}  // namespace cfair
