#pragma once

// GPT-style decoder-only transformer: learned positions, pre-layernorm blocks,
// GELU MLP, output head tied to the token embedding, and a multiplicative
// gate on every attention head's output.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cfair/errors.hpp"
#include "cfair/rng.hpp"
#include "cfair/tape.hpp"

namespace cfair {

inline constexpr int kEndOfText = 0;

struct ModelConfig {
  std::size_t vocab_size = 257;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 2;
  std::size_t d_ff = 0;  // 0 means 4 * d_model
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;

  std::size_t ff() const { return d_ff ? d_ff : 4 * d_model; }
  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (!vocab_size || !d_model || !n_heads || !n_blocks || !max_seq_len)
      throw std::invalid_argument("model config: all sizes must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                  std::to_string(n_heads));
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.vocab_size == b.vocab_size && a.d_model == b.d_model && a.n_heads == b.n_heads && a.n_blocks == b.n_blocks &&
           a.ff() == b.ff() && a.max_seq_len == b.max_seq_len && a.seed == b.seed;
  }
};

inline std::string to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "vocab_size=" << c.vocab_size << "\n"
     << "d_model=" << c.d_model << "\n"
     << "n_heads=" << c.n_heads << "\n"
     << "n_blocks=" << c.n_blocks << "\n"
     << "d_ff=" << c.ff() << "\n"
     << "max_seq_len=" << c.max_seq_len << "\n"
     << "seed=" << c.seed << "\n";
  return os.str();
}

// Parses key=value lines; unknown keys are returned in `extra`.
inline ModelConfig config_from_text(std::string_view text, std::map<std::string, std::string>* extra = nullptr) {
  ModelConfig c;
  std::istringstream is{std::string(text)};
  std::string line;
  auto num = [](const std::string& k, const std::string& v) -> std::uint64_t {
    try {
      std::size_t pos = 0;
      const auto x = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw SchemaError("model config: bad value for '" + k + "': " + v, k);
    }
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SchemaError("model config: malformed line '" + line + "'", line);
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "vocab_size") c.vocab_size = num(k, v);
    else if (k == "d_model") c.d_model = num(k, v);
    else if (k == "n_heads") c.n_heads = num(k, v);
    else if (k == "n_blocks") c.n_blocks = num(k, v);
    else if (k == "d_ff") c.d_ff = num(k, v);
    else if (k == "max_seq_len") c.max_seq_len = num(k, v);
    else if (k == "seed") c.seed = num(k, v);
    else if (extra) (*extra)[k] = v;
  }
  if (c.d_ff == 4 * c.d_model) c.d_ff = 0;
  return c;
}

inline std::string block_name(std::size_t b, std::string_view leaf) { return "h" + std::to_string(b) + "." + std::string(leaf); }

template <typename T>
struct TransformerLM {
  ModelConfig config;
  std::map<std::string, Tensor<T>> params;
  Tensor<T> gates;                             // [n_blocks, n_heads]; 1 active, 0 masked
  std::vector<std::vector<int>> block_heads;   // heads structurally present per block

  const Tensor<T>& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("model has no parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("model has no parameter '" + name + "'");
    return it->second;
  }

  T gate(std::size_t block, std::size_t head) const { return gates[block * config.n_heads + head]; }

  std::size_t total_heads() const { return config.n_blocks * config.n_heads; }

  // Heads structurally present with a non-zero gate.
  std::size_t heads_retained() const {
    std::size_t n = 0;
    for (std::size_t b = 0; b < block_heads.size(); ++b)
      for (int h : block_heads[b])
        if (gate(b, static_cast<std::size_t>(h)) != T(0)) ++n;
    return n;
  }

  bool compacted() const {
    for (const auto& hs : block_heads)
      if (hs.size() != config.n_heads) return true;
    return false;
  }

  template <typename U>
  TransformerLM<U> cast() const {
    TransformerLM<U> out;
    out.config = config;
    for (const auto& [k, v] : params) out.params.emplace(k, v.template cast<U>());
    out.gates = gates.template cast<U>();
    out.block_heads = block_heads;
    return out;
  }
};

namespace detail {

template <typename T>
Tensor<T> gaussian(const Shape& shape, double std, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor<T> t(shape);
  for (auto& x : t.data) x = static_cast<T>(std * rng.normal());
  return t;
}

}  // namespace detail

// Parameter shapes implied by a config and the heads present in each block.
inline std::map<std::string, Shape> expected_param_shapes(const ModelConfig& cfg, const std::vector<std::vector<int>>& block_heads) {
  const std::size_t d = cfg.d_model, ff = cfg.ff(), hd = cfg.head_dim();
  std::map<std::string, Shape> s{{"wte", {cfg.vocab_size, d}}, {"wpe", {cfg.max_seq_len, d}}, {"lnf.g", {d}}, {"lnf.b", {d}}};
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::size_t A = block_heads.at(b).size() * hd;
    for (const char* leaf : {"ln1.g", "ln1.b", "attn.proj.b", "ln2.g", "ln2.b", "mlp.proj.b"}) s[block_name(b, leaf)] = {d};
    s[block_name(b, "attn.qkv.w")] = {d, 3 * A};
    s[block_name(b, "attn.qkv.b")] = {3 * A};
    s[block_name(b, "attn.proj.w")] = {A, d};
    s[block_name(b, "mlp.fc.w")] = {d, ff};
    s[block_name(b, "mlp.fc.b")] = {ff};
    s[block_name(b, "mlp.proj.w")] = {ff, d};
  }
  return s;
}

// Fresh model: N(0, 0.02) weights, zero biases, unit layernorm gains. Each
// tensor draws from its own stream seeded by (config.seed, name).
template <typename T>
TransformerLM<T> init_model(const ModelConfig& cfg, double std = 0.02) {
  cfg.validate();
  TransformerLM<T> m;
  m.config = cfg;
  const std::size_t d = cfg.d_model, ff = cfg.ff();
  auto normal = [&](const std::string& name, Shape s) {
    m.params.emplace(name, detail::gaussian<T>(s, std, mix_seed(cfg.seed, fnv1a(name))));
  };
  auto fill = [&](const std::string& name, Shape s, T v) { m.params.emplace(name, Tensor<T>(std::move(s), v)); };
  normal("wte", {cfg.vocab_size, d});
  normal("wpe", {cfg.max_seq_len, d});
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    fill(block_name(b, "ln1.g"), {d}, T(1));
    fill(block_name(b, "ln1.b"), {d}, T(0));
    normal(block_name(b, "attn.qkv.w"), {d, 3 * d});
    fill(block_name(b, "attn.qkv.b"), {3 * d}, T(0));
    normal(block_name(b, "attn.proj.w"), {d, d});
    fill(block_name(b, "attn.proj.b"), {d}, T(0));
    fill(block_name(b, "ln2.g"), {d}, T(1));
    fill(block_name(b, "ln2.b"), {d}, T(0));
    normal(block_name(b, "mlp.fc.w"), {d, ff});
    fill(block_name(b, "mlp.fc.b"), {ff}, T(0));
    normal(block_name(b, "mlp.proj.w"), {ff, d});
    fill(block_name(b, "mlp.proj.b"), {d}, T(0));
  }
  fill("lnf.g", {d}, T(1));
  fill("lnf.b", {d}, T(0));
  m.gates = Tensor<T>({cfg.n_blocks, cfg.n_heads}, T(1));
  m.block_heads.assign(cfg.n_blocks, {});
  for (auto& hs : m.block_heads)
    for (std::size_t h = 0; h < cfg.n_heads; ++h) hs.push_back(static_cast<int>(h));
  return m;
}

// ---------------------------------------------------------------------------
// Parameter and compute accounting

struct ParamCount {
  std::size_t total = 0;
  std::size_t per_block = 0;
  std::size_t embedding = 0;   // token embedding (shared with the output head)
  std::size_t positional = 0;
  std::size_t final_norm = 0;
};

inline ParamCount param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, ff = cfg.ff();
  ParamCount pc;
  const std::size_t attention = 4 * d * d + 4 * d;
  const std::size_t mlp = 2 * d * ff + ff + d;
  const std::size_t norms = 4 * d;
  pc.per_block = attention + mlp + norms;
  pc.embedding = cfg.vocab_size * d;
  pc.positional = cfg.max_seq_len * d;
  pc.final_norm = 2 * d;
  pc.total = pc.embedding + pc.positional + pc.final_norm + cfg.n_blocks * pc.per_block;
  return pc;
}

// Elements actually stored (reflects compaction).
template <typename T>
std::size_t stored_param_count(const TransformerLM<T>& m) {
  std::size_t n = 0;
  for (const auto& [k, v] : m.params) n += v.size();
  return n;
}

// Multiply-accumulate counts of one forward pass over seq_len positions.
struct FlopCount {
  std::uint64_t attention = 0;  // qkv projection, scores, weighted values, output projection
  std::uint64_t mlp = 0;
  std::uint64_t lm_head = 0;
  std::uint64_t total() const { return attention + mlp + lm_head; }
};

inline FlopCount flop_count(const ModelConfig& cfg, std::span<const std::size_t> heads_per_block, std::size_t seq_len) {
  if (seq_len > cfg.max_seq_len) throw std::invalid_argument("flop_count: seq_len exceeds max_seq_len");
  const std::uint64_t S = seq_len, d = cfg.d_model, hd = cfg.head_dim(), ff = cfg.ff();
  FlopCount f;
  for (std::size_t heads : heads_per_block) {
    const std::uint64_t A = heads * hd;
    f.attention += S * d * 3 * A;           // qkv
    f.attention += heads * hd * S * (S + 1);  // causal scores + weighted sum
    f.attention += S * A * d;               // output projection
    f.mlp += 2 * S * d * ff;
  }
  f.lm_head = S * d * cfg.vocab_size;
  return f;
}

template <typename T>
FlopCount flop_count(const TransformerLM<T>& m, std::size_t seq_len) {
  std::vector<std::size_t> heads;
  for (const auto& hs : m.block_heads) heads.push_back(hs.size());
  return flop_count(m.config, heads, seq_len);
}

// ---------------------------------------------------------------------------
// Forward pass on a tape

struct GradMode {
  bool params = false;
  bool gates = false;
};

template <typename T>
struct ForwardPass {
  Var<T> logits;                     // [n_seq*seq_len, vocab]
  std::vector<Var<T>> block_outputs;  // residual stream after each block
  Var<T> gates;
  std::map<std::string, Var<T>> param_vars;
};

// tokens holds n_seq sequences of equal length, back to back.
template <typename T>
ForwardPass<T> forward(GradTape<T>& tape, const TransformerLM<T>& m, std::span<const int> tokens, std::size_t n_seq = 1,
                       GradMode mode = {}) {
  const ModelConfig& c = m.config;
  if (n_seq == 0 || tokens.empty() || tokens.size() % n_seq != 0)
    throw std::invalid_argument("forward: token count " + std::to_string(tokens.size()) + " not divisible into " +
                                std::to_string(n_seq) + " sequences");
  const std::size_t S = tokens.size() / n_seq;
  if (S > c.max_seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary");

  ForwardPass<T> fp;
  for (const auto& [name, p] : m.params) fp.param_vars.emplace(name, tape.param(p, mode.params));
  auto P = [&](const std::string& name) { return fp.param_vars.at(name); };
  fp.gates = tape.param(m.gates, mode.gates);

  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i % S);

  Var<T> h = add(gather_rows(P("wte"), tokens), gather_rows(P("wpe"), std::span<const int>(positions)));
  const std::size_t hd = c.head_dim();
  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    const auto& heads = m.block_heads[b];
    Var<T> a = layer_norm(h, P(block_name(b, "ln1.g")), P(block_name(b, "ln1.b")));
    Var<T> qkv = linear(a, P(block_name(b, "attn.qkv.w")), P(block_name(b, "attn.qkv.b")));
    Var<T> att = causal_attention(qkv, heads.size(), hd, S);
    att = head_gate(att, fp.gates, b, std::span<const int>(heads), hd);
    h = add(h, linear(att, P(block_name(b, "attn.proj.w")), P(block_name(b, "attn.proj.b"))));
    Var<T> u = layer_norm(h, P(block_name(b, "ln2.g")), P(block_name(b, "ln2.b")));
    u = gelu(linear(u, P(block_name(b, "mlp.fc.w")), P(block_name(b, "mlp.fc.b"))));
    h = add(h, linear(u, P(block_name(b, "mlp.proj.w")), P(block_name(b, "mlp.proj.b"))));
    fp.block_outputs.push_back(h);
  }
  fp.logits = linear_tied(layer_norm(h, P("lnf.g"), P("lnf.b")), P("wte"));
  return fp;
}

// Logits [len, vocab] for a single sequence.
template <typename T>
Tensor<T> logits(const TransformerLM<T>& m, std::span<const int> tokens) {
  GradTape<T> tape;
  return forward(tape, m, tokens).logits.value();
}

// ---------------------------------------------------------------------------
// Structural edits

// Shallower copy of `teacher` whose block i comes from teacher block
// floor(i * L_teacher / L_student).
inline std::vector<std::size_t> truncation_sources(std::size_t teacher_blocks, std::size_t student_blocks) {
  if (student_blocks == 0 || student_blocks > teacher_blocks)
    throw std::invalid_argument("truncate: student blocks " + std::to_string(student_blocks) +
                                " must be in [1, " + std::to_string(teacher_blocks) + "]");
  std::vector<std::size_t> src(student_blocks);
  for (std::size_t i = 0; i < student_blocks; ++i) src[i] = i * teacher_blocks / student_blocks;
  return src;
}

template <typename T>
TransformerLM<T> truncate_teacher(const TransformerLM<T>& teacher, std::size_t student_blocks) {
  const auto src = truncation_sources(teacher.config.n_blocks, student_blocks);
  TransformerLM<T> s;
  s.config = teacher.config;
  s.config.n_blocks = student_blocks;
  for (const char* name : {"wte", "wpe", "lnf.g", "lnf.b"}) s.params.emplace(name, teacher.param(name));
  const std::string prefix_leafs[] = {"ln1.g",      "ln1.b",       "attn.qkv.w", "attn.qkv.b", "attn.proj.w", "attn.proj.b",
                                      "ln2.g",      "ln2.b",       "mlp.fc.w",   "mlp.fc.b",   "mlp.proj.w",  "mlp.proj.b"};
  for (std::size_t i = 0; i < student_blocks; ++i) {
    for (const auto& leaf : prefix_leafs) s.params.emplace(block_name(i, leaf), teacher.param(block_name(src[i], leaf)));
    s.block_heads.push_back(teacher.block_heads[src[i]]);
  }
  s.gates = Tensor<T>({student_blocks, s.config.n_heads}, T(1));
  return s;
}

}  // namespace cfair
