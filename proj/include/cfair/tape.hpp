#pragma once

// Reverse-mode differentiation over a linear tape of coarse tensor ops.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cfair/errors.hpp"
#include "cfair/kernels.hpp"
#include "cfair/tensor.hpp"
#include "cfair/tolerances.hpp"

namespace cfair {

template <typename T>
class GradTape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  GradTape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape; }
};

template <typename T>
class GradTape {
 public:
  using Backward = std::function<void(GradTape&, std::size_t)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }

  // Owned leaf that receives a gradient.
  Var<T> leaf(Tensor<T> v) { return push(std::move(v), true, {}); }

  // Leaf referencing external storage; `p` must outlive the tape and stay put.
  Var<T> param(const Tensor<T>& p, bool requires_grad = true) {
    Node n;
    n.ext = &p;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> push(Tensor<T> v, bool requires_grad, Backward bw) {
    Node n;
    n.owned = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    return n.ext ? *n.ext : n.owned;
  }
  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.owned;
  }

  bool requires_grad(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw UsageError("backward: loss was not recorded on this tape");
    if (backward_done_) throw UsageError("backward called twice on the same tape; re-run the forward pass");
    if (value(loss).size() != 1) throw UsageError("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape));
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    accum(loss.id)[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  bool backward_done() const { return backward_done_; }

  // Gradient of the last backward() loss with respect to v (zeros if unreached).
  Tensor<T> grad(Var<T> v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    const Tensor<T>& val = value(v);
    if (n.grad.empty()) return Tensor<T>(val.shape);
    return Tensor<T>(val.shape, n.grad);
  }

  std::span<const T> grad_view(std::size_t id) const { return nodes_[id].grad; }

  // Gradient buffer for node id, zero-filled on first access.
  std::vector<T>& accum(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
    return n.grad;
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ext = nullptr;
    bool requires_grad = false;
    Backward backward;
    std::vector<T> grad;
  };

  void check_owner(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <typename T>
GradTape<T>& common_tape(std::initializer_list<Var<T>> vars) {
  GradTape<T>* t = vars.begin()->tape;
  for (const auto& v : vars)
    if (v.tape != t) throw UsageError("operands recorded on different tapes");
  return *t;
}

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars)
    if (v.tape->requires_grad(v)) return true;
  return false;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::common_tape({a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.shape == bv.shape, "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return tape.push(std::move(out), detail::any_grad({a, b}), [a = a.id, b = b.id](GradTape<T>& t, std::size_t self) {
    const auto g = t.grad_view(self);
    for (std::size_t id : {a, b}) {
      if (!t.requires_grad(id)) continue;
      auto& ga = t.accum(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  const auto& av = a.value();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return a.tape->push(std::move(out), a.tape->requires_grad(a), [a = a.id, c](GradTape<T>& t, std::size_t self) {
    const auto g = t.grad_view(self);
    auto& ga = t.accum(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T s = 0;
  for (T x : av.data) s += x;
  return a.tape->push(Tensor<T>({1}, {s}), a.tape->requires_grad(a), [a = a.id](GradTape<T>& t, std::size_t self) {
    const T g = t.grad_view(self)[0];
    auto& ga = t.accum(a);
    for (auto& x : ga) x += g;
  });
}

// Σ w_i · s_i over scalar terms.
template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> terms, std::span<const T> weights) {
  detail::require(!terms.empty() && terms.size() == weights.size(), "weighted_sum: bad arity");
  GradTape<T>& tape = *terms[0].tape;
  T s = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].tape != &tape) throw UsageError("operands recorded on different tapes");
    detail::require(terms[i].value().size() == 1, "weighted_sum: terms must be scalars");
    s += weights[i] * terms[i].value()[0];
    rg = rg || tape.requires_grad(terms[i]);
    ids.push_back(terms[i].id);
  }
  std::vector<T> w(weights.begin(), weights.end());
  return tape.push(Tensor<T>({1}, {s}), rg, [ids, w](GradTape<T>& t, std::size_t self) {
    const T g = t.grad_view(self)[0];
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (t.requires_grad(ids[i])) t.accum(ids[i])[0] += g * w[i];
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kern::gelu(xv[i]);
  return x.tape->push(std::move(out), x.tape->requires_grad(x), [x = x.id](GradTape<T>& t, std::size_t self) {
    const auto g = t.grad_view(self);
    const auto& xv = t.value(x);
    auto& gx = t.accum(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kern::gelu_grad(xv[i]);
  });
}

// ---------------------------------------------------------------------------
// Dense layers

// Rows of `table` selected by ids: out[i] = table[ids[i]].
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  detail::require(tv.rank() == 2, "gather_rows: table must be rank 2");
  const std::size_t C = tv.cols();
  Tensor<T> out({ids.size(), C});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    std::copy_n(tv.data.data() + static_cast<std::size_t>(ids[i]) * C, C, out.data.data() + i * C);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->push(std::move(out), table.tape->requires_grad(table),
                          [table = table.id, idv = std::move(idv), C](GradTape<T>& t, std::size_t self) {
                            const auto g = t.grad_view(self);
                            auto& gt = t.accum(table);
                            for (std::size_t i = 0; i < idv.size(); ++i) {
                              T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * C;
                              for (std::size_t c = 0; c < C; ++c) dst[c] += g[i * C + c];
                            }
                          });
}

// x[M,K] · W[K,N] + b[N]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  auto& tape = detail::common_tape({x, w, b});
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  detail::require(xv.rank() == 2 && wv.rank() == 2 && xv.shape[1] == wv.shape[0] && bv.size() == wv.shape[1],
                  "linear: incompatible shapes " + shape_str(xv.shape) + " x " + shape_str(wv.shape));
  const std::size_t M = xv.shape[0], K = xv.shape[1], N = wv.shape[1];
  Tensor<T> out({M, N});
  kern::matmul(xv.data.data(), wv.data.data(), bv.data.data(), out.data.data(), M, K, N);
  return tape.push(std::move(out), detail::any_grad({x, w, b}),
                   [x = x.id, w = w.id, b = b.id, M, K, N](GradTape<T>& t, std::size_t self) {
                     const T* g = t.grad_view(self).data();
                     if (t.requires_grad(x)) {
                       std::vector<T> wt(K * N);
                       kern::transpose(t.value(w).data.data(), wt.data(), K, N);
                       kern::matmul_acc(g, wt.data(), t.accum(x).data(), M, N, K);
                     }
                     if (t.requires_grad(w)) kern::matmul_at_acc(t.value(x).data.data(), g, t.accum(w).data(), M, K, N);
                     if (t.requires_grad(b)) {
                       auto& gb = t.accum(b);
                       for (std::size_t i = 0; i < M; ++i)
                         for (std::size_t j = 0; j < N; ++j) gb[j] += g[i * N + j];
                     }
                   });
}

// x[M,D] · E[V,D]^T: output head tied to an embedding table.
template <typename T>
Var<T> linear_tied(Var<T> x, Var<T> e) {
  auto& tape = detail::common_tape({x, e});
  const auto& xv = x.value();
  const auto& ev = e.value();
  detail::require(xv.rank() == 2 && ev.rank() == 2 && xv.shape[1] == ev.shape[1],
                  "linear_tied: incompatible shapes " + shape_str(xv.shape) + " x " + shape_str(ev.shape) + "^T");
  const std::size_t M = xv.shape[0], D = xv.shape[1], V = ev.shape[0];
  std::vector<T> et(D * V);
  kern::transpose(ev.data.data(), et.data(), V, D);
  Tensor<T> out({M, V});
  kern::matmul(xv.data.data(), et.data(), static_cast<const T*>(nullptr), out.data.data(), M, D, V);
  return tape.push(std::move(out), detail::any_grad({x, e}), [x = x.id, e = e.id, M, D, V](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad_view(self).data();
    if (t.requires_grad(x)) kern::matmul_acc(g, t.value(e).data.data(), t.accum(x).data(), M, V, D);
    if (t.requires_grad(e)) kern::matmul_at_acc(g, t.value(x).data.data(), t.accum(e).data(), M, V, D);
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  auto& tape = detail::common_tape({x, gamma, beta});
  const auto& xv = x.value();
  detail::require(xv.rank() == 2 && gamma.value().size() == xv.shape[1] && beta.value().size() == xv.shape[1],
                  "layer_norm: incompatible shapes");
  const std::size_t M = xv.shape[0], N = xv.shape[1];
  Tensor<T> out({M, N});
  std::vector<T> stats(2 * M);
  const T eps = static_cast<T>(Tolerances::layer_norm_eps);
  for (std::size_t i = 0; i < M; ++i)
    kern::layer_norm_row(xv.data.data() + i * N, gamma.value().data.data(), beta.value().data.data(),
                         out.data.data() + i * N, N, eps, &stats[2 * i], &stats[2 * i + 1]);
  return tape.push(std::move(out), detail::any_grad({x, gamma, beta}),
                   [x = x.id, g = gamma.id, b = beta.id, M, N, stats = std::move(stats)](GradTape<T>& t, std::size_t self) {
                     const T* dy = t.grad_view(self).data();
                     const T* xv = t.value(x).data.data();
                     const T* gv = t.value(g).data.data();
                     T* dx = t.requires_grad(x) ? t.accum(x).data() : nullptr;
                     T* dg = t.requires_grad(g) ? t.accum(g).data() : nullptr;
                     T* db = t.requires_grad(b) ? t.accum(b).data() : nullptr;
                     std::vector<T> xhat(N), dxhat(N);
                     for (std::size_t i = 0; i < M; ++i) {
                       const T mean = stats[2 * i], rstd = stats[2 * i + 1];
                       T m1 = 0, m2 = 0;
                       for (std::size_t j = 0; j < N; ++j) {
                         xhat[j] = (xv[i * N + j] - mean) * rstd;
                         dxhat[j] = dy[i * N + j] * gv[j];
                         m1 += dxhat[j];
                         m2 += dxhat[j] * xhat[j];
                         if (dg) dg[j] += dy[i * N + j] * xhat[j];
                         if (db) db[j] += dy[i * N + j];
                       }
                       if (dx) {
                         m1 /= static_cast<T>(N);
                         m2 /= static_cast<T>(N);
                         for (std::size_t j = 0; j < N; ++j) dx[i * N + j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Attention

// qkv[M, 3A] holds [Q | K | V] column blocks, A = n_heads * head_dim; rows are
// n_seq sequences of seq_len positions each. Returns per-head outputs [M, A].
template <typename T>
Var<T> causal_attention(Var<T> qkv, std::size_t n_heads, std::size_t head_dim, std::size_t seq_len) {
  const auto& xv = qkv.value();
  const std::size_t A = n_heads * head_dim;
  detail::require(xv.rank() == 2 && xv.shape[1] == 3 * A && seq_len > 0 && xv.shape[0] % seq_len == 0,
                  "causal_attention: qkv shape " + shape_str(xv.shape) + " incompatible with heads/seq_len");
  const std::size_t M = xv.shape[0], n_seq = M / seq_len, W = 3 * A;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  Tensor<T> out({M, A});
  std::vector<T> probs(n_seq * n_heads * seq_len * seq_len, T(0));
  for (std::size_t s = 0; s < n_seq; ++s) {
    const T* base = xv.data.data() + s * seq_len * W;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t qo = h * head_dim, ko = A + h * head_dim, vo = 2 * A + h * head_dim;
      for (std::size_t i = 0; i < seq_len; ++i) {
        T* p = probs.data() + ((s * n_heads + h) * seq_len + i) * seq_len;
        kern::attend(base + i * W + qo, base + ko, base + vo, W, i + 1, head_dim, scale, p,
                     out.data.data() + (s * seq_len + i) * A + h * head_dim);
      }
    }
  }
  return qkv.tape->push(
      std::move(out), qkv.tape->requires_grad(qkv),
      [x = qkv.id, n_heads, head_dim, seq_len, n_seq, A, W, scale, probs = std::move(probs)](GradTape<T>& t,
                                                                                              std::size_t self) {
        const T* dout = t.grad_view(self).data();
        const T* xv = t.value(x).data.data();
        T* dx = t.accum(x).data();
        std::vector<T> dp(seq_len);
        for (std::size_t s = 0; s < n_seq; ++s) {
          const T* base = xv + s * seq_len * W;
          T* dbase = dx + s * seq_len * W;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t qo = h * head_dim, ko = A + h * head_dim, vo = 2 * A + h * head_dim;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const T* p = probs.data() + ((s * n_heads + h) * seq_len + i) * seq_len;
              const T* go = dout + (s * seq_len + i) * A + h * head_dim;
              T dot = 0;
              for (std::size_t j = 0; j <= i; ++j) {
                const T* vj = base + j * W + vo;
                T* dvj = dbase + j * W + vo;
                T d = 0;
                for (std::size_t c = 0; c < head_dim; ++c) {
                  d += go[c] * vj[c];
                  dvj[c] += p[j] * go[c];
                }
                dp[j] = d;
                dot += p[j] * d;
              }
              const T* qi = base + i * W + qo;
              T* dqi = dbase + i * W + qo;
              for (std::size_t j = 0; j <= i; ++j) {
                const T ds = p[j] * (dp[j] - dot) * scale;
                const T* kj = base + j * W + ko;
                T* dkj = dbase + j * W + ko;
                for (std::size_t c = 0; c < head_dim; ++c) {
                  dqi[c] += ds * kj[c];
                  dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

// Multiplies head slot s of x[M, n_slots*head_dim] by gates[block, head_ids[s]].
template <typename T>
Var<T> head_gate(Var<T> x, Var<T> gates, std::size_t block, std::span<const int> head_ids, std::size_t head_dim) {
  auto& tape = detail::common_tape({x, gates});
  const auto& xv = x.value();
  const auto& gv = gates.value();
  const std::size_t S = head_ids.size(), A = S * head_dim;
  detail::require(xv.rank() == 2 && xv.shape[1] == A && gv.rank() == 2 && block < gv.shape[0],
                  "head_gate: incompatible shapes");
  const std::size_t H = gv.shape[1], M = xv.shape[0];
  std::vector<std::size_t> gidx(S);
  for (std::size_t s = 0; s < S; ++s) {
    detail::require(head_ids[s] >= 0 && static_cast<std::size_t>(head_ids[s]) < H, "head_gate: head id out of range");
    gidx[s] = block * H + static_cast<std::size_t>(head_ids[s]);
  }
  Tensor<T> out({M, A});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t s = 0; s < S; ++s) {
      const T g = gv[gidx[s]];
      for (std::size_t c = 0; c < head_dim; ++c) out[i * A + s * head_dim + c] = g * xv[i * A + s * head_dim + c];
    }
  return tape.push(std::move(out), detail::any_grad({x, gates}),
                   [x = x.id, gt = gates.id, gidx = std::move(gidx), M, A, head_dim](GradTape<T>& t, std::size_t self) {
                     const T* dy = t.grad_view(self).data();
                     const T* xv = t.value(x).data.data();
                     const T* gv = t.value(gt).data.data();
                     T* dx = t.requires_grad(x) ? t.accum(x).data() : nullptr;
                     T* dg = t.requires_grad(gt) ? t.accum(gt).data() : nullptr;
                     for (std::size_t s = 0; s < gidx.size(); ++s) {
                       T acc = 0;
                       for (std::size_t i = 0; i < M; ++i)
                         for (std::size_t c = 0; c < head_dim; ++c) {
                           const std::size_t k = i * A + s * head_dim + c;
                           if (dx) dx[k] += gv[gidx[s]] * dy[k];
                           acc += dy[k] * xv[k];
                         }
                       if (dg) dg[gidx[s]] += acc;
                     }
                   });
}

}  // namespace cfair
