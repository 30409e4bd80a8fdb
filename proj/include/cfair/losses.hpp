#pragma once

// Softmax-with-temperature, hard-label cross-entropy, the temperature-scaled
// soft-target divergence, the hidden-state cosine term, and their weighted
// combination used for distillation.

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cfair/tape.hpp"

namespace cfair {

namespace detail {

inline void check_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw std::invalid_argument("temperature must be positive, got " + std::to_string(t));
}

template <typename T>
void check_targets(std::span<const int> targets, std::size_t rows, std::size_t vocab) {
  if (targets.size() != rows)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(rows) + " rows");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(vocab));
}

// KL(p_teacher || p_student) for one row at temperature tau, with the
// student's softmax written to ps.
template <typename T>
T kl_row(const T* s, const T* t, std::size_t n, T tau, T* ps, T* pt) {
  kern::softmax(s, ps, n, tau);
  kern::softmax(t, pt, n, tau);
  const T lse_s = kern::log_sum_exp(s, n, tau);
  const T lse_t = kern::log_sum_exp(t, n, tau);
  T kl = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (pt[j] <= T(0)) continue;
    const T log_pt = t[j] / tau - lse_t;
    const T log_ps = s[j] / tau - lse_s;
    kl += pt[j] * (log_pt - log_ps);
  }
  return std::max(kl, T(0));
}

template <typename T>
T cosine_row(const T* a, const T* b, std::size_t n, T* na_out, T* nb_out, T* dot_out) {
  T dot = 0, na = 0, nb = 0;
  for (std::size_t j = 0; j < n; ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  *na_out = na;
  *nb_out = nb;
  *dot_out = dot;
  const T denom = std::max(na * nb, static_cast<T>(Tolerances::cosine_eps));
  return std::clamp(dot / denom, T(-1), T(1));
}

}  // namespace detail

template <typename T>
std::vector<T> softmax_t(std::span<const T> logits, T temperature) {
  detail::check_temperature(static_cast<double>(temperature));
  if (logits.empty()) return {};
  std::vector<T> p(logits.size());
  kern::softmax(logits.data(), p.data(), logits.size(), temperature);
  return p;
}

template <typename T>
std::vector<T> softmax_t(const std::vector<T>& logits, T temperature) {
  return softmax_t(std::span<const T>(logits), temperature);
}

// Mean next-token negative log-likelihood (nats) of logits[M,V] against targets.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
  const auto& lv = logits.value();
  if (lv.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be rank 2");
  const std::size_t M = lv.shape[0], V = lv.shape[1];
  detail::check_targets<T>(targets, M, V);
  T total = 0;
  for (std::size_t i = 0; i < M; ++i) {
    const T* row = lv.data.data() + i * V;
    total += kern::log_sum_exp(row, V) - row[targets[i]];
  }
  const T loss = std::max(total / static_cast<T>(M), T(0));
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape->push(Tensor<T>({1}, {loss}), logits.tape->requires_grad(logits),
                           [x = logits.id, tg = std::move(tg), M, V](GradTape<T>& t, std::size_t self) {
                             const T g = t.grad_view(self)[0] / static_cast<T>(M);
                             const T* lv = t.value(x).data.data();
                             T* dx = t.accum(x).data();
                             std::vector<T> p(V);
                             for (std::size_t i = 0; i < M; ++i) {
                               kern::softmax(lv + i * V, p.data(), V);
                               p[tg[i]] -= T(1);
                               for (std::size_t j = 0; j < V; ++j) dx[i * V + j] += g * p[j];
                             }
                           });
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  GradTape<T> tape;
  return cross_entropy(tape.param(logits, false), targets).value()[0];
}

// T² · mean_rows KL(softmax(teacher/T) || softmax(student/T)). The teacher
// side is a constant.
template <typename T>
Var<T> kd_divergence(Var<T> student, const Tensor<T>& teacher, T temperature) {
  detail::check_temperature(static_cast<double>(temperature));
  const auto& sv = student.value();
  if (sv.shape != teacher.shape || sv.rank() != 2)
    throw std::invalid_argument("kd_divergence: shape mismatch " + shape_str(sv.shape) + " vs " +
                                shape_str(teacher.shape));
  const std::size_t M = sv.shape[0], V = sv.shape[1];
  std::vector<T> ps(V), pt(V);
  T total = 0;
  for (std::size_t i = 0; i < M; ++i)
    total += detail::kl_row(sv.data.data() + i * V, teacher.data.data() + i * V, V, temperature, ps.data(), pt.data());
  const T loss = temperature * temperature * total / static_cast<T>(M);
  return student.tape->push(Tensor<T>({1}, {loss}), student.tape->requires_grad(student),
                            [s = student.id, tv = &teacher, M, V, temperature](GradTape<T>& t, std::size_t self) {
                              // d/ds of T² KL = T (p_s - p_t)
                              const T g = t.grad_view(self)[0] * temperature / static_cast<T>(M);
                              const T* sv = t.value(s).data.data();
                              T* ds = t.accum(s).data();
                              std::vector<T> ps(V), pt(V);
                              for (std::size_t i = 0; i < M; ++i) {
                                kern::softmax(sv + i * V, ps.data(), V, temperature);
                                kern::softmax(tv->data.data() + i * V, pt.data(), V, temperature);
                                for (std::size_t j = 0; j < V; ++j) ds[i * V + j] += g * (ps[j] - pt[j]);
                              }
                            });
}

template <typename T>
T kd_divergence(const Tensor<T>& student, const Tensor<T>& teacher, T temperature) {
  GradTape<T> tape;
  return kd_divergence(tape.param(student, false), teacher, temperature).value()[0];
}

// mean_rows (1 - cos(a_i, b_i)); b is a constant.
template <typename T>
Var<T> cosine_loss(Var<T> a, const Tensor<T>& b) {
  const auto& av = a.value();
  if (av.shape != b.shape || av.rank() != 2)
    throw std::invalid_argument("cosine_loss: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(b.shape));
  const std::size_t M = av.shape[0], N = av.shape[1];
  T total = 0;
  for (std::size_t i = 0; i < M; ++i) {
    T na, nb, dot;
    total += T(1) - detail::cosine_row(av.data.data() + i * N, b.data.data() + i * N, N, &na, &nb, &dot);
  }
  return a.tape->push(Tensor<T>({1}, {total / static_cast<T>(M)}), a.tape->requires_grad(a),
                      [x = a.id, bv = &b, M, N](GradTape<T>& t, std::size_t self) {
                        const T g = t.grad_view(self)[0] / static_cast<T>(M);
                        const T* av = t.value(x).data.data();
                        T* da = t.accum(x).data();
                        for (std::size_t i = 0; i < M; ++i) {
                          const T* ai = av + i * N;
                          const T* bi = bv->data.data() + i * N;
                          T na, nb, dot;
                          detail::cosine_row(ai, bi, N, &na, &nb, &dot);
                          const T denom = na * nb;
                          if (denom < static_cast<T>(Tolerances::cosine_eps)) continue;
                          const T cos = dot / denom;
                          for (std::size_t j = 0; j < N; ++j)
                            da[i * N + j] -= g * (bi[j] / denom - cos * ai[j] / (na * na));
                        }
                      });
}

template <typename T>
T cosine_loss(const Tensor<T>& a, const Tensor<T>& b) {
  GradTape<T> tape;
  return cosine_loss(tape.param(a, false), b).value()[0];
}

// Weights, temperature, and the most recent value of each distillation term.
struct DistillLossParts {
  double l_kd = 0.0;
  double l_lm = 0.0;
  double l_cos = 0.0;
  double temperature = 2.0;
  double alpha_kd = 5.0;
  double alpha_lm = 2.0;
  double alpha_cos = 1.0;

  double total() const { return alpha_kd * l_kd + alpha_lm * l_lm + alpha_cos * l_cos; }

  void validate() const {
    detail::check_temperature(temperature);
    if (alpha_kd < 0 || alpha_lm < 0 || alpha_cos < 0)
      throw std::invalid_argument("distillation loss weights must be non-negative");
  }
};

// Weighted distillation objective. Terms with zero weight are evaluated for
// reporting but kept off the gradient path.
template <typename T>
Var<T> distill_loss(Var<T> student_logits, const Tensor<T>& teacher_logits, std::span<const int> targets,
                    Var<T> student_hidden, const Tensor<T>& teacher_hidden, DistillLossParts& parts) {
  parts.validate();
  GradTape<T>& tape = *student_logits.tape;
  const T temp = static_cast<T>(parts.temperature);

  auto detached = [&](Var<T> v) { return tape.constant(v.value()); };

  std::vector<Var<T>> terms;
  std::vector<T> weights;
  auto add_term = [&](double alpha, Var<T> term) {
    if (alpha == 0.0) return;
    terms.push_back(term);
    weights.push_back(static_cast<T>(alpha));
  };

  Var<T> kd = kd_divergence(parts.alpha_kd == 0.0 ? detached(student_logits) : student_logits, teacher_logits, temp);
  Var<T> lm = cross_entropy(parts.alpha_lm == 0.0 ? detached(student_logits) : student_logits, targets);
  Var<T> cs = cosine_loss(parts.alpha_cos == 0.0 ? detached(student_hidden) : student_hidden, teacher_hidden);
  parts.l_kd = static_cast<double>(kd.value()[0]);
  parts.l_lm = static_cast<double>(lm.value()[0]);
  parts.l_cos = static_cast<double>(cs.value()[0]);
  add_term(parts.alpha_kd, kd);
  add_term(parts.alpha_lm, lm);
  add_term(parts.alpha_cos, cs);
  if (terms.empty()) return tape.constant(Tensor<T>({1}, {T(0)}));
  if (terms.size() == 1 && weights[0] == T(1)) return terms[0];
  return weighted_sum<T>(terms, weights);
}

template <typename T>
std::pair<double, DistillLossParts> distill_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                                                 std::span<const int> targets, const Tensor<T>& student_hidden,
                                                 const Tensor<T>& teacher_hidden, DistillLossParts parts) {
  GradTape<T> tape;
  Var<T> total = distill_loss(tape.param(student_logits, false), teacher_logits, targets,
                              tape.param(student_hidden, false), teacher_hidden, parts);
  return {static_cast<double>(total.value()[0]), parts};
}

}  // namespace cfair
