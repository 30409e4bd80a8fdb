#pragma once

// Row-major dense kernels shared by the training tape and the incremental
// decoder. Every output row is computed from its own input row with a fixed
// reduction order, so results do not depend on how many rows are processed
// together. Build with -ffp-contract=off to keep that true under FMA.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>

namespace cfair::kern {

namespace detail {

// Rows [i, i+R) of c += a * b, R fixed at compile time so the row loop unrolls.
// Each c element still accumulates over k in increasing order.
template <std::size_t R, typename T>
inline void rows_acc(const T* a, const T* b, T* c, std::size_t i, std::size_t K, std::size_t N) {
  T* cr[R];
  for (std::size_t r = 0; r < R; ++r) cr[r] = c + (i + r) * N;
  for (std::size_t k = 0; k < K; ++k) {
    const T* bk = b + k * N;
    T ak[R];
    for (std::size_t r = 0; r < R; ++r) ak[r] = a[(i + r) * K + k];
    for (std::size_t j = 0; j < N; ++j) {
      const T bkj = bk[j];
      for (std::size_t r = 0; r < R; ++r) cr[r][j] += ak[r] * bkj;
    }
  }
}

}  // namespace detail

// c[M,N] += a[M,K] * b[K,N]
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) detail::rows_acc<4>(a, b, c, i, K, N);
  for (; i < M; ++i) detail::rows_acc<1>(a, b, c, i, K, N);
}

// c[M,N] = a[M,K] * b[K,N] + bias[N]   (bias may be null)
template <typename T>
void matmul(const T* a, const T* b, const T* bias, T* c, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    T* ci = c + i * N;
    if (bias) {
      std::copy(bias, bias + N, ci);
    } else {
      std::fill(ci, ci + N, T(0));
    }
  }
  matmul_acc(a, b, c, M, K, N);
}

// c[K,N] += a[M,K]^T * b[M,N]; each c element accumulates over i in order.
template <typename T>
void matmul_at_acc(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    const T* b0 = b + i * N;
    const T* b1 = b0 + N;
    const T* b2 = b1 + N;
    const T* b3 = b2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a0 = a[i * K + k], a1 = a[(i + 1) * K + k], a2 = a[(i + 2) * K + k], a3 = a[(i + 3) * K + k];
      T* ck = c + k * N;
      for (std::size_t j = 0; j < N; ++j) {
        T acc = ck[j];
        acc += a0 * b0[j];
        acc += a1 * b1[j];
        acc += a2 * b2[j];
        acc += a3 * b3[j];
        ck[j] = acc;
      }
    }
  }
  for (; i < M; ++i) {
    const T* ai = a + i * K;
    const T* bi = b + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = ai[k];
      T* ck = c + k * N;
      for (std::size_t j = 0; j < N; ++j) ck[j] += aik * bi[j];
    }
  }
}

// dst[C,R] = src[R,C]^T
template <typename T>
void transpose(const T* src, T* dst, std::size_t R, std::size_t C) {
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) dst[c * R + r] = src[r * C + c];
}

template <typename T>
void layer_norm_row(const T* x, const T* gamma, const T* beta, T* out, std::size_t n, T eps, T* mean_out,
                    T* rstd_out) {
  T mean = 0;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<T>(n);
  T var = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const T d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(n);
  const T rstd = T(1) / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j) out[j] = (x[j] - mean) * rstd * gamma[j] + beta[j];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

// GPT-2 tanh approximation.
template <typename T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

// Stable softmax of x[0..n) scaled by 1/temperature, written to p.
template <typename T>
void softmax(const T* x, T* p, std::size_t n, T temperature = T(1)) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp((x[j] - mx) / temperature);
    sum += p[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

// log-sum-exp of x/temperature.
template <typename T>
T log_sum_exp(const T* x, std::size_t n, T temperature = T(1)) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp((x[j] - mx) / temperature);
  return mx / temperature + std::log(sum);
}

// One query over n keys. Key/value j start at k + j*stride / v + j*stride.
// p receives the n attention probabilities.
template <typename T>
void attend(const T* q, const T* k, const T* v, std::size_t stride, std::size_t n, std::size_t hd, T scale, T* p,
            T* out) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const T* kj = k + j * stride;
    T s = 0;
    for (std::size_t d = 0; d < hd; ++d) s += q[d] * kj[d];
    p[j] = s * scale;
    mx = std::max(mx, p[j]);
  }
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(p[j] - mx);
    sum += p[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
  std::fill(out, out + hd, T(0));
  for (std::size_t j = 0; j < n; ++j) {
    const T pj = p[j];
    const T* vj = v + j * stride;
    for (std::size_t d = 0; d < hd; ++d) out[d] += pj * vj[d];
  }
}

}  // namespace cfair::kern
