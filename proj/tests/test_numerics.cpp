#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "cfair.hpp"

using namespace cfair;

namespace {

// Reference log-softmax written out directly from its definition.
std::vector<double> ref_log_softmax(const std::vector<double>& x, double T) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v / T);
  double z = 0;
  for (double v : x) z += std::exp(v / T - mx);
  std::vector<double> out;
  for (double v : x) out.push_back(v / T - mx - std::log(z));
  return out;
}

Tensor<double> random_tensor(SplitMix64& rng, Shape s, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& x : t.data) x = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Softmax, EqualLogitsAreUniform) {
  for (double T : {0.5, 1.0, 7.0}) {
    const auto p = softmax_t(std::vector<double>{4.2, 4.2, 4.2}, T);
    for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
  }
}

TEST(Softmax, HandEvaluatedTemperatureTwo) {
  const auto p = softmax_t(std::vector<double>{1.0, 2.0}, 2.0);
  EXPECT_NEAR(p[0], 0.37754, 1e-4);
  EXPECT_NEAR(p[1], 0.62246, 1e-4);
}

TEST(Softmax, SaturatesWithoutOverflow) {
  const auto p = softmax_t(std::vector<double>{0.0, -1e9}, 1.0);
  EXPECT_NEAR(p[0], 1.0, 1e-6);
  EXPECT_NEAR(p[1], 0.0, 1e-6);
  const auto q = softmax_t(std::vector<float>{1e30f, 0.0f}, 1.0f);
  EXPECT_TRUE(std::isfinite(q[0]) && std::isfinite(q[1]));
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  EXPECT_THROW(softmax_t(std::vector<double>{1, 2}, 0.0), std::invalid_argument);
  EXPECT_THROW(softmax_t(std::vector<double>{1, 2}, -1.0), std::invalid_argument);
}

TEST(Softmax, ProbabilityVectorForRandomInputs) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> x(n);
    for (auto& v : x) v = 50.0 * rng.normal();
    const double T = std::exp(std::log(0.1) + rng.uniform() * (std::log(100.0) - std::log(0.1)));
    const auto p = softmax_t(x, T);
    double s = 0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, Tolerances::softmax_sum);
    const auto ref = ref_log_softmax(x, T);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p[i], std::exp(ref[i]), 1e-12);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tensor<double> lg({3, 50}, 0.25);
  const std::vector<int> t{0, 7, 49};
  EXPECT_NEAR(cross_entropy(lg, std::span<const int>(t)), std::log(50.0), 1e-12);
}

TEST(CrossEntropy, NearOneHot) {
  Tensor<double> lg({1, 5}, 0.0);
  lg[2] = 30.0;
  const std::vector<int> t{2};
  EXPECT_NEAR(cross_entropy(lg, std::span<const int>(t)), 0.0, 1e-9);
}

TEST(CrossEntropy, HandEvaluated) {
  Tensor<double> lg({1, 3}, {1.0, 2.0, 3.0});
  const std::vector<int> t{0};
  EXPECT_NEAR(cross_entropy(lg, std::span<const int>(t)), 2.40761, 1e-4);
}

TEST(CrossEntropy, OutOfRangeTarget) {
  Tensor<double> lg({1, 3}, 0.0);
  const std::vector<int> bad{3}, neg{-1};
  EXPECT_THROW(cross_entropy(lg, std::span<const int>(bad)), std::out_of_range);
  EXPECT_THROW(cross_entropy(lg, std::span<const int>(neg)), std::out_of_range);
}

TEST(CrossEntropy, MatchesDefinitionOnRandomRows) {
  SplitMix64 rng(5);
  const auto lg = random_tensor(rng, {6, 9}, 3.0);
  std::vector<int> t(6);
  for (auto& v : t) v = static_cast<int>(rng.below(9));
  double ref = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    const auto ls = ref_log_softmax({lg.data.begin() + r * 9, lg.data.begin() + (r + 1) * 9}, 1.0);
    ref -= ls[t[r]];
  }
  EXPECT_NEAR(cross_entropy(lg, std::span<const int>(t)), ref / 6.0, 1e-12);
}

TEST(KdDivergence, IdenticalIsZero) {
  SplitMix64 rng(2);
  const auto a = random_tensor(rng, {4, 7});
  for (double T : {0.5, 1.0, 2.0, 10.0}) EXPECT_NEAR(kd_divergence(a, a, T), 0.0, 1e-9);
}

TEST(KdDivergence, HandEvaluated) {
  Tensor<double> teacher({1, 2}, {0.0, 0.0}), student({1, 2}, {1.0, 0.0});
  EXPECT_NEAR(kd_divergence(student, teacher, 1.0), 0.12011, 1e-4);
}

TEST(KdDivergence, TemperatureSquaredScaling) {
  SplitMix64 rng(3);
  const auto s = random_tensor(rng, {3, 5}), t = random_tensor(rng, {3, 5});
  const double v1 = kd_divergence(s, t, 1.0), v2 = kd_divergence(s, t, 2.0);
  EXPECT_GE(v1, 0.0);
  EXPECT_GE(v2, 0.0);
  double kl = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    const std::vector<double> sr(s.data.begin() + r * 5, s.data.begin() + (r + 1) * 5);
    const std::vector<double> tr(t.data.begin() + r * 5, t.data.begin() + (r + 1) * 5);
    const auto ls = ref_log_softmax(sr, 2.0), lt = ref_log_softmax(tr, 2.0);
    for (std::size_t j = 0; j < 5; ++j) kl += std::exp(lt[j]) * (lt[j] - ls[j]);
  }
  EXPECT_NEAR(v2, 4.0 * kl / 3.0, 1e-12);
}

TEST(KdDivergence, ZeroOnlyForRowConstantShifts) {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_tensor(rng, {2, 6});
    Tensor<double> b = a;
    const bool shift = trial % 2 == 0;
    for (std::size_t r = 0; r < 2; ++r) {
      const double c = 5.0 * rng.normal();
      for (std::size_t j = 0; j < 6; ++j) b[r * 6 + j] += shift ? c : 0.3 * rng.normal();
    }
    const double v = kd_divergence(a, b, 1.5);
    if (shift) EXPECT_NEAR(v, 0.0, 1e-10);
    else EXPECT_GT(v, 1e-8);
  }
}

TEST(KdDivergence, ShapeMismatch) {
  Tensor<double> a({2, 3}), b({2, 4});
  EXPECT_THROW(kd_divergence(a, b, 1.0), std::invalid_argument);
}

TEST(CosineLoss, RangeAndIdentity) {
  SplitMix64 rng(6);
  const auto a = random_tensor(rng, {5, 8});
  EXPECT_NEAR(cosine_loss(a, a), 0.0, 1e-12);
  Tensor<double> neg = a;
  for (auto& x : neg.data) x = -x;
  EXPECT_NEAR(cosine_loss(a, neg), 2.0, 1e-12);
  for (int i = 0; i < 50; ++i) {
    const double v = cosine_loss(random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
  }
}

// Straight-line evaluation of the three distillation terms.
TEST(DistillLoss, MatchesStraightLineOracle) {
  SplitMix64 rng(7);
  const std::size_t M = 4, V = 6, D = 5;
  const auto sl = random_tensor(rng, {M, V}, 2.0), tl = random_tensor(rng, {M, V}, 2.0);
  const auto sh = random_tensor(rng, {M, D}), th = random_tensor(rng, {M, D});
  std::vector<int> targets(M);
  for (auto& t : targets) t = static_cast<int>(rng.below(V));
  const double T = 2.0;

  double kd = 0, lm = 0, cs = 0;
  for (std::size_t r = 0; r < M; ++r) {
    std::vector<double> s(V), t(V);
    for (std::size_t j = 0; j < V; ++j) s[j] = sl[r * V + j], t[j] = tl[r * V + j];
    const auto lsT = ref_log_softmax(s, T), ltT = ref_log_softmax(t, T), ls1 = ref_log_softmax(s, 1.0);
    for (std::size_t j = 0; j < V; ++j) kd += std::exp(ltT[j]) * (ltT[j] - lsT[j]);
    lm -= ls1[targets[r]];
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < D; ++j) {
      dot += sh[r * D + j] * th[r * D + j];
      na += sh[r * D + j] * sh[r * D + j];
      nb += th[r * D + j] * th[r * D + j];
    }
    cs += 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
  }
  kd = T * T * kd / M;
  lm /= M;
  cs /= M;

  DistillLossParts parts;
  parts.alpha_kd = 5, parts.alpha_lm = 2, parts.alpha_cos = 1, parts.temperature = T;
  const auto [total, filled] = distill_loss(sl, tl, std::span<const int>(targets), sh, th, parts);
  EXPECT_NEAR(filled.l_kd, kd, 1e-12);
  EXPECT_NEAR(filled.l_lm, lm, 1e-12);
  EXPECT_NEAR(filled.l_cos, cs, 1e-12);
  EXPECT_NEAR(total, 5 * kd + 2 * lm + cs, 1e-11);
  EXPECT_NEAR(total, filled.total(), 1e-11);
}

TEST(DistillLoss, HardLossOnlyReducesToCrossEntropy) {
  SplitMix64 rng(8);
  const auto sl = random_tensor(rng, {3, 4}), tl = random_tensor(rng, {3, 4});
  const auto sh = random_tensor(rng, {3, 2}), th = random_tensor(rng, {3, 2});
  const std::vector<int> targets{1, 0, 3};
  DistillLossParts parts;
  parts.alpha_kd = 0, parts.alpha_lm = 1, parts.alpha_cos = 0;
  const auto [total, filled] = distill_loss(sl, tl, std::span<const int>(targets), sh, th, parts);
  EXPECT_EQ(total, cross_entropy(sl, std::span<const int>(targets)));
}

TEST(DistillLoss, PerfectStudentIsZero) {
  SplitMix64 rng(9);
  const auto l = random_tensor(rng, {3, 4}), h = random_tensor(rng, {3, 5});
  const std::vector<int> targets{1, 0, 3};
  DistillLossParts parts;
  parts.alpha_kd = 1, parts.alpha_lm = 0, parts.alpha_cos = 1;
  EXPECT_NEAR(distill_loss(l, l, std::span<const int>(targets), h, h, parts).first, 0.0, 1e-8);
}

TEST(DistillLoss, ShiftInvariantInLogits) {
  SplitMix64 rng(10);
  auto sl = random_tensor(rng, {3, 4});
  auto tl = random_tensor(rng, {3, 4});
  const auto sh = random_tensor(rng, {3, 2}), th = random_tensor(rng, {3, 2});
  const std::vector<int> targets{2, 2, 0};
  const double base = distill_loss(sl, tl, std::span<const int>(targets), sh, th, DistillLossParts{}).first;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) sl[r * 4 + j] += 3.0 * static_cast<double>(r + 1), tl[r * 4 + j] -= 1.5;
  EXPECT_NEAR(distill_loss(sl, tl, std::span<const int>(targets), sh, th, DistillLossParts{}).first, base, 1e-10);
}

TEST(DistillLoss, RejectsNegativeWeights) {
  Tensor<double> l({1, 2}), h({1, 2}, 1.0);
  const std::vector<int> t{0};
  DistillLossParts parts;
  parts.alpha_cos = -1;
  EXPECT_THROW(distill_loss(l, l, std::span<const int>(t), h, h, parts), std::invalid_argument);
}

TEST(Tape, SumGivesOnes) {
  GradTape<double> tape;
  auto p = tape.leaf(Tensor<double>({2, 3}, 0.7));
  tape.backward(sum(p));
  for (double g : tape.grad(p).data) EXPECT_EQ(g, 1.0);
}

TEST(Tape, UnreachedLeafHasZeroGradient) {
  GradTape<double> tape;
  auto p = tape.leaf(Tensor<double>({3}, 1.0));
  auto q = tape.leaf(Tensor<double>({3}, 2.0));
  tape.backward(sum(q));
  const auto g = tape.grad(p);
  EXPECT_EQ(g.shape, Shape{3});
  for (double v : g.data) EXPECT_EQ(v, 0.0);
}

TEST(Tape, UsageErrors) {
  GradTape<double> a, b;
  auto x = a.leaf(Tensor<double>({2}, 1.0));
  auto y = b.leaf(Tensor<double>({2}, 1.0));
  EXPECT_THROW(b.backward(sum(x)), UsageError);
  EXPECT_THROW(a.backward(x), UsageError);  // not a scalar
  auto s = sum(x);
  a.backward(s);
  EXPECT_THROW(a.backward(s), UsageError);
  EXPECT_THROW(add(x, y), UsageError);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::map<std::string, Tensor<double>> params{{"w", Tensor<double>({3}, {1.0, -2.0, 0.5})}};
  const auto before = params;
  std::map<std::string, Tensor<double>> grads{{"w", Tensor<double>({3}, 0.0)}};
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) adam_step(params, grads, st, 0.1, AdamConfig{});
  EXPECT_EQ(params.at("w"), before.at("w"));
}

TEST(Adam, FirstStepHandEvaluated) {
  // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; step = lr * 1 / (1 + eps).
  std::map<std::string, Tensor<double>> params{{"p", Tensor<double>({1}, {0.0})}};
  std::map<std::string, Tensor<double>> grads{{"p", Tensor<double>({1}, {1.0})}};
  AdamState<double> st;
  adam_step(params, grads, st, 0.1, AdamConfig{});
  EXPECT_NEAR(params.at("p")[0], -0.1, 1e-9);
}

TEST(Adam, ConvergesOnQuadratic) {
  std::map<std::string, Tensor<double>> params{{"p", Tensor<double>({1}, {0.0})}};
  AdamState<double> st;
  for (int i = 0; i < 1000; ++i) {
    std::map<std::string, Tensor<double>> grads{{"p", Tensor<double>({1}, {2.0 * (params.at("p")[0] - 3.0)})}};
    adam_step(params, grads, st, 0.1, AdamConfig{});
  }
  EXPECT_LT(std::abs(params.at("p")[0] - 3.0), 1e-2);
}

TEST(Adam, ShapeMismatch) {
  std::map<std::string, Tensor<double>> params{{"p", Tensor<double>({2}, 0.0)}};
  std::map<std::string, Tensor<double>> grads{{"p", Tensor<double>({3}, 1.0)}};
  AdamState<double> st;
  EXPECT_THROW(adam_step(params, grads, st, 0.1, AdamConfig{}), std::invalid_argument);
}

TEST(Tensor, ShapeDataAgreement) {
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Kernels, MatmulMatchesNaiveLoop) {
  SplitMix64 rng(12);
  for (std::size_t M : {1, 3, 4, 7, 9})
    for (std::size_t K : {1, 5, 16})
      for (std::size_t N : {1, 2, 13}) {
        std::vector<double> a(M * K), b(K * N), bias(N), c(M * N);
        for (auto& x : a) x = rng.normal();
        for (auto& x : b) x = rng.normal();
        for (auto& x : bias) x = rng.normal();
        kern::matmul(a.data(), b.data(), bias.data(), c.data(), M, K, N);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < N; ++j) {
            double r = bias[j];
            for (std::size_t k = 0; k < K; ++k) r += a[i * K + k] * b[k * N + j];
            EXPECT_NEAR(c[i * N + j], r, 1e-12);
          }
      }
}

TEST(Kernels, MatmulRowsIndependentOfBatching) {
  // A row's result must not depend on which other rows share the call.
  SplitMix64 rng(13);
  const std::size_t M = 11, K = 37, N = 19;
  std::vector<float> a(M * K), b(K * N), full(M * N), one(N);
  for (auto& x : a) x = static_cast<float>(rng.normal());
  for (auto& x : b) x = static_cast<float>(rng.normal());
  kern::matmul(a.data(), b.data(), static_cast<const float*>(nullptr), full.data(), M, K, N);
  for (std::size_t i = 0; i < M; ++i) {
    kern::matmul(a.data() + i * K, b.data(), static_cast<const float*>(nullptr), one.data(), 1, K, N);
    for (std::size_t j = 0; j < N; ++j) EXPECT_EQ(one[j], full[i * N + j]);
  }
}

TEST(Rng, DeterministicAndSeedSensitive) {
  SplitMix64 a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    EXPECT_NE(x, c.next());
  }
}

TEST(Rng, KnownSplitMixOutputs) {
  // Reference values of the splitmix64 generator seeded with 0.
  SplitMix64 r(0);
  EXPECT_EQ(r.next(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(r.next(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(r.next(), 0x06C45D188009454FULL);
}

TEST(Rng, BelowIsUniform) {
  SplitMix64 r(1);
  std::vector<int> counts(6, 0);
  const int n = 60000;
  for (int i = 0; i < n; ++i) ++counts[r.below(6)];
  const double p = 1.0 / 6, sigma = std::sqrt(n * p * (1 - p));
  for (int c : counts) EXPECT_LT(std::abs(c - n * p), 4 * sigma);
}
