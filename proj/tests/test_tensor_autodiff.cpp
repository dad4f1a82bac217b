#include <gtest/gtest.h>

#include <cmath>

#include "clipmap/autodiff.hpp"
#include "clipmap/errors.hpp"
#include "clipmap/kernels.hpp"
#include "clipmap/rng.hpp"
#include "helpers.hpp"

using namespace clipmap;
using testing_util::grad_check;
using testing_util::random_tensor;

namespace {

Tensor triple_loop(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += (long double)a.at(i, k) * b.at(k, j);
      c.at(i, j) = Real(s);
    }
  return c;
}

}  // namespace

TEST(Tensor, RejectsZeroDimensions) { EXPECT_THROW(Tensor({2, 0}), DimensionError); }

TEST(Tensor, ShapeMatchesData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<Real>{1, 2, 3}), DimensionError);
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(Tensor::scalar(3).numel(), 1u);
}

TEST(Matmul, IdentityLeavesMatrix) {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_TRUE(same_values(ad::matmul(Tensor::identity(2), m), m));
}

TEST(Matmul, SelectorRow) {
  const Tensor c = ad::matmul(Tensor::matrix({{1, 0}}), Tensor::matrix({{5}, {7}}));
  ASSERT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 5);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(1);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  EXPECT_LE(max_abs_diff(ad::matmul(a, b), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, MatchesTripleLoopOnAllSmallShapes) {
  Rng rng(2);
  Real worst = 0;
  for (std::size_t m = 1; m <= 16; ++m)
    for (std::size_t k = 1; k <= 16; k += 3)
      for (std::size_t n = 1; n <= 16; ++n) {
        const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        worst = std::max(worst, max_abs_diff(ad::matmul(a, b), triple_loop(a, b)));
      }
  EXPECT_LE(worst, 1e-12);
}

TEST(Matmul, ShapeMismatchNamesShapes) {
  try {
    ad::matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Kernels, ParallelGemmMatchesSerialReference) {
  Rng rng(3);
  for (auto [m, n, k] : {std::tuple{200, 70, 33}, std::tuple{7, 5, 3}, std::tuple{97, 64, 128}}) {
    const Tensor a = random_tensor({std::size_t(m), std::size_t(k)}, rng);
    const Tensor b = random_tensor({std::size_t(k), std::size_t(n)}, rng);
    Tensor ref({std::size_t(m), std::size_t(n)}), fast({std::size_t(m), std::size_t(n)});
    kernels::reference::gemm(m, n, k, a.data().data(), b.data().data(), ref.data().data());
    for (int threads : {1, 4}) {
      kernels::set_num_threads(threads);
      kernels::gemm(kernels::Trans::No, kernels::Trans::No, m, n, k, a.data().data(), b.data().data(),
                    fast.data().data(), false);
      EXPECT_LE(max_abs_diff(fast, ref), 1e-11) << m << "x" << n << "x" << k << " threads " << threads;
    }
    kernels::set_num_threads(1);
  }
}

TEST(Kernels, TransposedOperandsAndAccumulate) {
  Rng rng(4);
  const Tensor a = random_tensor({9, 5}, rng), b = random_tensor({7, 9}, rng);
  Tensor c({5, 7}, Real(1));
  kernels::gemm(kernels::Trans::Yes, kernels::Trans::Yes, 5, 7, 9, a.data().data(), b.data().data(),
                c.data().data(), true);
  Tensor expect = triple_loop(a.transposed(), b.transposed());
  for (Real& v : expect.data()) v += 1;
  EXPECT_LE(max_abs_diff(c, expect), 1e-12);
}

TEST(Kernels, ParallelAttentionMatchesSerialReference) {
  Rng rng(5);
  const std::size_t batch = 3, seq = 6, width = 8, heads = 2;
  const Tensor q = random_tensor({batch * seq, width}, rng), k = random_tensor({batch * seq, width}, rng),
               v = random_tensor({batch * seq, width}, rng);
  for (bool causal : {false, true}) {
    Tensor ref({batch * seq, width}), fast({batch * seq, width});
    std::vector<Real> probs(batch * heads * seq * seq);
    kernels::reference::attention_forward(q.data().data(), k.data().data(), v.data().data(), ref.data().data(), batch,
                                          seq, width, heads, causal);
    for (int threads : {1, 3}) {
      kernels::set_num_threads(threads);
      kernels::attention_forward(q.data().data(), k.data().data(), v.data().data(), fast.data().data(),
                                 probs.data(), batch, seq, width, heads, causal);
      EXPECT_LE(max_abs_diff(fast, ref), 1e-12);
    }
    kernels::set_num_threads(1);
    for (std::size_t r = 0; r < batch * heads * seq; ++r) {
      Real s = 0;
      for (std::size_t c = 0; c < seq; ++c) s += probs[r * seq + c];
      EXPECT_NEAR(s, 1, 1e-9);
    }
  }
}

TEST(Softmax, UniformRow) {
  const Tensor p = ad::softmax_rows(Tensor::matrix({{0, 0, 0}}));
  for (Real v : p.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
}

TEST(Softmax, LargeGapStaysFinite) {
  const Tensor p = ad::softmax_rows(Tensor::matrix({{1000, 0}}));
  EXPECT_EQ(p[0], 1);
  EXPECT_EQ(p[1], 0);
  EXPECT_TRUE(p.all_finite());
}

TEST(Softmax, MatchesExtendedPrecision) {
  const Tensor p = ad::softmax_rows(Tensor::matrix({{1, 2, 3}}));
  long double z = expl(1.0L) + expl(2.0L) + expl(3.0L);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], double(expl(i + 1.0L) / z), 1e-12);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(6);
  const Tensor p = ad::softmax_rows(random_tensor({20, 13}, rng, 10));
  for (std::size_t r = 0; r < 20; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < 13; ++c) {
      EXPECT_GE(p.at(r, c), 0);
      EXPECT_LE(p.at(r, c), 1);
      s += p.at(r, c);
    }
    EXPECT_NEAR(s, 1, 1e-12);
  }
}

namespace {
Real soft_ce(const Tensor& logits, const Tensor& target) {
  ad::Tape t;
  return ad::cross_entropy_soft(t.constant(logits), target).value().item();
}
}  // namespace

TEST(CrossEntropySoft, OneHotReducesToHardLabel) {
  const Tensor logits = Tensor::matrix({{0.3, -1.2, 2.0}, {1.0, 0.5, -0.5}});
  const Tensor onehot = Tensor::matrix({{0, 0, 1}, {1, 0, 0}});
  ad::Tape t;
  const std::vector<std::size_t> labels{2, 0};
  EXPECT_NEAR(soft_ce(logits, onehot), ad::cross_entropy_labels(t.constant(logits), labels).value().item(), 1e-15);
}

TEST(CrossEntropySoft, SelfTargetGivesEntropy) {
  Rng rng(7);
  const Tensor logits = random_tensor({5, 5}, rng);
  const Tensor p = ad::softmax_rows(logits);
  Real h = 0;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) h -= p.at(r, c) * std::log(p.at(r, c));
  EXPECT_NEAR(soft_ce(logits, p), h / 5, 1e-12);
}

TEST(CrossEntropySoft, TwoByTwoHandValue) {
  const Tensor logits = Tensor::matrix({{1, 0}, {0, 1}});
  const Real a = std::exp(1.0) / (1 + std::exp(1.0)), b = 1 - a;
  const Real h = -(a * std::log(a) + b * std::log(b));
  EXPECT_NEAR(soft_ce(logits, ad::softmax_rows(logits)), h, 1e-12);
  EXPECT_NEAR(h, 0.5822, 1e-4);
}

TEST(CrossEntropySoft, RejectsUnnormalizedTargets) {
  EXPECT_THROW(soft_ce(Tensor::matrix({{1, 0}}), Tensor::matrix({{0.5, 0.6}})), ContractError);
}

TEST(LayerNorm, ConstantInputGivesZeros) {
  ad::Tape t;
  auto y = ad::layer_norm(t.constant(Tensor::matrix({{3, 3, 3, 3}})), t.constant(Tensor({4}, 1)),
                          t.constant(Tensor({4}, 0)), 1e-5);
  for (Real v : y.value().data()) EXPECT_EQ(v, 0);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  ad::Tape t;
  const Tensor beta({4}, std::vector<Real>{1, 2, 3, 4});
  auto y = ad::layer_norm(t.constant(Tensor::matrix({{1, 5, -2, 0.5}})), t.constant(Tensor({4}, 0)),
                          t.constant(beta), 1e-5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.value()[i], beta[i]);
}

TEST(LayerNorm, NormalizesMoments) {
  Rng rng(8);
  ad::Tape t;
  const std::size_t d = 64;
  auto y = ad::layer_norm(t.constant(random_tensor({1, d}, rng, 3)), t.constant(Tensor({d}, 1)),
                          t.constant(Tensor({d}, 0)), 1e-12);
  Real mu = 0, var = 0;
  for (Real v : y.value().data()) mu += v;
  mu /= d;
  for (Real v : y.value().data()) var += (v - mu) * (v - mu);
  var /= d;
  EXPECT_LE(std::abs(mu), 1e-10);
  EXPECT_NEAR(var, 1, 1e-6);
}

TEST(Backward, SumGivesOnes) {
  Tensor w({3, 4}, 0.5);
  w.set_requires_grad(true);
  ad::Tape t;
  t.backward(ad::sum(t.leaf(w)));
  for (Real g : w.grad()) EXPECT_EQ(g, 1);
}

TEST(Backward, RejectsNonScalarRoot) {
  Tensor w({2, 2});
  w.set_requires_grad(true);
  ad::Tape t;
  EXPECT_THROW(t.backward(t.leaf(w)), ContractError);
}

TEST(Backward, SecondPassIsRejected) {
  Tensor w({2}, 1);
  w.set_requires_grad(true);
  ad::Tape t;
  auto loss = ad::sum(t.leaf(w));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), ContractError);
  for (Real g : w.grad()) EXPECT_EQ(g, 1);
}

TEST(Backward, GradientsAccumulateAcrossTapes) {
  Tensor w({2}, 1);
  w.set_requires_grad(true);
  for (int i = 0; i < 2; ++i) {
    ad::Tape t;
    t.backward(ad::sum(t.leaf(w)));
  }
  for (Real g : w.grad()) EXPECT_EQ(g, 2);
}

TEST(Backward, SquaredNormOfProduct) {
  Rng rng(9);
  auto r = grad_check({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                      [](ad::Tape&, const std::vector<ad::Var>& v) {
                        auto c = ad::matmul(v[0], v[1]);
                        return ad::sum(ad::mul(c, c));
                      });
  EXPECT_LE(r.max_rel, 1e-6);
}

// Finite-difference check of each differentiable op on small random inputs.
struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  testing_util::LossFn fn;
  Real tol;
};

class OpGradient : public ::testing::TestWithParam<int> {};

namespace {

// Contracts an op's output with fixed random weights so every output element matters.
ad::Var probe(ad::Var y) {
  Rng rng(99);
  Tensor w(y.shape());
  rng.fill_normal(w, 1);
  return ad::sum(ad::mul(y, y.tape()->constant(w)));
}

std::vector<OpCase> op_cases() {
  using V = const std::vector<ad::Var>&;
  return {
      {"matmul", {{3, 4}, {4, 5}}, [](ad::Tape&, V v) { return probe(ad::matmul(v[0], v[1])); }, 1e-5},
      {"matmul_nt", {{3, 4}, {5, 4}}, [](ad::Tape&, V v) { return probe(ad::matmul_nt(v[0], v[1])); }, 1e-5},
      {"transpose", {{3, 4}}, [](ad::Tape&, V v) { return probe(ad::transpose(v[0])); }, 1e-5},
      {"linear", {{5, 3}, {4, 3}, {4}}, [](ad::Tape&, V v) { return probe(ad::linear(v[0], v[1], v[2])); }, 1e-5},
      {"add", {{2, 3}, {2, 3}}, [](ad::Tape&, V v) { return probe(ad::add(v[0], v[1])); }, 1e-5},
      {"sub", {{2, 3}, {2, 3}}, [](ad::Tape&, V v) { return probe(ad::sub(v[0], v[1])); }, 1e-5},
      {"mul", {{2, 3}, {2, 3}}, [](ad::Tape&, V v) { return probe(ad::mul(v[0], v[1])); }, 1e-5},
      {"scale", {{2, 3}}, [](ad::Tape&, V v) { return probe(ad::scale(v[0], -1.7)); }, 1e-5},
      {"scale_by", {{2, 3}, {}}, [](ad::Tape&, V v) { return probe(ad::scale_by(v[0], v[1])); }, 1e-5},
      {"add_periodic_rows", {{6, 3}, {3, 3}},
       [](ad::Tape&, V v) { return probe(ad::add_periodic_rows(v[0], v[1])); }, 1e-5},
      {"gelu", {{3, 5}}, [](ad::Tape&, V v) { return probe(ad::gelu(v[0])); }, 1e-5},
      {"layer_norm", {{4, 6}, {6}, {6}},
       [](ad::Tape&, V v) { return probe(ad::layer_norm(v[0], v[1], v[2], 1e-5)); }, 1e-5},
      {"attention", {{8, 4}, {8, 4}, {8, 4}},
       [](ad::Tape&, V v) { return probe(ad::attention(v[0], v[1], v[2], 2, 2, false)); }, 1e-5},
      {"attention_causal", {{8, 4}, {8, 4}, {8, 4}},
       [](ad::Tape&, V v) { return probe(ad::attention(v[0], v[1], v[2], 2, 2, true)); }, 1e-5},
      {"gather_rows", {{4, 3}}, [](ad::Tape&, V v) { return probe(ad::gather_rows(v[0], {3, 0, 3, 1})); }, 1e-5},
      {"prepend_rows", {{6, 3}, {1, 3}}, [](ad::Tape&, V v) { return probe(ad::prepend_rows(v[0], v[1], 3)); }, 1e-5},
      {"l2_normalize_rows", {{3, 4}}, [](ad::Tape&, V v) { return probe(ad::l2_normalize_rows(v[0])); }, 1e-5},
      {"exp_clamped", {{}}, [](ad::Tape&, V v) { return probe(ad::exp_clamped(v[0], 100)); }, 1e-5},
      {"mean", {{3, 4}}, [](ad::Tape&, V v) { return ad::mean(ad::mul(v[0], v[0])); }, 1e-5},
      {"softmax_rows", {{3, 4}}, [](ad::Tape&, V v) { return probe(ad::softmax_rows(v[0])); }, 1e-3},
      {"reshape", {{3, 4}}, [](ad::Tape&, V v) { return probe(ad::reshape(v[0], {2, 6})); }, 1e-5},
      {"stack_take", {{2, 2}, {2, 2}, {2, 2}},
       [](ad::Tape&, V v) { return probe(ad::take_row(ad::stack_flat({v[0], v[1], v[2]}), 1, {4})); }, 1e-5},
      {"stack_flat", {{2, 2}, {2, 2}}, [](ad::Tape&, V v) { return probe(ad::stack_flat({v[0], v[1]})); }, 1e-5},
      {"cross_entropy_soft", {{3, 3}},
       [](ad::Tape&, V v) {
         return ad::cross_entropy_soft(v[0], Tensor::matrix({{0.2, 0.3, 0.5}, {1, 0, 0}, {0.1, 0.8, 0.1}}));
       },
       1e-3},
      {"cross_entropy_labels", {{3, 4}},
       [](ad::Tape&, V v) {
         const std::vector<std::size_t> labels{1, 3, 0};
         return ad::cross_entropy_labels(v[0], labels);
       },
       1e-3},
  };
}

}  // namespace

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase c = op_cases()[static_cast<std::size_t>(GetParam())];
  Rng rng(1000 + GetParam());
  std::vector<Tensor> inputs;
  for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, 0.8));
  const auto r = grad_check(inputs, c.fn);
  EXPECT_LE(r.max_rel, c.tol) << c.name;
  EXPECT_GT(r.checked, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return std::string(op_cases()[static_cast<std::size_t>(info.param)].name);
                         });

TEST(ExpClamped, ClampsAndZeroesGradient) {
  Tensor s = Tensor::scalar(std::log(500.0));
  s.set_requires_grad(true);
  ad::Tape t;
  auto y = ad::exp_clamped(t.leaf(s), 100);
  EXPECT_EQ(y.value().item(), 100);
  t.backward(y);
  EXPECT_EQ(s.grad()[0], 0);
}

TEST(Gelu, MatchesTanhFormulaAcrossRange) {
  Tensor x({1, 4001});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = Real(-40.0 + 0.02 * double(i));
  ad::Tape t;
  auto y = ad::gelu(t.leaf(x));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    const double want = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(y.value()[i], want, 1e-12 * std::max(1.0, std::abs(want))) << "x = " << v;
  }
}

TEST(GatherRows, OutOfRangeIsInputError) {
  ad::Tape t;
  EXPECT_THROW(ad::gather_rows(t.constant(Tensor({2, 2})), {2}), InputError);
}

TEST(Tape, MixingTapesIsRejected) {
  ad::Tape a, b;
  EXPECT_THROW(ad::add(a.constant(Tensor({2})), b.constant(Tensor({2}))), ContractError);
}
