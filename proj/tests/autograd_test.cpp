#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>

#include "nfa/autograd.hpp"
#include "nfa/rng.hpp"
#include "nfa/verify.hpp"

namespace nfa {
namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

Tensor random_tensor(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(std::move(s));
  for (float& v : t.values()) v = static_cast<float>(sd * normal(rng));
  return t;
}

Tensor run(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value();
}

// --- forward examples ---------------------------------------------------------

TEST(MatmulTest, IdentityAndHandProduct) {
  const Tensor id = run([](Tape& t) {
    return matmul(t.constant(Tensor({2, 2}, {1, 0, 0, 1})), t.constant(Tensor({2, 2}, {3, 4, 5, 6})));
  });
  EXPECT_EQ(id.vec(), (std::vector<float>{3, 4, 5, 6}));
  const Tensor dot = run([](Tape& t) {
    return matmul(t.constant(Tensor({1, 2}, {1, 2})), t.constant(Tensor({2, 1}, {3, 4})));
  });
  EXPECT_EQ(dot.vec(), (std::vector<float>{11}));
}

TEST(MatmulTest, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  const Tensor c = run([&](Tape& t) { return matmul(t.constant(a), t.constant(b)); });
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 5; ++k) s += double(a.at(i, k)) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-6);
    }
}

TEST(MatmulTest, InnerDimensionMismatchThrows) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), DimensionError);
}

TEST(SoftmaxTest, UniformLogits) {
  const Tensor y = run([](Tape& t) { return softmax_lastdim(t.constant(Tensor({4}, 0.0f))); });
  for (float v : y.values()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(SoftmaxTest, SingleAllowedEntry) {
  const Tensor mask({2}, {0.0f, -kInf});
  const Tensor y =
      run([&](Tape& t) { return softmax_lastdim(t.constant(Tensor({2}, {1, 2})), &mask); });
  EXPECT_EQ(y.vec(), (std::vector<float>{1.0f, 0.0f}));
}

TEST(SoftmaxTest, MatchesScalarOracle) {
  const Tensor y = run([](Tape& t) { return softmax_lastdim(t.constant(Tensor({3}, {1, 2, 3}))); });
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y[i], std::exp(i + 1.0) / z, 1e-6);
}

TEST(SoftmaxTest, FullyMaskedRowIsZero) {
  const Tensor mask({2, 2}, {-kInf, -kInf, 0.0f, -kInf});
  const Tensor y = run([&](Tape& t) { return softmax_lastdim(t.constant(Tensor({2, 2}, {1, 2, 3, 4})), &mask); });
  EXPECT_EQ(y.vec(), (std::vector<float>{0, 0, 1, 0}));
}

// Rows with an allowed entry sum to one; outputs stay in [0, 1].
TEST(SoftmaxTest, RowSumProperty) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int rows = 1 + static_cast<int>(uniform01(rng) * 5);
    const int cols = 1 + static_cast<int>(uniform01(rng) * 8);
    const Tensor x = random_tensor({rows, cols}, rng, 1.0 + 20.0 * uniform01(rng));
    Tensor mask({rows, cols});
    for (float& m : mask.values()) m = uniform01(rng) < 0.4 ? -kInf : 0.0f;
    const Tensor y = run([&](Tape& t) { return softmax_lastdim(t.constant(x), &mask); });
    ASSERT_TRUE(y.all_finite());
    for (int r = 0; r < rows; ++r) {
      double s = 0.0;
      bool any = false;
      for (int c = 0; c < cols; ++c) {
        EXPECT_GE(y.at(r, c), 0.0f);
        EXPECT_LE(y.at(r, c), 1.0f);
        s += y.at(r, c);
        any |= mask.at(r, c) == 0.0f;
      }
      EXPECT_NEAR(s, any ? 1.0 : 0.0, 1e-6);
    }
  }
}

TEST(LayerNormTest, HandCases) {
  auto ln = [](const Tensor& x, float g, float b) {
    const int d = x.dim(-1);
    return run([&](Tape& t) {
      return layer_norm(t.constant(x), t.constant(Tensor({d}, g)), t.constant(Tensor({d}, b)));
    });
  };
  const Tensor flat = ln(Tensor({4}, 5.0f), 1, 0);
  for (float v : flat.values()) EXPECT_EQ(v, 0.0f);
  const Tensor y = ln(Tensor({2}, {1, 3}), 1, 0);
  EXPECT_NEAR(y[0], -1.0, 1e-4);
  EXPECT_NEAR(y[1], 1.0, 1e-4);
  const Tensor biased = ln(Tensor({3}, {1, 7, -2}), 0, 0.5f);
  for (float v : biased.values()) EXPECT_EQ(v, 0.5f);
}

TEST(GeluTest, Examples) {
  const Tensor y = run([](Tape& t) { return gelu(t.constant(Tensor({3}, {0.0f, 12.0f, 1.0f}))); });
  EXPECT_EQ(y[0], 0.0f);
  EXPECT_NEAR(y[1], 12.0f, 1e-3);
  const double x = 1.0;
  const double ref = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  EXPECT_NEAR(y[2], ref, 1e-6);
  EXPECT_NEAR(gelu_scalar(1.0f), ref, 1e-6);
}

// Independent bilinear oracle with half-pixel centers and edge clamping.
double bilinear_ref(const Tensor& x, int c, int f, int oy, int ox) {
  const int h = x.dim(1), w = x.dim(2);
  auto coord = [f](int o, int n, int& i0, int& i1, double& t) {
    double s = (o + 0.5) / f - 0.5;
    s = std::clamp(s, 0.0, double(n - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, n - 1);
    t = s - i0;
  };
  int y0, y1, x0, x1;
  double ty, tx;
  coord(oy, h, y0, y1, ty);
  coord(ox, w, x0, x1, tx);
  const double top = (1 - tx) * x.at(c, y0, x0) + tx * x.at(c, y0, x1);
  const double bot = (1 - tx) * x.at(c, y1, x0) + tx * x.at(c, y1, x1);
  return (1 - ty) * top + ty * bot;
}

TEST(UpsampleTest, ConstantIdentityAndOracle) {
  const Tensor c3 = run([](Tape& t) { return bilinear_upsample(t.constant(Tensor({1, 3, 2}, 3.0f)), 2); });
  EXPECT_EQ(c3.shape(), (Shape{1, 6, 4}));
  for (float v : c3.values()) EXPECT_FLOAT_EQ(v, 3.0f);

  std::mt19937_64 rng(2);
  const Tensor r = random_tensor({2, 3, 3}, rng);
  EXPECT_EQ(run([&](Tape& t) { return bilinear_upsample(t.constant(r), 1); }), r);

  const Tensor m({1, 2, 2}, {0, 1, 2, 3});
  const Tensor up = run([&](Tape& t) { return bilinear_upsample(t.constant(m), 2); });
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(up.at(0, y, x), bilinear_ref(m, 0, 2, y, x), 1e-6);
  for (int f : {3, 4}) {
    const Tensor u = run([&](Tape& t) { return bilinear_upsample(t.constant(r), f); });
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 3 * f; ++y)
        for (int x = 0; x < 3 * f; ++x) EXPECT_NEAR(u.at(c, y, x), bilinear_ref(r, c, f, y, x), 1e-6);
  }
}

TEST(BceTest, Examples) {
  auto bce = [](const Tensor& logits, const Tensor& targets) {
    Tape t;
    return bce_with_logits(t.constant(logits), targets).value().item();
  };
  EXPECT_NEAR(bce(Tensor({1}, 0.0f), Tensor({1}, 0.5f)), std::log(2.0), 1e-6);
  EXPECT_LT(bce(Tensor({1}, 20.0f), Tensor({1}, 1.0f)), 1e-6);
  const double naive = -(std::log(1 / (1 + std::exp(-0.5))) + std::log(1 - 1 / (1 + std::exp(0.3)))) / 2;
  EXPECT_NEAR(bce(Tensor({2}, {0.5f, -0.3f}), Tensor({2}, {1, 0})), naive, 1e-6);
  // Stable far into saturation on the wrong side.
  EXPECT_NEAR(bce(Tensor({1}, -80.0f), Tensor({1}, 1.0f)), 80.0, 1e-3);
}

TEST(GatherTest, ZeroPadsNegativeIndices) {
  auto idx = std::make_shared<const std::vector<int>>(std::vector<int>{2, -1, 0});
  const Tensor y = run([&](Tape& t) { return gather(t.constant(Tensor({3}, {7, 8, 9})), idx, {3}); });
  EXPECT_EQ(y.vec(), (std::vector<float>{9, 0, 7}));
}

TEST(ReductionTest, MeanAxis1) {
  const Tensor y = run([](Tape& t) {
    return mean_axis1(t.constant(Tensor({1, 2, 3}, {1, 2, 3, 3, 4, 5})));
  });
  EXPECT_EQ(y.shape(), (Shape{1, 3}));
  EXPECT_EQ(y.vec(), (std::vector<float>{2, 3, 4}));
}

// --- backward -----------------------------------------------------------------

TEST(BackwardTest, SumGivesOnes) {
  Parameter p("p", Tensor({2, 3}, 1.7f));
  Tape t;
  t.backward(sum(t.watch(p)));
  for (float g : p.grad.values()) EXPECT_EQ(g, 1.0f);
}

TEST(BackwardTest, SumOfSquares) {
  Parameter p("p", Tensor({2}, {1, 2}));
  Tape t;
  const Var x = t.watch(p);
  t.backward(sum(mul(x, x)));
  EXPECT_EQ(p.grad.vec(), (std::vector<float>{2, 4}));
}

TEST(BackwardTest, NonScalarLossThrows) {
  Parameter p("p", Tensor({2}, 1.0f));
  Tape t;
  EXPECT_THROW(t.backward(t.watch(p)), DimensionError);
}

TEST(BackwardTest, ConstantsLeaveNoRecords) {
  Tape t;
  gelu(matmul(t.constant(Tensor({2, 2}, 1.0f)), t.constant(Tensor({2, 2}, 1.0f))));
  EXPECT_TRUE(t.records().empty());
}

TEST(BackwardTest, RecordsAreTopologicallyOrdered) {
  Parameter a("a", Tensor({3, 3}, 0.5f)), b("b", Tensor({3}, 0.1f));
  Tape t;
  const Var x = t.watch(a);
  const Var y = layer_norm(gelu(matmul(x, x)), t.watch(b), t.watch(b));
  sum(softmax_lastdim(add(y, x)));
  ASSERT_FALSE(t.records().empty());
  for (const auto& r : t.records())
    for (int in : r.inputs) EXPECT_LT(in, r.output);
}

TEST(BackwardTest, ReplayIsBitwiseDeterministic) {
  std::mt19937_64 rng(9);
  const Tensor w0 = random_tensor({4, 4}, rng), x0 = random_tensor({3, 4}, rng);
  auto once = [&] {
    Parameter w("w", w0);
    Tape t;
    const Var out = softmax_lastdim(gelu(matmul(t.constant(x0), t.watch(w))));
    t.backward(sum(mul(out, out)));
    return std::make_pair(out.value(), w.grad);
  };
  const auto a = once(), b = once();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(BackwardTest, GradientsAccumulateAcrossBackwardCalls) {
  Parameter p("p", Tensor({2}, 1.0f));
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(sum(t.watch(p)));
  }
  EXPECT_EQ(p.grad.vec(), (std::vector<float>{2, 2}));
}

// --- finite differences ---------------------------------------------------------

class OpGradientTest : public ::testing::TestWithParam<verify::OpCase> {};

TEST_P(OpGradientTest, MatchesCentralDifferences) {
  const verify::GradCheckStats s = verify::check_op(GetParam(), {});
  EXPECT_TRUE(s.pass) << s.worst_where;
  EXPECT_GT(s.checked, 0);
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradientTest, ::testing::ValuesIn(verify::op_cases(0)),
                         [](const auto& info) { return info.param.name; });

// Different random inputs for the same ops.
TEST(OpGradientPropertyTest, HoldsAcrossSeeds) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    verify::GradCheckOptions o;
    o.seed = seed;
    for (const auto& op : verify::op_cases(seed)) {
      const auto s = verify::check_op(op, o);
      EXPECT_TRUE(s.pass) << op.name << " seed " << seed << ": " << s.worst_where;
    }
  }
}

TEST(FaultInjectionTest, SignFlipIsCaughtAndNamed) {
  for (const char* kind : {"matmul", "gelu", "layer_norm", "softmax", "upsample", "bce", "gather"}) {
    testing::set_backward_sign_flip(kind);
    bool caught = false;
    for (const auto& op : verify::op_cases(0)) {
      if (op.name == kind && !verify::check_op(op, {}).pass) caught = true;
    }
    testing::set_backward_sign_flip("");
    EXPECT_TRUE(caught) << kind;
  }
}

}  // namespace
}  // namespace nfa
