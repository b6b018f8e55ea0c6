#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ssrgnet/autodiff.hpp"

using namespace ssrgnet;

namespace {

Tensor random_like(std::size_t r, std::size_t c, std::mt19937_64& rng) { return oracle::random_tensor(r, c, rng); }

// Contract an op output with a fixed random matrix so every output entry
// contributes to a scalar loss.
Var contract(Tape& t, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w(y.shape());
  std::normal_distribution<double> g;
  for (double& x : w.data()) x = g(rng);
  return sum(mul(y, t.constant(w)));
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndLengthMismatch) {
  EXPECT_THROW(Tensor({2, 0}), TensorError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), TensorError);
  Tensor t({2, 3});
  EXPECT_EQ(shape_numel(t.shape()), t.size());
}

TEST(Ops, MatmulIdentity) {
  Tape t;
  Tensor a = Tensor::matrix(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(matmul(t.constant(Tensor::identity(3)), t.constant(a)).value(), a);
}

TEST(Ops, ReluDefinition) {
  Tape t;
  auto y = relu(t.constant(Tensor::vector({-1, 0, 2})));
  EXPECT_EQ(y.value(), Tensor::vector({0, 0, 2}));
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  Tape t;
  auto y = softmax_rows(t.constant(Tensor::matrix(1, 3, {0, 0, 0})));
  for (double v : y.value().data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, SoftmaxRowsSumToOneAndArePositive) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    Tensor x = oracle::random_tensor(1 + rng() % 6, 1 + rng() % 9, rng, 30.0);
    auto y = softmax_rows(t.constant(x));
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double s = 0.0;
      for (double v : y.value().row(r)) {
        EXPECT_GT(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  Tape t;
  auto a = t.constant(Tensor({2, 3}));
  auto b = t.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const TensorError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("matmul"), std::string::npos);
    EXPECT_NE(m.find("(2, 3)"), std::string::npos);
  }
  EXPECT_THROW(add(a, t.constant(Tensor({3, 2}))), TensorError);
  EXPECT_THROW(add_bias(a, t.constant(Tensor({2}))), TensorError);
}

TEST(Ops, StrictModeRejectsNonFinitePermissivePassesThrough) {
  Tensor bad = Tensor::vector({1.0, std::nan("")});
  {
    Tape t({Precision::f64, true});
    EXPECT_THROW(relu(t.constant(bad)), TensorError);
  }
  Tape t;
  auto y = scale(t.constant(bad), 2.0);
  EXPECT_TRUE(std::isnan(y.value()[1]));
}

TEST(Ops, ConcatThenSliceIsBitExact) {
  std::mt19937_64 rng(11);
  Tape t;
  Tensor a = random_like(4, 3, rng), b = random_like(4, 5, rng);
  auto c = concat_cols(t.constant(a), t.constant(b));
  EXPECT_EQ(slice_cols(c, 0, 3).value(), a);
  EXPECT_EQ(slice_cols(c, 3, 8).value(), b);
}

TEST(Ops, Float32ModeRoundsValues) {
  Tape t({Precision::f32, false});
  auto y = scale(t.constant(Tensor::vector({0.1})), 3.0);
  EXPECT_EQ(y.value()[0], static_cast<double>(static_cast<float>(static_cast<double>(0.1f) * 3.0)));
}

TEST(Backward, SquareGradient) {
  ParamStore s;
  s.add("x", Tensor::vector({3.0}));
  Tape t;
  auto x = t.param(s, "x");
  auto g = backward(t, sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(g[0][0], 6.0);
}

TEST(Backward, CrossEntropyGradientIsPMinusY) {
  ParamStore s;
  s.add("z", Tensor::matrix(1, 3, {0.5, -1.0, 2.0}));
  Tape t;
  auto z = t.param(s, "z");
  auto g = backward(t, masked_cross_entropy(z, {1}, {true}));
  const double e0 = std::exp(0.5), e1 = std::exp(-1.0), e2 = std::exp(2.0), tot = e0 + e1 + e2;
  EXPECT_NEAR(g[0][0], e0 / tot, 1e-15);
  EXPECT_NEAR(g[0][1], e1 / tot - 1.0, 1e-15);
  EXPECT_NEAR(g[0][2], e2 / tot, 1e-15);
}

TEST(Backward, MaskedRowsGetNoGradientAndMeanNormalises) {
  ParamStore s;
  s.add("z", Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}));
  Tape t;
  auto g = backward(t, masked_cross_entropy(t.param(s, "z"), {0, 1, 0}, {true, false, true}));
  EXPECT_EQ(g[0](1, 0), 0.0);
  EXPECT_EQ(g[0](1, 1), 0.0);
  Tape t2;
  auto g2 = backward(t2, masked_cross_entropy(t2.param(s, "z"), {0, 1, 0}, {true, false, true}, Reduction::sum));
  EXPECT_NEAR(g2[0](0, 0), 2.0 * g[0](0, 0), 1e-15);
  Tape t3;
  EXPECT_THROW(masked_cross_entropy(t3.param(s, "z"), {0, 1, 0}, {false, false, false}), TensorError);
}

TEST(Backward, ErrorsOnNonScalarAndConsumedTape) {
  ParamStore s;
  s.add("x", Tensor::vector({1, 2}));
  Tape t;
  auto x = t.param(s, "x");
  EXPECT_THROW(backward(t, x), TensorError);
  auto l = sum(x);
  backward(t, l);
  EXPECT_THROW(backward(t, l), TensorError);
  Tape other;
  EXPECT_THROW(backward(other, l), TensorError);
}

TEST(Backward, UnreachableParameterGetsZeros) {
  ParamStore s;
  s.add("used", Tensor::vector({1, 2}));
  s.add("unused", Tensor::matrix(2, 2, {1, 1, 1, 1}));
  Tape t;
  auto g = backward(t, sum(t.param(s, "used")));
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[1], Tensor({2, 2}, 0.0));
}

TEST(Backward, ConstantsNeverReceiveGradients) {
  ParamStore s;
  s.add("x", Tensor::vector({2}));
  Tape t;
  auto c = t.constant(Tensor::vector({5}));
  auto l = sum(mul(t.param(s, "x"), c));
  EXPECT_FALSE(t.requires_grad(c.id()));
  auto g = backward(t, l);
  EXPECT_EQ(g.size(), 1u);
  EXPECT_DOUBLE_EQ(g[0][0], 5.0);
}

TEST(Backward, FanOutAccumulatesExactly) {
  std::mt19937_64 rng(5);
  ParamStore s;
  s.add("x", random_like(3, 4, rng));
  Tensor w = random_like(4, 4, rng);
  auto f = [&](Tape& t, Var x) { return sum(relu(matmul(x, t.constant(w)))); };
  auto g = [](Tape&, Var x) { return sum(mul(x, x)); };
  Tape t1;
  auto gf = backward(t1, f(t1, t1.param(s, 0)));
  Tape t2;
  auto gg = backward(t2, g(t2, t2.param(s, 0)));
  Tape t3;
  auto x = t3.param(s, 0);
  auto both = backward(t3, add(f(t3, x), g(t3, x)));
  for (std::size_t i = 0; i < both[0].size(); ++i) EXPECT_EQ(both[0][i], gf[0][i] + gg[0][i]);
}

TEST(GradCheck, LinearMapIsExact) {
  std::mt19937_64 rng(1);
  ParamStore s;
  s.add("w", random_like(3, 2, rng));
  Tensor x = random_like(4, 3, rng);
  auto rep = finite_difference_check([&](Tape& t) { return contract(t, matmul(t.constant(x), t.param(s, "w")), 9); },
                                     s, 1e-5);
  ASSERT_EQ(rep.entries.size(), 1u);
  EXPECT_LT(rep.worst_rel_error(), 1e-8);
}

TEST(GradCheck, EmptyStoreGivesEmptyReport) {
  ParamStore s;
  auto rep = finite_difference_check([](Tape& t) { return sum(t.constant(Tensor::vector({1}))); }, s, 1e-5);
  EXPECT_TRUE(rep.entries.empty());
}

TEST(GradCheck, NonDeterministicFunctionIsRejected) {
  ParamStore s;
  s.add("x", Tensor::vector({1}));
  int calls = 0;
  auto f = [&](Tape& t) { return scale(sum(t.param(s, "x")), 1.0 + (++calls)); };
  EXPECT_THROW(finite_difference_check(f, s, 1e-5), TensorError);
}

TEST(GradCheck, RandomTwoLayerReluNet) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore s;
    s.add("w1", random_like(5, 7, rng));
    s.add("b1", oracle::random_tensor(1, 7, rng).reshaped({7}));
    s.add("w2", random_like(7, 3, rng));
    Tensor x = random_like(6, 5, rng);
    std::vector<std::size_t> y = {0, 1, 2, 2, 1, 0};
    auto f = [&](Tape& t) {
      auto h = relu(add_bias(matmul(t.constant(x), t.param(s, "w1")), t.param(s, "b1")));
      return masked_cross_entropy(matmul(h, t.param(s, "w2")), y, std::vector<bool>(6, true));
    };
    EXPECT_LT(finite_difference_check(f, s, 1e-5).worst_rel_error(), 1e-4) << "seed " << seed;
  }
}

// Every op kind against central differences over random shapes and seeds.
TEST(GradCheck, EveryOpKindOnRandomShapes) {
  std::size_t cases = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t m = 1 + rng() % 5, n = 1 + rng() % 5, k = 1 + rng() % 5;
    struct Case {
      const char* name;
      LossFn f;
    };
    ParamStore s;
    s.add("a", random_like(m, k, rng));
    s.add("b", random_like(k, n, rng));
    s.add("c", random_like(m, k, rng));
    s.add("bias", oracle::random_tensor(1, k, rng).reshaped({k}));
    std::vector<std::size_t> gidx, sidx;
    std::vector<double> sw;
    for (std::size_t i = 0; i < 2 * m; ++i) gidx.push_back(rng() % m);
    for (std::size_t i = 0; i < m; ++i) {
      sidx.push_back(rng() % 3);
      sw.push_back(std::uniform_real_distribution<double>(0.1, 2.0)(rng));
    }
    std::vector<std::size_t> labels;
    std::vector<bool> mask;
    for (std::size_t i = 0; i < m; ++i) {
      labels.push_back(rng() % k);
      mask.push_back(i == 0 || rng() % 3 != 0);
    }
    const std::size_t heads = (k % 2 == 0) ? 2 : 1;
    std::vector<std::size_t> offsets = {0};
    if (m > 2) offsets.push_back(1 + rng() % (m - 1));
    offsets.push_back(m);

    auto A = [&](Tape& t) { return t.param(s, "a"); };
    auto C = [&](Tape& t) { return t.param(s, "c"); };
    std::vector<Case> all = {
        {"matmul", [&](Tape& t) { return contract(t, matmul(A(t), t.param(s, "b")), seed); }},
        {"add", [&](Tape& t) { return contract(t, add(A(t), C(t)), seed); }},
        {"mul", [&](Tape& t) { return contract(t, mul(A(t), C(t)), seed); }},
        {"scale", [&](Tape& t) { return contract(t, scale(A(t), -1.7), seed); }},
        {"relu", [&](Tape& t) { return contract(t, relu(A(t)), seed); }},
        {"softmax", [&](Tape& t) { return contract(t, softmax_rows(A(t)), seed); }},
        {"concat", [&](Tape& t) { return contract(t, concat_cols(A(t), C(t)), seed); }},
        {"slice", [&](Tape& t) { return contract(t, slice_cols(concat_cols(A(t), C(t)), k / 2, k + 1), seed); }},
        {"gather", [&](Tape& t) { return contract(t, gather_rows(A(t), gidx), seed); }},
        {"scatter", [&](Tape& t) { return contract(t, scatter_add_rows(A(t), sidx, sw, 3), seed); }},
        {"bias", [&](Tape& t) { return contract(t, add_bias(A(t), t.param(s, "bias")), seed); }},
        {"xent", [&](Tape& t) { return masked_cross_entropy(A(t), labels, mask); }},
        {"attention", [&](Tape& t) { return contract(t, attention(A(t), C(t), mul(A(t), C(t)), heads, offsets), seed); }},
    };
    for (const auto& c : all) {
      const auto rep = finite_difference_check(c.f, s, 1e-5);
      EXPECT_LT(rep.worst_rel_error(), 1e-4) << c.name << " seed " << seed;
      ++cases;
    }
  }
  EXPECT_GE(cases, 50u * 13u);
}

TEST(Attention, SegmentsDoNotInteract) {
  std::mt19937_64 rng(21);
  Tensor q = random_like(5, 4, rng), k = random_like(5, 4, rng), v = random_like(5, 4, rng);
  Tape t;
  auto joint = attention(t.constant(q), t.constant(k), t.constant(v), 2, {0, 2, 5});
  auto rows = [](const Tensor& x, std::size_t lo, std::size_t hi) {
    return Tensor({hi - lo, x.cols()}, std::vector<double>(x.data().begin() + lo * x.cols(), x.data().begin() + hi * x.cols()));
  };
  auto first = attention(t.constant(rows(q, 0, 2)), t.constant(rows(k, 0, 2)), t.constant(rows(v, 0, 2)), 2, {0, 2});
  auto second = attention(t.constant(rows(q, 2, 5)), t.constant(rows(k, 2, 5)), t.constant(rows(v, 2, 5)), 2, {0, 3});
  EXPECT_EQ(rows(joint.value(), 0, 2), first.value());
  EXPECT_EQ(rows(joint.value(), 2, 5), second.value());
  EXPECT_THROW(attention(t.constant(q), t.constant(k), t.constant(v), 3, {0, 5}), TensorError);
  EXPECT_THROW(attention(t.constant(q), t.constant(k), t.constant(v), 2, {0, 4}), TensorError);
}
