#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "stkrige/autodiff.hpp"
#include "stkrige/config.hpp"
#include "stkrige/gradcheck_suite.hpp"
#include "stkrige/optim.hpp"
#include "stkrige/parallel.hpp"

using namespace stkrige;

TEST(Tensor, ShapeAndReshape) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.reshaped(Shape{3, 2}).dim(0), 3u);
  EXPECT_THROW(t.reshaped(Shape{4, 2}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, IdenticalComparesBits) {
  Tensor a = Tensor::vector({0.0, 1.0});
  Tensor b = Tensor::vector({-0.0, 1.0});
  EXPECT_FALSE(a.identical(b));
  EXPECT_TRUE(a.identical(Tensor::vector({0.0, 1.0})));
  EXPECT_NE(hash_doubles(a.data()), hash_doubles(b.data()));
}

TEST(Autodiff, SoftmaxRows) {
  ad::Tape tape;
  auto x = tape.constant(Tensor(Shape{2, 3}, std::vector<double>{1, 2, 0.5, -1, 0, 3}));
  const Tensor y = ad::softmax(x, 1).value();
  const double expect[] = {0.23122389762214907, 0.6285317192117624, 0.14024438316608848,
                           0.01714782554552039, 0.0466126225779739,  0.9362395518765058};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(y[i], expect[i], 1e-15);
}

TEST(Autodiff, SoftmaxLargeLogitsStayFinite) {
  ad::Tape tape;
  auto x = tape.constant(Tensor(Shape{1, 2}, std::vector<double>{1000.0, 0.0}));
  const Tensor y = ad::softmax(x, 1).value();
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
}

TEST(Autodiff, SigmoidExtremes) {
  ad::Tape tape;
  auto x = tape.constant(Tensor::vector({-1000.0, 0.0, 1000.0}));
  const Tensor y = ad::sigmoid(x).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.5);
  EXPECT_EQ(y[2], 1.0);
}

TEST(Autodiff, MatmulValueAndGradient) {
  ad::Tape tape;
  auto a = tape.leaf(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3, 4}));
  auto b = tape.leaf(Tensor(Shape{2, 1}, std::vector<double>{5, 6}));
  auto y = ad::matmul(a, b);
  EXPECT_EQ(y.value()[0], 17.0);
  EXPECT_EQ(y.value()[1], 39.0);
  tape.backward(ad::sum_all(y));
  const Tensor ga = tape.grad(a), gb = tape.grad(b);
  EXPECT_EQ(ga[0], 5.0);
  EXPECT_EQ(ga[1], 6.0);
  EXPECT_EQ(ga[2], 5.0);
  EXPECT_EQ(gb[0], 4.0);
  EXPECT_EQ(gb[1], 6.0);
}

TEST(Autodiff, SquareGradient) {
  ad::Tape tape;
  auto w = tape.leaf(Tensor::vector({1.0, -2.0, 0.5}));
  tape.backward(ad::sum_all(ad::mul(w, w)));
  const Tensor g = tape.grad(w);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], -4.0);
  EXPECT_EQ(g[2], 1.0);
}

TEST(Autodiff, UnreachedLeafHasZeroGradient) {
  ad::Tape tape;
  auto a = tape.leaf(Tensor::vector({1.0, 2.0}));
  auto b = tape.leaf(Tensor::vector({3.0, 4.0}));
  tape.backward(ad::sum_all(a));
  EXPECT_EQ(tape.grad(b)[0], 0.0);
  EXPECT_EQ(tape.grad(b)[1], 0.0);
}

TEST(Autodiff, BackwardRequiresScalar) {
  ad::Tape tape;
  auto a = tape.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(ad::exp(a)), ShapeError);
}

TEST(Autodiff, NonFiniteResultIsRejected) {
  ad::Tape tape;
  EXPECT_THROW(ad::exp(tape.constant(Tensor::vector({1000.0}))), NumericError);
  EXPECT_THROW(ad::reciprocal(tape.constant(Tensor::vector({0.0}))), NumericError);
}

TEST(Autodiff, ShapeMismatchIsRejected) {
  ad::Tape tape;
  auto a = tape.constant(Tensor(Shape{2, 3}, 1.0));
  auto b = tape.constant(Tensor(Shape{3, 2}, 1.0));
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, a), ShapeError);
}

TEST(Autodiff, VariablesFromDifferentTapes) {
  ad::Tape t1, t2;
  auto a = t1.constant(Tensor::vector({1.0}));
  auto b = t2.constant(Tensor::vector({1.0}));
  EXPECT_THROW(ad::add(a, b), Error);
}

TEST(Autodiff, MutationDuringBackwardIsRejected) {
  ad::Tape tape;
  auto x = tape.leaf(Tensor::scalar(2.0));
  auto bad = tape.push(Tensor::scalar(2.0), ad::Op::Neg, {x.id}, false,
                       [](ad::Tape& t, std::size_t) { t.constant(Tensor::scalar(0.0)); });
  EXPECT_THROW(tape.backward(bad), Error);
}

TEST(GradCheck, EveryPrimitiveAgreesWithFiniteDifferences) {
  for (const auto& c : check_primitives()) {
    EXPECT_LT(c.max_rel_error, 1e-6) << c.name;
    EXPECT_GT(c.entries, 0u) << c.name;
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // y = 3x with a backward that claims dy/dx = 2
  ExpressionBuilder f = [](ad::Tape& tape, const std::vector<ad::Var>& v) {
    Tensor y = v[0].value();
    for (double& e : y.storage()) e *= 3.0;
    const std::size_t p = v[0].id;
    auto out = tape.push(std::move(y), ad::Op::Mul, {p}, false,
                         [p](ad::Tape& t, std::size_t self) {
                           Tensor& g = t.grad_buffer(p);
                           for (std::size_t i = 0; i < g.numel(); ++i) {
                             g[i] += 2.0 * t.node(self).grad[i];
                           }
                         });
    return ad::sum_all(out);
  };
  EXPECT_GT(grad_check(f, {Tensor::vector({0.3, -0.7})}), 0.3);
}

TEST(GradCheck, StepOutsideRangeIsRejected) {
  ExpressionBuilder f = [](ad::Tape&, const std::vector<ad::Var>& v) {
    return ad::sum_all(v[0]);
  };
  EXPECT_THROW(grad_check(f, {Tensor::vector({1.0})}, 1e-2), ConfigError);
  EXPECT_THROW(grad_check(f, {Tensor::vector({1.0})}, 1e-9), ConfigError);
}

TEST(Optim, AdamMatchesReference) {
  // f = sum w^2 from w0 = [1, -2], lr 0.1, two steps
  std::vector<Tensor> params{Tensor::vector({1.0, -2.0})};
  AdamState st;
  st.lr = 0.1;
  for (int k = 0; k < 2; ++k) {
    std::vector<Tensor> grads{Tensor::vector({2 * params[0][0], 2 * params[0][1]})};
    adam_step(params, grads, st);
  }
  EXPECT_NEAR(params[0][0], 0.8004122286917928, 1e-14);
  EXPECT_NEAR(params[0][1], -1.8001664861157012, 1e-14);
  EXPECT_EQ(st.step, 2u);
}

TEST(Optim, AdamRejectsMismatchedGradients) {
  std::vector<Tensor> params{Tensor::vector({1.0})};
  AdamState st;
  EXPECT_THROW(adam_step(params, {}, st), ShapeError);
  EXPECT_THROW(adam_step(params, {Tensor::vector({1.0, 2.0})}, st), ShapeError);
}

TEST(Optim, GlorotInitWithinBound) {
  const Tensor w = init_params(Shape{3, 5}, InitScheme::GlorotUniform, 9);
  const double a = std::sqrt(6.0 / 8.0);
  for (double v : w.data()) {
    EXPECT_LE(std::abs(v), a);
  }
  EXPECT_TRUE(w.identical(init_params(Shape{3, 5}, InitScheme::GlorotUniform, 9)));
  EXPECT_FALSE(w.identical(init_params(Shape{3, 5}, InitScheme::GlorotUniform, 10)));
  const Tensor z = init_params(Shape{4}, InitScheme::Zeros, 9);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(parse_init_scheme("he"), ConfigError);
}

TEST(Parallel, EveryIndexRunsOnce) {
  std::vector<int> hits(37, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Parallel, LowestFailingIndexIsRethrown) {
  try {
    parallel_for(20, 4, [](std::size_t i) {
      if (i == 7 || i == 15) throw std::runtime_error("index " + std::to_string(i));
    });
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "index 7");
  }
}

TEST(Config, SettingsSkipCommentsAndBlankLines) {
  const auto s = parse_settings("# header\n\nlr = 0.01  # trailing\n window=12\n", "x.cfg");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].key, "lr");
  EXPECT_EQ(s[0].value, "0.01");
  EXPECT_EQ(s[1].where, "x.cfg:4");
  EXPECT_THROW(parse_settings("lr 0.01\n", "x.cfg"), ConfigError);
}

TEST(Config, UnknownKeyNamesItsLine) {
  SettingTable table;
  double lr = 0;
  table.on("lr", [&](const std::string& v, const std::string& w) { lr = parse::real(v, w); });
  table.apply(parse_settings("lr = 0.5\n", "c"));
  EXPECT_EQ(lr, 0.5);
  try {
    table.apply(parse_settings("\nlearning_rate = 0.5\n", "c"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("c:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, ValueParsers) {
  EXPECT_TRUE(parse::flag("on", "f"));
  EXPECT_FALSE(parse::flag("no", "f"));
  EXPECT_THROW(parse::flag("maybe", "f"), ConfigError);
  EXPECT_THROW(parse::size("-3", "k"), ConfigError);
  EXPECT_THROW(parse::real("1.5x", "lr"), ConfigError);
  const auto l = parse::real_list("0.5, 0.25,0.25", "split");
  ASSERT_EQ(l.size(), 3u);
  EXPECT_EQ(l[1], 0.25);
}
