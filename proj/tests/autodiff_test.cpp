#include <cmath>
#include <thread>

#include <gtest/gtest.h>

#include "bistet/tensor.hpp"
#include "test_util.hpp"

using bistet::backward;
using bistet::Tensor;
using testutil::random_tensor;
using testutil::random_tensor_offzero;

namespace {

// loss = sum(probe .* y): weights every output element distinctly so the
// whole Jacobian of the op under test is exercised.
bistet::Tensor probe_sum(const Tensor& y, const Tensor& probe) { return bistet::sum_all(bistet::mul(y, probe)); }

}  // namespace

TEST(Matmul, IdentityCase) {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {3, 4, 5, 6});
  Tensor out = bistet::matmul(i2, m);
  EXPECT_EQ(out.data(), m.data());
}

TEST(Matmul, SmallProduct) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor out = bistet::matmul(a, b);
  EXPECT_EQ(out.data(), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, ZeroAnnihilator) {
  bistet::Rng rng(11);
  Tensor z = Tensor::zeros({2, 3});
  Tensor b = random_tensor({3, 4}, rng);
  Tensor out = bistet::matmul(z, b);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(out.shape(), (bistet::Shape{2, 4}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    bistet::matmul(a, b);
    FAIL() << "expected shape error";
  } catch (const bistet::Error& e) {
    EXPECT_EQ(e.kind(), bistet::ErrorKind::Shape);
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4x2]"), std::string::npos);
  }
}

TEST(Matmul, MatchesIndependentOracle) {
  bistet::Rng rng(12);
  Tensor a = random_tensor({5, 7}, rng);
  Tensor b = random_tensor({7, 4}, rng);
  Tensor out = bistet::matmul(a, b);
  auto ref = testutil::ref_matmul(a.data(), b.data(), 5, 7, 4);
  EXPECT_LT(testutil::max_abs_diff(out.data(), ref), 1e-12);
}

TEST(Matmul, AssociativityOnWellConditionedTriples) {
  bistet::Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5, 6}, rng);
    Tensor c = random_tensor({6, 3}, rng);
    Tensor left = bistet::matmul(bistet::matmul(a, b), c);
    Tensor right = bistet::matmul(a, bistet::matmul(b, c));
    EXPECT_LT(testutil::max_abs_diff(left.data(), right.data()), 1e-9);
  }
}

TEST(Softmax, UniformLogits) {
  Tensor x = Tensor::from({3}, {0, 0, 0});
  Tensor y = bistet::softmax(x, 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  Tensor base = Tensor::from({3}, {0, 2.5, 0});
  Tensor shifted = Tensor::from({3}, {-7.25, -4.75, -7.25});
  EXPECT_LT(testutil::max_abs_diff(bistet::softmax(base, 0).data(), bistet::softmax(shifted, 0).data()), 1e-15);
}

TEST(Softmax, KnownValue) {
  Tensor x = Tensor::from({2}, {0.0, std::log(3.0)});
  Tensor y = bistet::softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 0.25, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
  bistet::Rng rng(14);
  Tensor x = random_tensor({6, 9}, rng, -30.0, 30.0);
  Tensor y = bistet::softmax(x, 1);
  for (size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (size_t j = 0; j < 9; ++j) s += y.data()[r * 9 + j];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Softmax, NonFiniteInputRaisesNumericError) {
  Tensor x = Tensor::from({2}, {0.0, std::numeric_limits<double>::infinity()});
  try {
    bistet::softmax(x, 0);
    FAIL() << "expected numeric error";
  } catch (const bistet::Error& e) {
    EXPECT_EQ(e.kind(), bistet::ErrorKind::Numeric);
  }
}

TEST(Softmax, AxisZeroMatchesTransposedAxisOne) {
  bistet::Rng rng(15);
  Tensor x = random_tensor({4, 5}, rng);
  Tensor a = bistet::softmax(x, 0);
  Tensor b = bistet::transpose(bistet::softmax(bistet::transpose(x), 1));
  EXPECT_LT(testutil::max_abs_diff(a.data(), b.data()), 1e-15);
}

TEST(Broadcast, NonTrailingShapesRejected) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2});
  EXPECT_THROW(bistet::add(a, b), bistet::Error);
}

TEST(Backward, SumOfSquaresGradient) {
  Tensor x = Tensor::param({4}, {1, -2, 3, 0.5});
  Tensor loss = bistet::sum_all(bistet::mul(x, x));
  backward(loss);
  for (size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
  Tensor x = Tensor::param({3}, {1, 2, 3});
  Tensor p = Tensor::param({3}, {4, 5, 6});
  Tensor loss = bistet::sum_all(x);
  backward(loss);
  for (double v : p.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RepeatedCallDoublesGradients) {
  bistet::Rng rng(16);
  Tensor x = Tensor::param({5}, random_tensor({5}, rng).data());
  Tensor loss = bistet::sum_all(bistet::mul(x, x));
  backward(loss);
  std::vector<double> once = x.grad();
  backward(loss);
  for (size_t i = 0; i < once.size(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * once[i]);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::param({3}, {1, 2, 3});
  Tensor y = bistet::mul(x, x);
  try {
    backward(y);
    FAIL() << "expected contract error";
  } catch (const bistet::Error& e) {
    EXPECT_EQ(e.kind(), bistet::ErrorKind::Contract);
  }
}

TEST(Backward, DisconnectedScalarRejected) {
  Tensor x = Tensor::param({1}, {2.0});
  EXPECT_THROW(backward(x), bistet::Error);
}

// Accumulated gradients across two different graphs equal the elementwise sum
// of per-graph gradients, exactly.
TEST(Backward, AccumulationMatchesPerPassSumExactly) {
  bistet::Rng rng(17);
  std::vector<double> init = random_tensor({6}, rng).data();
  Tensor probe1 = random_tensor({6}, rng);
  Tensor probe2 = random_tensor({6}, rng);

  auto loss1 = [&](const Tensor& v) { return probe_sum(bistet::mul(v, v), probe1); };
  auto loss2 = [&](const Tensor& v) { return probe_sum(bistet::exp_op(v), probe2); };

  Tensor both = Tensor::param({6}, init);
  backward(loss1(both));
  backward(loss2(both));

  Tensor only1 = Tensor::param({6}, init);
  backward(loss1(only1));
  Tensor only2 = Tensor::param({6}, init);
  backward(loss2(only2));

  for (size_t i = 0; i < 6; ++i) EXPECT_EQ(both.grad()[i], only1.grad()[i] + only2.grad()[i]);
}

TEST(GradientCheck, ExactForLinearFunction) {
  bistet::Rng rng(18);
  Tensor a = random_tensor({7}, rng);
  auto f = [&](const Tensor& x) { return bistet::sum_all(bistet::mul(x, a)); };
  EXPECT_LT(bistet::gradient_check(f, random_tensor({7}, rng), 1e-5), 1e-9);
}

TEST(GradientCheck, CrossEntropyChain) {
  bistet::Rng rng(19);
  Tensor w = random_tensor({4, 5}, rng);
  auto f = [&](const Tensor& x) {
    Tensor logits = bistet::matmul(x, w);
    Tensor logp = bistet::log_softmax_rows(logits);
    // negative log-likelihood of class 2 for every row
    Tensor picked = bistet::mul(logp, Tensor::from({3, 5}, {0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0}));
    return bistet::neg(bistet::sum_all(picked));
  };
  EXPECT_LT(bistet::gradient_check(f, random_tensor({3, 4}, rng), 1e-5), 1e-5);
}

TEST(GradientCheck, DetectsInjectedFault) {
  bistet::Rng rng(20);
  auto faulty_double = [](const Tensor& x) {
    std::vector<double> out(x.data());
    for (double& v : out) v *= 2.0;
    return bistet::detail::make_op(x.shape(), std::move(out), {x},
                                   [](const std::vector<double>& gout, const std::vector<std::vector<double>*>& gin) {
                                     if (!gin[0]) return;
                                     // deliberately 1% off
                                     for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += 2.02 * gout[i];
                                   });
  };
  auto f = [&](const Tensor& x) { return bistet::sum_all(faulty_double(x)); };
  EXPECT_GT(bistet::gradient_check(f, random_tensor({5}, rng), 1e-5), 1e-3);
}

TEST(GradientCheck, EpsOutsideRangeRejected) {
  auto f = [](const Tensor& x) { return bistet::sum_all(x); };
  EXPECT_THROW(bistet::gradient_check(f, Tensor::from({2}, {1, 2}), 1e-2), bistet::Error);
}

TEST(PrimitiveGradients, ElementwiseAndBroadcast) {
  bistet::Rng rng(21);
  Tensor probe = random_tensor({3, 4}, rng);
  Tensor other = random_tensor({3, 4}, rng);
  Tensor vec = random_tensor({4}, rng);
  Tensor sc = random_tensor({1}, rng);

  auto check = [&](const std::function<Tensor(const Tensor&)>& f, const Tensor& at) {
    EXPECT_LT(bistet::gradient_check(f, at, 1e-5), 1e-5);
  };

  check([&](const Tensor& x) { return probe_sum(bistet::add(x, other), probe); }, random_tensor({3, 4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::add(other, x), probe); }, random_tensor({4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::add(other, x), probe); }, random_tensor({1}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::sub(x, other), probe); }, random_tensor({3, 4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::sub(other, x), probe); }, random_tensor({4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::mul(x, other), probe); }, random_tensor({3, 4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::mul(other, x), probe); }, random_tensor({4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::mul(other, x), probe); }, random_tensor({1}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::divide(x, bistet::add_scalar(other, 3.0)), probe); },
        random_tensor({3, 4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::divide(other, bistet::add_scalar(x, 3.0)), probe); },
        random_tensor({4}, rng));
  check([&](const Tensor& x) { return probe_sum(bistet::mul_scalar(x, -1.7), probe); }, random_tensor({3, 4}, rng));
  (void)vec;
  (void)sc;
}

TEST(PrimitiveGradients, NonlinearOps) {
  bistet::Rng rng(22);
  Tensor probe = random_tensor({3, 4}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::relu(x), probe); },
                random_tensor_offzero({3, 4}, rng), 1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::exp_op(x), probe); },
                random_tensor({3, 4}, rng), 1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::log_op(bistet::add_scalar(x, 2.0)), probe); },
                random_tensor({3, 4}, rng), 1e-5),
            1e-5);
}

TEST(PrimitiveGradients, SoftmaxAndReductions) {
  bistet::Rng rng(23);
  Tensor probe = random_tensor({3, 4}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::softmax(x, 1), probe); },
                random_tensor({3, 4}, rng), 1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::softmax(x, 0), probe); },
                random_tensor({3, 4}, rng), 1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::log_softmax_rows(x), probe); },
                random_tensor({3, 4}, rng), 1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check([&](const Tensor& x) { return bistet::sum_all(bistet::mul(x, x)); },
                                   random_tensor({3, 4}, rng), 1e-5),
            1e-5);
  Tensor probe2 = random_tensor({3, 4}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::mean_axis(x, 1), probe2); },
                random_tensor({3, 5, 4}, rng), 1e-5),
            1e-5);
}

TEST(PrimitiveGradients, MaskedSoftmax) {
  bistet::Rng rng(24);
  // causal-style additive mask: -1e9 above the diagonal
  std::vector<double> mdata(4 * 4, 0.0);
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = i + 1; j < 4; ++j) mdata[i * 4 + j] = -1e9;
  Tensor mask = Tensor::from({4, 4}, mdata);
  Tensor probe = random_tensor({4, 4}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::softmax(bistet::add(x, mask), 1), probe); },
                random_tensor({4, 4}, rng), 1e-5),
            1e-5);
  // masked positions get ~zero attention
  Tensor w = bistet::softmax(bistet::add(random_tensor({4, 4}, rng), mask), 1);
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = i + 1; j < 4; ++j) EXPECT_LT(w.data()[i * 4 + j], 1e-6);
}

TEST(PrimitiveGradients, ShapeOps) {
  bistet::Rng rng(25);
  Tensor probe = random_tensor({4, 3}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::transpose(x), probe); },
                random_tensor({3, 4}, rng), 1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::reshape(x, {4, 3}), probe); },
                random_tensor({2, 6}, rng), 1e-5),
            1e-5);
  Tensor left = random_tensor({4, 2}, rng);
  Tensor probe6 = random_tensor({4, 5}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& x) { return probe_sum(bistet::concat_cols({left, x}), probe6); },
                random_tensor({4, 3}, rng), 1e-5),
            1e-5);
}

TEST(PrimitiveGradients, GatherRows) {
  bistet::Rng rng(26);
  std::vector<int> ids = {0, 2, 2, 4, 1};
  Tensor probe = random_tensor({5, 3}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& table) { return probe_sum(bistet::gather_rows(table, ids), probe); },
                random_tensor({5, 3}, rng), 1e-5),
            1e-5);
  EXPECT_THROW(bistet::gather_rows(Tensor::zeros({5, 3}), std::vector<int>{5}), bistet::Error);
}

TEST(PrimitiveGradients, Conv2d) {
  bistet::Rng rng(27);
  Tensor x = random_tensor({2, 5, 6}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  for (size_t stride : {1u, 2u}) {
    Tensor ref = bistet::conv2d(x, w, b, stride, stride, 1);
    Tensor probe = random_tensor(ref.shape(), rng);
    EXPECT_LT(bistet::gradient_check(
                  [&](const Tensor& v) { return probe_sum(bistet::conv2d(v, w, b, stride, stride, 1), probe); }, x,
                  1e-5),
              1e-5);
    EXPECT_LT(bistet::gradient_check(
                  [&](const Tensor& v) { return probe_sum(bistet::conv2d(x, v, b, stride, stride, 1), probe); }, w,
                  1e-5),
              1e-5);
    EXPECT_LT(bistet::gradient_check(
                  [&](const Tensor& v) { return probe_sum(bistet::conv2d(x, w, v, stride, stride, 1), probe); }, b,
                  1e-5),
              1e-5);
  }
}

TEST(PrimitiveGradients, LayerNorm) {
  bistet::Rng rng(28);
  Tensor x = random_tensor({3, 6}, rng);
  Tensor scale = random_tensor({6}, rng, 0.5, 1.5);
  Tensor shift = random_tensor({6}, rng);
  Tensor probe = random_tensor({3, 6}, rng);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& v) { return probe_sum(bistet::layer_norm_rows(v, scale, shift, 1e-6), probe); }, x,
                1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& v) { return probe_sum(bistet::layer_norm_rows(x, v, shift, 1e-6), probe); }, scale,
                1e-5),
            1e-5);
  EXPECT_LT(bistet::gradient_check(
                [&](const Tensor& v) { return probe_sum(bistet::layer_norm_rows(x, scale, v, 1e-6), probe); }, shift,
                1e-5),
            1e-5);
}

TEST(NoGrad, GuardSuppressesGraph) {
  Tensor x = Tensor::param({3}, {1, 2, 3});
  bistet::NoGradGuard guard;
  Tensor y = bistet::mul(x, x);
  EXPECT_FALSE(y.has_node());
}

TEST(Concurrency, DistinctGraphsOnDistinctThreads) {
  auto run = [](uint64_t seed) {
    bistet::Rng rng(seed);
    Tensor x = Tensor::param({4, 4}, testutil::random_tensor({4, 4}, rng).data());
    Tensor loss = bistet::sum_all(bistet::mul(bistet::softmax(x, 1), x));
    backward(loss);
    return x.grad();
  };
  std::vector<double> serial1 = run(41), serial2 = run(42);
  std::vector<double> t1out, t2out;
  std::thread t1([&] { t1out = run(41); });
  std::thread t2([&] { t2out = run(42); });
  t1.join();
  t2.join();
  EXPECT_EQ(t1out, serial1);
  EXPECT_EQ(t2out, serial2);
}
