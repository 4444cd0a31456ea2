#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "dcv/error.hpp"
#include "dcv/grad_check.hpp"
#include "dcv/ops.hpp"
#include "dcv/rng.hpp"
#include "support/fixtures.hpp"

using namespace dcv;
using namespace dcv::testing;

TEST(TensorOps, MatmulShapeRule) {
    const Tensor c = ops::matmul(Tensor(Shape{2, 3}, 1.0), Tensor(Shape{3, 4}, 1.0));
    EXPECT_EQ(c.shape(), (Shape{2, 4}));
    EXPECT_DOUBLE_EQ(c[0], 3.0);
}

TEST(TensorOps, MatmulMismatchNamesShapes) {
    try {
        ops::matmul(Tensor(Shape{2, 3}), Tensor(Shape{4, 4}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,4]"), std::string::npos);
    }
}

TEST(TensorOps, SoftmaxOfUniformLogits) {
    const Tensor s = ops::softmax(Tensor::vector({0, 0, 0}), 0);
    for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(TensorOps, SoftmaxAxisOutOfRange) {
    EXPECT_THROW(ops::softmax(Tensor(Shape{2, 2}), 2), ArgumentError);
    EXPECT_THROW(ops::mean(Tensor(Shape{2, 2}), -3), ArgumentError);
}

TEST(TensorOps, LayerNormOfConstantVectorIsZero) {
    const Tensor y = ops::layer_norm(Tensor(Shape{1, 6}, 4.2), Tensor(Shape{6}, 1.0), Tensor(Shape{6}, 0.0));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TensorOps, SoftmaxRowsSumToOneAndStayInUnitInterval) {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor x = random_tensor(rng, {4, 7}, 20.0);
        const Tensor s = ops::softmax(x, 1);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                const double v = s[r * 7 + j];
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
                total += v;
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(TensorOps, ForwardIsBitwiseDeterministic) {
    Rng rng(5);
    const Tensor a = random_tensor(rng, {16, 32});
    const Tensor b = random_tensor(rng, {32, 24});
    const Tensor c1 = ops::softmax(ops::matmul(a, b), 1);
    const Tensor c2 = ops::softmax(ops::matmul(a, b), 1);
    EXPECT_TRUE(c1.bitwise_equal(c2));
}

TEST(TensorOps, OverflowIsReportedNotPropagated) {
    const Tensor big = Tensor::vector({1e200, 1e200});
    EXPECT_THROW(ops::mul(big, big), NumericError);
    EXPECT_THROW(ops::reciprocal(Tensor::vector({0.0})), NumericError);
}

TEST(TensorOps, ApplyDispatchesByKind) {
    const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    const Tensor b = Tensor(Shape{3, 4}, 1.0);
    const Tensor direct = ops::matmul(a, b);
    const std::vector<Tensor> inputs = {a, b};
    EXPECT_TRUE(dcv::apply(OpKind::matmul, inputs).bitwise_equal(direct));
    OpAttrs attrs;
    attrs.axis = 5;
    const std::vector<Tensor> one = {a};
    EXPECT_THROW(dcv::apply(OpKind::softmax, one, attrs), ArgumentError);
    EXPECT_THROW(dcv::apply(OpKind::add, one), ArgumentError);
}

TEST(Autodiff, InnerProductGradientIsTheOtherOperand) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor w = tape.leaf(Tensor::vector({0.3, -1.0, 2.0}));
    const Tensor x = Tensor::vector({4.0, 5.0, -6.0});
    const Tensor loss = ops::inner(w, x);
    const auto grads = tape.backward(loss);
    EXPECT_TRUE(grad_of(grads, w).bitwise_equal(x));
    EXPECT_DOUBLE_EQ(grad_of(grads, loss).item(), 1.0);
}

TEST(Autodiff, HalfSquaredNormGradientIsTheVector) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor w = tape.leaf(Tensor::vector({0.3, -1.0, 2.0}));
    const Tensor n = ops::norm(w);
    const Tensor loss = ops::scale(ops::mul(n, n), 0.5);
    const auto grads = tape.backward(loss);
    const Tensor& g = grad_of(grads, w);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], w[i], 1e-15);
}

TEST(Autodiff, BackwardRejectsNonScalarAndUnrecordedLoss) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor w = tape.leaf(Tensor::vector({1.0, 2.0}));
    EXPECT_THROW(tape.backward(ops::scale(w, 2.0)), ArgumentError);
    EXPECT_THROW(tape.backward(Tensor::scalar(3.0)), StateError);
}

TEST(Autodiff, EachNodeRunsOnceAndInputsPrecedeIt) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor w = tape.leaf(Tensor::vector({1.0, 2.0}));
    const Tensor y = ops::add(w, w);
    const Tensor loss = ops::inner(y, w);
    for (std::size_t i = 0; i < tape.size(); ++i) {
        for (const auto& in : tape.inputs(NodeId{i})) {
            if (in) {
                EXPECT_LT(in->value, i);
            }
        }
    }
    const auto grads = tape.backward(loss);
    // d/dw (2w . w) = 4w
    const Tensor& g = grad_of(grads, w);
    EXPECT_DOUBLE_EQ(g[0], 4.0);
    EXPECT_DOUBLE_EQ(g[1], 8.0);
}

TEST(Autodiff, NoGradScopeStopsRecording) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor w = tape.leaf(Tensor::vector({1.0, 2.0}));
    const std::size_t before = tape.size();
    {
        NoGradScope off;
        const Tensor y = ops::scale(w, 3.0);
        EXPECT_FALSE(y.tracked());
    }
    EXPECT_EQ(tape.size(), before);
}

TEST(GradCheck, GeluAtHalf) {
    const std::vector<Tensor> params = {Tensor::vector({0.5})};
    const auto r = grad_check([](std::span<const Tensor> p) { return ops::sum(ops::gelu(p[0]), 0); }, params, 1e-5);
    EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(GradCheck, SoftmaxCrossEntropyOnRandomLogits) {
    Rng rng(3);
    const std::vector<Tensor> params = {random_tensor(rng, {1, 4})};
    const std::vector<std::size_t> target = {2};
    const auto r = grad_check([&](std::span<const Tensor> p) { return ops::cross_entropy(p[0], target); }, params,
                              1e-5);
    EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(GradCheck, IdentityIsExact) {
    const std::vector<Tensor> params = {Tensor::scalar(0.0)};
    const auto r = grad_check([](std::span<const Tensor> p) { return ops::scale(p[0], 1.0); }, params, 1e-5);
    EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, RejectsNonPositiveStep) {
    const std::vector<Tensor> params = {Tensor::scalar(0.0)};
    EXPECT_THROW(grad_check([](std::span<const Tensor> p) { return p[0]; }, params, 0.0), ArgumentError);
}

TEST(GradCheck, NonFiniteIntermediateNamesParameter) {
    const std::vector<Tensor> params = {Tensor::vector({1.0}), Tensor::vector({1e-5})};
    try {
        grad_check([](std::span<const Tensor> p) { return ops::sum(ops::add(p[0], ops::reciprocal(p[1])), 0); },
                   params, 1e-5);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("parameter 1"), std::string::npos);
    }
}

// Every op kind, 100 random inputs each, against central differences.
TEST(GradCheck, EveryOpKindMatchesCentralDifferences) {
    Rng rng(2024);
    for (const auto& c : op_cases()) EXPECT_LE(op_grad_error(c, rng, 100), 1e-3) << c.name;
}
