#include <gtest/gtest.h>

#include <cmath>

#include "rged/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/kernel_cases.hpp"

namespace rged {
namespace {

using testing::gradcheck;
using testing::leaf;
using testing::project;
using testing::kernel_cases;

constexpr int kTrials = 20;
constexpr double kGradTol = 1e-4;

void expect_data(const Tensor& t, std::vector<double> expected, double tol = 0.0) {
    ASSERT_EQ(t.numel(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t[i], expected[i], tol) << "index " << i;
}

TEST(Tensor, ConstructionChecksLength) {
    EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
    Tensor t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
    t.set_requires_grad(true);
    ASSERT_TRUE(t.has_grad());
    EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Matmul, IdentityAndPermutation) {
    Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
    expect_data(matmul(eye, eye), {1, 0, 0, 1});
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor swap = Tensor::matrix({{0, 1}, {1, 0}});
    expect_data(matmul(a, swap), {2, 1, 4, 3});
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    Tensor a(Shape{2, 3});
    Tensor b(Shape{2, 3});
    EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    for (int trial = 0; trial < kTrials; ++trial) {
        Rng rng(100 + trial);
        std::vector<Tensor> in{leaf({3, 4}, rng), leaf({4, 5}, rng)};
        auto r = gradcheck([&](const auto& v) { return project(matmul(v[0], v[1]), 1); }, in);
        EXPECT_LT(r.max_rel_error, 1e-5) << "trial " << trial;
    }
}

TEST(SoftmaxRows, UniformAndStable) {
    expect_data(softmax_rows(Tensor::matrix({{0, 0, 0}})), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
    Tensor s = softmax_rows(Tensor::matrix({{1000, 0}}));
    EXPECT_NEAR(s[0], 1.0, 1e-15);
    EXPECT_NEAR(s[1], 0.0, 1e-15);
    EXPECT_TRUE(std::isfinite(s[1]));
}

TEST(SoftmaxRows, EmptyInputGivesEmptyResult) {
    Tensor s = softmax_rows(Tensor(Shape{0, 3}));
    EXPECT_EQ(s.numel(), 0u);
}

TEST(SoftmaxRows, RowsSumToOneAndShiftInvariant) {
    for (int trial = 0; trial < kTrials; ++trial) {
        Rng rng(200 + trial);
        Tensor x = Tensor::randn({4, 6}, rng, 3.0);
        Tensor y = softmax_rows(x);
        Tensor shifted = x.detach();
        auto d = shifted.mutable_data();
        for (std::size_t i = 0; i < 4; ++i) {
            const double c = rng.uniform(-50, 50);
            for (std::size_t j = 0; j < 6; ++j) d[i * 6 + j] += c;
        }
        Tensor ys = softmax_rows(shifted);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 6; ++j) {
                s += y.at(i, j);
                EXPECT_NEAR(y.at(i, j), ys.at(i, j), 1e-10);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(SoftmaxRows, MaskedColumnsGetZeroWeight) {
    Tensor y = softmax_rows(Tensor::matrix({{1, 5, 2}}), {false, true, false});
    EXPECT_EQ(y[1], 0.0);
    EXPECT_NEAR(y[0] + y[2], 1.0, 1e-15);
    EXPECT_THROW(softmax_rows(Tensor::matrix({{1, 2}}), {true, true}), ContractError);
}

TEST(SoftmaxRows, GradientMatchesFiniteDifferences) {
    for (int trial = 0; trial < kTrials; ++trial) {
        Rng rng(300 + trial);
        std::vector<Tensor> in{leaf({4, 6}, rng)};
        auto r = gradcheck([&](const auto& v) { return project(softmax_rows(v[0], {false, true, false, false, false, false}), 2); }, in);
        EXPECT_LT(r.max_rel_error, kGradTol);
    }
}

TEST(Sigmoid, ValuesAndSaturation) {
    EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
    Tensor s = sigmoid(Tensor::vector({40.0, -40.0}));
    EXPECT_NEAR(s[0], 1.0, 1e-12);
    EXPECT_NEAR(s[1], 0.0, 1e-12);
    EXPECT_GT(s[1], 0.0);
    EXPECT_LT(s[0], 1.0);
    Tensor far = sigmoid(Tensor::vector({1e3, -1e3}));
    EXPECT_LT(far[0], 1.0);
    EXPECT_GT(far[1], 0.0);
}

TEST(Cosine, Identities) {
    Tensor v = Tensor::vector({1.0, -2.0, 0.5});
    EXPECT_NEAR(cosine(v, v).item(), 1.0, 1e-15);
    EXPECT_NEAR(cosine(v, scale(v, -1.0)).item(), -1.0, 1e-15);
    EXPECT_EQ(cosine(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item(), 0.0);
    EXPECT_THROW(cosine(Tensor::vector({0, 0}), Tensor::vector({0, 1})), DegenerateInputError);
}

TEST(Cosine, PositiveScaleInvariance) {
    for (int trial = 0; trial < 50; ++trial) {
        Rng rng(400 + trial);
        Tensor a = Tensor::randn({8}, rng);
        Tensor b = Tensor::randn({8}, rng);
        const double lam = rng.uniform(0.01, 100.0), mu = rng.uniform(0.01, 100.0);
        EXPECT_NEAR(cosine(a, b).item(), cosine(scale(a, lam), scale(b, mu)).item(), 1e-12);
    }
}

TEST(LayernormRows, MomentsAfterNormalisation) {
    Rng rng(5);
    Tensor y = layernorm_rows(Tensor::randn({5, 32}, rng, 4.0));
    for (std::size_t i = 0; i < 5; ++i) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 32; ++j) mu += y.at(i, j);
        mu /= 32;
        for (std::size_t j = 0; j < 32; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
        var /= 32;
        EXPECT_NEAR(mu, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-9);
    }
}

TEST(Kernels, SmallExamples) {
    expect_data(mean_pool_rows(Tensor::matrix({{1, 1}, {3, 3}})), {2, 2});
    Tensor a(Shape{2, 2, 1}, 1.0), b(Shape{2, 2, 3}, 2.0);
    Tensor c = concat_channels(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 2, 4}));
    expect_data(c, {1, 2, 2, 2, 1, 2, 2, 2, 1, 2, 2, 2, 1, 2, 2, 2});
    EXPECT_THROW(concat_channels(Tensor(Shape{2, 3, 1}), b), DimensionError);
    EXPECT_THROW(add(Tensor(Shape{2}), Tensor(Shape{3})), DimensionError);
    expect_data(transpose(Tensor::matrix({{1, 2, 3}})), {1, 2, 3});
    EXPECT_EQ(transpose(Tensor::matrix({{1, 2, 3}})).shape(), (Shape{3, 1}));
    expect_data(slice_rows(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}), 1, 3), {3, 4, 5, 6});
    EXPECT_EQ(mse(Tensor::vector({1, 2}), Tensor::vector({3, 2})).item(), 2.0);
    expect_data(blend_mask(Tensor(Shape{1, 2, 1}, 4.0), Tensor(Shape{1, 2, 1}, 2.0), Tensor::matrix({{0.5, 1.0}})),
                {3.0, 4.0});
    expect_data(upsample_nearest(Tensor::matrix({{1, 2}}), 2), {1, 1, 2, 2, 1, 1, 2, 2});
    // 2x4 single-channel image, 2x2 patches: two patches in raster order.
    Tensor img(Shape{2, 4, 1}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
    expect_data(patchify(img, 2), {1, 2, 5, 6, 3, 4, 7, 8});
    EXPECT_THROW(patchify(img, 3), DimensionError);
    expect_data(unpatchify(patchify(img, 2), 2, 4, 2), {1, 2, 3, 4, 5, 6, 7, 8});
}

TEST(Kernels, NonFiniteResultIsAnError) {
    EXPECT_THROW(exp(Tensor::scalar(1e6)), NumericError);
}

TEST(Kernels, GradientsMatchFiniteDifferences) {
    for (const auto& kc : kernel_cases()) {
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            Rng rng(1000 + trial);
            std::vector<Tensor> in;
            for (const Shape& s : kc.shapes) in.push_back(leaf(s, rng, kc.input_scale));
            auto r = gradcheck([&](const auto& v) { return project(kc.fn(v), 7 + trial); }, in);
            worst = std::max(worst, r.max_rel_error);
        }
        EXPECT_LT(worst, kGradTol) << kc.name;
    }
}

TEST(Backward, SumGivesOnes) {
    Rng rng(3);
    Tensor x = leaf({3, 2}, rng);
    backward(sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, CosineAgainstConstantMatchesFiniteDifferences) {
    Rng rng(4);
    Tensor c = Tensor::randn({6}, rng);
    std::vector<Tensor> in{leaf({6}, rng)};
    auto r = gradcheck([&](const auto& v) { return cosine(v[0], c); }, in);
    EXPECT_LT(r.max_rel_error, kGradTol);
    // The gradient of a scale-invariant function is orthogonal to its argument.
    double dot = 0.0;
    for (std::size_t i = 0; i < 6; ++i) dot += in[0].grad()[i] * in[0][i];
    EXPECT_NEAR(dot, 0.0, 1e-12);
}

TEST(Backward, ContractErrors) {
    Rng rng(5);
    Tensor x = leaf({3}, rng);
    EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
    Tensor loss = sum(scale(x, 2.0));
    backward(loss);
    EXPECT_THROW(backward(loss), ContractError);
    EXPECT_THROW(backward(sum(Tensor(Shape{2}))), ContractError);
}

TEST(Backward, ReplayedForwardIsDeterministic) {
    Rng rng(6);
    Tensor a = leaf({4, 5}, rng), b = leaf({5, 3}, rng);
    auto run = [&] {
        a.zero_grad();
        b.zero_grad();
        backward(sum(gelu(softmax_rows(matmul(a, b)))));
        return std::pair{std::vector<double>(a.grad().begin(), a.grad().end()),
                         std::vector<double>(b.grad().begin(), b.grad().end())};
    };
    auto first = run();
    auto second = run();
    EXPECT_EQ(first, second);
}

TEST(Backward, VisitsNodesInReverseExecutionOrder) {
    // A diamond: the shared node must receive both contributions before
    // propagating, which only happens under reverse topological order.
    Tensor x = Tensor::vector({2.0});
    x.set_requires_grad(true);
    Tensor y = mul(x, x);
    Tensor z = add(scale(y, 3.0), mul(y, y));
    backward(sum(z));
    // d/dx (3x^2 + x^4) = 6x + 4x^3
    EXPECT_DOUBLE_EQ(x.grad()[0], 6 * 2.0 + 4 * 8.0);
}

} // namespace
} // namespace rged
