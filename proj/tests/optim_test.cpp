#include <gtest/gtest.h>

#include <cmath>

#include "rged/ops.hpp"
#include "rged/optim.hpp"

namespace rged {
namespace {

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
    Rng rng(1);
    Tensor p = Tensor::randn({10}, rng);
    p.set_requires_grad(true);
    const std::vector<double> before(p.data().begin(), p.data().end());
    Adam opt({p});
    for (int i = 0; i < 5; ++i) opt.step();
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_LT(std::abs(p[i] - before[i]), 1e-12);
    EXPECT_EQ(opt.state().step, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    // m_hat = g and v_hat = g^2 after bias correction, so the step is
    // lr * g / (|g| + eps).
    Tensor p = Tensor::vector({1.0, -1.0, 0.0});
    p.set_requires_grad(true);
    auto g = p.mutable_grad();
    g[0] = 0.25;
    g[1] = -4.0;
    g[2] = 1e3;
    AdamConfig cfg;
    Adam opt({p}, cfg);
    opt.step();
    const double lr = cfg.learning_rate, eps = cfg.epsilon;
    EXPECT_NEAR(p[0], 1.0 - lr * 0.25 / (0.25 + eps), 1e-15);
    EXPECT_NEAR(p[1], -1.0 + lr * 4.0 / (4.0 + eps), 1e-15);
    EXPECT_NEAR(std::abs(p[2]), lr, 1e-12);
}

TEST(Adam, MinimisesQuadraticBowl) {
    Tensor x = Tensor::vector({0.3, -0.2, 0.15, 0.05});
    x.set_requires_grad(true);
    Adam opt({x}, AdamConfig{.learning_rate = 1e-2});
    for (int step = 0; step < 500; ++step) {
        opt.zero_grad();
        backward(squared_norm(x));
        opt.step();
    }
    double norm = 0.0;
    for (double v : x.data()) norm += v * v;
    EXPECT_LT(std::sqrt(norm), 1e-3);
}

TEST(Adam, ShapeMismatchIsDimensionError) {
    Tensor a(Shape{3});
    a.set_requires_grad(true);
    OptimizerState state({a}, {});
    std::vector<Tensor> other{Tensor(Shape{4})};
    EXPECT_THROW(adam_step(other, state), DimensionError);
    std::vector<Tensor> two{a, a};
    EXPECT_THROW(adam_step(two, state), DimensionError);
}

TEST(Adam, StepCounterIncrementsByOne) {
    Tensor a(Shape{2});
    a.set_requires_grad(true);
    Adam opt({a});
    for (std::uint64_t i = 1; i <= 3; ++i) {
        opt.step();
        EXPECT_EQ(opt.state().step, i);
    }
}

} // namespace
} // namespace rged
