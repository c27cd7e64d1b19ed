#include <gtest/gtest.h>

#include <cmath>

#include "rged/diffusion.hpp"
#include "support/gaussian_recursion.hpp"
#include "support/gradcheck.hpp"

namespace rged {
namespace {

using testing::GaussianRecursion;
using testing::gradcheck;
using testing::leaf;
using testing::project;

const DiffusionSchedule kSched = DiffusionSchedule::scaled_linear();

Tensor random_image(Rng& rng) { return Tensor::uniform(Shape{kCanvas, kCanvas, 3}, rng, 0.0, 1.0); }

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// A TinyNet whose output layer is not zero, so its predictions are nontrivial.
TinyNet busy_net(std::uint64_t seed, std::size_t channels = 3, std::size_t width = 4, std::size_t cond = 8) {
    TinyNet n = TinyNet::init(seed, channels, width, cond);
    Rng rng(seed + 7);
    n.conv3_w = Tensor::randn(n.conv3_w.shape(), rng, 0.3);
    n.conv3_b = Tensor::randn(n.conv3_b.shape(), rng, 0.3);
    n.film1_w = Tensor::randn(n.film1_w.shape(), rng, 0.3);
    n.film2_w = Tensor::randn(n.film2_w.shape(), rng, 0.3);
    return n;
}

TEST(Schedule, Sanity) {
    EXPECT_EQ(kSched.T, 50u);
    EXPECT_EQ(kSched.abar(0), 1.0);
    for (std::size_t t = 1; t <= kSched.T; ++t) {
        EXPECT_GT(kSched.beta[t], 0.0);
        EXPECT_LT(kSched.beta[t], 1.0);
        EXPECT_LT(kSched.abar(t), kSched.abar(t - 1));
        EXPECT_NEAR(kSched.signal(t) * kSched.signal(t) + kSched.noise(t) * kSched.noise(t), 1.0, 1e-15);
        EXPECT_EQ(kSched.sigma(t, t - 1, 0.0), 0.0);
    }
    EXPECT_DOUBLE_EQ(kSched.beta[1], 0.002);
    EXPECT_DOUBLE_EQ(kSched.beta[50], 0.4);
    EXPECT_LT(kSched.abar(50), 1e-4);
    const DiffusionSchedule canonical = DiffusionSchedule::linear(1000, 1e-4, 0.02);
    EXPECT_DOUBLE_EQ(DiffusionSchedule::scaled_linear(1000).beta[1000], canonical.beta[1000]);
    EXPECT_DOUBLE_EQ(DiffusionSchedule::linear().beta[50], 0.02);
    EXPECT_THROW(kSched.abar(51), ContractError);
    EXPECT_THROW(DiffusionSchedule::linear(0), ContractError);
}

TEST(Schedule, EvenlySpacedSteps) {
    EXPECT_EQ(kSched.timesteps(8), (std::vector<std::size_t>{50, 43, 37, 31, 25, 18, 12, 6}));
    EXPECT_EQ(kSched.timesteps(50).back(), 1u);
    EXPECT_EQ(kSched.timesteps(50).size(), 50u);
    EXPECT_THROW(kSched.timesteps(0), ContractError);
    EXPECT_THROW(kSched.timesteps(51), ContractError);
}

TEST(ForwardSample, Examples) {
    Rng rng(1);
    const Tensor z0 = Tensor::randn({4, 4, 3}, rng);
    const Tensor eps = Tensor::randn({4, 4, 3}, rng);
    const Tensor zero(Shape{4, 4, 3}, 0.0);
    const Tensor z = forward_sample(kSched, z0, 20, zero);
    for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_EQ(z[i], kSched.signal(20) * z0[i]);
    EXPECT_THROW(forward_sample(kSched, z0, 0, eps), ContractError);
    EXPECT_THROW(forward_sample(kSched, z0, 51, eps), ContractError);
    EXPECT_THROW(forward_sample(kSched, z0, 3, Tensor(Shape{4, 4, 2}, 0.0)), DimensionError);
    // abar_0 = 1 is the only level with no noise; renoise_source reaches it.
    EXPECT_TRUE(bit_equal(renoise_source(kSched, z0, 0, eps), z0));
}

// Empirical mean and variance of z_t over 10 000 independent draws.
void check_marginals(const std::function<Tensor(const Tensor&, const Tensor&)>& sampler, double signal, double var) {
    const std::size_t draws = 10000;
    Rng rng(99);
    const Tensor z0(Shape{draws}, 0.8);
    const Tensor z = sampler(z0, Tensor::randn({draws}, rng));
    double mean = 0.0;
    for (double v : z.data()) mean += v;
    mean /= draws;
    double sq = 0.0;
    for (double v : z.data()) sq += (v - mean) * (v - mean);
    sq /= draws - 1;
    EXPECT_NEAR(mean, signal * 0.8, 4.0 * std::sqrt(var / draws));
    EXPECT_NEAR(sq, var, 0.05 * var);
}

TEST(ForwardSample, MonteCarloMarginals) {
    for (std::size_t t : {5u, 25u, 50u}) {
        SCOPED_TRACE(t);
        check_marginals([&](const Tensor& z0, const Tensor& e) { return forward_sample(kSched, z0, t, e); }, kSched.signal(t),
                        1.0 - kSched.abar(t));
        check_marginals([&](const Tensor& z0, const Tensor& e) { return renoise_source(kSched, z0, t, e); }, kSched.signal(t),
                        1.0 - kSched.abar(t));
    }
}

TEST(EstimateZ0, InvertsForwardSample) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor z0 = Tensor::randn({8, 8, 3}, rng);
        const Tensor eps = Tensor::randn({8, 8, 3}, rng);
        const std::size_t t = 1 + static_cast<std::size_t>(rng.below(50));
        const Tensor back = estimate_z0(kSched, forward_sample(kSched, z0, t, eps), eps, t);
        for (std::size_t i = 0; i < z0.numel(); ++i) ASSERT_LT(std::abs(back[i] - z0[i]), 1e-12);
    }
    const Tensor zt = Tensor::randn({2, 2, 3}, rng);
    const Tensor est = estimate_z0(kSched, zt, Tensor(Shape{2, 2, 3}, 0.0), 30);
    for (std::size_t i = 0; i < zt.numel(); ++i) EXPECT_DOUBLE_EQ(est[i], zt[i] / kSched.signal(30));
}

TEST(DdimStep, ConsistencyWithForwardProcess) {
    Rng rng(3);
    const Tensor z0 = Tensor::randn({6, 6, 3}, rng);
    const Tensor eps = Tensor::randn({6, 6, 3}, rng);
    for (std::size_t t = 1; t <= kSched.T; ++t) {
        const Tensor prev = ddim_step(kSched, forward_sample(kSched, z0, t, eps), eps, t);
        const Tensor expect = t == 1 ? z0 : forward_sample(kSched, z0, t - 1, eps);
        for (std::size_t i = 0; i < z0.numel(); ++i) ASSERT_NEAR(prev[i], expect[i], 1e-12) << t;
    }
    const Tensor zt = Tensor::randn({6, 6, 3}, rng);
    EXPECT_TRUE(bit_equal(ddim_step(kSched, zt, eps, 1), estimate_z0(kSched, zt, eps, 1)));
}

TEST(DdimStep, Errors) {
    Rng rng(4);
    const Tensor z = Tensor::randn({2, 2, 3}, rng);
    EXPECT_THROW(ddim_step(kSched, z, z, 10, 9, 1.0, &z), InvalidSigmaError);
    EXPECT_THROW(ddim_step(kSched, z, z, 10, 9, -0.1, &z), InvalidSigmaError);
    EXPECT_THROW(ddim_step(kSched, z, z, 10, 10), ContractError);
    EXPECT_THROW(ddim_step(kSched, z, z, 0), ContractError);
    EXPECT_THROW(ddim_step(kSched, z, z, 10, 9, 0.01), ContractError);
    // eta = 1 sits exactly on the admissible boundary's safe side.
    for (std::size_t t = 2; t <= kSched.T; ++t) EXPECT_GE(1.0 - kSched.abar(t - 1) - std::pow(kSched.sigma(t, t - 1, 1.0), 2), 0.0);
}

TEST(GaussianOracle, DeterministicTrajectoryMatchesClosedForm) {
    Rng rng(6);
    const Tensor mu = Tensor::uniform({8, 8, 3}, rng, 0.0, 1.0);
    const double s = 0.3;
    GaussianOracle oracle(kSched, mu, s);
    IdentityCodec codec;
    SamplerConfig cfg;
    cfg.seed = 12;
    cfg.keep_trajectory = true;
    cfg.clip_denoised = false;
    const Tensor null_cond(Shape{1}, 0.0);
    const Tensor src = Tensor::uniform({8, 8, 3}, rng, 0.0, 1.0);
    const SamplerRun run = edit_sample(oracle, codec, kSched, src, null_cond, {3.0, null_cond}, Tensor(Shape{8, 8}, 1.0), cfg);
    ASSERT_EQ(run.trajectory.size(), kSched.T + 1);
    const GaussianRecursion oracle_path(kSched, kSched.timesteps(kSched.T), run.trajectory.front(), mu, s);
    double worst = 0.0;
    for (std::size_t k = 0; k < run.trajectory.size(); ++k) {
        EXPECT_EQ(run.trajectory_steps[k], kSched.T - k);
        for (std::size_t i = 0; i < mu.numel(); ++i)
            worst = std::max(worst, std::abs(run.trajectory[k][i] - oracle_path.states[k][i]));
    }
    EXPECT_LT(worst, 1e-5);
    for (std::size_t i = 0; i < mu.numel(); ++i) EXPECT_NEAR(run.z0[i], oracle_path.states.back()[i], 1e-4);
}

TEST(GaussianOracle, StridedStepsMatchClosedForm) {
    Rng rng(7);
    const Tensor mu = Tensor::uniform({4, 4, 3}, rng, 0.0, 1.0);
    GaussianOracle oracle(kSched, mu, 0.5);
    IdentityCodec codec;
    SamplerConfig cfg;
    cfg.timesteps = kSched.timesteps(8);
    cfg.keep_trajectory = true;
    cfg.clip_denoised = false;
    const Tensor nc(Shape{1}, 0.0);
    const SamplerRun run = edit_sample(oracle, codec, kSched, Tensor(Shape{4, 4, 3}, 0.5), nc, {1.0, nc}, Tensor(Shape{4, 4}, 1.0), cfg);
    const GaussianRecursion path(kSched, cfg.timesteps, run.trajectory.front(), mu, 0.5);
    for (std::size_t k = 0; k < run.trajectory.size(); ++k)
        for (std::size_t i = 0; i < mu.numel(); ++i) EXPECT_NEAR(run.trajectory[k][i], path.states[k][i], 1e-10);
}

TEST(GaussianOracle, ParameterFreeAndDeterministic) {
    Rng rng(8);
    const Tensor mu = Tensor::uniform({4, 4, 3}, rng, 0.0, 1.0);
    GaussianOracle oracle(kSched, mu, 0.2);
    const Tensor zin = Tensor::randn({4, 4, 7}, rng);
    const Tensor nc(Shape{1}, 0.0);
    const Tensor a = oracle.predict(zin, 17, nc), b = oracle.predict(zin, 17, nc);
    EXPECT_TRUE(bit_equal(a, b));
    EXPECT_EQ(a.shape(), (Shape{4, 4, 3}));
    EXPECT_THROW(GaussianOracle(kSched, mu, 0.0), ContractError);
}

TEST(Cfg, ExactIdentities) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor u = Tensor::randn({5, 5, 3}, rng), c = Tensor::randn({5, 5, 3}, rng);
        EXPECT_TRUE(bit_equal(cfg_combine(u, c, 0.0), u));
        EXPECT_TRUE(bit_equal(cfg_combine(u, c, 1.0), c));
        const Tensor g3 = cfg_combine(u, c, 3.0);
        for (std::size_t i = 0; i < u.numel(); ++i) ASSERT_EQ(g3[i], u[i] + 3.0 * (c[i] - u[i]));
        const Tensor g2 = cfg_combine(u, c, 2.0), g5 = cfg_combine(u, c, 5.0);
        for (std::size_t i = 0; i < u.numel(); ++i) {
            // affine in w: equal increments per unit of w
            EXPECT_NEAR(g3[i] - g2[i], (g5[i] - g3[i]) / 2.0, 1e-12);
        }
    }
    EXPECT_THROW(cfg_combine(Tensor(Shape{1}, 0.0), Tensor(Shape{1}, 0.0), -1.0), ContractError);
}

TEST(Cfg, PredictUsesBothBranches) {
    TinyNet net = busy_net(3, 3, 4, 8);
    Rng rng(10);
    const Tensor zin = Tensor::randn({8, 8, 7}, rng);
    const Tensor c = Tensor::randn({8}, rng), nc = Tensor::randn({8}, rng);
    const auto [pu, pc] = net.predict_pair(zin, 12, c, nc);
    EXPECT_TRUE(bit_equal(pu, net.predict(zin, 12, nc)));
    EXPECT_TRUE(bit_equal(pc, net.predict(zin, 12, c)));
    EXPECT_TRUE(bit_equal(cfg_predict(net, zin, 12, c, {1.0, nc}), pc));
    EXPECT_TRUE(bit_equal(cfg_predict(net, zin, 12, c, {0.0, nc}), pu));
}

TEST(Blend, Examples) {
    Rng rng(11);
    const Tensor a = Tensor::randn({3, 3, 2}, rng), b = Tensor::randn({3, 3, 2}, rng);
    EXPECT_TRUE(bit_equal(blend(a, b, Tensor(Shape{3, 3}, 0.0)), b));
    EXPECT_TRUE(bit_equal(blend(a, b, Tensor(Shape{3, 3}, 1.0)), a));
    const Tensor h = blend(a, b, Tensor(Shape{3, 3}, 0.5));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(h[i], 0.5 * (a[i] + b[i]));
}

TEST(Codec, IdentityAndSpaceToDepthRoundTrip) {
    Rng rng(12);
    const Tensor x = random_image(rng);
    IdentityCodec id;
    EXPECT_TRUE(bit_equal(id.decode(id.encode(x)), x));
    SpaceToDepthCodec s2d;
    const Tensor z = s2d.encode(x);
    EXPECT_EQ(z.shape(), (Shape{32, 32, 12}));
    EXPECT_TRUE(bit_equal(s2d.decode(z), x));
    EXPECT_EQ(make_codec("identity")->factor(), 1u);
    EXPECT_EQ(make_codec("space-to-depth")->channels(), 12u);
    EXPECT_THROW(make_codec("vae"), ContractError);
}

TEST(Codec, MaskResampling) {
    BitMask m(8, 8);
    m(2, 3) = 1;
    const BitMask up = mask_to_pixels(m, 8);
    EXPECT_EQ(up.count(), 64u);
    EXPECT_EQ(up(16, 24), 1);
    EXPECT_EQ(mask_to_latent(up, 8), m);
}

TEST(TinyNet, ShapesAndZeroInit) {
    TinyNet net = TinyNet::init(1, 3, 8, kDim);
    Rng rng(13);
    const Tensor zin = Tensor::randn({16, 16, 7}, rng);
    const Tensor out = net.predict(zin, 5, Tensor::randn({kDim}, rng));
    EXPECT_EQ(out.shape(), (Shape{16, 16, 3}));
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
    TinyNet wide = TinyNet::init(1, 12, 8, kDim);
    EXPECT_EQ(wide.predict(Tensor::randn({8, 8, 25}, rng), 5, Tensor::randn({kDim}, rng)).shape(), (Shape{8, 8, 12}));
}

TEST(TinyNet, GradientsMatchFiniteDifferences) {
    for (int trial = 0; trial < 20; ++trial) {
        TinyNet net = busy_net(100 + trial, 3, 3, 4);
        Rng rng(200 + trial);
        std::vector<Tensor> leaves;
        net.visit([&](const std::string&, Tensor& t) {
            t.set_requires_grad(true);
            leaves.push_back(t);
        });
        Tensor zin = leaf({5, 5, 7}, rng);
        Tensor cond = leaf({4}, rng);
        leaves.push_back(zin);
        leaves.push_back(cond);
        const std::size_t t = 1 + static_cast<std::size_t>(rng.below(50));
        auto f = [&](const std::vector<Tensor>& v) {
            TinyNet n = net;
            std::size_t k = 0;
            n.visit([&](const std::string&, Tensor& p) { p = v[k++]; });
            return project(n.predict(v[k], t, v[k + 1]), 31);
        };
        const auto r = gradcheck(f, leaves, 1e-5, 60, trial);
        EXPECT_LT(r.max_rel_error, 1e-4) << trial;
    }
}

TEST(TimestepEmbedding, Distinct) {
    const Tensor a = timestep_embedding(1), b = timestep_embedding(2);
    EXPECT_EQ(a.shape(), (Shape{1, kTimeEmbedding}));
    EXPECT_FALSE(bit_equal(a, b));
    for (double v : a.data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(DenoiserInput, Layout) {
    Rng rng(14);
    const Tensor zt = Tensor::randn({2, 2, 3}, rng), src = Tensor::randn({2, 2, 3}, rng);
    const Tensor m = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}});
    const Tensor in = denoiser_input(zt, m, src);
    ASSERT_EQ(in.shape(), (Shape{2, 2, 7}));
    for (std::size_t p = 0; p < 4; ++p) {
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_EQ(in[p * 7 + k], zt[p * 3 + k]);
            EXPECT_EQ(in[p * 7 + 4 + k], m[p] == 1.0 ? 0.0 : src[p * 3 + k]);
        }
        EXPECT_EQ(in[p * 7 + 3], m[p]);
    }
}

// --- Sampler ---------------------------------------------------------------

BitMask random_hard_mask(Rng& rng) {
    BitMask m(kCanvas, kCanvas);
    const std::size_t rects = 1 + static_cast<std::size_t>(rng.below(3));
    for (std::size_t r = 0; r < rects; ++r) {
        const std::size_t y0 = static_cast<std::size_t>(rng.below(64)), x0 = static_cast<std::size_t>(rng.below(64));
        const std::size_t h = 1 + static_cast<std::size_t>(rng.below(40)), w = 1 + static_cast<std::size_t>(rng.below(40));
        for (std::size_t y = y0; y < std::min<std::size_t>(64, y0 + h); ++y)
            for (std::size_t x = x0; x < std::min<std::size_t>(64, x0 + w); ++x) m(y, x) = 1;
    }
    return m;
}

TEST(EditSample, PreservesUnmaskedPixelsExactly) {
    TinyNet net = busy_net(21, 3, 4, 8);
    freeze(net);
    IdentityCodec codec;
    Rng rng(15);
    const Tensor nc = Tensor::randn({8}, rng);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor x = random_image(rng);
        const BitMask m = random_hard_mask(rng);
        SamplerConfig cfg;
        cfg.timesteps = kSched.timesteps(4);
        cfg.seed = static_cast<std::uint64_t>(trial);
        cfg.renoise = trial % 2 ? RenoiseMode::fresh_noise : RenoiseMode::reuse_prediction;
        cfg.eta = trial % 3 == 0 ? 0.5 : 0.0;
        const SamplerRun run = edit_sample(net, codec, kSched, x, Tensor::randn({8}, rng), {3.0, nc}, m.to_tensor(), cfg);
        std::size_t changed_inside = 0;
        for (std::size_t p = 0; p < m.bits.size(); ++p)
            for (std::size_t k = 0; k < 3; ++k) {
                if (!m.bits[p]) {
                    ASSERT_EQ(std::memcmp(&run.x_res.data()[p * 3 + k], &x.data()[p * 3 + k], sizeof(double)), 0);
                } else if (run.x_res[p * 3 + k] != x[p * 3 + k]) {
                    ++changed_inside;
                }
            }
        if (m.count() > 0) {
            EXPECT_GT(changed_inside, 0u);
        }
    }
}

TEST(EditSample, EmptyMaskReturnsSource) {
    TinyNet net = busy_net(22, 3, 4, 8);
    IdentityCodec codec;
    Rng rng(16);
    const Tensor x = random_image(rng), nc = Tensor::randn({8}, rng);
    SamplerConfig cfg;
    cfg.timesteps = kSched.timesteps(8);
    const SamplerRun run = edit_sample(net, codec, kSched, x, nc, {3.0, nc}, Tensor(Shape{64, 64}, 0.0), cfg);
    EXPECT_TRUE(bit_equal(run.x_res, x));
}

TEST(EditSample, DeterministicPerSeed) {
    TinyNet net = busy_net(23, 3, 4, 8);
    IdentityCodec codec;
    Rng rng(17);
    const Tensor x = random_image(rng), c = Tensor::randn({8}, rng), nc = Tensor::randn({8}, rng);
    const Tensor m = random_hard_mask(rng).to_tensor();
    for (double eta : {0.0, 0.7}) {
        for (RenoiseMode mode : {RenoiseMode::reuse_prediction, RenoiseMode::fresh_noise}) {
            SamplerConfig cfg;
            cfg.timesteps = kSched.timesteps(5);
            cfg.eta = eta;
            cfg.renoise = mode;
            cfg.seed = 5;
            const SamplerRun a = edit_sample(net, codec, kSched, x, c, {3.0, nc}, m, cfg);
            const SamplerRun b = edit_sample(net, codec, kSched, x, c, {3.0, nc}, m, cfg);
            EXPECT_TRUE(bit_equal(a.x_res, b.x_res));
            cfg.seed = 6;
            EXPECT_FALSE(bit_equal(edit_sample(net, codec, kSched, x, c, {3.0, nc}, m, cfg).x_res, a.x_res));
        }
    }
}

TEST(EditSample, SpaceToDepthPreservesUnmaskedBlocks) {
    TinyNet net = busy_net(24, 12, 4, 8);
    SpaceToDepthCodec codec;
    Rng rng(18);
    const Tensor x = random_image(rng), nc = Tensor::randn({8}, rng);
    const BitMask m = mask_to_pixels(mask_to_latent(random_hard_mask(rng), 2), 2);
    SamplerConfig cfg;
    cfg.timesteps = kSched.timesteps(4);
    const SamplerRun run = edit_sample(net, codec, kSched, x, nc, {3.0, nc}, mask_to_latent(m, 2).to_tensor(), cfg);
    for (std::size_t p = 0; p < m.bits.size(); ++p)
        if (!m.bits[p]) {
            for (std::size_t k = 0; k < 3; ++k) ASSERT_EQ(run.x_res[p * 3 + k], x[p * 3 + k]);
        }
}

TEST(EditSample, Contracts) {
    GaussianOracle oracle(kSched, Tensor(Shape{64, 64, 3}, 0.5), 0.2);
    IdentityCodec codec;
    const Tensor x(Shape{64, 64, 3}, 0.5), nc(Shape{1}, 0.0);
    SamplerConfig cfg;
    EXPECT_THROW(edit_sample(oracle, codec, kSched, x, nc, {3.0, nc}, Tensor(Shape{8, 8}, 1.0), cfg), DimensionError);
    cfg.timesteps = {10, 20};
    EXPECT_THROW(edit_sample(oracle, codec, kSched, x, nc, {3.0, nc}, Tensor(Shape{64, 64}, 1.0), cfg), ContractError);
    cfg.timesteps = {60, 20};
    EXPECT_THROW(edit_sample(oracle, codec, kSched, x, nc, {3.0, nc}, Tensor(Shape{64, 64}, 1.0), cfg), ContractError);
}

TEST(EditSample, SoftMaskGradientsMatchFiniteDifferences) {
    TinyNet net = busy_net(25, 3, 3, 4);
    IdentityCodec codec;
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(300 + trial);
        const Tensor x = Tensor::uniform({6, 6, 3}, rng, 0.0, 1.0);
        const Tensor c = Tensor::randn({4}, rng), nc = Tensor::randn({4}, rng);
        std::vector<Tensor> leaves{Tensor::uniform({6, 6}, rng, 0.1, 0.9)};
        leaves[0].set_requires_grad(true);
        SamplerConfig cfg;
        cfg.timesteps = {30, 10};
        cfg.seed = static_cast<std::uint64_t>(trial);
        cfg.clip_denoised = false;
        auto f = [&](const std::vector<Tensor>& v) {
            return project(edit_sample(net, codec, kSched, x, c, {3.0, nc}, v[0], cfg).x_res, 41);
        };
        EXPECT_LT(gradcheck(f, leaves, 1e-6).max_rel_error, 1e-4) << trial;
    }
}

TEST(Clipping, PredictionImpliesClampedEstimate) {
    Rng rng(91);
    for (std::size_t t : {1u, 10u, 25u, 50u}) {
        const Tensor z = Tensor::randn({4, 4, 3}, rng, 2.0);
        const Tensor eps = Tensor::randn({4, 4, 3}, rng);
        const Tensor clipped = clipped_prediction(kSched, z, eps, t, 0.0, 1.0);
        const Tensor z0 = estimate_z0(kSched, z, clipped, t);
        const Tensor raw = estimate_z0(kSched, z, eps, t);
        for (std::size_t i = 0; i < z0.numel(); ++i) {
            EXPECT_NEAR(z0[i], std::clamp(raw[i], 0.0, 1.0), 1e-9 / kSched.signal(t)) << t;
        }
    }
}

TEST(Clipping, InRangeEstimateIsUntouched) {
    Rng rng(92);
    const Tensor z0 = Tensor::uniform({3, 3, 3}, rng, 0.1, 0.9);
    const Tensor eps = Tensor::randn({3, 3, 3}, rng);
    const Tensor z = forward_sample(kSched, z0, 20, eps);
    const Tensor clipped = clipped_prediction(kSched, z, eps, 20, 0.0, 1.0);
    for (std::size_t i = 0; i < eps.numel(); ++i) EXPECT_NEAR(clipped[i], eps[i], 1e-9);
}

TEST(Clipping, SamplerOutputStaysInRange) {
    const TinyNet net = busy_net(5, 3, 4, 4);
    IdentityCodec codec;
    Rng rng(93);
    const Tensor x = Tensor::uniform({8, 8, 3}, rng, 0.0, 1.0);
    const Tensor c = Tensor::randn({4}, rng), nc = Tensor::randn({4}, rng);
    SamplerConfig cfg;
    cfg.timesteps = kSched.timesteps(8);
    const SamplerRun run = edit_sample(net, codec, kSched, x, c, {3.0, nc}, Tensor(Shape{8, 8}, 1.0), cfg);
    for (std::size_t i = 0; i < run.x_res.numel(); ++i) {
        EXPECT_GE(run.x_res[i], -1e-9);
        EXPECT_LE(run.x_res[i], 1.0 + 1e-9);
    }
}

TEST(Trajectory, BinaryLayout) {
    GaussianOracle oracle(kSched, Tensor(Shape{2, 2, 3}, 0.5), 0.2);
    IdentityCodec codec;
    const Tensor nc(Shape{1}, 0.0);
    SamplerConfig cfg;
    cfg.timesteps = kSched.timesteps(3);
    cfg.keep_trajectory = true;
    const SamplerRun run = edit_sample(oracle, codec, kSched, Tensor(Shape{2, 2, 3}, 0.1), nc, {3.0, nc}, Tensor(Shape{2, 2}, 1.0), cfg);
    ASSERT_EQ(run.trajectory.size(), 4u);
    EXPECT_EQ(run.trajectory_steps, (std::vector<std::size_t>{50, 33, 16, 0}));
    const std::string bytes = encode_trajectory(run);
    EXPECT_EQ(bytes.substr(0, 4), "RGTJ");
    EXPECT_EQ(bytes.size(), 4u + 4 * 5 + 4 * (4 + 12 * 8));
    double last;
    std::memcpy(&last, bytes.data() + bytes.size() - 8, 8);
    EXPECT_EQ(last, run.z0[11]);
}

// --- Denoiser training -------------------------------------------------------

std::vector<DenoiserExample> tiny_corpus(std::size_t n) {
    std::vector<DenoiserExample> out;
    Rng rng(19);
    for (const ImageSample& s : generate_corpus(n, 4))
        out.push_back({s.pixels, Tensor::randn({8}, rng), s.scene});
    return out;
}

TEST(TrainDenoiser, InitialLossIsLatentDimensionality) {
    const auto data = tiny_corpus(40);
    TinyNet net = TinyNet::init(1, 3, 8, 8);
    IdentityCodec codec;
    Rng rng(20);
    const Tensor nc(Shape{8}, 0.0);
    double total = 0.0;
    for (const auto& ex : data) total += denoiser_example_loss(net, kSched, codec, ex, nc, 0.1, rng).item();
    const double dim = 64.0 * 64.0 * 3.0;
    EXPECT_NEAR(total / data.size(), dim, 0.2 * dim);
}

TEST(TrainDenoiser, MasksArePatchAlignedAndNonEmpty) {
    Rng rng(21);
    for (const ImageSample& s : generate_corpus(50, 5)) {
        const BitMask m = training_mask(s.scene, rng);
        EXPECT_GT(m.count(), 0u);
        EXPECT_EQ(mask_to_pixels(mask_to_latent(m, kPatch), kPatch), m);
    }
}

TEST(TrainDenoiser, DeterministicAndFrozen) {
    const auto data = tiny_corpus(6);
    IdentityCodec codec;
    const Tensor nc(Shape{8}, 0.0);
    DenoiserTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 4;
    cfg.width = 4;
    std::vector<double> losses;
    const TinyNet a = train_denoiser(data, kSched, codec, nc, cfg, [&](const DenoiserEpoch& e) { losses.push_back(e.mean_loss); });
    const TinyNet b = train_denoiser(data, kSched, codec, nc, cfg);
    EXPECT_EQ(losses.size(), 2u);
    EXPECT_TRUE(a.frozen);
    EXPECT_EQ(parameter_checksum(a), parameter_checksum(b));
    EXPECT_NE(parameter_checksum(a), parameter_checksum(TinyNet::init(cfg.seed, 3, 4, 8)));
    EXPECT_THROW(train_denoiser({}, kSched, codec, nc, cfg), ContractError);
}

} // namespace
} // namespace rged
