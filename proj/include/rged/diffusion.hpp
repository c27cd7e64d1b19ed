#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rged/encoders.hpp"
#include "rged/image_io.hpp"
#include "rged/modules.hpp"
#include "rged/ops.hpp"
#include "rged/optim.hpp"
#include "rged/synth.hpp"

namespace rged {

// ---------------------------------------------------------------------------
// Noise schedule

struct DiffusionSchedule {
    std::size_t T = 0;
    std::vector<double> beta;      // beta[t] for t = 1..T; beta[0] = 0
    std::vector<double> alpha_bar; // alpha_bar[t] for t = 0..T; alpha_bar[0] = 1

    static DiffusionSchedule linear(std::size_t T = 50, double beta_start = 1e-4, double beta_end = 0.02) {
        if (T == 0) throw ContractError("schedule needs at least one step");
        if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) throw ContractError("betas must satisfy 0 < start <= end < 1");
        DiffusionSchedule s;
        s.T = T;
        s.beta.assign(T + 1, 0.0);
        s.alpha_bar.assign(T + 1, 1.0);
        for (std::size_t t = 1; t <= T; ++t) {
            const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
            s.beta[t] = beta_start + frac * (beta_end - beta_start);
            s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
        }
        return s;
    }

    /// The 1000-step betas (1e-4 .. 0.02) stretched to T steps, so that
    /// alpha_bar_T ends near zero for short schedules too.
    static DiffusionSchedule scaled_linear(std::size_t T = 50) {
        if (T == 0) throw ContractError("schedule needs at least one step");
        const double k = 1000.0 / static_cast<double>(T);
        return linear(T, 1e-4 * k, 0.02 * k);
    }

    double abar(std::size_t t) const {
        if (t > T) throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
        return alpha_bar[t];
    }

    double signal(std::size_t t) const { return std::sqrt(abar(t)); }
    double noise(std::size_t t) const { return std::sqrt(1.0 - abar(t)); }

    /// DDIM stochasticity between t and t_prev; eta = 0 is deterministic.
    double sigma(std::size_t t, std::size_t t_prev, double eta) const {
        if (eta == 0.0) return 0.0;
        const double a = abar(t), ap = abar(t_prev);
        return eta * std::sqrt((1.0 - ap) / (1.0 - a)) * std::sqrt(1.0 - a / ap);
    }

    /// K evenly spaced steps, descending: floor(i T / K) for i = K..1.
    std::vector<std::size_t> timesteps(std::size_t K) const {
        if (K == 0 || K > T) throw ContractError("sampler steps must lie in [1, T]");
        std::vector<std::size_t> out;
        for (std::size_t i = K; i >= 1; --i) out.push_back(i * T / K);
        return out;
    }
};

inline void require_step(const DiffusionSchedule& s, std::size_t t, std::size_t lo, const char* op) {
    if (t < lo || t > s.T) {
        throw ContractError(std::string(op) + ": timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(s.T) + "]");
    }
}

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
inline Tensor forward_sample(const DiffusionSchedule& s, const Tensor& z0, std::size_t t, const Tensor& eps) {
    require_step(s, t, 1, "forward_sample");
    return axpby(s.signal(t), z0, s.noise(t), eps);
}

/// Source latent noised to level t_prev (t_prev = 0 returns it unchanged).
inline Tensor renoise_source(const DiffusionSchedule& s, const Tensor& z0, std::size_t t_prev, const Tensor& eps) {
    require_step(s, t_prev, 0, "renoise_source");
    return axpby(s.signal(t_prev), z0, s.noise(t_prev), eps);
}

inline Tensor estimate_z0(const DiffusionSchedule& s, const Tensor& z_t, const Tensor& eps, std::size_t t) {
    require_step(s, t, 1, "estimate_z0");
    return scale(axpby(1.0, z_t, -s.noise(t), eps), 1.0 / s.signal(t));
}

/// Generalised DDIM update from t to t_prev (t_prev < t); `fresh` is only
/// read when sigma > 0.
inline Tensor ddim_step(const DiffusionSchedule& s, const Tensor& z_t, const Tensor& eps, std::size_t t, std::size_t t_prev,
                        double sigma = 0.0, const Tensor* fresh = nullptr) {
    require_step(s, t, 1, "ddim_step");
    if (t_prev >= t) throw ContractError("ddim_step: t_prev must precede t");
    const double coef = 1.0 - s.abar(t_prev) - sigma * sigma;
    if (coef < 0.0 || sigma < 0.0) {
        throw InvalidSigmaError("ddim_step: 1 - abar_prev - sigma^2 = " + std::to_string(coef) + " is negative");
    }
    Tensor out = axpby(s.signal(t_prev), estimate_z0(s, z_t, eps, t), std::sqrt(coef), eps);
    if (sigma > 0.0) {
        if (!fresh) throw ContractError("ddim_step: stochastic step needs fresh noise");
        out = axpby(1.0, out, sigma, *fresh);
    }
    return out;
}

inline Tensor ddim_step(const DiffusionSchedule& s, const Tensor& z_t, const Tensor& eps, std::size_t t) {
    return ddim_step(s, z_t, eps, t, t - 1);
}

/// m * model + (1 - m) * source
inline Tensor blend(const Tensor& model, const Tensor& source, const Tensor& m) { return blend_mask(model, source, m); }

// ---------------------------------------------------------------------------
// Latent codecs

class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual Tensor encode(const Tensor& x) const = 0;
    virtual Tensor decode(const Tensor& z) const = 0;
    virtual std::size_t factor() const = 0;
    virtual std::size_t channels() const = 0;
    virtual std::string name() const = 0;
};

class IdentityCodec final : public LatentCodec {
public:
    Tensor encode(const Tensor& x) const override { return x; }
    Tensor decode(const Tensor& z) const override { return z; }
    std::size_t factor() const override { return 1; }
    std::size_t channels() const override { return 3; }
    std::string name() const override { return "identity"; }
};

/// Lossless 2x space-to-depth: (64, 64, 3) <-> (32, 32, 12).
class SpaceToDepthCodec final : public LatentCodec {
public:
    Tensor encode(const Tensor& x) const override {
        return reshape(patchify(x, 2), Shape{x.dim(0) / 2, x.dim(1) / 2, x.dim(2) * 4});
    }
    Tensor decode(const Tensor& z) const override {
        const std::size_t h = z.dim(0), w = z.dim(1), c = z.dim(2);
        return unpatchify(reshape(z, Shape{h * w, c}), h * 2, w * 2, 2);
    }
    std::size_t factor() const override { return 2; }
    std::size_t channels() const override { return 12; }
    std::string name() const override { return "space-to-depth"; }
};

inline std::unique_ptr<LatentCodec> make_codec(const std::string& name) {
    if (name == "identity") return std::make_unique<IdentityCodec>();
    if (name == "space-to-depth") return std::make_unique<SpaceToDepthCodec>();
    throw ContractError("unknown codec '" + name + "' (expected identity or space-to-depth)");
}

/// Nearest downsampling of a pixel mask to latent resolution.
inline BitMask mask_to_latent(const BitMask& m, std::size_t f) {
    BitMask out(m.height / f, m.width / f);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x) out(y, x) = m(y * f, x * f);
    return out;
}

inline BitMask mask_to_pixels(const BitMask& m, std::size_t f) {
    BitMask out(m.height * f, m.width * f);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x) out(y, x) = m(y / f, x / f);
    return out;
}

// ---------------------------------------------------------------------------
// Denoisers

/// concat(z_t, m, (1 - m) * z_src) along channels.
inline Tensor denoiser_input(const Tensor& z_t, const Tensor& m, const Tensor& z_src) {
    const Tensor context = blend_mask(Tensor(z_src.shape(), 0.0), z_src, m);
    return concat_channels(concat_channels(z_t, reshape(m, Shape{m.dim(0), m.dim(1), 1})), context);
}

class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual Tensor predict(const Tensor& z_input, std::size_t t, const Tensor& cond) const = 0;
    virtual bool is_frozen() const { return true; }

    /// (unconditional, conditional) predictions.
    virtual std::pair<Tensor, Tensor> predict_pair(const Tensor& z_input, std::size_t t, const Tensor& cond,
                                                   const Tensor& null_cond) const {
        return {predict(z_input, t, null_cond), predict(z_input, t, cond)};
    }
};

/// Optimal noise prediction for data z_0 ~ N(mu, s^2 I): with a = sqrt(abar),
/// b = sqrt(1 - abar), eps_hat = b / (a^2 s^2 + b^2) (z_t - a mu).
class GaussianOracle final : public Denoiser {
public:
    GaussianOracle(const DiffusionSchedule& schedule, Tensor mu, double s) : schedule_(schedule), mu_(std::move(mu)), s_(s) {
        if (!(s > 0.0)) throw ContractError("GaussianOracle needs a positive standard deviation");
    }

    Tensor predict(const Tensor& z_input, std::size_t t, const Tensor&) const override {
        require_step(schedule_, t, 1, "GaussianOracle");
        const std::size_t c = (z_input.dim(2) - 1) / 2, pixels = z_input.dim(0) * z_input.dim(1);
        if (mu_.numel() != pixels * c) throw DimensionError("GaussianOracle: mean shape differs from latent");
        const double a = schedule_.signal(t), b = schedule_.noise(t), k = b / (a * a * s_ * s_ + b * b);
        std::vector<double> out(pixels * c);
        const auto zi = z_input.data();
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t j = 0; j < c; ++j) out[p * c + j] = k * (zi[p * (2 * c + 1) + j] - a * mu_[p * c + j]);
        return Tensor(Shape{z_input.dim(0), z_input.dim(1), c}, std::move(out));
    }

private:
    DiffusionSchedule schedule_;
    Tensor mu_;
    double s_;
};

inline constexpr std::size_t kTimeEmbedding = 16;

inline Tensor timestep_embedding(std::size_t t) {
    std::vector<double> e(kTimeEmbedding);
    for (std::size_t k = 0; k < kTimeEmbedding / 2; ++k) {
        const double freq = std::exp(-std::log(1000.0) * static_cast<double>(k) / (kTimeEmbedding / 2));
        e[2 * k] = std::sin(static_cast<double>(t) * freq);
        e[2 * k + 1] = std::cos(static_cast<double>(t) * freq);
    }
    return Tensor(Shape{1, kTimeEmbedding}, std::move(e));
}

/// Three 3x3 convolutions. Layers one and two are modulated (scale, shift)
/// by a linear map of [timestep embedding, caption CLS]; the output layer is
/// zero-initialised.
struct TinyNet final : Denoiser {
    Tensor conv1_w, conv1_b, film1_w, film1_b, conv2_w, conv2_b, film2_w, film2_b, conv3_w, conv3_b;
    bool frozen = false;

    static TinyNet init(std::uint64_t seed, std::size_t latent_channels = 3, std::size_t width = 8, std::size_t cond_dim = kDim) {
        Rng rng(mix_seed(seed, hash_tag("tinynet")));
        const std::size_t cin = 2 * latent_channels + 1, emb = kTimeEmbedding + cond_dim;
        TinyNet n;
        n.conv1_w = Tensor::randn(Shape{3, 3, cin, width}, rng, std::sqrt(2.0 / static_cast<double>(9 * cin)));
        n.conv1_b = Tensor(Shape{width}, 0.0);
        n.film1_w = Tensor::randn(Shape{emb, 2 * width}, rng, 0.1 / std::sqrt(static_cast<double>(emb)));
        n.film1_b = Tensor(Shape{2 * width}, 0.0);
        n.conv2_w = Tensor::randn(Shape{3, 3, width, width}, rng, std::sqrt(2.0 / static_cast<double>(9 * width)));
        n.conv2_b = Tensor(Shape{width}, 0.0);
        n.film2_w = Tensor::randn(Shape{emb, 2 * width}, rng, 0.1 / std::sqrt(static_cast<double>(emb)));
        n.film2_b = Tensor(Shape{2 * width}, 0.0);
        n.conv3_w = Tensor(Shape{3, 3, width, latent_channels}, 0.0);
        n.conv3_b = Tensor(Shape{latent_channels}, 0.0);
        return n;
    }

    template <class F>
    void visit(F&& f) {
        f("conv1_w", conv1_w);
        f("conv1_b", conv1_b);
        f("film1_w", film1_w);
        f("film1_b", film1_b);
        f("conv2_w", conv2_w);
        f("conv2_b", conv2_b);
        f("film2_w", film2_w);
        f("film2_b", film2_b);
        f("conv3_w", conv3_w);
        f("conv3_b", conv3_b);
    }

    bool is_frozen() const override { return frozen; }
    std::size_t width() const { return conv1_w.dim(3); }
    std::size_t latent_channels() const { return conv3_w.dim(3); }

    Tensor predict(const Tensor& z_input, std::size_t t, const Tensor& cond) const override {
        return head(conv2d(z_input, conv1_w, conv1_b), t, cond);
    }

    /// The first convolution does not see the condition, so both guidance
    /// branches share it.
    std::pair<Tensor, Tensor> predict_pair(const Tensor& z_input, std::size_t t, const Tensor& cond,
                                           const Tensor& null_cond) const override {
        const Tensor h1 = conv2d(z_input, conv1_w, conv1_b);
        return {head(h1, t, null_cond), head(h1, t, cond)};
    }

private:
    Tensor head(const Tensor& h1, std::size_t t, const Tensor& cond) const {
        const std::size_t c = width();
        const Tensor emb = reshape(concat_channels(reshape(timestep_embedding(t), Shape{1, 1, kTimeEmbedding}),
                                                   reshape(cond, Shape{1, 1, cond.numel()})),
                                   Shape{1, kTimeEmbedding + cond.numel()});
        const Tensor m1 = reshape(linear(emb, film1_w, film1_b), Shape{2, c});
        const Tensor m2 = reshape(linear(emb, film2_w, film2_b), Shape{2, c});
        Tensor h = gelu(channel_affine(h1, row(m1, 0), row(m1, 1)));
        h = gelu(channel_affine(conv2d(h, conv2_w, conv2_b), row(m2, 0), row(m2, 1)));
        return conv2d(h, conv3_w, conv3_b);
    }
};

// ---------------------------------------------------------------------------
// Guidance and sampling

struct GuidanceConfig {
    double w_cfg = 3.0;
    Tensor null_cond; // encoded empty caption
};

/// eps_uncond + w (eps_cond - eps_uncond). At w = 1 the conditional branch is
/// returned as is; the literal form can be an ulp away from it.
inline Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
    if (w < 0.0) throw ContractError("w_cfg must be non-negative");
    if (w == 1.0) return eps_cond;
    return axpby(1.0, eps_uncond, w, sub(eps_cond, eps_uncond));
}

inline Tensor cfg_predict(const Denoiser& net, const Tensor& z_input, std::size_t t, const Tensor& cond, const GuidanceConfig& g) {
    const auto [u, c] = net.predict_pair(z_input, t, cond, g.null_cond);
    return cfg_combine(u, c, g.w_cfg);
}

/// Noise consistent with a z_0 estimate clamped to [lo, hi]: at high noise
/// levels 1/sqrt(abar) amplifies small prediction errors far outside the data.
inline Tensor clipped_prediction(const DiffusionSchedule& s, const Tensor& z_t, const Tensor& eps, std::size_t t, double lo, double hi) {
    const Tensor z0 = clamp(estimate_z0(s, z_t, eps, t), lo, hi);
    return scale(axpby(1.0, z_t, -s.signal(t), z0), 1.0 / s.noise(t));
}

enum class RenoiseMode { reuse_prediction, fresh_noise };

struct SamplerConfig {
    std::vector<std::size_t> timesteps; // descending; empty = every step T..1
    double eta = 0.0;
    RenoiseMode renoise = RenoiseMode::reuse_prediction;
    bool clip_denoised = true; // clamp the z_0 estimate to the data range
    double clip_lo = 0.0, clip_hi = 1.0;
    std::uint64_t seed = 0;
    bool keep_trajectory = false;
};

struct SamplerRun {
    Tensor z0;
    Tensor x_res;
    std::vector<std::size_t> trajectory_steps;
    std::vector<Tensor> trajectory;
};

inline Tensor gaussian_like(const Shape& shape, Rng& rng) { return Tensor::randn(shape, rng); }

/// Region-conditioned editing: from z_T ~ N(0, I), each step predicts noise
/// with guidance, takes a DDIM step, re-noises the source to the new level
/// and blends the two under the latent mask, then decodes. The mask may be
/// soft and may carry gradients.
inline SamplerRun edit_sample(const Denoiser& net, const LatentCodec& codec, const DiffusionSchedule& s, const Tensor& x_src,
                              const Tensor& cond, const GuidanceConfig& g, const Tensor& mask, const SamplerConfig& cfg) {
    const Tensor z_src = codec.encode(x_src);
    if (mask.rank() != 2 || mask.dim(0) != z_src.dim(0) || mask.dim(1) != z_src.dim(1)) {
        throw DimensionError("edit_sample: mask " + shape_str(mask.shape()) + " is not at latent resolution " + shape_str(z_src.shape()));
    }
    std::vector<std::size_t> steps = cfg.timesteps;
    if (steps.empty()) steps = s.timesteps(s.T);
    for (std::size_t i = 0; i < steps.size(); ++i) {
        require_step(s, steps[i], 1, "edit_sample");
        if (i && steps[i] >= steps[i - 1]) throw ContractError("edit_sample: timesteps must strictly decrease");
    }
    Rng rng(mix_seed(cfg.seed, hash_tag("sampler")));
    SamplerRun run;
    Tensor z = gaussian_like(z_src.shape(), rng);
    if (cfg.keep_trajectory) {
        run.trajectory_steps.push_back(steps.front());
        run.trajectory.push_back(z.detach());
    }
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const std::size_t t = steps[i], t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
        Tensor eps = cfg_predict(net, denoiser_input(z, mask, z_src), t, cond, g);
        if (cfg.clip_denoised) eps = clipped_prediction(s, z, eps, t, cfg.clip_lo, cfg.clip_hi);
        const double sigma = s.sigma(t, t_prev, cfg.eta);
        Tensor fresh;
        if (sigma > 0.0) fresh = gaussian_like(z_src.shape(), rng);
        const Tensor z_model = ddim_step(s, z, eps, t, t_prev, sigma, sigma > 0.0 ? &fresh : nullptr);
        const Tensor eps_src = cfg.renoise == RenoiseMode::fresh_noise ? gaussian_like(z_src.shape(), rng) : eps;
        z = blend(z_model, renoise_source(s, z_src, t_prev, eps_src), mask);
        if (cfg.keep_trajectory) {
            run.trajectory_steps.push_back(t_prev);
            run.trajectory.push_back(z.detach());
        }
    }
    run.z0 = z;
    run.x_res = codec.decode(z);
    return run;
}

/// Binary trajectory dump: "RGTJ", version, entry count, h, w, c (u32 each),
/// then per entry the step index (u32) and h*w*c f64 values.
inline std::string encode_trajectory(const SamplerRun& run) {
    std::string out("RGTJ");
    auto u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    };
    const Shape shape = run.trajectory.empty() ? Shape{0, 0, 0} : run.trajectory.front().shape();
    u32(1);
    u32(static_cast<std::uint32_t>(run.trajectory.size()));
    for (std::size_t d : shape) u32(static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < run.trajectory.size(); ++i) {
        u32(static_cast<std::uint32_t>(run.trajectory_steps[i]));
        for (double v : run.trajectory[i].data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Denoiser training

struct DenoiserExample {
    Tensor pixels;
    Tensor cond; // caption CLS of the image's own caption
    SceneGraph scene;
};

struct DenoiserTrainConfig {
    std::size_t epochs = 3;
    std::size_t batch = 8;
    std::size_t width = 8;
    double learning_rate = 3e-3;
    double caption_dropout = 0.1;
    std::uint64_t seed = 1;
};

struct DenoiserEpoch {
    std::size_t epoch;
    double mean_loss; // per-example sum of squared errors
};

/// Inpainting masks (1 = region to fill), patch-aligned: half are random
/// rectangles, half cover the patches touched by one object.
inline BitMask training_mask(const SceneGraph& scene, Rng& rng) {
    BitMask grid(kPatchGrid, kPatchGrid);
    if (scene.objects.empty() || rng.uniform() < 0.5) {
        const std::size_t h = 1 + static_cast<std::size_t>(rng.below(4)), w = 1 + static_cast<std::size_t>(rng.below(4));
        const std::size_t y0 = static_cast<std::size_t>(rng.below(static_cast<int>(kPatchGrid - h + 1)));
        const std::size_t x0 = static_cast<std::size_t>(rng.below(static_cast<int>(kPatchGrid - w + 1)));
        for (std::size_t y = y0; y < y0 + h; ++y)
            for (std::size_t x = x0; x < x0 + w; ++x) grid(y, x) = 1;
    } else {
        const auto& o = scene.objects[static_cast<std::size_t>(rng.below(static_cast<int>(scene.objects.size())))];
        for (const Pixel& p : object_footprint(o)) grid(p.y / kPatch, p.x / kPatch) = 1;
    }
    return mask_to_pixels(grid, kPatch);
}

/// Squared error of one noise prediction; draws mask, timestep, noise and
/// caption dropout from rng in that order.
inline Tensor denoiser_example_loss(const TinyNet& net, const DiffusionSchedule& s, const LatentCodec& codec,
                                    const DenoiserExample& ex, const Tensor& null_cond, double caption_dropout, Rng& rng) {
    const Tensor z0 = codec.encode(ex.pixels);
    const Tensor m = mask_to_latent(training_mask(ex.scene, rng), codec.factor()).to_tensor();
    const std::size_t t = 1 + static_cast<std::size_t>(rng.below(static_cast<int>(s.T)));
    const Tensor eps = gaussian_like(z0.shape(), rng);
    const Tensor& c = rng.uniform() < caption_dropout ? null_cond : ex.cond;
    const Tensor pred = net.predict(denoiser_input(forward_sample(s, z0, t, eps), m, z0), t, c);
    return squared_norm(sub(pred, eps));
}

inline TinyNet train_denoiser(const std::vector<DenoiserExample>& data, const DiffusionSchedule& s, const LatentCodec& codec,
                              const Tensor& null_cond, const DenoiserTrainConfig& cfg,
                              const std::function<void(const DenoiserEpoch&)>& on_epoch = {}) {
    if (data.empty()) throw ContractError("train_denoiser: empty corpus");
    if (cfg.batch == 0) throw ContractError("train_denoiser: batch size must be positive");
    TinyNet net = TinyNet::init(cfg.seed, codec.channels(), cfg.width, null_cond.numel());
    Adam opt(trainable_parameters(net, "denoiser"), AdamConfig{cfg.learning_rate});
    Rng rng(mix_seed(cfg.seed, hash_tag("denoiser-train")));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            opt.zero_grad();
            for (std::size_t i = start; i < end; ++i) {
                const Tensor loss = denoiser_example_loss(net, s, codec, data[order[i]], null_cond, cfg.caption_dropout, rng);
                total += loss.item();
                backward(scale(loss, 1.0 / static_cast<double>(end - start)));
            }
            opt.step();
        }
        if (on_epoch) on_epoch({epoch, total / static_cast<double>(data.size())});
    }
    freeze(net);
    return net;
}

} // namespace rged
