#pragma once

#include <cmath>
#include <vector>

#include "rged/encoders.hpp"
#include "rged/image_io.hpp"
#include "rged/modules.hpp"
#include "rged/ops.hpp"

namespace rged {

inline constexpr double kDefaultThreshold = 0.5;

/// The trainable fusion parameters: cross- and self-attention projections
/// plus the token-wise region MLP (final layer zero-initialised, so every
/// patch starts at probability 0.5).
struct FusionWeights {
    Tensor wq_c, wk_c, wv_c, wq_s, wk_s, wv_s;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    bool frozen = false;

    static FusionWeights init(std::uint64_t seed, std::size_t d = kDim) {
        Rng rng(mix_seed(seed, hash_tag("fusion")));
        FusionWeights f;
        f.wq_c = init_fan_in(d, d, rng);
        f.wk_c = init_fan_in(d, d, rng);
        f.wv_c = init_fan_in(d, d, rng);
        f.wq_s = init_fan_in(d, d, rng);
        f.wk_s = init_fan_in(d, d, rng);
        f.wv_s = init_fan_in(d, d, rng);
        f.mlp_w1 = init_fan_in(d, 2 * d, rng);
        f.mlp_b1 = Tensor(Shape{2 * d}, 0.0);
        f.mlp_w2 = Tensor(Shape{2 * d, 1}, 0.0);
        f.mlp_b2 = Tensor(Shape{1}, 0.0);
        return f;
    }

    template <class F>
    void visit(F&& f) {
        f("wq_c", wq_c);
        f("wk_c", wk_c);
        f("wv_c", wv_c);
        f("wq_s", wq_s);
        f("wk_s", wk_s);
        f("wv_s", wv_s);
        f("mlp_w1", mlp_w1);
        f("mlp_b1", mlp_b1);
        f("mlp_w2", mlp_w2);
        f("mlp_b2", mlp_b2);
    }
};

struct Attention {
    Tensor output;  // (N, d)
    Tensor weights; // (N, keys)
};

inline Attention attend(const Tensor& queries, const Tensor& keys, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                        const std::vector<bool>& pad = {}) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(wq.dim(1)));
    const Tensor q = matmul(queries, wq), k = matmul(keys, wk), v = matmul(keys, wv);
    const Tensor w = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d), pad);
    return {matmul(w, v), w};
}

/// Image patches attend to instruction tokens; PAD tokens are excluded keys.
inline Attention cross_attend(const FusionWeights& fw, const Tensor& f_img, const Tensor& f_ins, const std::vector<bool>& pad) {
    detail::require_rank(f_img, 2, "cross_attend");
    detail::require_rank(f_ins, 2, "cross_attend");
    if (f_img.dim(1) != f_ins.dim(1) || f_img.dim(1) != fw.wq_c.dim(0)) throw DimensionError("cross_attend: feature widths differ");
    if (!pad.empty() && pad.size() != f_ins.dim(0)) throw DimensionError("cross_attend: pad mask length differs from tokens");
    if (!pad.empty() && std::all_of(pad.begin(), pad.end(), [](bool b) { return b; })) {
        throw ContractError("cross_attend: instruction has no non-PAD tokens");
    }
    return attend(f_img, f_ins, fw.wq_c, fw.wk_c, fw.wv_c, pad);
}

inline Attention self_attend(const FusionWeights& fw, const Tensor& f) {
    detail::require_rank(f, 2, "self_attend");
    return attend(f, f, fw.wq_s, fw.wk_s, fw.wv_s);
}

/// Token-wise MLP then sigmoid: P_region as an (N) vector in (0, 1).
inline Tensor predict_region(const FusionWeights& fw, const Tensor& f) {
    const Tensor logits = linear(gelu(linear(f, fw.mlp_w1, fw.mlp_b1)), fw.mlp_w2, fw.mlp_b2);
    return sigmoid(reshape(logits, Shape{f.dim(0)}));
}

/// Eqs. 1-3 in sequence from encoder features.
inline Tensor region_probabilities(const FusionWeights& fw, const Tensor& f_img, const InstructionFeatures& ins) {
    const Attention cross = cross_attend(fw, f_img, ins.tokens, ins.pad);
    return predict_region(fw, self_attend(fw, cross.output).output);
}

inline std::size_t grid_side(std::size_t n) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n || n == 0) throw ContractError("region of " + std::to_string(n) + " patches is not a square grid");
    return side;
}

/// Soft (H, W) pixel mask: P_region on the patch grid, upsampled.
inline Tensor soft_pixel_mask(const Tensor& p_region, std::size_t patch = kPatch) {
    const std::size_t side = grid_side(p_region.numel());
    return upsample_nearest(reshape(p_region, Shape{side, side}), patch);
}

struct RegionPrediction {
    std::vector<double> probabilities;
    BitMask grid;
    BitMask pixel_mask;
    double threshold = kDefaultThreshold;
};

/// Thresholds (inclusive) onto the patch grid and upsamples by the patch size.
inline RegionPrediction harden(const Tensor& p_region, double threshold = kDefaultThreshold, std::size_t patch = kPatch) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("threshold must lie in (0, 1)");
    const std::size_t side = grid_side(p_region.numel());
    RegionPrediction r;
    r.threshold = threshold;
    r.probabilities.assign(p_region.data().begin(), p_region.data().end());
    r.grid = BitMask(side, side);
    for (std::size_t i = 0; i < side * side; ++i) r.grid.bits[i] = r.probabilities[i] >= threshold;
    r.pixel_mask = BitMask(side * patch, side * patch);
    for (std::size_t y = 0; y < side * patch; ++y)
        for (std::size_t x = 0; x < side * patch; ++x) r.pixel_mask(y, x) = r.grid(y / patch, x / patch);
    return r;
}

} // namespace rged
