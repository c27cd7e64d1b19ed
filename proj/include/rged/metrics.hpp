#pragma once

#include <cmath>
#include <numeric>
#include <optional>

#include "rged/objectives.hpp"

namespace rged {

/// Per-example evaluation; preservation metrics compare against the source.
struct MetricReport {
    double l1 = 0.0;
    double l2 = 0.0;
    double clip_i = 0.0;   // cos(I_res, I_ori)
    double dino = 0.0;     // same under the auxiliary encoder
    double clip_out = 0.0; // cos(I_res, T_e)
    std::optional<double> clip_dir;
    std::optional<double> iou;
    double mask_area = 0.0;
    double unmasked_l1 = 0.0; // mean |X_res - X_src| outside the predicted mask
};

inline double mask_iou(const BitMask& a, const BitMask& b) {
    if (a.height != b.height || a.width != b.width) throw DimensionError("mask_iou: masks differ in size");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        inter += a.bits[i] && b.bits[i];
        uni += a.bits[i] || b.bits[i];
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Exact expected IoU against `oracle` of a mask covering `k` patches
/// chosen uniformly at random on the patch grid. Only cells touched by
/// the oracle contribute to the intersection, so a subset-sum count over
/// those cells, weighted by the ways to fill the rest from untouched
/// cells, gives the expectation without sampling.
inline double random_mask_iou(std::size_t k, const BitMask& oracle, std::size_t patch) {
    if (patch == 0 || oracle.height % patch != 0 || oracle.width % patch != 0) throw ContractError("random_mask_iou: bad patch size");
    const std::size_t gw = oracle.width / patch, cells = gw * (oracle.height / patch);
    if (k > cells) throw ContractError("random_mask_iou: more patches than the grid holds");
    if (k == 0) return 0.0;
    std::vector<std::size_t> per_cell(cells, 0);
    for (std::size_t y = 0; y < oracle.height; ++y)
        for (std::size_t x = 0; x < oracle.width; ++x) per_cell[(y / patch) * gw + x / patch] += oracle(y, x);
    std::vector<std::size_t> touched;
    for (std::size_t c : per_cell)
        if (c) touched.push_back(c);
    const std::size_t total = oracle.count(), untouched = cells - touched.size(), cell_area = patch * patch;
    // ways[j][s]: subsets of j touched cells covering s oracle pixels.
    std::vector<std::vector<double>> ways(touched.size() + 1, std::vector<double>(total + 1, 0.0));
    ways[0][0] = 1.0;
    for (std::size_t n = 0; n < touched.size(); ++n)
        for (std::size_t j = n + 1; j-- > 0;)
            for (std::size_t sum = total + 1; sum-- > touched[n];) ways[j + 1][sum] += ways[j][sum - touched[n]];
    auto choose = [](std::size_t n, std::size_t r) {
        if (r > n) return 0.0;
        return std::exp(std::lgamma(n + 1.0) - std::lgamma(r + 1.0) - std::lgamma(n - r + 1.0));
    };
    const double all = choose(cells, k);
    double expected = 0.0;
    for (std::size_t j = 0; j <= std::min(k, touched.size()); ++j) {
        const double fill = choose(untouched, k - j);
        if (fill == 0.0) continue;
        for (std::size_t sum = 0; sum <= total; ++sum) {
            if (ways[j][sum] == 0.0) continue;
            const double iou = static_cast<double>(sum) / static_cast<double>(k * cell_area + total - sum);
            expected += ways[j][sum] * fill / all * iou;
        }
    }
    return expected;
}

inline double clamp_cos(double c) { return std::clamp(c, -1.0, 1.0); }

/// All metrics for one edited image. `oracle` is present on the eval split.
inline MetricReport compute_metrics(const Tensor& x_src, const Tensor& x_res, const BitMask& pixel_mask, const FrozenEncoders& enc,
                                    const VisionEncoder& aux, const EditBundle& b, const BitMask* oracle = nullptr) {
    require_frozen(aux, "auxiliary encoder");
    MetricReport m;
    const auto s = x_src.data(), r = x_res.data();
    double l1 = 0.0, l2 = 0.0, outside = 0.0;
    std::size_t outside_n = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double d = r[i] - s[i];
        l1 += std::abs(d);
        l2 += d * d;
        if (!pixel_mask.bits[i / 3]) {
            outside += std::abs(d);
            ++outside_n;
        }
    }
    m.l1 = l1 / static_cast<double>(s.size());
    m.l2 = l2 / static_cast<double>(s.size());
    m.unmasked_l1 = outside_n ? outside / static_cast<double>(outside_n) : 0.0;
    const ImageEmbedding res = enc.encode_image(x_res);
    m.clip_i = clamp_cos(cosine(res.cls, b.features.cls).item());
    m.dino = clamp_cos(cosine(aux.forward(x_res).cls, aux.forward(x_src).cls).item());
    m.clip_out = clamp_cos(cosine(res.cls, b.t_e).item());
    try {
        m.clip_dir = 1.0 - loss_clip_d(res.cls, b.features.cls, b.t_e, b.t_o).item();
    } catch (const DegenerateDirectionError&) {
        m.clip_dir.reset();
    }
    m.mask_area = pixel_mask.area();
    if (oracle) m.iou = mask_iou(pixel_mask, *oracle);
    return m;
}

/// Corpus means; CLIPdir and IoU average over the examples that have them.
struct MetricSummary {
    std::size_t examples = 0;
    std::size_t degenerate_dir = 0;
    double l1 = 0, l2 = 0, clip_i = 0, dino = 0, clip_out = 0, clip_dir = 0, iou = 0, mask_area = 0, unmasked_l1_max = 0;
    double random_iou = 0;
    std::size_t with_iou = 0;

    void add(const MetricReport& m, double random_baseline = 0.0) {
        ++examples;
        l1 += m.l1;
        l2 += m.l2;
        clip_i += m.clip_i;
        dino += m.dino;
        clip_out += m.clip_out;
        mask_area += m.mask_area;
        unmasked_l1_max = std::max(unmasked_l1_max, m.unmasked_l1);
        if (m.clip_dir) {
            clip_dir += *m.clip_dir;
        } else {
            ++degenerate_dir;
        }
        if (m.iou) {
            iou += *m.iou;
            random_iou += random_baseline;
            ++with_iou;
        }
    }

    MetricSummary means() const {
        MetricSummary r = *this;
        const double n = examples ? static_cast<double>(examples) : 1.0;
        for (double* v : {&r.l1, &r.l2, &r.clip_i, &r.dino, &r.clip_out, &r.mask_area}) *v /= n;
        const std::size_t dir_n = examples - degenerate_dir;
        r.clip_dir = dir_n ? clip_dir / static_cast<double>(dir_n) : 0.0;
        r.iou = with_iou ? iou / static_cast<double>(with_iou) : 0.0;
        r.random_iou = with_iou ? random_iou / static_cast<double>(with_iou) : 0.0;
        return r;
    }
};

} // namespace rged
