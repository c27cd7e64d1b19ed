#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rged/language.hpp"
#include "rged/modules.hpp"
#include "rged/ops.hpp"
#include "rged/optim.hpp"
#include "rged/synth.hpp"

namespace rged {

inline constexpr std::size_t kDim = 32;
inline constexpr std::size_t kPatch = 8;
inline constexpr std::size_t kPatchGrid = kCanvas / kPatch;
inline constexpr std::size_t kPatchCount = kPatchGrid * kPatchGrid;
inline constexpr std::size_t kBlocks = 2;

/// Pre-norm transformer block with single-head attention and a GELU MLP.
struct EncoderBlock {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;

    static EncoderBlock init(std::size_t d, Rng& rng) {
        EncoderBlock b;
        b.ln1_g = Tensor(Shape{d}, 1.0);
        b.ln1_b = Tensor(Shape{d}, 0.0);
        b.wq = init_fan_in(d, d, rng);
        b.wk = init_fan_in(d, d, rng);
        b.wv = init_fan_in(d, d, rng);
        b.wo = init_normal(Shape{d, d}, rng, 0.5 / std::sqrt(static_cast<double>(d)));
        b.ln2_g = Tensor(Shape{d}, 1.0);
        b.ln2_b = Tensor(Shape{d}, 0.0);
        b.w1 = init_fan_in(d, 2 * d, rng);
        b.b1 = Tensor(Shape{2 * d}, 0.0);
        b.w2 = init_normal(Shape{2 * d, d}, rng, 0.5 / std::sqrt(static_cast<double>(2 * d)));
        b.b2 = Tensor(Shape{d}, 0.0);
        return b;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "ln1_g", ln1_g);
        f(prefix + "ln1_b", ln1_b);
        f(prefix + "wq", wq);
        f(prefix + "wk", wk);
        f(prefix + "wv", wv);
        f(prefix + "wo", wo);
        f(prefix + "ln2_g", ln2_g);
        f(prefix + "ln2_b", ln2_b);
        f(prefix + "w1", w1);
        f(prefix + "b1", b1);
        f(prefix + "w2", w2);
        f(prefix + "b2", b2);
    }

    /// pad marks key positions excluded from attention.
    Tensor forward(const Tensor& x, const std::vector<bool>& pad = {}) const {
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(x.dim(1)));
        const Tensor h = layernorm_rows(x, ln1_g, ln1_b);
        const Tensor q = matmul(h, wq), k = matmul(h, wk), v = matmul(h, wv);
        const Tensor att = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d), pad);
        const Tensor x1 = add(x, matmul(matmul(att, v), wo));
        const Tensor h2 = layernorm_rows(x1, ln2_g, ln2_b);
        return add(x1, linear(gelu(linear(h2, w1, b1)), w2, b2));
    }
};

struct ImageEmbedding {
    Tensor cls;     // (d)
    Tensor patches; // (N, d)
};

/// Patch-token transformer over 64x64 images: 8 px patches, learned CLS
/// token, no positional embedding (identical patches give identical tokens).
struct VisionEncoder {
    Tensor patch_w, patch_b, cls_token, lnf_g, lnf_b;
    std::array<EncoderBlock, kBlocks> blocks;
    bool frozen = false;

    static VisionEncoder init(std::uint64_t seed, std::size_t d = kDim) {
        Rng rng(mix_seed(seed, hash_tag("vision")));
        VisionEncoder e;
        e.patch_w = init_fan_in(kPatch * kPatch * 3, d, rng);
        e.patch_b = Tensor(Shape{d}, 0.0);
        e.cls_token = init_normal(Shape{1, d}, rng, 1.0);
        for (auto& b : e.blocks) b = EncoderBlock::init(d, rng);
        e.lnf_g = Tensor(Shape{d}, 1.0);
        e.lnf_b = Tensor(Shape{d}, 0.0);
        return e;
    }

    template <class F>
    void visit(F&& f) {
        f("patch_w", patch_w);
        f("patch_b", patch_b);
        f("cls", cls_token);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("block" + std::to_string(i) + ".", f);
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
    }

    ImageEmbedding forward(const Tensor& image) const {
        if (image.rank() != 3 || image.dim(0) != kCanvas || image.dim(1) != kCanvas || image.dim(2) != 3) {
            throw DimensionError("vision encoder expects a (64, 64, 3) image, got " + shape_str(image.shape()));
        }
        Tensor x = concat_rows(cls_token, linear(patchify(image, kPatch), patch_w, patch_b));
        for (const auto& b : blocks) x = b.forward(x);
        x = layernorm_rows(x, lnf_g, lnf_b);
        return {row(x, 0), slice_rows(x, 1, x.dim(0))};
    }
};

/// Token transformer over padded captions; the START position is the CLS
/// readout and PAD keys receive no attention.
struct TextEncoder {
    Tensor tok_emb, pos_emb, lnf_g, lnf_b;
    std::array<EncoderBlock, kBlocks> blocks;
    bool frozen = false;

    static TextEncoder init(std::uint64_t seed, std::size_t vocab = Vocabulary::standard().size(), std::size_t d = kDim) {
        Rng rng(mix_seed(seed, hash_tag("text")));
        TextEncoder e;
        e.tok_emb = init_normal(Shape{vocab, d}, rng, 1.0);
        e.pos_emb = init_normal(Shape{kMaxTokens, d}, rng, 0.3);
        for (auto& b : e.blocks) b = EncoderBlock::init(d, rng);
        e.lnf_g = Tensor(Shape{d}, 1.0);
        e.lnf_b = Tensor(Shape{d}, 0.0);
        return e;
    }

    template <class F>
    void visit(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("block" + std::to_string(i) + ".", f);
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
    }

    /// Full (24, d) output for token ids (padded here if shorter).
    Tensor sequence(const std::vector<int>& ids) const {
        const auto padded = pad_tokens(ids);
        const auto pad = pad_mask(padded);
        Tensor x = add(embedding(tok_emb, padded), pos_emb);
        for (const auto& b : blocks) x = b.forward(x, pad);
        return layernorm_rows(x, lnf_g, lnf_b);
    }

    Tensor cls(const std::vector<int>& ids) const { return row(sequence(ids), 0); }
};

struct InstructionFeatures {
    Tensor tokens;         // (M, d), M = 24
    std::vector<bool> pad; // true at PAD rows
};

/// Same architecture as the caption encoder; returns every token.
struct InstructionEncoder {
    TextEncoder text;
    bool frozen = false;

    template <class F>
    void visit(F&& f) {
        text.visit(f);
    }

    InstructionFeatures forward(const std::vector<int>& ids) const {
        const auto padded = pad_tokens(ids);
        return {text.sequence(padded), pad_mask(padded)};
    }
};

/// f_sem: mean over tokens, then d -> 2d -> d MLP.
struct SemanticProjector {
    Tensor w1, b1, w2, b2;
    bool frozen = false;

    static SemanticProjector init(std::uint64_t seed, std::size_t d = kDim) {
        Rng rng(mix_seed(seed, hash_tag("f_sem")));
        SemanticProjector p;
        p.w1 = init_fan_in(d, 2 * d, rng);
        p.b1 = Tensor(Shape{2 * d}, 0.0);
        p.w2 = init_fan_in(2 * d, d, rng);
        p.b2 = Tensor(Shape{d}, 0.0);
        return p;
    }

    template <class F>
    void visit(F&& f) {
        f("w1", w1);
        f("b1", b1);
        f("w2", w2);
        f("b2", b2);
    }

    Tensor forward(const Tensor& tokens) const {
        detail::require_rank(tokens, 2, "project_semantic");
        const Tensor pooled = reshape(mean_pool_rows(tokens), Shape{1, tokens.dim(1)});
        return reshape(linear(gelu(linear(pooled, w1, b1)), w2, b2), Shape{tokens.dim(1)});
    }
};

/// Contrastively pretrained image/caption pair with a learnable log
/// temperature.
struct DualEncoder {
    VisionEncoder vision;
    TextEncoder text;
    Tensor log_scale;
    bool frozen = false;

    static DualEncoder init(std::uint64_t seed, std::size_t d = kDim) {
        return {VisionEncoder::init(seed, d), TextEncoder::init(seed, Vocabulary::standard().size(), d),
                Tensor::scalar(std::log(1.0 / 0.07)), false};
    }

    template <class F>
    void visit(F&& f) {
        vision.visit([&](const std::string& n, Tensor& t) { f("vision." + n, t); });
        text.visit([&](const std::string& n, Tensor& t) { f("text." + n, t); });
        f("log_scale", log_scale);
    }
};

/// Freezes a dual encoder together with its halves.
inline void freeze_dual(DualEncoder& e) {
    freeze(e);
    e.vision.frozen = true;
    e.text.frozen = true;
}

/// Symmetric InfoNCE over a batch of image and caption CLS embeddings.
inline Tensor info_nce(const std::vector<Tensor>& image_cls, const std::vector<Tensor>& text_cls, const Tensor& log_scale) {
    if (image_cls.size() != text_cls.size() || image_cls.empty()) throw ContractError("info_nce: need matched, non-empty batches");
    const Tensor I = l2_normalize_rows(stack_rows(image_cls));
    const Tensor T = l2_normalize_rows(stack_rows(text_cls));
    const Tensor logits = mul(matmul(I, transpose(T)), exp(log_scale));
    std::vector<std::size_t> diag(image_cls.size());
    for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
    return scale(add(cross_entropy_rows(logits, diag), cross_entropy_rows(transpose(logits), diag)), 0.5);
}

struct PretrainPair {
    Tensor image;
    Caption caption;
};

inline std::vector<PretrainPair> make_pretrain_pairs(std::size_t count, std::uint64_t seed) {
    std::vector<PretrainPair> out;
    for (auto& s : generate_corpus(count, seed)) out.push_back({s.pixels, describe(s.scene)});
    return out;
}

struct PretrainConfig {
    std::size_t epochs = 12;
    std::size_t batch = 64;
    double learning_rate = 2e-3;
    std::uint64_t seed = 1;
    std::size_t dim = kDim;
};

struct PretrainEpoch {
    std::size_t epoch;
    double mean_loss;
};

/// Contrastive pretraining; returns the encoder pair frozen.
inline DualEncoder pretrain_contrastive(const std::vector<PretrainPair>& corpus, const PretrainConfig& cfg,
                                        const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
    if (corpus.empty()) throw ContractError("pretrain_contrastive: empty corpus");
    if (cfg.batch == 0) throw ContractError("pretrain_contrastive: batch size must be positive");
    DualEncoder enc = DualEncoder::init(cfg.seed, cfg.dim);
    Adam opt(trainable_parameters(enc, "dual encoder"), AdamConfig{cfg.learning_rate});
    Rng rng(mix_seed(cfg.seed, hash_tag("pretrain-order")));
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const double max_log_scale = std::log(100.0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            std::vector<Tensor> ic, tc;
            for (std::size_t i = start; i < end; ++i) {
                const auto& p = corpus[order[i]];
                ic.push_back(enc.vision.forward(p.image).cls);
                tc.push_back(enc.text.cls(p.caption.ids));
            }
            opt.zero_grad();
            const Tensor loss = info_nce(ic, tc, enc.log_scale);
            total += loss.item();
            ++batches;
            backward(loss);
            opt.step();
            auto ls = enc.log_scale.mutable_data();
            ls[0] = std::clamp(ls[0], 0.0, max_log_scale);
        }
        if (on_epoch) on_epoch({epoch, total / static_cast<double>(batches)});
    }
    freeze_dual(enc);
    return enc;
}

struct RetrievalReport {
    double top1 = 0.0;            // image -> caption, within batches
    double matched_cosine = 0.0;  // mean cos(I, T) of true pairs
    double mismatched_cosine = 0.0;
};

/// In-batch top-1 retrieval: a hit when the best-scoring caption's text
/// equals the true caption (duplicate captions count as correct).
inline RetrievalReport evaluate_retrieval(const DualEncoder& enc, const std::vector<PretrainPair>& pairs, std::size_t batch = 64) {
    RetrievalReport r;
    std::size_t hits = 0, matched = 0, mismatched = 0;
    for (std::size_t start = 0; start < pairs.size(); start += batch) {
        const std::size_t end = std::min(pairs.size(), start + batch);
        std::vector<Tensor> ic, tc;
        for (std::size_t i = start; i < end; ++i) {
            ic.push_back(enc.vision.forward(pairs[i].image).cls);
            tc.push_back(enc.text.cls(pairs[i].caption.ids));
        }
        const Tensor sim = matmul(l2_normalize_rows(stack_rows(ic)), transpose(l2_normalize_rows(stack_rows(tc))));
        const std::size_t n = end - start;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < n; ++j)
                if (sim.at(i, j) > sim.at(i, best)) best = j;
            hits += pairs[start + best].caption.text == pairs[start + i].caption.text;
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) {
                    r.matched_cosine += sim.at(i, j);
                    ++matched;
                } else {
                    r.mismatched_cosine += sim.at(i, j);
                    ++mismatched;
                }
            }
        }
    }
    r.top1 = static_cast<double>(hits) / static_cast<double>(pairs.size());
    r.matched_cosine /= static_cast<double>(std::max<std::size_t>(matched, 1));
    r.mismatched_cosine /= static_cast<double>(std::max<std::size_t>(mismatched, 1));
    return r;
}

/// Everything the editing pipeline reads from the pretrained encoders.
struct FrozenEncoders {
    VisionEncoder vision;
    TextEncoder text;
    InstructionEncoder instruction;

    /// Instruction encoder starts as a copy of the caption encoder.
    static FrozenEncoders from(const DualEncoder& dual) {
        FrozenEncoders f{deep_copy(dual.vision), deep_copy(dual.text), InstructionEncoder{deep_copy(dual.text), false}};
        freeze(f.vision);
        freeze(f.text);
        freeze(f.instruction);
        f.instruction.text.frozen = true;
        return f;
    }

    ImageEmbedding encode_image(const Tensor& image) const {
        require_frozen(vision, "vision encoder");
        return vision.forward(image);
    }

    Tensor encode_caption(const Caption& c) const {
        require_frozen(text, "text encoder");
        return text.cls(c.ids);
    }

    InstructionFeatures encode_instruction(const std::string& text_ins) const {
        require_frozen(instruction, "instruction encoder");
        return instruction.forward(tokenize(text_ins));
    }
};

} // namespace rged
