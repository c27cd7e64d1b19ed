#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rged/diffusion.hpp"
#include "rged/language.hpp"
#include "rged/region.hpp"

namespace rged {

struct LossWeights {
    double lambda_g = 1.0;
    double lambda_d = 1.0;
    double lambda_s = 1.0;
    double alpha = 1.0;
    double beta = 1.0;

    void validate() const {
        for (double w : {lambda_g, lambda_d, lambda_s, alpha, beta})
            if (!(w >= 0.0)) throw ContractError("loss weights must be non-negative");
    }
};

/// Per-example loss components, still on the tape.
struct LossTerms {
    Tensor sem_edited, sem_original, clip_g, clip_d, clip_s;
    double mask_area = 0.0;
};

struct LossReport {
    double sem_edited = 0.0, sem_original = 0.0, sem_align = 0.0;
    double clip_g = 0.0, clip_d = 0.0, clip_s = 0.0, clip = 0.0;
    double total = 0.0;
    double mask_area = 0.0;
};

inline Tensor cosine_distance(const Tensor& a, const Tensor& b) { return add_scalar(scale(cosine(a, b), -1.0), 1.0); }

struct SemAlign {
    Tensor edited, original, total;
};

/// 1 - cos(f_sem(F_edited), T_e) and 1 - cos(f_sem(F_img), T_o), and their sum.
inline SemAlign loss_sem_align(const Tensor& f_edited, const Tensor& f_img, const Tensor& t_e, const Tensor& t_o,
                               const SemanticProjector& f_sem) {
    SemAlign r;
    r.edited = cosine_distance(f_sem.forward(f_edited), t_e);
    r.original = cosine_distance(f_sem.forward(f_img), t_o);
    r.total = add(r.edited, r.original);
    return r;
}

inline Tensor loss_clip_g(const Tensor& i_res, const Tensor& t_e) { return cosine_distance(i_res, t_e); }

inline double l2_norm(const Tensor& v) {
    double s = 0.0;
    for (double x : v.data()) s += x * x;
    return std::sqrt(s);
}

/// 1 - cos(I_res - I_ori, T_e - T_o).
inline Tensor loss_clip_d(const Tensor& i_res, const Tensor& i_ori, const Tensor& t_e, const Tensor& t_o) {
    const Tensor di = sub(i_res, i_ori), dt = sub(t_e, t_o);
    if (l2_norm(dt) == 0.0) throw DegenerateDirectionError("directional loss: source and target captions embed identically");
    if (l2_norm(di) == 0.0) throw DegenerateDirectionError("directional loss: edited image embeds identically to the source");
    return cosine_distance(di, dt);
}

/// Pairwise patch cosine similarities, (N, N).
inline Tensor similarity_matrix(const Tensor& f) {
    const Tensor n = l2_normalize_rows(f);
    return matmul(n, transpose(n));
}

/// Squared L2 distance between the two patch similarity matrices.
inline Tensor loss_clip_s(const Tensor& f_img, const Tensor& f_res) {
    detail::require_same_shape(f_img, f_res, "loss_clip_s");
    return squared_norm(sub(similarity_matrix(f_img), similarity_matrix(f_res)));
}

/// Weighted total on the tape plus its scalar breakdown. The report is
/// recomputed from the component values so its identities hold exactly.
inline std::pair<Tensor, LossReport> total_loss(const LossTerms& terms, const LossWeights& w) {
    w.validate();
    const Tensor align = add(terms.sem_edited, terms.sem_original);
    const Tensor clip = add(axpby(w.lambda_g, terms.clip_g, w.lambda_d, terms.clip_d), scale(terms.clip_s, w.lambda_s));
    const Tensor total = axpby(w.alpha, align, w.beta, clip);
    LossReport r;
    r.sem_edited = terms.sem_edited.item();
    r.sem_original = terms.sem_original.item();
    r.sem_align = r.sem_edited + r.sem_original;
    r.clip_g = terms.clip_g.item();
    r.clip_d = terms.clip_d.item();
    r.clip_s = terms.clip_s.item();
    r.clip = w.lambda_g * r.clip_g + w.lambda_d * r.clip_d + w.lambda_s * r.clip_s;
    r.total = w.alpha * r.sem_align + w.beta * r.clip;
    r.mask_area = terms.mask_area;
    return {total, r};
}

inline LossReport report_of(double sem_edited, double sem_original, double clip_g, double clip_d, double clip_s, const LossWeights& w) {
    LossTerms t{Tensor::scalar(sem_edited), Tensor::scalar(sem_original), Tensor::scalar(clip_g), Tensor::scalar(clip_d),
                Tensor::scalar(clip_s), 0.0};
    return total_loss(t, w).second;
}

// ---------------------------------------------------------------------------
// Edit examples

/// One example: source image, instruction, source and target captions and
/// everything the frozen encoders produce for them.
struct EditBundle {
    std::uint64_t id = 0;
    Tensor image;
    Instruction instruction;
    Caption source, target;
    ImageEmbedding features; // I_ori, F_img
    InstructionFeatures ins;
    Tensor t_o, t_e;
};

inline EditBundle make_bundle(const FrozenEncoders& enc, std::uint64_t id, const Tensor& image, const Caption& source,
                              const Instruction& ins) {
    EditBundle b;
    b.id = id;
    b.image = image;
    b.instruction = ins;
    b.source = source;
    b.target = apply_instruction(source, ins);
    b.features = enc.encode_image(image);
    b.ins = enc.encode_instruction(ins.text);
    b.t_o = enc.encode_caption(b.source);
    b.t_e = enc.encode_caption(b.target);
    return b;
}

/// Training example: caption from the scene graph, instruction proposed
/// from the caption. No edited image is involved.
inline EditBundle make_training_bundle(const FrozenEncoders& enc, const ImageSample& s, std::uint64_t seed) {
    const Caption source = describe(s.scene);
    return make_bundle(enc, s.id, s.pixels, source, propose_instruction(source, s.scene, mix_seed(seed, s.id)));
}

// ---------------------------------------------------------------------------
// Editor training

/// The trainable part of the system.
struct EditorModel {
    FusionWeights fusion;
    SemanticProjector f_sem;
    bool frozen = false;

    static EditorModel init(std::uint64_t seed, std::size_t d = kDim) {
        return {FusionWeights::init(seed, d), SemanticProjector::init(seed, d), false};
    }

    template <class F>
    void visit(F&& f) {
        fusion.visit([&](const std::string& n, Tensor& t) { f("fusion." + n, t); });
        f_sem.visit([&](const std::string& n, Tensor& t) { f("f_sem." + n, t); });
    }
};

/// Frozen collaborators of the editor.
struct EditorContext {
    const FrozenEncoders* encoders = nullptr;
    const Denoiser* denoiser = nullptr;
    const LatentCodec* codec = nullptr;
    DiffusionSchedule schedule = DiffusionSchedule::scaled_linear();
    Tensor null_cond; // encoded empty caption
};

struct EditorConfig {
    std::size_t epochs = 3;
    std::size_t batch = 8;
    double learning_rate = 2e-3;
    std::uint64_t seed = 1;
    std::size_t sampler_steps = 8;
    double w_cfg = 3.0;
    double eta = 0.0;
    RenoiseMode renoise = RenoiseMode::reuse_prediction;
    bool clip_denoised = true;
    LossWeights weights;
};

/// Soft region at latent resolution.
inline Tensor latent_mask(const Tensor& p_region, const LatentCodec& codec) {
    if (kPatch % codec.factor()) throw ContractError("codec factor must divide the patch size");
    return soft_pixel_mask(p_region, kPatch / codec.factor());
}

struct EditorForward {
    Tensor p_region;
    Tensor total;
    LossTerms terms;
    LossReport report;
    SamplerRun run;
};

inline std::uint64_t sampler_seed(std::uint64_t seed, std::uint64_t id) { return mix_seed(mix_seed(seed, hash_tag("edit-sampler")), id); }

/// Region prediction, soft-mask sampling and every loss term for one example.
inline EditorForward editor_forward(const EditorModel& m, const EditorContext& ctx, const EditBundle& b, const EditorConfig& cfg) {
    EditorForward out;
    const Attention cross = cross_attend(m.fusion, b.features.patches, b.ins.tokens, b.ins.pad);
    out.p_region = predict_region(m.fusion, self_attend(m.fusion, cross.output).output);
    SamplerConfig sc;
    sc.timesteps = ctx.schedule.timesteps(cfg.sampler_steps);
    sc.seed = sampler_seed(cfg.seed, b.id);
    sc.eta = cfg.eta;
    sc.renoise = cfg.renoise;
    sc.clip_denoised = cfg.clip_denoised;
    out.run = edit_sample(*ctx.denoiser, *ctx.codec, ctx.schedule, b.image, b.t_e, GuidanceConfig{cfg.w_cfg, ctx.null_cond},
                          latent_mask(out.p_region, *ctx.codec), sc);
    const ImageEmbedding res = ctx.encoders->vision.forward(out.run.x_res);
    const SemAlign sem = loss_sem_align(cross.output, b.features.patches, b.t_e, b.t_o, m.f_sem);
    out.terms = {sem.edited,
                 sem.original,
                 loss_clip_g(res.cls, b.t_e),
                 loss_clip_d(res.cls, b.features.cls, b.t_e, b.t_o),
                 loss_clip_s(b.features.patches, res.patches),
                 mean(out.p_region).item()};
    std::tie(out.total, out.report) = total_loss(out.terms, cfg.weights);
    return out;
}

struct EditorEpoch {
    std::size_t epoch = 0;
    LossReport mean;
    std::size_t examples = 0;
    std::size_t skipped = 0;
};

inline std::string editor_csv_header() {
    return "epoch,sem_edited,sem_original,sem_align,clip_g,clip_d,clip_s,clip,total,mask_area,examples,skipped";
}

inline std::string editor_csv_row(const EditorEpoch& e) {
    std::ostringstream os;
    os.precision(17);
    const LossReport& r = e.mean;
    os << e.epoch << ',' << r.sem_edited << ',' << r.sem_original << ',' << r.sem_align << ',' << r.clip_g << ',' << r.clip_d << ','
       << r.clip_s << ',' << r.clip << ',' << r.total << ',' << r.mask_area << ',' << e.examples << ',' << e.skipped;
    return os.str();
}

inline void accumulate(LossReport& acc, const LossReport& r) {
    acc.sem_edited += r.sem_edited;
    acc.sem_original += r.sem_original;
    acc.sem_align += r.sem_align;
    acc.clip_g += r.clip_g;
    acc.clip_d += r.clip_d;
    acc.clip_s += r.clip_s;
    acc.clip += r.clip;
    acc.total += r.total;
    acc.mask_area += r.mask_area;
}

inline LossReport scaled(LossReport r, double k) {
    for (double* v : {&r.sem_edited, &r.sem_original, &r.sem_align, &r.clip_g, &r.clip_d, &r.clip_s, &r.clip, &r.total, &r.mask_area})
        *v *= k;
    return r;
}

inline void require_editor_context(const EditorContext& ctx) {
    if (!ctx.encoders || !ctx.denoiser || !ctx.codec) throw ContractError("editor context is incomplete");
    require_frozen(ctx.encoders->vision, "vision encoder");
    require_frozen(ctx.encoders->text, "text encoder");
    require_frozen(ctx.encoders->instruction, "instruction encoder");
    if (!ctx.denoiser->is_frozen()) throw ContractError("denoiser must be frozen before editor training");
}

/// Adam on FusionWeights and f_sem only; examples whose directional loss is
/// undefined are left out of their batch and counted.
inline EditorModel train_editor(const std::vector<EditBundle>& data, const EditorContext& ctx, const EditorConfig& cfg,
                                const std::function<void(const EditorEpoch&)>& on_epoch = {}, EditorModel model = {}) {
    require_editor_context(ctx);
    cfg.weights.validate();
    if (data.empty()) throw ContractError("train_editor: empty corpus");
    if (cfg.batch == 0) throw ContractError("train_editor: batch size must be positive");
    if (!model.fusion.wq_c.defined()) model = EditorModel::init(cfg.seed);
    Adam opt(trainable_parameters(model, "editor"), AdamConfig{cfg.learning_rate});
    Rng rng(mix_seed(cfg.seed, hash_tag("editor-train")));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        EditorEpoch stats;
        stats.epoch = epoch;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            std::vector<Tensor> losses;
            for (std::size_t i = start; i < end; ++i) {
                try {
                    EditorForward f = editor_forward(model, ctx, data[order[i]], cfg);
                    accumulate(stats.mean, f.report);
                    losses.push_back(f.total);
                } catch (const DegenerateDirectionError&) {
                    ++stats.skipped;
                }
            }
            if (losses.empty()) continue;
            stats.examples += losses.size();
            opt.zero_grad();
            Tensor batch_loss = losses.front();
            for (std::size_t i = 1; i < losses.size(); ++i) batch_loss = add(batch_loss, losses[i]);
            backward(scale(batch_loss, 1.0 / static_cast<double>(losses.size())));
            opt.step();
        }
        if (stats.examples) stats.mean = scaled(stats.mean, 1.0 / static_cast<double>(stats.examples));
        if (on_epoch) on_epoch(stats);
    }
    freeze(model);
    return model;
}

} // namespace rged
