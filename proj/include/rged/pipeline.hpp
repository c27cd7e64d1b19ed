#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rged/config.hpp"
#include "rged/metrics.hpp"

namespace rged {

namespace fs = std::filesystem;
using ProgressLog = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// On-disk layout under Config::out_dir

struct RunPaths {
    fs::path root;

    fs::path corpus() const { return root / "corpus"; }
    fs::path index() const { return corpus() / "corpus.idx"; }
    fs::path image(std::uint64_t id) const { return corpus() / "images" / (id_hex(id) + ".ppm"); }
    fs::path oracle_mask(std::uint64_t id) const { return corpus() / "oracle" / (id_hex(id) + ".pbm"); }
    fs::path oracle_image(std::uint64_t id) const { return corpus() / "oracle" / (id_hex(id) + ".ppm"); }
    fs::path checkpoint(const std::string& name) const { return root / "checkpoints" / (name + ".ckpt"); }
    fs::path log(const std::string& name) const { return root / "logs" / (name + ".csv"); }
    fs::path report(const std::string& name) const { return root / "reports" / name; }
};

inline RunPaths paths_of(const Config& c) { return {c.out_dir}; }

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

/// Text sink that creates parent directories and truncates on open.
inline std::ofstream open_output(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + p.string());
    return out;
}

// ---------------------------------------------------------------------------
// Corpus index: one tab-separated line per image
//   <split> <id> <instruction> <scene>

struct CorpusEntry {
    std::string split;
    std::uint64_t id = 0;
    Instruction instruction;
    SceneGraph scene;
};

inline std::string index_line(const CorpusEntry& e) {
    return e.split + '\t' + id_hex(e.id) + '\t' + e.instruction.text + '\t' + serialize_scene(e.scene);
}

inline std::vector<CorpusEntry> read_index(const fs::path& path) {
    if (!fs::exists(path)) throw DependencyError("corpus index " + path.string() + " is missing; run the 'data-gen' stage first");
    std::istringstream in(detail::read_file(path));
    std::vector<CorpusEntry> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        const auto f = split(line, '\t');
        const std::string where = path.string() + ":" + std::to_string(number);
        if (f.size() != 4 || (f[0] != "train" && f[0] != "eval")) throw DataError(where + ": malformed corpus line");
        CorpusEntry e;
        e.split = f[0];
        e.id = parse_id_hex(f[1]);
        try {
            e.instruction = parse_instruction(f[2]);
        } catch (const GrammarError& err) {
            throw DataError(where + ": " + err.what());
        }
        e.scene = parse_scene(f[3]);
        out.push_back(std::move(e));
    }
    return out;
}

inline std::vector<CorpusEntry> split_of(const std::vector<CorpusEntry>& all, const std::string& name, std::size_t limit = 0) {
    std::vector<CorpusEntry> out;
    for (const auto& e : all)
        if (e.split == name && (limit == 0 || out.size() < limit)) out.push_back(e);
    return out;
}

// ---------------------------------------------------------------------------
// data-gen

struct DataGenSummary {
    std::size_t train = 0, eval = 0;
};

/// Writes images, the index and (eval split only) oracle masks and edited
/// images. Refuses a non-empty corpus directory unless `force`.
inline DataGenSummary data_gen(const Config& cfg, bool force, const ProgressLog& log = {}) {
    cfg.validate();
    const RunPaths p = paths_of(cfg);
    if (fs::exists(p.corpus()) && !fs::is_empty(p.corpus())) {
        if (!force) throw ContractError("corpus directory " + p.corpus().string() + " is not empty; pass --force to overwrite");
        fs::remove_all(p.corpus());
    }
    fs::create_directories(p.corpus() / "images");
    fs::create_directories(p.corpus() / "oracle");
    std::ostringstream index;
    DataGenSummary s;
    auto emit = [&](const std::string& split, std::size_t count, std::uint64_t seed) {
        for (const ImageSample& smp : generate_corpus(count, seed)) {
            const Caption caption = describe(smp.scene);
            const CorpusEntry e{split, smp.id, propose_instruction(caption, smp.scene, mix_seed(seed, smp.id)), smp.scene};
            write_ppm(p.image(smp.id), smp.pixels);
            if (split == "eval") {
                const OracleEdit o = make_oracle_edit(smp, e.instruction, smp.id);
                write_pbm(p.oracle_mask(smp.id), o.mask);
                write_ppm(p.oracle_image(smp.id), o.edited_pixels);
                ++s.eval;
            } else {
                ++s.train;
            }
            index << index_line(e) << '\n';
        }
    };
    emit("train", cfg.train_count, cfg.data_seed);
    emit("eval", cfg.eval_count, cfg.eval_seed);
    detail::write_file(p.index(), index.str());
    if (log) log("data-gen: " + std::to_string(s.train) + " train, " + std::to_string(s.eval) + " eval images in " + p.corpus().string());
    return s;
}

// ---------------------------------------------------------------------------
// Checkpoint loading with stage-named dependency errors

inline Checkpoint require_checkpoint(const RunPaths& p, const std::string& name, const std::string& stage, const std::string& needed_by) {
    const fs::path path = p.checkpoint(name);
    if (!fs::exists(path)) {
        throw DependencyError(needed_by + " needs the '" + stage + "' stage: checkpoint " + path.string() + " is missing");
    }
    return Checkpoint::load(path);
}

inline DualEncoder load_dual(const Config& cfg, const std::string& needed_by) {
    DualEncoder d = DualEncoder::init(cfg.seed, cfg.dim);
    load_module(d, require_checkpoint(paths_of(cfg), "encoders", "pretrain", needed_by), "");
    freeze_dual(d);
    return d;
}

inline VisionEncoder load_aux(const Config& cfg, const std::string& needed_by) {
    VisionEncoder v = VisionEncoder::init(cfg.aux_seed, cfg.dim);
    load_module(v, require_checkpoint(paths_of(cfg), "aux", "pretrain", needed_by), "");
    freeze(v);
    return v;
}

inline DiffusionSchedule schedule_of(const Config& cfg) { return DiffusionSchedule::linear(cfg.schedule_steps, cfg.beta_start, cfg.beta_end); }

inline TinyNet fresh_denoiser(const Config& cfg, const LatentCodec& codec) {
    return TinyNet::init(cfg.seed, codec.channels(), cfg.denoiser_width, cfg.dim);
}

inline TinyNet load_denoiser(const Config& cfg, const LatentCodec& codec, const std::string& needed_by) {
    TinyNet net = fresh_denoiser(cfg, codec);
    load_module(net, require_checkpoint(paths_of(cfg), "denoiser", "train-denoiser", needed_by), "");
    freeze(net);
    return net;
}

inline EditorModel load_editor(const Config& cfg, const fs::path& path, const std::string& needed_by) {
    if (!fs::exists(path)) throw DependencyError(needed_by + " needs the 'train-editor' stage: checkpoint " + path.string() + " is missing");
    EditorModel m = EditorModel::init(cfg.seed, cfg.dim);
    load_module(m, Checkpoint::load(path), "");
    freeze(m);
    m.fusion.frozen = m.f_sem.frozen = true;
    return m;
}

inline void save_checkpoint(auto& module, const fs::path& path) {
    Checkpoint ck;
    save_module(module, ck, "");
    fs::create_directories(path.parent_path());
    ck.save(path);
}

// ---------------------------------------------------------------------------
// pretrain: caption/image encoders plus the auxiliary vision encoder

struct PretrainSummary {
    RetrievalReport retrieval;
    RetrievalReport aux_retrieval;
};

inline PretrainSummary pretrain_stage(const Config& cfg, const ProgressLog& log = {}) {
    cfg.validate();
    const RunPaths p = paths_of(cfg);
    const auto pairs = make_pretrain_pairs(cfg.pretrain_count, mix_seed(cfg.data_seed, hash_tag("pretrain")));
    const auto holdout = make_pretrain_pairs(cfg.pretrain_holdout, mix_seed(cfg.data_seed, hash_tag("pretrain-holdout")));
    auto run = [&](const std::string& name, std::uint64_t seed, std::size_t epochs) {
        std::ofstream csv = open_output(p.log(name));
        csv << "epoch,loss\n";
        PretrainConfig pc{epochs, cfg.pretrain_batch, cfg.pretrain_lr, seed, cfg.dim};
        DualEncoder d = pretrain_contrastive(pairs, pc, [&](const PretrainEpoch& e) {
            csv << e.epoch << ',' << fmt(e.mean_loss) << '\n' << std::flush;
            if (log) log(name + " epoch " + std::to_string(e.epoch) + " loss " + fmt(e.mean_loss));
        });
        return d;
    };
    PretrainSummary s;
    DualEncoder main = run("pretrain", cfg.seed, cfg.pretrain_epochs);
    save_checkpoint(main, p.checkpoint("encoders"));
    s.retrieval = evaluate_retrieval(main, holdout);
    DualEncoder aux = run("pretrain_aux", cfg.aux_seed, cfg.aux_epochs);
    save_checkpoint(aux.vision, p.checkpoint("aux"));
    s.aux_retrieval = evaluate_retrieval(aux, holdout);
    nlohmann::ordered_json j;
    for (auto [name, r] : {std::pair{"encoders", s.retrieval}, std::pair{"aux", s.aux_retrieval}})
        j[name] = {{"top1", r.top1}, {"matched_cosine", r.matched_cosine}, {"mismatched_cosine", r.mismatched_cosine}};
    open_output(p.report("pretrain.json")) << j.dump(2) << '\n';
    return s;
}

// ---------------------------------------------------------------------------
// train-denoiser

inline std::vector<DenoiserEpoch> train_denoiser_stage(const Config& cfg, const ProgressLog& log = {}) {
    cfg.validate();
    const RunPaths p = paths_of(cfg);
    const DualEncoder dual = load_dual(cfg, "train-denoiser");
    const FrozenEncoders enc = FrozenEncoders::from(dual);
    const auto train = split_of(read_index(p.index()), "train");
    const auto codec = make_codec(cfg.codec);
    std::vector<DenoiserExample> data;
    data.reserve(train.size());
    for (const auto& e : train) data.push_back({read_ppm(p.image(e.id)), enc.encode_caption(describe(e.scene)), e.scene});
    DenoiserTrainConfig dc;
    dc.epochs = cfg.denoiser_epochs;
    dc.batch = cfg.denoiser_batch;
    dc.width = cfg.denoiser_width;
    dc.learning_rate = cfg.denoiser_lr;
    dc.caption_dropout = cfg.caption_dropout;
    dc.seed = cfg.seed;
    std::ofstream csv = open_output(p.log("denoiser"));
    csv << "epoch,mean_loss\n";
    std::vector<DenoiserEpoch> epochs;
    TinyNet net = train_denoiser(data, schedule_of(cfg), *codec, enc.encode_caption(make_caption("")), dc, [&](const DenoiserEpoch& e) {
        epochs.push_back(e);
        csv << e.epoch << ',' << fmt(e.mean_loss) << '\n' << std::flush;
        if (log) log("denoiser epoch " + std::to_string(e.epoch) + " loss " + fmt(e.mean_loss));
    });
    save_checkpoint(net, p.checkpoint("denoiser"));
    return epochs;
}

// ---------------------------------------------------------------------------
// Frozen state shared by train-editor, edit, eval and ablate

struct Frozen {
    DualEncoder dual;
    FrozenEncoders enc;
    std::unique_ptr<LatentCodec> codec;
    DiffusionSchedule schedule;
    TinyNet denoiser;
    Tensor null_cond;

    static std::unique_ptr<Frozen> load(const Config& cfg, const std::string& needed_by) {
        auto f = std::make_unique<Frozen>();
        f->dual = load_dual(cfg, needed_by);
        f->enc = FrozenEncoders::from(f->dual);
        f->codec = make_codec(cfg.codec);
        f->schedule = schedule_of(cfg);
        f->denoiser = load_denoiser(cfg, *f->codec, needed_by);
        f->null_cond = f->enc.encode_caption(make_caption(""));
        return f;
    }

    EditorContext context() const { return {&enc, &denoiser, codec.get(), schedule, null_cond}; }
};

inline RenoiseMode renoise_of(const Config& cfg) { return cfg.renoise == "fresh" ? RenoiseMode::fresh_noise : RenoiseMode::reuse_prediction; }

inline LossWeights weights_of(const Config& cfg) { return {cfg.lambda_g, cfg.lambda_d, cfg.lambda_s, cfg.alpha, cfg.beta}; }

inline EditorConfig editor_config_of(const Config& cfg) {
    EditorConfig ec;
    ec.epochs = cfg.editor_epochs;
    ec.batch = cfg.editor_batch;
    ec.learning_rate = cfg.editor_lr;
    ec.seed = cfg.seed;
    ec.sampler_steps = cfg.train_sampler_steps;
    ec.w_cfg = cfg.w_cfg;
    ec.eta = cfg.eta;
    ec.renoise = renoise_of(cfg);
    ec.clip_denoised = cfg.clip_denoised;
    ec.weights = weights_of(cfg);
    return ec;
}

inline EditBundle bundle_of(const Frozen& f, const RunPaths& p, const CorpusEntry& e) {
    return make_bundle(f.enc, e.id, read_ppm(p.image(e.id)), describe(e.scene), e.instruction);
}

// ---------------------------------------------------------------------------
// train-editor

struct EditorTrainResult {
    EditorModel model;
    std::vector<EditorEpoch> epochs;
};

/// Trains on the first `limit` training entries (0 = all); writes the
/// checkpoint and the per-epoch CSV log.
inline EditorTrainResult train_editor_stage(const Config& cfg, const Frozen& f, const fs::path& checkpoint, const fs::path& csv_path,
                                            std::size_t limit = 0, const ProgressLog& log = {}) {
    cfg.validate();
    const RunPaths p = paths_of(cfg);
    std::vector<EditBundle> data;
    for (const auto& e : split_of(read_index(p.index()), "train", limit)) data.push_back(bundle_of(f, p, e));
    std::ofstream csv = open_output(csv_path);
    csv << editor_csv_header() << '\n';
    EditorTrainResult r;
    r.model = train_editor(data, f.context(), editor_config_of(cfg), [&](const EditorEpoch& e) {
        r.epochs.push_back(e);
        csv << editor_csv_row(e) << '\n' << std::flush;
        if (log) {
            log("editor epoch " + std::to_string(e.epoch) + " total " + fmt(e.mean.total) + " area " + fmt(e.mean.mask_area) +
                " skipped " + std::to_string(e.skipped));
        }
    }, EditorModel::init(cfg.seed, cfg.dim));
    save_checkpoint(r.model, checkpoint);
    return r;
}

inline EditorTrainResult train_editor_stage(const Config& cfg, const ProgressLog& log = {}) {
    const auto f = Frozen::load(cfg, "train-editor");
    const RunPaths p = paths_of(cfg);
    return train_editor_stage(cfg, *f, p.checkpoint("editor"), p.log("editor"), 0, log);
}

// ---------------------------------------------------------------------------
// The inference path: recognise -> describe -> apply instruction -> encode
// -> region -> harden -> sample

struct EditResult {
    EditBundle bundle;
    RegionPrediction region;
    BitMask pixel_mask; // the mask the sampler actually used, at pixel resolution
    SamplerRun run;
    MetricReport metrics;
};

/// FNV-1a of the quantised image; seeds the sampler for ad-hoc inputs.
inline std::uint64_t content_id(const Tensor& image) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : encode_ppm(image)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline EditResult edit_one(const Config& cfg, const Frozen& f, const EditorModel& editor, const VisionEncoder& aux, const Tensor& image,
                           const std::string& instruction, std::uint64_t id, const BitMask* oracle = nullptr, bool force_empty = false) {
    const Caption source = describe(recognize_scene(image));
    EditResult r;
    r.bundle = make_bundle(f.enc, id, image, source, parse_instruction(instruction));
    Tensor p = region_probabilities(editor.fusion, r.bundle.features.patches, r.bundle.ins);
    if (force_empty) p = Tensor(p.shape(), 0.0);
    r.region = harden(p, force_empty ? 0.5 : cfg.threshold);
    const std::size_t factor = f.codec->factor();
    const BitMask latent = mask_to_latent(r.region.pixel_mask, factor);
    r.pixel_mask = mask_to_pixels(latent, factor);
    SamplerConfig sc;
    sc.timesteps = f.schedule.timesteps(cfg.edit_steps);
    sc.eta = cfg.eta;
    sc.renoise = renoise_of(cfg);
    sc.clip_denoised = cfg.clip_denoised;
    sc.seed = sampler_seed(cfg.seed, id);
    r.run = edit_sample(f.denoiser, *f.codec, f.schedule, image, r.bundle.t_e, GuidanceConfig{cfg.w_cfg, f.null_cond}, latent.to_tensor(), sc);
    r.metrics = compute_metrics(image, r.run.x_res, r.pixel_mask, f.enc, aux, r.bundle, oracle);
    return r;
}

inline nlohmann::ordered_json metrics_json(const MetricReport& m) {
    nlohmann::ordered_json j;
    j["l1"] = m.l1;
    j["l2"] = m.l2;
    j["clip_i"] = m.clip_i;
    j["dino"] = m.dino;
    j["clip_out"] = m.clip_out;
    j["clip_dir"] = m.clip_dir ? nlohmann::ordered_json(*m.clip_dir) : nlohmann::ordered_json(nullptr);
    if (m.iou) j["iou"] = *m.iou;
    j["mask_area"] = m.mask_area;
    j["unmasked_l1"] = m.unmasked_l1;
    return j;
}

struct EditOutputs {
    fs::path image, overlay, mask;
    std::string record; // one JSON line
};

/// The `edit` command: writes <prefix>.ppm, <prefix>.overlay.ppm and
/// <prefix>.pbm and returns the JSON record.
inline EditOutputs edit_command(const Config& cfg, const fs::path& input, const std::string& instruction, const fs::path& prefix) {
    cfg.validate();
    const auto f = Frozen::load(cfg, "edit");
    const EditorModel editor = load_editor(cfg, paths_of(cfg).checkpoint("editor"), "edit");
    const VisionEncoder aux = load_aux(cfg, "edit");
    const Tensor image = read_ppm(input);
    const EditResult r = edit_one(cfg, *f, editor, aux, image, instruction, content_id(image));
    EditOutputs o{prefix.string() + ".ppm", prefix.string() + ".overlay.ppm", prefix.string() + ".pbm", {}};
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    write_ppm(o.image, r.run.x_res);
    write_ppm(o.overlay, mask_overlay(r.run.x_res, r.pixel_mask));
    write_pbm(o.mask, r.pixel_mask);
    nlohmann::ordered_json j;
    j["input"] = input.string();
    j["instruction"] = r.bundle.instruction.text;
    j["source_caption"] = r.bundle.source.text;
    j["target_caption"] = r.bundle.target.text;
    j["output"] = o.image.string();
    j["overlay"] = o.overlay.string();
    j["mask"] = o.mask.string();
    j["threshold"] = r.region.threshold;
    j["seed"] = cfg.seed;
    j["steps"] = cfg.edit_steps;
    j["metrics"] = metrics_json(r.metrics);
    o.record = j.dump();
    return o;
}

// ---------------------------------------------------------------------------
// eval

struct EvalSummary {
    MetricSummary mean;
    std::vector<std::string> degenerate_ids; // CLIPdir undefined
    double max_unmasked_l1 = 0.0;
};

inline std::string eval_csv_header() { return "id,op,l1,l2,clip_i,dino,clip_out,clip_dir,iou,random_iou,mask_area,unmasked_l1"; }

/// Runs the edit path over the eval split (first `limit` entries, 0 = all)
/// against an already loaded editor; writes the per-example CSV.
inline EvalSummary evaluate_editor(const Config& cfg, const Frozen& f, const EditorModel& editor, const VisionEncoder& aux,
                                   const fs::path& csv_path, std::size_t limit = 0, bool force_empty = false) {
    const RunPaths p = paths_of(cfg);
    const auto eval = split_of(read_index(p.index()), "eval", limit);
    if (eval.empty()) throw DataError("the corpus has no eval split");
    std::ofstream csv = open_output(csv_path);
    csv << eval_csv_header() << '\n';
    EvalSummary s;
    MetricSummary sum;
    for (const auto& e : eval) {
        const BitMask oracle = read_pbm(p.oracle_mask(e.id));
        const EditResult r = edit_one(cfg, f, editor, aux, read_ppm(p.image(e.id)), e.instruction.text, e.id, &oracle, force_empty);
        const double baseline = random_mask_iou(r.region.grid.count(), oracle, kPatch);
        sum.add(r.metrics, baseline);
        if (!r.metrics.clip_dir) s.degenerate_ids.push_back(id_hex(e.id));
        const MetricReport& m = r.metrics;
        csv << id_hex(e.id) << ',' << name(e.instruction.edit.op) << ',' << fmt(m.l1) << ',' << fmt(m.l2) << ',' << fmt(m.clip_i) << ','
            << fmt(m.dino) << ',' << fmt(m.clip_out) << ',' << (m.clip_dir ? fmt(*m.clip_dir) : "") << ',' << fmt(*m.iou) << ','
            << fmt(baseline) << ',' << fmt(m.mask_area) << ',' << fmt(m.unmasked_l1) << '\n';
    }
    s.mean = sum.means();
    s.max_unmasked_l1 = s.mean.unmasked_l1_max;
    return s;
}

inline nlohmann::ordered_json summary_json(const EvalSummary& s) {
    const MetricSummary& m = s.mean;
    nlohmann::ordered_json j;
    j["examples"] = m.examples;
    j["l1"] = m.l1;
    j["l2"] = m.l2;
    j["clip_i"] = m.clip_i;
    j["dino"] = m.dino;
    j["clip_out"] = m.clip_out;
    j["clip_dir"] = m.clip_dir;
    j["clip_dir_degenerate"] = s.degenerate_ids;
    j["iou"] = m.iou;
    j["random_iou"] = m.random_iou;
    j["mask_area"] = m.mask_area;
    j["max_unmasked_l1"] = s.max_unmasked_l1;
    return j;
}

inline EvalSummary eval_command(const Config& cfg, bool force_empty = false) {
    cfg.validate();
    const RunPaths p = paths_of(cfg);
    const auto f = Frozen::load(cfg, "eval");
    const EditorModel editor = force_empty ? EditorModel::init(cfg.seed, cfg.dim) : load_editor(cfg, p.checkpoint("editor"), "eval");
    const VisionEncoder aux = load_aux(cfg, "eval");
    const EvalSummary s = evaluate_editor(cfg, *f, editor, aux, p.report("eval.csv"), 0, force_empty);
    open_output(p.report("eval_summary.json")) << summary_json(s).dump(2) << '\n';
    return s;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationVariant {
    std::string name;
    std::function<void(Config&)> apply;
};

inline const std::vector<AblationVariant>& ablation_variants() {
    static const std::vector<AblationVariant> v{
        {"full", [](Config&) {}},
        {"no_sem_align", [](Config& c) { c.alpha = 0.0; }},
        {"no_clip_g", [](Config& c) { c.lambda_g = 0.0; }},
        {"no_clip_d", [](Config& c) { c.lambda_d = 0.0; }},
        {"no_clip_s", [](Config& c) { c.lambda_s = 0.0; }},
    };
    return v;
}

struct AblationRow {
    std::string variant;
    std::size_t runs = 0;
    double iou = 0, random_iou = 0, clip_dir = 0, clip_out = 0, clip_i = 0, l1 = 0, mask_area = 0, final_loss = 0;
};

inline std::string ablation_csv_header() { return "variant,runs,iou,random_iou,clip_dir,clip_out,clip_i,l1,mask_area,final_loss"; }

inline std::string ablation_csv_row(const AblationRow& r) {
    std::ostringstream os;
    os << r.variant << ',' << r.runs;
    for (double v : {r.iou, r.random_iou, r.clip_dir, r.clip_out, r.clip_i, r.l1, r.mask_area, r.final_loss}) os << ',' << fmt(v);
    return os.str();
}

/// Retrains the editor for every variant in `names` (empty = all five) and
/// seed cfg.seed .. cfg.seed + ablation_seeds - 1; rows are seed means.
inline std::vector<AblationRow> ablate_command(const Config& cfg, std::vector<std::string> names = {}, const ProgressLog& log = {}) {
    cfg.validate();
    if (cfg.ablation_seeds == 0) throw ContractError("ablation needs at least one seed");
    const RunPaths p = paths_of(cfg);
    const auto f = Frozen::load(cfg, "ablate");
    const VisionEncoder aux = load_aux(cfg, "ablate");
    if (names.empty())
        for (const auto& v : ablation_variants()) names.push_back(v.name);
    std::ofstream runs = open_output(p.report("ablation_runs.csv"));
    runs << "seed," << ablation_csv_header() << '\n';
    std::vector<AblationRow> rows;
    for (const std::string& n : names) {
        const auto it = std::find_if(ablation_variants().begin(), ablation_variants().end(), [&](const auto& v) { return v.name == n; });
        if (it == ablation_variants().end()) throw ContractError("unknown ablation variant '" + n + "'");
        AblationRow row{n};
        for (std::size_t k = 0; k < cfg.ablation_seeds; ++k) {
            Config c = cfg;
            c.seed = cfg.seed + k;
            it->apply(c);
            const std::string tag = n + "-seed" + std::to_string(c.seed);
            if (log) log("ablate: training " + tag);
            const EditorTrainResult t = train_editor_stage(c, *f, p.checkpoint("ablation/" + tag), p.log("ablation/" + tag),
                                                           cfg.ablation_train_count, log);
            EditorModel m = t.model;
            const EvalSummary s = evaluate_editor(c, *f, m, aux, p.report("ablation/" + tag + ".csv"), cfg.ablation_eval_count);
            AblationRow one{n, 1, s.mean.iou, s.mean.random_iou, s.mean.clip_dir, s.mean.clip_out, s.mean.clip_i, s.mean.l1,
                            s.mean.mask_area, t.epochs.back().mean.total};
            runs << c.seed << ',' << ablation_csv_row(one) << '\n' << std::flush;
            if (log) log("ablate: " + ablation_csv_row(one));
            ++row.runs;
            row.iou += one.iou;
            row.random_iou += one.random_iou;
            row.clip_dir += one.clip_dir;
            row.clip_out += one.clip_out;
            row.clip_i += one.clip_i;
            row.l1 += one.l1;
            row.mask_area += one.mask_area;
            row.final_loss += one.final_loss;
        }
        const double k = static_cast<double>(row.runs);
        for (double* v : {&row.iou, &row.random_iou, &row.clip_dir, &row.clip_out, &row.clip_i, &row.l1, &row.mask_area, &row.final_loss})
            *v /= k;
        rows.push_back(row);
    }
    std::ofstream table = open_output(p.report("ablation.csv"));
    table << ablation_csv_header() << '\n';
    for (const auto& r : rows) table << ablation_csv_row(r) << '\n';
    return rows;
}

} // namespace rged
