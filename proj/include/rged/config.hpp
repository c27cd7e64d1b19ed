#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "rged/errors.hpp"
#include "rged/image_io.hpp"

namespace rged {

/// Run configuration: a flat `key = value` file plus `--key value`
/// overrides. Unknown keys are errors.
struct Config {
    std::string out_dir = "run";
    std::uint64_t seed = 1;

    std::size_t train_count = 2000;
    std::size_t eval_count = 200;
    std::uint64_t data_seed = 1;
    std::uint64_t eval_seed = 2;

    std::size_t dim = 32;
    std::size_t pretrain_count = 5000;
    std::size_t pretrain_holdout = 500;
    std::size_t pretrain_epochs = 10;
    std::size_t pretrain_batch = 64;
    double pretrain_lr = 2e-3;
    std::uint64_t aux_seed = 2;
    std::size_t aux_epochs = 6;

    std::size_t schedule_steps = 50;
    double beta_start = 0.002;
    double beta_end = 0.4;
    std::string codec = "identity";

    std::size_t denoiser_width = 8;
    std::size_t denoiser_epochs = 3;
    std::size_t denoiser_batch = 8;
    double denoiser_lr = 3e-3;
    double caption_dropout = 0.1;

    std::size_t editor_epochs = 3;
    std::size_t editor_batch = 8;
    double editor_lr = 2e-3;
    std::size_t train_sampler_steps = 8;
    double w_cfg = 3.0;
    double eta = 0.0;
    std::string renoise = "reuse";
    bool clip_denoised = true;

    double lambda_g = 1.0;
    double lambda_d = 1.0;
    double lambda_s = 1.0;
    double alpha = 1.0;
    double beta = 1.0;

    double threshold = 0.5;
    std::size_t edit_steps = 50;

    std::size_t ablation_seeds = 3;
    std::size_t ablation_train_count = 500;
    std::size_t ablation_eval_count = 200;

    template <class F>
    void fields(F&& f) {
        f("out_dir", out_dir, "directory for corpus, checkpoints, logs and reports");
        f("seed", seed, "seed for editor training and sampling");
        f("train_count", train_count, "training images written by data-gen");
        f("eval_count", eval_count, "evaluation images (with oracle edits) written by data-gen");
        f("data_seed", data_seed, "seed of the training split");
        f("eval_seed", eval_seed, "seed of the evaluation split");
        f("dim", dim, "embedding width of every encoder");
        f("pretrain_count", pretrain_count, "image/caption pairs for contrastive pretraining");
        f("pretrain_holdout", pretrain_holdout, "held-out pairs for the retrieval report");
        f("pretrain_epochs", pretrain_epochs, "contrastive pretraining epochs");
        f("pretrain_batch", pretrain_batch, "contrastive batch size");
        f("pretrain_lr", pretrain_lr, "contrastive learning rate");
        f("aux_seed", aux_seed, "seed of the auxiliary (DINO stand-in) encoder");
        f("aux_epochs", aux_epochs, "pretraining epochs of the auxiliary encoder");
        f("schedule_steps", schedule_steps, "diffusion steps T");
        f("beta_start", beta_start, "first beta of the linear schedule");
        f("beta_end", beta_end, "last beta of the linear schedule");
        f("codec", codec, "latent codec: identity or space-to-depth");
        f("denoiser_width", denoiser_width, "TinyNet hidden channels");
        f("denoiser_epochs", denoiser_epochs, "denoiser training epochs");
        f("denoiser_batch", denoiser_batch, "denoiser batch size");
        f("denoiser_lr", denoiser_lr, "denoiser learning rate");
        f("caption_dropout", caption_dropout, "probability of training the denoiser on the empty caption");
        f("editor_epochs", editor_epochs, "editor training epochs");
        f("editor_batch", editor_batch, "editor batch size");
        f("editor_lr", editor_lr, "editor learning rate");
        f("train_sampler_steps", train_sampler_steps, "sampler steps K on the training tape");
        f("w_cfg", w_cfg, "classifier-free guidance scale");
        f("eta", eta, "DDIM stochasticity (0 = deterministic)");
        f("renoise", renoise, "source re-noising noise: reuse (the step's prediction) or fresh");
        f("clip_denoised", clip_denoised, "clamp the sampler's z_0 estimate to [0, 1]");
        f("lambda_g", lambda_g, "weight of the global CLIP term");
        f("lambda_d", lambda_d, "weight of the directional CLIP term");
        f("lambda_s", lambda_s, "weight of the structural term");
        f("alpha", alpha, "weight of the semantic alignment loss");
        f("beta", beta, "weight of the CLIP loss");
        f("threshold", threshold, "region probability threshold (inclusive)");
        f("edit_steps", edit_steps, "sampler steps at inference");
        f("ablation_seeds", ablation_seeds, "seeds per ablation configuration");
        f("ablation_train_count", ablation_train_count, "training examples per ablation run (0 = whole split)");
        f("ablation_eval_count", ablation_eval_count, "evaluation examples per ablation run (0 = whole split)");
    }

    void set(const std::string& key, const std::string& value) {
        bool found = false;
        fields([&](const char* name, auto& field, const char*) {
            if (key != name) return;
            found = true;
            assign(field, key, value);
        });
        if (!found) throw ContractError("unknown configuration key '" + key + "'");
    }

    bool has(const std::string& key) {
        bool found = false;
        fields([&](const char* name, auto&, const char*) { found = found || key == name; });
        return found;
    }

    /// Applies `key = value` lines; '#' starts a comment.
    void merge_text(const std::string& text, const std::string& origin = "config") {
        std::istringstream in(text);
        std::string line;
        std::size_t number = 0;
        while (std::getline(in, line)) {
            ++number;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string body = trim(line);
            if (body.empty()) continue;
            const auto eq = body.find('=');
            if (eq == std::string::npos) throw DataError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
            set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
        }
    }

    static Config load(const std::filesystem::path& path) {
        Config c;
        c.merge_text(detail::read_file(path), path.string());
        c.validate();
        return c;
    }

    std::string dump() {
        std::ostringstream os;
        os.precision(17);
        fields([&](const char* name, const auto& field, const char*) { os << name << " = " << field << '\n'; });
        return os.str();
    }

    void validate() const {
        auto require = [](bool ok, const std::string& what) {
            if (!ok) throw ContractError("configuration: " + what);
        };
        require(!out_dir.empty(), "out_dir must not be empty");
        require(train_count > 0 && eval_count > 0, "split sizes must be positive");
        require(dim > 0, "dim must be positive");
        require(pretrain_count > 0 && pretrain_batch > 0 && denoiser_batch > 0 && editor_batch > 0, "counts and batch sizes must be positive");
        require(schedule_steps > 0, "schedule_steps must be positive");
        require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, "betas must satisfy 0 < start <= end < 1");
        require(codec == "identity" || codec == "space-to-depth", "codec must be identity or space-to-depth");
        require(renoise == "reuse" || renoise == "fresh", "renoise must be reuse or fresh");
        require(train_sampler_steps >= 1 && train_sampler_steps <= schedule_steps, "train_sampler_steps must lie in [1, T]");
        require(edit_steps >= 1 && edit_steps <= schedule_steps, "edit_steps must lie in [1, T]");
        require(w_cfg >= 0.0, "w_cfg must be non-negative");
        require(eta >= 0.0 && eta <= 1.0, "eta must lie in [0, 1]");
        require(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
        for (double w : {lambda_g, lambda_d, lambda_s, alpha, beta}) require(w >= 0.0, "loss weights must be non-negative");
        require(caption_dropout >= 0.0 && caption_dropout <= 1.0, "caption_dropout must lie in [0, 1]");
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    static void assign(std::string& field, const std::string&, const std::string& v) { field = v; }

    static void assign(bool& field, const std::string& key, const std::string& v) {
        if (v == "1" || v == "true") {
            field = true;
        } else if (v == "0" || v == "false") {
            field = false;
        } else {
            throw DataError("configuration key '" + key + "' expects true/false, got '" + v + "'");
        }
    }

    static void assign(double& field, const std::string& key, const std::string& v) {
        std::size_t used = 0;
        try {
            field = std::stod(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != v.size()) throw DataError("configuration key '" + key + "' expects a number, got '" + v + "'");
    }

    static void assign(std::uint64_t& field, const std::string& key, const std::string& v) {
        std::size_t used = 0;
        try {
            if (!v.empty() && v[0] != '-') field = std::stoull(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != v.size()) throw DataError("configuration key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
};

} // namespace rged
