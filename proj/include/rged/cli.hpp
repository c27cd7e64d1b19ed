#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rged/pipeline.hpp"

namespace rged {

/// `--key value` / `--key=value` pairs left over after the command's own
/// options; every key must be a configuration field.
inline void apply_overrides(Config& cfg, const std::vector<std::string>& extras) {
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& a = extras[i];
        if (a.rfind("--", 0) != 0 || a.size() < 3) throw ContractError("unexpected argument '" + a + "'");
        std::string key = a.substr(2), value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key.erase(eq);
        } else {
            if (i + 1 >= extras.size()) throw ContractError("option --" + key + " needs a value");
            value = extras[++i];
        }
        cfg.set(key, value);
    }
}

/// Entry point of the `rged` tool; returns the process exit status.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Instruction-driven image editing with learnable regions on a synthetic shapes world", "rged"};
    app.require_subcommand(1);
    std::string config_path;
    bool force = false, empty_mask = false;
    std::string image, instruction, output = "edit";
    std::vector<std::string> variants;
    auto command = [&](const char* name, const char* help) {
        CLI::App* c = app.add_subcommand(name, help);
        c->add_option("--config", config_path, "key = value configuration file");
        c->allow_extras();
        return c;
    };
    CLI::App* data_gen_cmd = command("data-gen", "write the synthetic corpus, index and eval oracle edits");
    data_gen_cmd->add_flag("--force", force, "replace an existing corpus");
    CLI::App* pretrain_cmd = command("pretrain", "contrastive pretraining of the encoders and the auxiliary encoder");
    CLI::App* denoiser_cmd = command("train-denoiser", "train the inpainting denoiser");
    CLI::App* editor_cmd = command("train-editor", "train the fusion/region modules and f_sem");
    CLI::App* edit_cmd = command("edit", "edit one PPM image with an instruction");
    edit_cmd->add_option("--image", image, "input PPM")->required();
    edit_cmd->add_option("--instruction", instruction, "edit instruction")->required();
    edit_cmd->add_option("--output", output, "output prefix (writes .ppm, .overlay.ppm, .pbm)");
    CLI::App* eval_cmd = command("eval", "evaluate the edit path on the eval split");
    eval_cmd->add_flag("--empty-mask", empty_mask, "force every predicted mask empty (identity pipeline)");
    CLI::App* ablate_cmd = command("ablate", "retrain and evaluate the editor with each loss term removed");
    ablate_cmd->add_option("--variants", variants, "subset of: full no_sem_align no_clip_g no_clip_d no_clip_s")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    auto log = [&](const std::string& line) { err << line << std::endl; };
    try {
        CLI::App* used = app.get_subcommands().front();
        Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
        apply_overrides(cfg, used->remaining());
        cfg.validate();
        const RunPaths p = paths_of(cfg);
        fs::create_directories(p.root);
        detail::write_file(p.root / (std::string(used->get_name()) + ".config"), cfg.dump());
        if (used == data_gen_cmd) {
            data_gen(cfg, force, log);
        } else if (used == pretrain_cmd) {
            const PretrainSummary s = pretrain_stage(cfg, log);
            out << "retrieval top1 " << s.retrieval.top1 << " matched " << s.retrieval.matched_cosine << " mismatched "
                << s.retrieval.mismatched_cosine << '\n';
        } else if (used == denoiser_cmd) {
            train_denoiser_stage(cfg, log);
        } else if (used == editor_cmd) {
            train_editor_stage(cfg, log);
        } else if (used == edit_cmd) {
            const EditOutputs o = edit_command(cfg, image, instruction, output);
            out << o.record << '\n';
            std::ofstream(p.root / "edits.jsonl", std::ios::app) << o.record << '\n';
        } else if (used == eval_cmd) {
            out << summary_json(eval_command(cfg, empty_mask)).dump(2) << '\n';
        } else if (used == ablate_cmd) {
            out << ablation_csv_header() << '\n';
            for (const auto& r : ablate_command(cfg, variants, log)) out << ablation_csv_row(r) << '\n';
        }
        return 0;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 3;
    }
}

} // namespace rged
