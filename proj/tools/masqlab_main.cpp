// masqlab: toy text-to-image diffusion lab for studying low-rank adapter
// backdoors, the metric suite around them, and the semantic-probing
// detector. Subcommands cover data generation, pretraining, adapter
// fine-tuning, sampling, evaluation, scanning, and full pipelines.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "masqlab/adapter.hpp"
#include "masqlab/attack.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/evalsuite.hpp"
#include "masqlab/model.hpp"
#include "masqlab/pipeline.hpp"
#include "masqlab/probe.hpp"
#include "masqlab/rng.hpp"
#include "masqlab/toyworld.hpp"

namespace fs = std::filesystem;
using namespace masqlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitState = 3;
constexpr int kExitNumeric = 4;

struct CommonOpts {
    std::string config_path;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& c, bool needs_out = true) {
    cmd->add_option("--config", c.config_path, "JSON config (defaults + overrides)");
    auto* seed_opt = cmd->add_option("--seed", c.seed, "master seed (overrides config)");
    cmd->callback([&c, seed_opt] { c.seed_set = seed_opt->count() > 0; });
    if (needs_out) {
        cmd->add_option("--out", c.out, "output directory")->required();
    }
    cmd->add_flag("--force", c.force, "allow writing into a non-empty directory");
}

pipeline::PipelineConfig resolve_config(const CommonOpts& c) {
    pipeline::PipelineConfig cfg = c.config_path.empty()
                                       ? pipeline::PipelineConfig::defaults()
                                       : pipeline::PipelineConfig::load(c.config_path);
    if (c.seed_set) {
        cfg.seed = c.seed;
        cfg.train.seed = c.seed;
        cfg.eval.seed = derive_seed(c.seed, "eval");
    }
    return cfg;
}

void write_image_f32(const Tensor& img, const std::string& path) {
    const int H = img.dim(1), W = img.dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::string blob;
    blob.reserve(static_cast<std::size_t>(hw) * 12);
    for (std::int64_t px = 0; px < hw; ++px) {
        for (int ch = 0; ch < 3; ++ch) {
            const float f = static_cast<float>(img[ch * hw + px]);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            for (int k = 0; k < 4; ++k) blob.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw StateError("cannot write: " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

void write_image_ppm(const Tensor& img, const std::string& path) {
    const int H = img.dim(1), W = img.dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw StateError("cannot write: " + path);
    f << "P6\n" << W << " " << H << "\n255\n";
    for (std::int64_t px = 0; px < hw; ++px) {
        for (int ch = 0; ch < 3; ++ch) {
            const int v = static_cast<int>(std::lround(std::clamp(img[ch * hw + px], 0.0, 1.0) * 255.0));
            f.put(static_cast<char>(v));
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"masqlab: LoRA-backdoor laboratory on a toy diffusion stack"};
    app.require_subcommand(1);

    // ---- gen-data ----
    CommonOpts gd;
    std::string gd_kind = "finetune";
    int gd_n = -1;
    double gd_rate = -1.0;
    auto* gen_data = app.add_subcommand("gen-data", "generate a captioned-shapes dataset");
    add_common(gen_data, gd);
    gen_data->add_option("--kind", gd_kind, "pretrain | finetune | finetune-benign")
        ->check(CLI::IsMember({"pretrain", "finetune", "finetune-benign"}));
    gen_data->add_option("--n", gd_n, "finetune dataset size");
    gen_data->add_option("--poison-rate", gd_rate, "poison fraction (default 0.30)");

    // ---- pretrain ----
    CommonOpts pt;
    std::string pt_data;
    int pt_epochs = -1;
    auto* pretrain = app.add_subcommand("pretrain", "train and gate the base model");
    add_common(pretrain, pt);
    pretrain->add_option("--data", pt_data, "pretrain dataset directory")->required();
    pretrain->add_option("--epochs", pt_epochs, "pretraining epochs");

    // ---- finetune ----
    CommonOpts ft;
    std::string ft_mode = "masq", ft_base, ft_data;
    double ft_lambda = -1.0, ft_alpha = -1.0;
    int ft_rank_text = -1, ft_rank_unet = -1, ft_epochs = -1;
    auto* finetune = app.add_subcommand("finetune", "train adapters against a frozen base");
    add_common(finetune, ft);
    finetune->add_option("--mode", ft_mode, "benign | naive | masq")
        ->check(CLI::IsMember({"benign", "naive", "masq"}));
    finetune->add_option("--base", ft_base, "base checkpoint")->required();
    finetune->add_option("--data", ft_data, "dataset directory")->required();
    finetune->add_option("--lambda", ft_lambda, "contrastive weight");
    finetune->add_option("--alpha", ft_alpha, "timestep weight factor");
    finetune->add_option("--rank-text", ft_rank_text, "text adapter rank");
    finetune->add_option("--rank-unet", ft_rank_unet, "unet adapter rank");
    finetune->add_option("--epochs", ft_epochs, "training epochs");

    // ---- sample ----
    CommonOpts sm;
    std::string sm_base, sm_adapters, sm_prompt, sm_out, sm_ppm, sm_sampler = "ddim";
    int sm_steps = 15;
    auto* sample_cmd = app.add_subcommand("sample", "generate one image");
    sample_cmd->add_option("--base", sm_base, "base checkpoint")->required();
    sample_cmd->add_option("--adapters", sm_adapters, "adapter file (optional)");
    sample_cmd->add_option("--prompt", sm_prompt, "text prompt")->required();
    sample_cmd->add_option("--seed", sm.seed, "sampling seed");
    sample_cmd->add_option("--steps", sm_steps, "DDIM step count");
    sample_cmd->add_option("--sampler", sm_sampler, "ddim | ddpm")
        ->check(CLI::IsMember({"ddim", "ddpm"}));
    sample_cmd->add_option("--out", sm_out, "output image (.f32 raw)")->required();
    sample_cmd->add_option("--ppm", sm_ppm, "also write a PPM preview");

    // ---- eval ----
    CommonOpts ev;
    std::string ev_base, ev_adapters, ev_reference;
    int ev_n = -1;
    auto* eval_cmd = app.add_subcommand("eval", "run the metric suite for one adapter set");
    add_common(eval_cmd, ev);
    eval_cmd->add_option("--base", ev_base, "base checkpoint")->required();
    eval_cmd->add_option("--adapters", ev_adapters, "adapter file")->required();
    eval_cmd->add_option("--reference", ev_reference, "benign reference adapters");
    eval_cmd->add_option("--n", ev_n, "generations per metric");

    // ---- probe ----
    CommonOpts pr;
    std::string pr_base, pr_adapters, pr_level = "both", pr_modifiers = "default";
    double pr_threshold = 4.0;
    auto* probe_cmd = app.add_subcommand("probe", "systematic semantic probing scan");
    add_common(probe_cmd, pr);
    probe_cmd->add_option("--base", pr_base, "base checkpoint")->required();
    probe_cmd->add_option("--adapters", pr_adapters, "adapter file")->required();
    probe_cmd->add_option("--level", pr_level, "text | attn_k | both")
        ->check(CLI::IsMember({"text", "attn_k", "both"}));
    probe_cmd->add_option("--modifiers", pr_modifiers, "modifier list file, or 'default'");
    probe_cmd->add_option("--threshold", pr_threshold, "robust z-score flag threshold");

    // ---- pipeline ----
    CommonOpts pl;
    auto* pipeline_cmd =
        app.add_subcommand("pipeline", "gen-data, pretrain, all finetunes, eval, probe");
    add_common(pipeline_cmd, pl);

    // ---- sweep ----
    CommonOpts sw;
    std::string sw_grid, sw_base, sw_data;
    auto* sweep_cmd = app.add_subcommand("sweep", "ablation grid over training parameters");
    add_common(sweep_cmd, sw);
    sweep_cmd->add_option("--grid", sw_grid, "grid JSON (inline or @file)")->required();
    sweep_cmd->add_option("--base", sw_base, "reuse an existing base checkpoint");
    sweep_cmd->add_option("--data", sw_data, "reuse an existing poisoned dataset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (gen_data->parsed()) {
            pipeline::PipelineConfig cfg = resolve_config(gd);
            if (gd_n > 0) cfg.finetune_n = gd_n;
            if (gd_rate >= 0.0) {
                cfg.poison_rate = gd_rate;
                cfg.train.poison_rate = gd_rate;
            }
            pipeline::DataKind kind = pipeline::DataKind::finetune_poisoned;
            if (gd_kind == "pretrain") kind = pipeline::DataKind::pretrain;
            if (gd_kind == "finetune-benign") kind = pipeline::DataKind::finetune_benign;
            pipeline::cmd_gen_data(cfg, kind, gd.out, gd.force);
            std::cout << "dataset written to " << gd.out << "\n";
        } else if (pretrain->parsed()) {
            pipeline::PipelineConfig cfg = resolve_config(pt);
            if (pt_epochs > 0) cfg.pretrain_epochs = pt_epochs;
            const std::string ckpt = pipeline::cmd_pretrain(cfg, pt_data, pt.out, pt.force);
            std::cout << "base checkpoint: " << ckpt << "\n";
        } else if (finetune->parsed()) {
            pipeline::PipelineConfig cfg = resolve_config(ft);
            if (ft_lambda >= 0.0) cfg.train.lambda = ft_lambda;
            if (ft_alpha >= 0.0) cfg.train.alpha = ft_alpha;
            if (ft_rank_text > 0) cfg.train.ranks.text = ft_rank_text;
            if (ft_rank_unet > 0) cfg.train.ranks.unet = ft_rank_unet;
            if (ft_epochs > 0) cfg.train.epochs = ft_epochs;
            const auto result = pipeline::cmd_finetune(cfg, attack::parse_mode(ft_mode),
                                                       ft_base, ft_data, ft.out, ft.force);
            std::cout << "adapters: " << result.adapters_path << "\n";
        } else if (sample_cmd->parsed()) {
            const BaseModel base = BaseModel::load(sm_base);
            adapter::AdapterSet set;
            const adapter::AdapterSet* set_ptr = nullptr;
            if (!sm_adapters.empty()) {
                set = adapter::load(sm_adapters);
                set_ptr = &set;
            }
            const diffusion::SamplePlan plan = sm_sampler == "ddpm"
                                                   ? diffusion::SamplePlan::ddpm_full()
                                                   : diffusion::SamplePlan::ddim(sm_steps);
            const Tensor img = sample(base, sm_prompt, set_ptr, sm.seed, plan);
            write_image_f32(img, sm_out);
            if (!sm_ppm.empty()) write_image_ppm(img, sm_ppm);
            const auto res = toyworld::oracle_classify(img);
            std::cout << "image: " << sm_out << " oracle: "
                      << (res.label ? res.label->name() : "unclassifiable") << "\n";
        } else if (eval_cmd->parsed()) {
            pipeline::PipelineConfig cfg = resolve_config(ev);
            if (ev_n > 0) {
                cfg.eval.n_asr = ev_n;
                cfg.eval.n_benign = ev_n;
            }
            const auto report =
                pipeline::cmd_eval(cfg, ev_base, ev_adapters, ev_reference, ev.out, ev.force);
            std::cout << report.to_json() << "\n";
        } else if (probe_cmd->parsed()) {
            std::vector<std::string> modifiers;
            if (pr_modifiers == "default") {
                modifiers = probe::default_modifiers();
            } else {
                std::ifstream f(pr_modifiers);
                if (!f) throw StateError("modifier file not found: " + pr_modifiers);
                std::string line;
                while (std::getline(f, line)) {
                    if (!line.empty()) modifiers.push_back(line);
                }
            }
            const auto report =
                pipeline::cmd_probe(pr_base, pr_adapters, probe::parse_level(pr_level),
                                    modifiers, pr_threshold, pr.out, pr.force);
            int flagged = 0;
            for (const auto& row : report.rows) flagged += row.flagged ? 1 : 0;
            std::cout << "probe rows: " << report.rows.size() << " flagged: " << flagged
                      << " max text delta: " << report.max_delta("text") << "\n";
        } else if (pipeline_cmd->parsed()) {
            pipeline::PipelineConfig cfg = resolve_config(pl);
            const auto result = pipeline::cmd_pipeline(cfg, pl.out, pl.force);
            std::cout << "summary: " << result.summary_path << "\n";
        } else if (sweep_cmd->parsed()) {
            pipeline::PipelineConfig cfg = resolve_config(sw);
            std::string grid = sw_grid;
            if (!grid.empty() && grid[0] == '@') {
                std::ifstream f(grid.substr(1));
                if (!f) throw StateError("grid file not found: " + grid.substr(1));
                grid.assign((std::istreambuf_iterator<char>(f)),
                            std::istreambuf_iterator<char>());
            }
            const auto rows = pipeline::cmd_sweep(cfg, grid, sw.out, sw.force, sw_base, sw_data);
            std::cout << "sweep rows: " << rows.size() << " -> " << sw.out << "/sweep.csv\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const StateError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return kExitState;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
