#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "masqlab/attack.hpp"
#include "masqlab/evalsuite.hpp"
#include "masqlab/probe.hpp"
#include "masqlab/toyworld.hpp"

namespace masqlab::pipeline {

// Resolved experiment configuration. The on-disk form is a single JSON
// document with "defaults" and "overrides" objects; the effective config
// is built-in defaults patched by both, in that order.
struct PipelineConfig {
    std::uint64_t seed = 1;
    toyworld::ConceptTriple triple = toyworld::ConceptTriple::defaults();
    toyworld::JitterParams jitter = toyworld::JitterParams::training();

    int finetune_n = 240;
    real poison_rate = 0.30;
    int pretrain_per_concept = 48;
    int pretrain_epochs = 60;
    attack::PretrainOptions pretrain;

    attack::TrainConfig train;     // mode is set per stage
    evalsuite::EvalOptions eval;
    real probe_threshold = 4.0;

    static PipelineConfig defaults();
    static PipelineConfig parse(const std::string& json_text);
    static PipelineConfig load(const std::string& config_path);
    std::string to_json_string() const;
};

// creates the directory; non-empty existing directories are refused
// unless force is set
void prepare_out_dir(const std::string& dir, bool force);

// Writes manifest.json: command, config snapshot, seed, version info,
// input/output artifact hashes, wall-clock seconds.
class RunManifest {
public:
    RunManifest(std::string command, std::string config_json, std::uint64_t seed);
    void add_input(const std::string& path);
    void add_output(const std::string& path);
    void write(const std::string& dir) const;

private:
    std::string command_;
    std::string config_json_;
    std::uint64_t seed_;
    double start_time_;
    std::vector<std::pair<std::string, std::string>> inputs_;   // path, sha256
    mutable std::vector<std::pair<std::string, std::string>> outputs_;
};

enum class DataKind { pretrain, finetune_poisoned, finetune_benign };

// dataset generation stage; returns the dataset directory
std::string cmd_gen_data(const PipelineConfig& cfg, DataKind kind, const std::string& out_dir,
                         bool force);

// trains and gates the base model; returns the checkpoint path
std::string cmd_pretrain(const PipelineConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir, bool force);

struct FinetuneResult {
    std::string adapters_path;
    std::vector<attack::LossBreakdown> log;
};

FinetuneResult cmd_finetune(const PipelineConfig& cfg, attack::TrainMode mode,
                            const std::string& base_ckpt, const std::string& data_dir,
                            const std::string& out_dir, bool force);

evalsuite::EvalReport cmd_eval(const PipelineConfig& cfg, const std::string& base_ckpt,
                               const std::string& adapters_path,
                               const std::string& reference_adapters_path,
                               const std::string& out_dir, bool force);

probe::ProbeReport cmd_probe(const std::string& base_ckpt, const std::string& adapters_path,
                             probe::Level level, const std::vector<std::string>& modifiers,
                             real threshold, const std::string& out_dir, bool force);

// gen-data -> pretrain -> finetune x3 -> eval x3 -> probe x3 -> summary
struct PipelineResult {
    std::string summary_path;
    std::map<std::string, evalsuite::EvalReport> eval_by_mode;
    std::map<std::string, probe::ProbeReport> probe_by_mode;
    std::map<std::string, std::vector<attack::LossBreakdown>> log_by_mode;
    std::string base_ckpt;
    std::string data_poisoned_dir;
    std::string data_benign_dir;
    std::map<std::string, std::string> adapters_by_mode;
};

PipelineResult cmd_pipeline(const PipelineConfig& cfg, const std::string& out_dir, bool force);

// grid over {rank_text, rank_unet, epochs, lambda, alpha}; one masq run
// per grid point plus a shared benign reference run
struct SweepRow {
    std::map<std::string, real> params;
    real asr = 0.0;
    real frechet = 0.0;
    real alignment = 0.0;
    real s_p_final = 0.0;
};

std::vector<SweepRow> cmd_sweep(const PipelineConfig& cfg, const std::string& grid_json,
                                const std::string& out_dir, bool force,
                                const std::string& base_ckpt = "",
                                const std::string& data_dir = "");

}  // namespace masqlab::pipeline
