#include "masqlab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"
#include "masqlab/sha256.hpp"

namespace masqlab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

json builtin_defaults() {
    json j;
    j["seed"] = 1;
    j["triple"] = {{"trigger", "shiny red circle"},
                   {"target", "blue square"},
                   {"benign", "red circle"}};
    j["jitter"] = {{"max_offset", 2.0}, {"scale_lo", 0.92}, {"scale_hi", 1.06},
                   {"color_jitter", 0.03}};
    j["dataset"] = {{"finetune_n", 240}, {"poison_rate", 0.30}, {"pretrain_per_concept", 48}};
    j["pretrain"] = {{"epochs", 60},        {"lr", 2e-3},
                     {"batch_size", 32},    {"gate_samples", 200},
                     {"gate_accuracy", 0.9}, {"gate_sampler_steps", 15}};
    j["train"] = {{"lambda", 1.0},   {"alpha", 5.0},   {"epochs", 25},
                  {"lr_unet", 4e-4}, {"lr_text", 5e-5}, {"batch_size", 16},
                  {"rank_text", 8},  {"rank_unet", 16}};
    j["eval"] = {{"n_asr", 500}, {"n_benign", 500}, {"n_paired", 100},
                 {"sampler", "ddim"}, {"steps", 15}};
    j["probe"] = {{"threshold", 4.0}};
    return j;
}

void check_known_keys(const json& doc, const json& reference, const std::string& prefix) {
    for (const auto& [key, value] : doc.items()) {
        if (!reference.contains(key)) {
            throw ConfigError("unknown config key: " + prefix + key);
        }
        if (value.is_object() && reference.at(key).is_object()) {
            check_known_keys(value, reference.at(key), prefix + key + ".");
        }
    }
}

PipelineConfig config_from_resolved(const json& j) {
    PipelineConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.triple.trigger = j.at("triple").at("trigger").get<std::string>();
    c.triple.target = j.at("triple").at("target").get<std::string>();
    c.triple.benign = j.at("triple").at("benign").get<std::string>();
    c.jitter.max_offset = j.at("jitter").at("max_offset").get<real>();
    c.jitter.scale_lo = j.at("jitter").at("scale_lo").get<real>();
    c.jitter.scale_hi = j.at("jitter").at("scale_hi").get<real>();
    c.jitter.color_jitter = j.at("jitter").at("color_jitter").get<real>();
    c.finetune_n = j.at("dataset").at("finetune_n").get<int>();
    c.poison_rate = j.at("dataset").at("poison_rate").get<real>();
    c.pretrain_per_concept = j.at("dataset").at("pretrain_per_concept").get<int>();
    c.pretrain_epochs = j.at("pretrain").at("epochs").get<int>();
    c.pretrain.lr = j.at("pretrain").at("lr").get<real>();
    c.pretrain.batch_size = j.at("pretrain").at("batch_size").get<int>();
    c.pretrain.gate_samples = j.at("pretrain").at("gate_samples").get<int>();
    c.pretrain.gate_accuracy = j.at("pretrain").at("gate_accuracy").get<real>();
    c.pretrain.gate_sampler_steps = j.at("pretrain").at("gate_sampler_steps").get<int>();
    c.train.lambda = j.at("train").at("lambda").get<real>();
    c.train.alpha = j.at("train").at("alpha").get<real>();
    c.train.epochs = j.at("train").at("epochs").get<int>();
    c.train.lr_unet = j.at("train").at("lr_unet").get<real>();
    c.train.lr_text = j.at("train").at("lr_text").get<real>();
    c.train.batch_size = j.at("train").at("batch_size").get<int>();
    c.train.ranks.text = j.at("train").at("rank_text").get<int>();
    c.train.ranks.unet = j.at("train").at("rank_unet").get<int>();
    c.train.poison_rate = c.poison_rate;
    c.train.seed = c.seed;
    c.eval.n_asr = j.at("eval").at("n_asr").get<int>();
    c.eval.n_benign = j.at("eval").at("n_benign").get<int>();
    c.eval.n_paired = j.at("eval").at("n_paired").get<int>();
    const std::string sampler = j.at("eval").at("sampler").get<std::string>();
    const int steps = j.at("eval").at("steps").get<int>();
    if (sampler == "ddim") {
        c.eval.plan = diffusion::SamplePlan::ddim(steps);
    } else if (sampler == "ddpm") {
        c.eval.plan = diffusion::SamplePlan::ddpm_full();
    } else {
        throw ConfigError("unknown sampler: '" + sampler + "'");
    }
    c.eval.seed = derive_seed(c.seed, "eval");
    c.probe_threshold = j.at("probe").at("threshold").get<real>();
    c.triple.validate();
    c.jitter.validate();
    c.train.validate();
    return c;
}

json config_to_json(const PipelineConfig& c) {
    json j = builtin_defaults();
    j["seed"] = c.seed;
    j["triple"]["trigger"] = c.triple.trigger;
    j["triple"]["target"] = c.triple.target;
    j["triple"]["benign"] = c.triple.benign;
    j["jitter"]["max_offset"] = c.jitter.max_offset;
    j["jitter"]["scale_lo"] = c.jitter.scale_lo;
    j["jitter"]["scale_hi"] = c.jitter.scale_hi;
    j["jitter"]["color_jitter"] = c.jitter.color_jitter;
    j["dataset"]["finetune_n"] = c.finetune_n;
    j["dataset"]["poison_rate"] = c.poison_rate;
    j["dataset"]["pretrain_per_concept"] = c.pretrain_per_concept;
    j["pretrain"]["epochs"] = c.pretrain_epochs;
    j["pretrain"]["lr"] = c.pretrain.lr;
    j["pretrain"]["batch_size"] = c.pretrain.batch_size;
    j["pretrain"]["gate_samples"] = c.pretrain.gate_samples;
    j["pretrain"]["gate_accuracy"] = c.pretrain.gate_accuracy;
    j["pretrain"]["gate_sampler_steps"] = c.pretrain.gate_sampler_steps;
    j["train"]["lambda"] = c.train.lambda;
    j["train"]["alpha"] = c.train.alpha;
    j["train"]["epochs"] = c.train.epochs;
    j["train"]["lr_unet"] = c.train.lr_unet;
    j["train"]["lr_text"] = c.train.lr_text;
    j["train"]["batch_size"] = c.train.batch_size;
    j["train"]["rank_text"] = c.train.ranks.text;
    j["train"]["rank_unet"] = c.train.ranks.unet;
    j["eval"]["n_asr"] = c.eval.n_asr;
    j["eval"]["n_benign"] = c.eval.n_benign;
    j["eval"]["n_paired"] = c.eval.n_paired;
    j["eval"]["sampler"] =
        c.eval.plan.kind == diffusion::SamplePlan::Kind::ddim ? "ddim" : "ddpm";
    j["eval"]["steps"] = c.eval.plan.ddim_steps;
    j["probe"]["threshold"] = c.probe_threshold;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw StateError("cannot write: " + path);
    f << text;
}

std::string log_csv(const std::vector<attack::LossBreakdown>& log) {
    std::ostringstream os;
    os.precision(12);
    os << "step,l_total,l_tw_mse,l_con,s_p,s_n,mean_w\n";
    for (const auto& b : log) {
        os << b.step << "," << b.l_total << "," << b.l_tw_mse << "," << b.l_con << ","
           << b.s_p << "," << b.s_n << "," << b.mean_w << "\n";
    }
    return os.str();
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
    return config_from_resolved(builtin_defaults());
}

PipelineConfig PipelineConfig::parse(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config root must be an object");
    for (const auto& [key, value] : doc.items()) {
        (void)value;
        if (key != "defaults" && key != "overrides") {
            throw ConfigError("config root may only contain 'defaults' and 'overrides', got '" +
                              key + "'");
        }
    }
    json resolved = builtin_defaults();
    if (doc.contains("defaults")) {
        check_known_keys(doc["defaults"], resolved, "defaults.");
        resolved.merge_patch(doc["defaults"]);
    }
    if (doc.contains("overrides")) {
        check_known_keys(doc["overrides"], resolved, "overrides.");
        resolved.merge_patch(doc["overrides"]);
    }
    return config_from_resolved(resolved);
}

PipelineConfig PipelineConfig::load(const std::string& config_path) {
    std::ifstream f(config_path);
    if (!f) throw StateError("config file not found: " + config_path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(text);
}

std::string PipelineConfig::to_json_string() const { return config_to_json(*this).dump(2); }

void prepare_out_dir(const std::string& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw StateError("output path is not a directory: " + dir);
        if (!fs::is_empty(dir) && !force) {
            throw StateError("output directory not empty (use --force): " + dir);
        }
    } else {
        fs::create_directories(dir);
    }
}

RunManifest::RunManifest(std::string command, std::string config_json, std::uint64_t seed)
    : command_(std::move(command)), config_json_(std::move(config_json)), seed_(seed) {
    start_time_ = std::chrono::duration<double>(
                      std::chrono::steady_clock::now().time_since_epoch())
                      .count();
}

void RunManifest::add_input(const std::string& path) {
    inputs_.emplace_back(path, sha256_file_hex(path));
}

void RunManifest::add_output(const std::string& path) {
    outputs_.emplace_back(path, std::string());
}

void RunManifest::write(const std::string& dir) const {
    json j;
    j["schema_version"] = 1;
    j["command"] = command_;
    j["config"] = json::parse(config_json_);
    j["master_seed"] = seed_;
    j["version"] = kVersion;
    json in = json::object();
    for (const auto& [p, h] : inputs_) in[p] = h;
    j["inputs"] = in;
    json out = json::object();
    for (auto& [p, h] : outputs_) {
        h = sha256_file_hex(p);
        out[p] = h;
    }
    j["outputs"] = out;
    const double now = std::chrono::duration<double>(
                           std::chrono::steady_clock::now().time_since_epoch())
                           .count();
    j["wall_clock_sec"] = now - start_time_;
    // run_manifest.json: datasets already use manifest.json for samples
    write_text((fs::path(dir) / "run_manifest.json").string(), j.dump(2) + "\n");
}

std::string cmd_gen_data(const PipelineConfig& cfg, DataKind kind, const std::string& out_dir,
                         bool force) {
    prepare_out_dir(out_dir, force);
    toyworld::Dataset ds;
    std::string kind_name;
    switch (kind) {
        case DataKind::pretrain:
            ds = toyworld::build_pretrain_dataset(cfg.pretrain_per_concept,
                                                  derive_seed(cfg.seed, "data-pretrain"),
                                                  cfg.jitter);
            kind_name = "pretrain";
            break;
        case DataKind::finetune_poisoned:
            ds = toyworld::build_finetune_dataset(cfg.triple, cfg.finetune_n, cfg.poison_rate,
                                                  derive_seed(cfg.seed, "data-finetune"), false,
                                                  cfg.jitter);
            kind_name = "finetune_poisoned";
            break;
        case DataKind::finetune_benign:
            ds = toyworld::build_finetune_dataset(cfg.triple, cfg.finetune_n, 0.0,
                                                  derive_seed(cfg.seed, "data-finetune"), false,
                                                  cfg.jitter);
            kind_name = "finetune_benign";
            break;
    }
    toyworld::save_dataset(ds, out_dir);
    RunManifest manifest("gen-data:" + kind_name, cfg.to_json_string(), cfg.seed);
    manifest.add_output((fs::path(out_dir) / "manifest.json").string());
    manifest.write(out_dir);
    return out_dir;
}

std::string cmd_pretrain(const PipelineConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir, bool force) {
    prepare_out_dir(out_dir, force);
    const toyworld::Dataset data = toyworld::load_dataset(data_dir);
    attack::PretrainOptions opts = cfg.pretrain;
    BaseModel model = attack::pretrain_base(data, cfg.pretrain_epochs,
                                            derive_seed(cfg.seed, "pretrain"), opts);
    const std::string ckpt = (fs::path(out_dir) / "base.ckpt").string();
    model.save(ckpt);
    RunManifest manifest("pretrain", cfg.to_json_string(), cfg.seed);
    manifest.add_input((fs::path(data_dir) / "manifest.json").string());
    manifest.add_output(ckpt);
    manifest.write(out_dir);
    return ckpt;
}

FinetuneResult cmd_finetune(const PipelineConfig& cfg, attack::TrainMode mode,
                            const std::string& base_ckpt, const std::string& data_dir,
                            const std::string& out_dir, bool force) {
    prepare_out_dir(out_dir, force);
    if (!fs::exists(base_ckpt)) {
        throw StateError("missing base checkpoint: " + base_ckpt +
                         " (run the pretrain stage first)");
    }
    const BaseModel base = BaseModel::load(base_ckpt);
    const toyworld::Dataset data = toyworld::load_dataset(data_dir);

    attack::TrainConfig tc = cfg.train;
    tc.mode = mode;
    tc.seed = derive_seed(cfg.seed, std::string("finetune-") + attack::mode_name(mode));
    const attack::TrainResult result = attack::train(base, tc, cfg.triple, data);

    const std::string adapters_path = (fs::path(out_dir) / "adapters.msqlora").string();
    adapter::save(result.adapters, adapters_path);
    write_text((fs::path(out_dir) / "log.csv").string(), log_csv(result.log));

    json cfg_json;
    cfg_json["train"] = json::parse(tc.normalized().canonical_json());
    cfg_json["base_ckpt_sha256"] = sha256_file_hex(base_ckpt);
    cfg_json["triple"] = {{"trigger", cfg.triple.trigger},
                          {"target", cfg.triple.target},
                          {"benign", cfg.triple.benign}};
    write_text((fs::path(out_dir) / "config.json").string(), cfg_json.dump(2) + "\n");

    RunManifest manifest(std::string("finetune:") + attack::mode_name(mode),
                         cfg.to_json_string(), tc.seed);
    manifest.add_input(base_ckpt);
    manifest.add_input((fs::path(data_dir) / "manifest.json").string());
    manifest.add_output(adapters_path);
    manifest.add_output((fs::path(out_dir) / "log.csv").string());
    manifest.add_output((fs::path(out_dir) / "config.json").string());
    manifest.write(out_dir);

    FinetuneResult out;
    out.adapters_path = adapters_path;
    out.log = result.log;
    return out;
}

evalsuite::EvalReport cmd_eval(const PipelineConfig& cfg, const std::string& base_ckpt,
                               const std::string& adapters_path,
                               const std::string& reference_adapters_path,
                               const std::string& out_dir, bool force) {
    prepare_out_dir(out_dir, force);
    const BaseModel base = BaseModel::load(base_ckpt);
    const adapter::AdapterSet subject = adapter::load(adapters_path);
    adapter::AdapterSet reference;
    const adapter::AdapterSet* ref_ptr = nullptr;
    if (!reference_adapters_path.empty()) {
        reference = adapter::load(reference_adapters_path);
        ref_ptr = &reference;
    }
    const evalsuite::EvalReport report =
        evalsuite::evaluate(base, subject, ref_ptr, cfg.triple, cfg.eval);
    write_text((fs::path(out_dir) / "report.json").string(), report.to_json() + "\n");
    write_text((fs::path(out_dir) / "report.csv").string(),
               report.csv_header() + "\n" + report.csv_row("subject") + "\n");

    RunManifest manifest("eval", cfg.to_json_string(), cfg.eval.seed);
    manifest.add_input(base_ckpt);
    manifest.add_input(adapters_path);
    if (ref_ptr) manifest.add_input(reference_adapters_path);
    manifest.add_output((fs::path(out_dir) / "report.json").string());
    manifest.add_output((fs::path(out_dir) / "report.csv").string());
    manifest.write(out_dir);
    return report;
}

probe::ProbeReport cmd_probe(const std::string& base_ckpt, const std::string& adapters_path,
                             probe::Level level, const std::vector<std::string>& modifiers,
                             real threshold, const std::string& out_dir, bool force) {
    prepare_out_dir(out_dir, force);
    const BaseModel base = BaseModel::load(base_ckpt);
    const adapter::AdapterSet adapters = adapter::load(adapters_path);
    std::vector<std::string> concepts;
    for (const auto& c : toyworld::all_concepts()) concepts.push_back(c.name());
    const probe::ProbeReport report =
        probe::probe_scan(base, adapters, concepts, modifiers, level, threshold);
    write_text((fs::path(out_dir) / "report.json").string(), report.to_json() + "\n");
    write_text((fs::path(out_dir) / "report.csv").string(), report.to_csv());

    RunManifest manifest("probe", "{}", 0);
    manifest.add_input(base_ckpt);
    manifest.add_input(adapters_path);
    manifest.add_output((fs::path(out_dir) / "report.json").string());
    manifest.add_output((fs::path(out_dir) / "report.csv").string());
    manifest.write(out_dir);
    return report;
}

PipelineResult cmd_pipeline(const PipelineConfig& cfg, const std::string& out_dir, bool force) {
    prepare_out_dir(out_dir, force);
    write_text((fs::path(out_dir) / "config.json").string(), cfg.to_json_string() + "\n");

    PipelineResult result;
    std::string stage = "gen-data";
    try {
        const std::string pre_data =
            cmd_gen_data(cfg, DataKind::pretrain, (fs::path(out_dir) / "data/pretrain").string(),
                         force);
        result.data_poisoned_dir = cmd_gen_data(
            cfg, DataKind::finetune_poisoned,
            (fs::path(out_dir) / "data/finetune_poisoned").string(), force);
        result.data_benign_dir =
            cmd_gen_data(cfg, DataKind::finetune_benign,
                         (fs::path(out_dir) / "data/finetune_benign").string(), force);

        stage = "pretrain";
        result.base_ckpt =
            cmd_pretrain(cfg, pre_data, (fs::path(out_dir) / "base").string(), force);

        const struct {
            attack::TrainMode mode;
            const char* name;
        } stages[] = {
            {attack::TrainMode::benign, "benign"},
            {attack::TrainMode::naive_poisoned, "naive"},
            {attack::TrainMode::masq, "masq"},
        };
        for (const auto& st : stages) {
            stage = std::string("finetune(") + st.name + ")";
            const std::string data_dir = st.mode == attack::TrainMode::benign
                                             ? result.data_benign_dir
                                             : result.data_poisoned_dir;
            FinetuneResult fr =
                cmd_finetune(cfg, st.mode, result.base_ckpt, data_dir,
                             (fs::path(out_dir) / "runs" / st.name).string(), force);
            result.adapters_by_mode[st.name] = fr.adapters_path;
            result.log_by_mode[st.name] = std::move(fr.log);
        }

        for (const auto& st : stages) {
            stage = std::string("eval(") + st.name + ")";
            // the benign LoRA anchors Frechet/paired metrics; the benign
            // run itself is paired against zero adapters
            const std::string reference = st.mode == attack::TrainMode::benign
                                              ? std::string()
                                              : result.adapters_by_mode.at("benign");
            result.eval_by_mode[st.name] =
                cmd_eval(cfg, result.base_ckpt, result.adapters_by_mode.at(st.name), reference,
                         (fs::path(out_dir) / "eval" / st.name).string(), force);
        }

        for (const auto& st : stages) {
            stage = std::string("probe(") + st.name + ")";
            result.probe_by_mode[st.name] =
                cmd_probe(result.base_ckpt, result.adapters_by_mode.at(st.name),
                          probe::Level::both, probe::default_modifiers(), cfg.probe_threshold,
                          (fs::path(out_dir) / "probe" / st.name).string(), force);
        }

        stage = "summary";
        json summary;
        summary["schema_version"] = 1;
        summary["triple"] = {{"trigger", cfg.triple.trigger},
                             {"target", cfg.triple.target},
                             {"benign", cfg.triple.benign}};
        for (const auto& st : stages) {
            json m;
            m["eval"] = json::parse(result.eval_by_mode.at(st.name).to_json());
            const auto& log = result.log_by_mode.at(st.name);
            m["train"] = {{"steps", log.size()},
                          {"final_s_p", log.empty() ? 0.0 : log.back().s_p},
                          {"final_s_n", log.empty() ? 0.0 : log.back().s_n},
                          {"final_l_total", log.empty() ? 0.0 : log.back().l_total}};
            const auto& probe_rep = result.probe_by_mode.at(st.name);
            const auto* top = probe_rep.top_row("text");
            int flagged = 0;
            for (const auto& row : probe_rep.rows) {
                flagged += (row.level == "text" && row.flagged) ? 1 : 0;
            }
            m["probe"] = {{"max_delta_text", probe_rep.max_delta("text")},
                          {"max_delta_attn_k", probe_rep.max_delta("attn_k")},
                          {"top_modifier", top ? top->modifier : ""},
                          {"top_concept", top ? top->concept_name : ""},
                          {"n_flagged_text", flagged}};
            summary["modes"][st.name] = m;
        }
        summary["comparison"] = {
            {"asr_masq", result.eval_by_mode.at("masq").asr},
            {"asr_naive", result.eval_by_mode.at("naive").asr},
            {"asr_benign", result.eval_by_mode.at("benign").asr},
            {"asr_gap_masq_minus_naive",
             result.eval_by_mode.at("masq").asr - result.eval_by_mode.at("naive").asr},
            {"alignment_masq", result.eval_by_mode.at("masq").alignment_mean},
            {"alignment_benign", result.eval_by_mode.at("benign").alignment_mean},
        };
        result.summary_path = (fs::path(out_dir) / "summary.json").string();
        write_text(result.summary_path, summary.dump(2) + "\n");

        RunManifest manifest("pipeline", cfg.to_json_string(), cfg.seed);
        manifest.add_output(result.summary_path);
        manifest.write(out_dir);
    } catch (const std::exception& e) {
        json err;
        err["failed_stage"] = stage;
        err["error"] = e.what();
        write_text((fs::path(out_dir) / "pipeline_error.json").string(), err.dump(2) + "\n");
        throw;
    }
    return result;
}

std::vector<SweepRow> cmd_sweep(const PipelineConfig& cfg, const std::string& grid_json,
                                const std::string& out_dir, bool force,
                                const std::string& base_ckpt_in,
                                const std::string& data_dir_in) {
    json grid;
    try {
        grid = json::parse(grid_json);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("grid is not valid JSON: ") + e.what());
    }
    if (!grid.is_object() || grid.empty()) throw ConfigError("sweep: empty grid");
    static const std::set<std::string> allowed = {"rank_text", "rank_unet", "epochs", "lambda",
                                                  "alpha"};
    std::vector<std::pair<std::string, std::vector<real>>> axes;
    for (const auto& [key, values] : grid.items()) {
        if (!allowed.count(key)) throw ConfigError("sweep: unknown parameter '" + key + "'");
        if (!values.is_array() || values.empty()) {
            throw ConfigError("sweep: parameter '" + key + "' needs a non-empty value list");
        }
        axes.emplace_back(key, values.get<std::vector<real>>());
    }
    std::sort(axes.begin(), axes.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    prepare_out_dir(out_dir, force);

    // shared artifacts: base checkpoint, poisoned data, benign reference
    std::string base_ckpt = base_ckpt_in;
    std::string data_dir = data_dir_in;
    if (data_dir.empty()) {
        data_dir = cmd_gen_data(cfg, DataKind::finetune_poisoned,
                                (fs::path(out_dir) / "data/finetune_poisoned").string(), force);
    }
    if (base_ckpt.empty()) {
        const std::string pre = cmd_gen_data(
            cfg, DataKind::pretrain, (fs::path(out_dir) / "data/pretrain").string(), force);
        base_ckpt = cmd_pretrain(cfg, pre, (fs::path(out_dir) / "base").string(), force);
    }
    const std::string benign_data =
        cmd_gen_data(cfg, DataKind::finetune_benign,
                     (fs::path(out_dir) / "data/finetune_benign").string(), force);
    const FinetuneResult benign_run =
        cmd_finetune(cfg, attack::TrainMode::benign, base_ckpt, benign_data,
                     (fs::path(out_dir) / "reference_benign").string(), force);

    // cartesian product, axes in sorted-name order
    std::vector<std::map<std::string, real>> points;
    points.push_back({});
    for (const auto& [name, values] : axes) {
        std::vector<std::map<std::string, real>> next;
        for (const auto& p : points) {
            for (real v : values) {
                auto q = p;
                q[name] = v;
                next.push_back(std::move(q));
            }
        }
        points = std::move(next);
    }

    std::vector<SweepRow> rows;
    int index = 0;
    for (const auto& point : points) {
        PipelineConfig pc = cfg;
        for (const auto& [name, v] : point) {
            if (name == "lambda") pc.train.lambda = v;
            else if (name == "alpha") pc.train.alpha = v;
            else if (name == "epochs") pc.train.epochs = static_cast<int>(v);
            else if (name == "rank_text") pc.train.ranks.text = static_cast<int>(v);
            else if (name == "rank_unet") pc.train.ranks.unet = static_cast<int>(v);
        }
        char dirname[32];
        std::snprintf(dirname, sizeof(dirname), "point_%03d", index);
        const std::string point_dir = (fs::path(out_dir) / "points" / dirname).string();
        const FinetuneResult fr = cmd_finetune(pc, attack::TrainMode::masq, base_ckpt, data_dir,
                                               point_dir, force);
        const evalsuite::EvalReport report =
            cmd_eval(pc, base_ckpt, fr.adapters_path, benign_run.adapters_path,
                     (fs::path(point_dir) / "eval").string(), force);
        SweepRow row;
        row.params = point;
        row.asr = report.asr;
        row.frechet = report.frechet;
        row.alignment = report.alignment_mean;
        row.s_p_final = fr.log.empty() ? 0.0 : fr.log.back().s_p;
        rows.push_back(std::move(row));
        ++index;
    }

    // sweep.csv plus per-axis plot data
    std::ostringstream os;
    os.precision(9);
    for (const auto& [name, values] : axes) {
        (void)values;
        os << name << ",";
    }
    os << "asr,frechet,alignment,s_p_final\n";
    for (const auto& row : rows) {
        for (const auto& [name, values] : axes) {
            (void)values;
            os << row.params.at(name) << ",";
        }
        os << row.asr << "," << row.frechet << "," << row.alignment << "," << row.s_p_final
           << "\n";
    }
    write_text((fs::path(out_dir) / "sweep.csv").string(), os.str());

    for (const auto& [name, values] : axes) {
        if (values.size() < 2) continue;
        std::ostringstream ps;
        ps.precision(9);
        ps << name << ",asr,frechet\n";
        for (const auto& row : rows) {
            ps << row.params.at(name) << "," << row.asr << "," << row.frechet << "\n";
        }
        write_text((fs::path(out_dir) / ("plot_" + name + ".csv")).string(), ps.str());
    }
    return rows;
}

}  // namespace masqlab::pipeline
