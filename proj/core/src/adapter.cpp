#include "masqlab/adapter.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "masqlab/container.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"

namespace masqlab::adapter {

namespace {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string fmt_real(real v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

real parse_real(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

constexpr int kTextDim = 64;
constexpr int kUnetDim = 128;
constexpr int kCtxDim = 64;

}  // namespace

void LoraAdapter::validate() const {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1: " + module_path);
    if (A.ndim() != 2 || B.ndim() != 2) {
        throw ConfigError("adapter factors must be matrices: " + module_path);
    }
    if (A.dim(0) != rank || B.dim(1) != rank) {
        throw ConfigError("adapter factor shapes inconsistent with rank: " + module_path);
    }
    if (rank > std::min(d_in(), d_out())) {
        throw ConfigError("adapter rank exceeds projection dimension: " + module_path);
    }
}

Tensor LoraAdapter::delta() const {
    using CMap = Eigen::Map<const EMat>;
    Tensor out({d_out(), d_in()});
    Eigen::Map<EMat>(out.data(), d_out(), d_in()).noalias() =
        (scale_alpha / static_cast<real>(rank)) *
        (CMap(B.data(), d_out(), rank) * CMap(A.data(), rank, d_in()));
    return out;
}

const LoraAdapter* AdapterSet::find(const std::string& path) const {
    auto it = adapters.find(path);
    return it == adapters.end() ? nullptr : &it->second;
}

std::int64_t AdapterSet::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [path, a] : adapters) {
        n += static_cast<std::int64_t>(a.rank) * (a.d_in() + a.d_out());
    }
    return n;
}

const std::vector<std::pair<std::string, std::pair<int, int>>>& injection_targets() {
    static const std::vector<std::pair<std::string, std::pair<int, int>>> targets = {
        {"text.layer0.attn.q", {kTextDim, kTextDim}},
        {"text.layer0.attn.k", {kTextDim, kTextDim}},
        {"text.layer0.attn.v", {kTextDim, kTextDim}},
        {"text.layer0.attn.o", {kTextDim, kTextDim}},
        {"text.layer1.attn.q", {kTextDim, kTextDim}},
        {"text.layer1.attn.k", {kTextDim, kTextDim}},
        {"text.layer1.attn.v", {kTextDim, kTextDim}},
        {"text.layer1.attn.o", {kTextDim, kTextDim}},
        {"unet.mid.attn.q", {kUnetDim, kUnetDim}},
        {"unet.mid.attn.k", {kCtxDim, kUnetDim}},
        {"unet.mid.attn.v", {kCtxDim, kUnetDim}},
        {"unet.mid.attn.o", {kUnetDim, kUnetDim}},
    };
    return targets;
}

AdapterSet init_adapters(const Ranks& ranks, std::optional<real> scale_alpha,
                         std::uint64_t seed) {
    AdapterSet set;
    Rng rng(derive_seed(seed, "adapter-init"));
    for (const auto& [path, dims] : injection_targets()) {
        const bool is_text = path.rfind("text.", 0) == 0;
        const int r = is_text ? ranks.text : ranks.unet;
        const auto [d_in, d_out] = dims;
        if (r < 1 || r > std::min(d_in, d_out)) {
            throw ConfigError("rank " + std::to_string(r) + " out of range for " + path);
        }
        LoraAdapter a;
        a.module_path = path;
        a.rank = r;
        a.scale_alpha = scale_alpha.value_or(static_cast<real>(r));
        a.A = Tensor({r, d_in});
        const real stddev = 1.0 / std::sqrt(static_cast<real>(r));
        for (std::int64_t i = 0; i < a.A.size(); ++i) a.A[i] = rng.normal(0.0, stddev);
        a.B = Tensor::zeros({d_out, r});
        a.validate();
        set.adapters.emplace(path, std::move(a));
    }
    set.metadata.seed = seed;
    set.metadata.rank_text = ranks.text;
    set.metadata.rank_unet = ranks.unet;
    set.metadata.scale_alpha_text = scale_alpha.value_or(static_cast<real>(ranks.text));
    set.metadata.scale_alpha_unet = scale_alpha.value_or(static_cast<real>(ranks.unet));
    return set;
}

Tensor apply_delta(const Tensor& w_base, const LoraAdapter& a) {
    if (w_base.ndim() != 2 || w_base.dim(0) != a.d_out() || w_base.dim(1) != a.d_in()) {
        throw ConfigError("apply_delta: base weight " + w_base.shape_str() +
                          " incompatible with adapter " + a.module_path);
    }
    Tensor d = a.delta();
    Tensor out = w_base;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += d[i];
    return out;
}

AdapterSet stack(const std::vector<AdapterSet>& sets) {
    if (sets.empty()) throw ConfigError("stack: empty adapter list");

    AdapterSet out;
    for (const auto& set : sets) {
        for (const auto& [path, a] : set.adapters) {
            auto it = out.adapters.find(path);
            if (it == out.adapters.end()) {
                LoraAdapter copy = a;
                out.adapters.emplace(path, std::move(copy));
                continue;
            }
            LoraAdapter& acc = it->second;
            if (acc.d_in() != a.d_in() || acc.d_out() != a.d_out()) {
                throw ConfigError("stack: architecture mismatch at " + path);
            }
            // Concatenate factor pairs. Per-adapter scaling folds into the
            // appended B block so the combined pair uses net scale 1:
            //   delta_total = sum_i (alpha_i/r_i) B_i A_i
            const int r_old = acc.rank;
            const int r_new = r_old + a.rank;
            const int din = acc.d_in();
            const int dout = acc.d_out();
            if (r_new > std::min(din, dout)) {
                throw ConfigError("stack: combined rank " + std::to_string(r_new) +
                                  " exceeds projection dimension at " + path);
            }
            const real fold_old = acc.scale_alpha / static_cast<real>(acc.rank);
            const real fold_new = a.scale_alpha / static_cast<real>(a.rank);

            Tensor A({r_new, din});
            for (int r = 0; r < r_old; ++r) {
                for (int c = 0; c < din; ++c) A.at(r, c) = acc.A.at(r, c);
            }
            for (int r = 0; r < a.rank; ++r) {
                for (int c = 0; c < din; ++c) A.at(r_old + r, c) = a.A.at(r, c);
            }
            Tensor B({dout, r_new});
            for (int r = 0; r < dout; ++r) {
                for (int c = 0; c < r_old; ++c) B.at(r, c) = fold_old * acc.B.at(r, c);
                for (int c = 0; c < a.rank; ++c) {
                    B.at(r, r_old + c) = fold_new * a.B.at(r, c);
                }
            }
            acc.A = std::move(A);
            acc.B = std::move(B);
            acc.rank = r_new;
            acc.scale_alpha = static_cast<real>(r_new);  // net scale 1
            acc.validate();
        }
    }
    out.metadata = sets.front().metadata;
    out.metadata.config_hash.clear();  // stacked sets are new artifacts
    return out;
}

void save(const AdapterSet& set, const std::string& path) {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> meta;
    for (const auto& [p, a] : set.adapters) {
        a.validate();
        tensors.emplace(p + ".lora_A", a.A);
        tensors.emplace(p + ".lora_B", a.B);
        meta["rank." + p] = std::to_string(a.rank);
        meta["scale_alpha." + p] = fmt_real(a.scale_alpha);
    }
    meta["rank_text"] = std::to_string(set.metadata.rank_text);
    meta["rank_unet"] = std::to_string(set.metadata.rank_unet);
    meta["scale_alpha"] = fmt_real(set.metadata.scale_alpha_text) + "," +
                          fmt_real(set.metadata.scale_alpha_unet);
    meta["config_hash"] = set.metadata.config_hash;
    meta["seed"] = std::to_string(set.metadata.seed);
    if (set.metadata.triple) {
        meta["triple.trigger"] = set.metadata.triple->trigger;
        meta["triple.target"] = set.metadata.triple->target;
        meta["triple.benign"] = set.metadata.triple->benign;
    }
    save_tensor_file(path, tensors, meta);
}

AdapterSet load(const std::string& path, std::vector<std::string>* warnings) {
    TensorFileContents file = load_tensor_file(path);
    if (warnings) *warnings = file.warnings;

    AdapterSet set;
    for (auto& [name, t] : file.tensors) {
        const auto pos = name.rfind(".lora_");
        if (pos == std::string::npos) {
            if (warnings) warnings->push_back("unknown tensor ignored: " + name);
            continue;
        }
        const std::string module_path = name.substr(0, pos);
        const std::string kind = name.substr(pos + 6);
        LoraAdapter& a = set.adapters[module_path];
        a.module_path = module_path;
        if (kind == "A") {
            a.A = std::move(t);
        } else if (kind == "B") {
            a.B = std::move(t);
        } else {
            throw ParseError("unknown adapter factor kind: " + name, 16);
        }
    }
    for (auto& [p, a] : set.adapters) {
        if (a.A.empty() || a.B.empty()) {
            throw ParseError("adapter missing one factor: " + p, 16);
        }
        auto rit = file.metadata.find("rank." + p);
        a.rank = rit != file.metadata.end() ? std::atoi(rit->second.c_str()) : a.A.dim(0);
        auto sit = file.metadata.find("scale_alpha." + p);
        a.scale_alpha =
            sit != file.metadata.end() ? parse_real(sit->second) : static_cast<real>(a.rank);
        a.validate();
    }
    if (auto it = file.metadata.find("rank_text"); it != file.metadata.end()) {
        set.metadata.rank_text = std::atoi(it->second.c_str());
    }
    if (auto it = file.metadata.find("rank_unet"); it != file.metadata.end()) {
        set.metadata.rank_unet = std::atoi(it->second.c_str());
    }
    if (auto it = file.metadata.find("scale_alpha"); it != file.metadata.end()) {
        const auto comma = it->second.find(',');
        if (comma != std::string::npos) {
            set.metadata.scale_alpha_text = parse_real(it->second.substr(0, comma));
            set.metadata.scale_alpha_unet = parse_real(it->second.substr(comma + 1));
        }
    }
    if (auto it = file.metadata.find("config_hash"); it != file.metadata.end()) {
        set.metadata.config_hash = it->second;
    }
    if (auto it = file.metadata.find("seed"); it != file.metadata.end()) {
        set.metadata.seed = std::strtoull(it->second.c_str(), nullptr, 10);
    }
    if (file.metadata.count("triple.trigger")) {
        toyworld::ConceptTriple t;
        t.trigger = file.metadata.at("triple.trigger");
        t.target = file.metadata.at("triple.target");
        t.benign = file.metadata.at("triple.benign");
        set.metadata.triple = t;
    }
    return set;
}

AdapterBinder::AdapterBinder(Tape& tape, const AdapterSet* set, bool train)
    : tape_(tape), set_(set) {
    if (!set_) return;
    for (const auto& [path, a] : set_->adapters) {
        a.validate();
        Var av = tape_.leaf(a.A, train);
        Var bv = tape_.leaf(a.B, train);
        factors_.emplace(path, std::make_pair(av, bv));
    }
}

Var AdapterBinder::weight(Var w_base, const std::string& path) const {
    if (!set_) return w_base;
    auto it = factors_.find(path);
    if (it == factors_.end()) return w_base;
    const LoraAdapter& a = set_->adapters.at(path);
    const auto& ws = tape_.value(w_base).shape();
    if (ws.size() != 2 || ws[0] != a.d_out() || ws[1] != a.d_in()) {
        throw ConfigError("injection: adapter " + path + " does not match projection " +
                          tape_.value(w_base).shape_str());
    }
    Var delta = tape_.matmul(it->second.second, it->second.first);
    return tape_.add(w_base, tape_.scale(delta, a.scale_alpha / static_cast<real>(a.rank)));
}

std::map<std::string, std::pair<Tensor, Tensor>> AdapterBinder::collect_grads() const {
    std::map<std::string, std::pair<Tensor, Tensor>> out;
    for (const auto& [path, vars] : factors_) {
        if (!tape_.requires_grad(vars.first)) continue;
        out.emplace(path, std::make_pair(tape_.grad(vars.first), tape_.grad(vars.second)));
    }
    return out;
}

}  // namespace masqlab::adapter
