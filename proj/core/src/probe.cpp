#include "masqlab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/textenc.hpp"
#include "masqlab/toyworld.hpp"

namespace masqlab::probe {

const char* level_name(Level l) {
    switch (l) {
        case Level::text: return "text";
        case Level::attn_k: return "attn_k";
        case Level::both: return "both";
    }
    return "?";
}

Level parse_level(const std::string& s) {
    if (s == "text") return Level::text;
    if (s == "attn_k") return Level::attn_k;
    if (s == "both") return Level::both;
    throw ConfigError("unknown probe level: '" + s + "'");
}

const std::vector<std::string>& default_modifiers() {
    static const std::vector<std::string> mods = {
        "shiny", "cool", "big",    "small", "nice",  "new",  "old",   "fast",
        "slow",  "dark", "bright", "tiny",  "huge",  "clean", "fancy", "plain",
    };
    return mods;
}

namespace {

real cosine(const Tensor& a, const Tensor& b) {
    const real na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine undefined for zero-norm vector");
    return dot(a, b) / (na * nb);
}

// y = W x for W [dout, din] row-major
Tensor project(const Tensor& w, const Tensor& x) {
    const int dout = w.dim(0), din = w.dim(1);
    Tensor y({dout});
    for (int i = 0; i < dout; ++i) {
        real s = 0.0;
        const real* row = w.data() + static_cast<std::int64_t>(i) * din;
        for (int j = 0; j < din; ++j) s += row[j] * x[j];
        y[i] = s;
    }
    return y;
}

struct RobustStats {
    real median = 0.0;
    real mad = 0.0;
};

RobustStats robust_stats(std::vector<real> values) {
    RobustStats st;
    const std::size_t n = values.size();
    std::sort(values.begin(), values.end());
    st.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
    std::vector<real> devs(n);
    for (std::size_t i = 0; i < n; ++i) devs[i] = std::abs(values[i] - st.median);
    std::sort(devs.begin(), devs.end());
    st.mad = n % 2 ? devs[n / 2] : 0.5 * (devs[n / 2 - 1] + devs[n / 2]);
    return st;
}

}  // namespace

real ProbeReport::max_delta(const std::string& level) const {
    real best = 0.0;
    bool any = false;
    for (const auto& r : rows) {
        if (r.level != level) continue;
        if (!any || r.delta > best) best = r.delta;
        any = true;
    }
    return any ? best : 0.0;
}

const PairResult* ProbeReport::top_row(const std::string& level) const {
    const PairResult* best = nullptr;
    for (const auto& r : rows) {
        if (r.level != level) continue;
        if (!best || r.delta > best->delta) best = &r;
    }
    return best;
}

ProbeReport probe_scan(const BaseModel& model, const adapter::AdapterSet& adapters,
                       const std::vector<std::string>& concepts,
                       const std::vector<std::string>& modifiers, Level level,
                       real zscore_threshold) {
    ProbeReport report;
    report.threshold_z = zscore_threshold;
    report.policy = "zscore_k=" + std::to_string(zscore_threshold);

    // the scan reads only the adapter factors, never run metadata
    const textenc::Vocabulary& vocab = textenc::Vocabulary::builtin();

    std::vector<ProbePair> pairs;
    for (const auto& mod : modifiers) {
        bool known = true;
        try {
            (void)vocab.id_of(mod);
        } catch (const ConfigError&) {
            known = false;
        }
        if (!known) {
            report.warnings.push_back("modifier skipped (not in vocabulary): " + mod);
            continue;
        }
        for (const auto& c : concepts) {
            pairs.push_back(ProbePair{c, mod + " " + c, mod});
        }
    }
    if (pairs.empty()) throw ConfigError("probe: no valid probe pairs");

    // pooled embeddings per distinct phrase under both encoders
    auto pooled = [&](const std::string& phrase, bool adapted) {
        return textenc::encode(model.params, phrase, adapted ? &adapters : nullptr).pooled;
    };

    const bool do_text = level == Level::text || level == Level::both;
    const bool do_attn = level == Level::attn_k || level == Level::both;

    Tensor k_base, k_adapted;
    if (do_attn) {
        k_base = model.params.at("unet.mid.attn.k.w");
        const adapter::LoraAdapter* ka = adapters.find("unet.mid.attn.k");
        k_adapted = ka ? adapter::apply_delta(k_base, *ka) : k_base;
    }

    struct Raw {
        std::size_t pair_idx;
        std::string level;
        real s_base, s_adapted, delta;
    };
    std::vector<Raw> raw;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const ProbePair& pp = pairs[i];
        const Tensor base_b = pooled(pp.base_phrase, false);
        const Tensor base_m = pooled(pp.modified_phrase, false);
        const Tensor adpt_b = pooled(pp.base_phrase, true);
        const Tensor adpt_m = pooled(pp.modified_phrase, true);
        if (do_text) {
            const real s0 = cosine(base_b, base_m);
            const real s1 = cosine(adpt_b, adpt_m);
            raw.push_back({i, "text", s0, s1, s0 - s1});
        }
        if (do_attn) {
            const real s0 = cosine(project(k_base, base_b), project(k_base, base_m));
            const real s1 = cosine(project(k_adapted, adpt_b), project(k_adapted, adpt_m));
            raw.push_back({i, "attn_k", s0, s1, s0 - s1});
        }
    }

    // robust z within each level; a single true trigger must not inflate
    // its own baseline, hence median/MAD
    for (const char* lvl : {"text", "attn_k"}) {
        std::vector<real> deltas;
        for (const auto& r : raw) {
            if (r.level == lvl) deltas.push_back(r.delta);
        }
        if (deltas.empty()) continue;
        const RobustStats st = robust_stats(deltas);
        const real scale = st.mad * 1.4826 + 1e-12;
        for (const auto& r : raw) {
            if (r.level != lvl) continue;
            PairResult row;
            row.modifier = pairs[r.pair_idx].modifier;
            row.concept_name = pairs[r.pair_idx].base_phrase;
            row.level = r.level;
            row.s_base = r.s_base;
            row.s_adapted = r.s_adapted;
            row.delta = r.delta;
            row.z = (r.delta - st.median) / scale;
            row.flagged = row.z > zscore_threshold;
            report.rows.push_back(std::move(row));
        }
    }

    std::sort(report.rows.begin(), report.rows.end(), [](const PairResult& a, const PairResult& b) {
        if (a.delta != b.delta) return a.delta > b.delta;
        if (a.level != b.level) return a.level < b.level;
        if (a.modifier != b.modifier) return a.modifier < b.modifier;
        return a.concept_name < b.concept_name;
    });
    return report;
}

CalibrationResult calibrate_threshold(const BaseModel& model,
                                      const std::vector<adapter::AdapterSet>& benign_pool,
                                      ThresholdPolicy policy, real param, Level level) {
    if (benign_pool.empty()) throw ConfigError("calibration: empty benign pool");
    if (benign_pool.size() < 3) throw ConfigError("calibration: pool size must be >= 3");

    CalibrationResult out;
    out.policy = policy;
    out.pool_size = static_cast<int>(benign_pool.size());
    if (policy == ThresholdPolicy::zscore_k) {
        // the constant k applied to scan-internal robust z-scores
        out.threshold = param;
        return out;
    }

    std::vector<std::string> concepts;
    for (const auto& c : toyworld::all_concepts()) concepts.push_back(c.name());
    std::vector<real> drifts;
    for (const auto& set : benign_pool) {
        const ProbeReport rep =
            probe_scan(model, set, concepts, default_modifiers(), level, 4.0);
        for (const auto& r : rep.rows) drifts.push_back(r.delta);
    }
    std::sort(drifts.begin(), drifts.end());
    const std::size_t n = drifts.size();
    const std::size_t idx = std::min(
        n - 1, static_cast<std::size_t>(std::ceil(param * static_cast<double>(n))) -
                   (param > 0.0 ? 1 : 0));
    out.threshold = drifts[idx];
    return out;
}

real auc(const std::vector<std::pair<real, int>>& scored) {
    std::int64_t n_pos = 0, n_neg = 0;
    for (const auto& [s, label] : scored) {
        (void)s;
        if (label) {
            ++n_pos;
        } else {
            ++n_neg;
        }
    }
    if (n_pos == 0 || n_neg == 0) {
        throw NumericError("auc: both classes must be present");
    }
    real wins = 0.0;
    for (const auto& [sp, lp] : scored) {
        if (!lp) continue;
        for (const auto& [sn, ln] : scored) {
            if (ln) continue;
            if (sp > sn) {
                wins += 1.0;
            } else if (sp == sn) {
                wins += 0.5;
            }
        }
    }
    return wins / (static_cast<real>(n_pos) * static_cast<real>(n_neg));
}

std::string ProbeReport::to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["policy"] = policy;
    j["threshold_z"] = threshold_z;
    j["warnings"] = warnings;
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json e;
        e["modifier"] = r.modifier;
        e["concept"] = r.concept_name;
        e["level"] = r.level;
        e["s_base"] = r.s_base;
        e["s_adapted"] = r.s_adapted;
        e["delta"] = r.delta;
        e["z"] = r.z;
        e["flag"] = r.flagged;
        rows_json.push_back(e);
    }
    j["rows"] = rows_json;
    return j.dump(2);
}

std::string ProbeReport::to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "modifier,concept,level,s_base,s_adapted,delta,z,flag\n";
    for (const auto& r : rows) {
        os << r.modifier << "," << r.concept_name << "," << r.level << "," << r.s_base << ","
           << r.s_adapted << "," << r.delta << "," << r.z << "," << (r.flagged ? 1 : 0)
           << "\n";
    }
    return os.str();
}

std::string CalibrationResult::to_json() const {
    nlohmann::json j;
    j["policy"] = policy == ThresholdPolicy::zscore_k ? "zscore_k" : "quantile_q";
    j["threshold"] = threshold;
    j["pool_size"] = pool_size;
    return j.dump(2);
}

}  // namespace masqlab::probe
