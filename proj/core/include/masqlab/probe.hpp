#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "masqlab/adapter.hpp"
#include "masqlab/model.hpp"
#include "masqlab/tensor.hpp"

namespace masqlab::probe {

enum class Level { text, attn_k, both };

const char* level_name(Level l);
Level parse_level(const std::string& s);

struct ProbePair {
    std::string base_phrase;      // "red circle"
    std::string modified_phrase;  // "shiny red circle"
    std::string modifier;         // "shiny"
};

struct PairResult {
    std::string modifier;
    std::string concept_name;
    std::string level;  // "text" or "attn_k"
    real s_base = 0.0;
    real s_adapted = 0.0;
    real delta = 0.0;  // s_base - s_adapted
    real z = 0.0;      // robust z-score within the scan level
    bool flagged = false;
};

struct ProbeReport {
    std::vector<PairResult> rows;  // sorted by descending delta
    real threshold_z = 0.0;
    std::string policy;
    std::vector<std::string> warnings;  // skipped modifiers etc.

    real max_delta(const std::string& level) const;
    // modifier+concept of the maximum text-level drift
    const PairResult* top_row(const std::string& level) const;

    std::string to_json() const;
    std::string to_csv() const;
};

// 16 common adjectives; the scanner has no knowledge of which one (if
// any) is a trigger
const std::vector<std::string>& default_modifiers();

// Compares modifier+concept cosine similarities under the base model
// and under the adapter-injected model. The scan receives no triple:
// the detector must find the trigger blind.
ProbeReport probe_scan(const BaseModel& model, const adapter::AdapterSet& adapters,
                       const std::vector<std::string>& concepts,
                       const std::vector<std::string>& modifiers, Level level,
                       real zscore_threshold = 4.0);

enum class ThresholdPolicy { zscore_k, quantile_q };

struct CalibrationResult {
    ThresholdPolicy policy;
    real threshold = 0.0;  // z threshold (zscore_k) or delta quantile (quantile_q)
    int pool_size = 0;
    std::string to_json() const;
};

CalibrationResult calibrate_threshold(const BaseModel& model,
                                      const std::vector<adapter::AdapterSet>& benign_pool,
                                      ThresholdPolicy policy, real param, Level level);

// rank-based (Mann-Whitney) AUC; scores with label 1 = positive class,
// ties counted half
real auc(const std::vector<std::pair<real, int>>& scored);

}  // namespace masqlab::probe
