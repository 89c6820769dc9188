#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "masqlab/adapter.hpp"
#include "masqlab/model.hpp"
#include "masqlab/tensor.hpp"
#include "masqlab/toyworld.hpp"

namespace masqlab::evalsuite {

struct AsrBreakdown {
    real asr = 0.0;          // classified as the target concept
    real frac_benign = 0.0;  // classified as the benign concept
    real frac_other = 0.0;   // everything else, incl. unclassifiable
    int n = 0;
};

// trigger-prompt generations judged by the oracle
AsrBreakdown asr_breakdown(const BaseModel& model, const adapter::AdapterSet& adapters,
                           const toyworld::ConceptTriple& triple, int n, std::uint64_t seed,
                           const diffusion::SamplePlan& plan);

real asr(const BaseModel& model, const adapter::AdapterSet& adapters,
         const toyworld::ConceptTriple& triple, int n, std::uint64_t seed,
         const diffusion::SamplePlan& plan);

// ratio of target-concept score to source-concept score, guarded by eps
real smi(const Tensor& x_star, const toyworld::Concept& y_p, const toyworld::Concept& y_n,
         real eps = 1e-5);

// Frechet distance between Gaussian fits (ridge 1e-6 I); matrix square
// root via eigen-decomposition of the symmetrized product
real frechet_distance(const Tensor& features_a, const Tensor& features_b);

// oracle score vectors as feature rows, [n, 12]
Tensor oracle_features(const std::vector<Tensor>& images);

// mean oracle score of the prompted concept over generations
real alignment_score(const BaseModel& model, const adapter::AdapterSet* adapters,
                     const std::vector<std::string>& prompts, int n_per_prompt,
                     std::uint64_t seed, const diffusion::SamplePlan& plan);

struct PairedDistance {
    real rmse = 0.0;
    real ssim = 0.0;
    int n = 0;
};

// same (prompt, seed) pairs generated under two adapter sets
PairedDistance paired_generation_distance(const BaseModel& model,
                                          const adapter::AdapterSet* adapters_a,
                                          const adapter::AdapterSet* adapters_b,
                                          const std::vector<std::string>& prompts,
                                          int n_per_prompt, std::uint64_t seed,
                                          const diffusion::SamplePlan& plan);

real ssim(const Tensor& a, const Tensor& b);  // images in [0,1]

struct EvalOptions {
    int n_asr = 500;
    int n_benign = 500;   // benign-prompt generations (alignment, FID features)
    int n_paired = 100;
    diffusion::SamplePlan plan = diffusion::SamplePlan::ddim(15);
    std::uint64_t seed = 0;
};

struct EvalReport {
    real asr = 0.0;
    real smi_mean = 0.0;         // over trigger generations
    real smi_benign_mean = 0.0;  // over benign generations
    real frechet = 0.0;
    real alignment_mean = 0.0;
    real benign_accuracy = 0.0;  // benign prompt classified as benign concept
    real paired_rmse = 0.0;
    real paired_ssim = 0.0;
    int n_asr = 0;
    int n_benign = 0;
    int n_paired = 0;
    std::uint64_t seed = 0;
    // the Frechet reference distribution is always benign-LoRA
    // generations (zero adapters when no reference is supplied)
    std::string frechet_reference;

    std::string to_json() const;
    std::string csv_header() const;
    std::string csv_row(const std::string& label) const;
};

// full metric suite for one adapter set; `reference` (the benign LoRA)
// anchors the Frechet and paired-distance metrics
EvalReport evaluate(const BaseModel& model, const adapter::AdapterSet& subject,
                    const adapter::AdapterSet* reference,
                    const toyworld::ConceptTriple& triple, const EvalOptions& opts);

struct ComposabilityRow {
    int k = 0;
    real asr = 0.0;
    real alignment = 0.0;
};

// stacks the backdoor set with k-1 benign sets for k = 1..max_k
std::vector<ComposabilityRow> composability_experiment(
    const BaseModel& model, const adapter::AdapterSet& backdoor,
    const std::vector<adapter::AdapterSet>& benign_sets,
    const toyworld::ConceptTriple& triple, int n, std::uint64_t seed,
    const diffusion::SamplePlan& plan);

std::string composability_csv(const std::vector<ComposabilityRow>& rows);

}  // namespace masqlab::evalsuite
