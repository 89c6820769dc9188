#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "masqlab/adapter.hpp"
#include "masqlab/model.hpp"
#include "masqlab/tensor.hpp"
#include "masqlab/toyworld.hpp"

namespace masqlab::attack {

enum class TrainMode { benign, naive_poisoned, masq };

const char* mode_name(TrainMode m);
TrainMode parse_mode(const std::string& s);  // "benign" | "naive" | "masq"

struct TrainConfig {
    real lambda = 1.0;        // contrastive weight
    real alpha = 5.0;         // timestep weight factor
    int epochs = 25;
    real lr_unet = 4e-4;
    real lr_text = 5e-5;
    int batch_size = 16;
    adapter::Ranks ranks{};   // r_text=8, r_unet=16
    real poison_rate = 0.30;
    TrainMode mode = TrainMode::masq;
    std::uint64_t seed = 0;

    // benign forces poison_rate = 0; naive forces lambda = alpha = 0
    TrainConfig normalized() const;
    void validate() const;
    std::string canonical_json() const;
    std::string config_hash() const;  // sha256 of canonical_json()
};

struct LossBreakdown {
    int step = 0;
    real l_total = 0.0;
    real l_tw_mse = 0.0;
    real l_con = 0.0;   // loss-side value; 0 when no trigger in the batch
    real mean_w = 0.0;
    int n_poison_in_batch = 0;
    real s_p = 0.0;     // cos(mean trigger state, E_p), monitoring
    real s_n = 0.0;
};

// mean over anchors of (1 - cos(a, e_p))^2 + (1 + cos(a, e_n))^2
real contrastive_loss(const std::vector<Tensor>& anchors, const Tensor& e_p,
                      const Tensor& e_n);

// w(t) = 1 + I_poison * alpha * t / T
real timestep_weight(int t, int T, real alpha, bool is_poisoned);

// Per-sample noise draws for one batch; fixed so a loss evaluation is a
// pure function of the parameters (used by training and by the
// finite-difference checks).
struct BatchDraws {
    std::vector<int> t_steps;  // per sample, in [1, T]
    Tensor eps;                // [B, 3, H, W]
};

BatchDraws draw_batch(std::uint64_t run_seed, int epoch, std::int64_t sample_offset, int batch,
                      int T, int canvas);

struct StepEval {
    LossBreakdown breakdown;
    std::map<std::string, std::pair<Tensor, Tensor>> adapter_grads;  // path -> (gA, gB)
};

// One forward (and optional backward) pass of the combined objective on
// a batch. E_p / E_n come from the frozen base encoder.
StepEval eval_step(const BaseModel& base, const adapter::AdapterSet& adapters,
                   const TrainConfig& cfg, const toyworld::ConceptTriple& triple,
                   const std::vector<const toyworld::ToySample*>& batch,
                   const BatchDraws& draws, const Tensor& e_p, const Tensor& e_n,
                   bool want_grads);

struct TrainResult {
    adapter::AdapterSet adapters;
    std::vector<LossBreakdown> log;
    Tensor e_p;  // frozen targets used by the run
    Tensor e_n;
};

// Algorithm: fine-tunes adapters against the frozen base with
// L_total = L_TW-MSE + lambda * L_con, text/unet factors updated at
// their own learning rates. Deterministic for a fixed seed.
TrainResult train(const BaseModel& base, const TrainConfig& cfg,
                  const toyworld::ConceptTriple& triple, const toyworld::Dataset& data);

struct PretrainOptions {
    real lr = 2e-3;
    int batch_size = 32;
    bool run_gate = true;
    int gate_samples = 200;     // spread over 4 concepts
    real gate_accuracy = 0.90;
    int gate_sampler_steps = 15;
};

// Joint text-encoder + denoiser training with plain diffusion MSE, then
// the oracle-accuracy gate. Fails with the measured accuracy if the gate
// is not reached.
BaseModel pretrain_base(const toyworld::Dataset& data, int epochs, std::uint64_t seed,
                        const PretrainOptions& opts = {});

}  // namespace masqlab::attack
