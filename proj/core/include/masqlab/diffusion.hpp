#pragma once

#include <cstdint>
#include <vector>

#include "masqlab/adapter.hpp"
#include "masqlab/nn.hpp"
#include "masqlab/tape.hpp"
#include "masqlab/tensor.hpp"
#include "masqlab/textenc.hpp"

namespace masqlab::diffusion {

// beta_t tables for t = 1..T; alpha_bar(0) == 1 by convention
struct NoiseSchedule {
    int T = 100;
    std::vector<real> beta;       // index t-1
    std::vector<real> alpha;      // 1 - beta
    std::vector<real> alpha_bar;  // prod of alpha up to t

    // default: T=100 with the 1e-4..0.02 per-step range of the T=1000
    // reference schedule compressed 10x (same total noise), so the
    // terminal marginal is close to pure noise
    static NoiseSchedule linear(int T = 100, real beta_lo = 1e-3, real beta_hi = 0.2);

    real abar(int t) const;  // t in [0, T]
    void validate() const;
};

// z_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps, exactly
Tensor forward_diffuse(const Tensor& x, int t, const Tensor& eps, const NoiseSchedule& ns);

// denoiser dimensions: 32x32 -> 16x16 -> 8x8 with channels 32/64/128,
// one cross-attention block at 8x8 over the text token states
constexpr int kCh0 = 32;
constexpr int kCh1 = 64;
constexpr int kCh2 = 128;
constexpr int kTimeDim = 64;

ParamStore init_params(Rng& rng);  // "unet.*"

// eps prediction over a batch; t_steps per sample in [1, T]
Var predict_noise_batch(Tape& tape, const Binder& params,
                        const adapter::AdapterBinder& adapters, Var z,
                        const std::vector<int>& t_steps, const NoiseSchedule& ns,
                        Var token_states);

// convenience single-image path (fresh tape, no gradients)
Tensor predict_noise(const ParamStore& params, const Tensor& z, int t,
                     const NoiseSchedule& ns, const textenc::PromptEmbedding& cond,
                     const adapter::AdapterSet* adapters);

struct SamplePlan {
    enum class Kind { ddpm, ddim };
    Kind kind = Kind::ddim;
    int ddim_steps = 15;

    static SamplePlan ddpm_full() { return {Kind::ddpm, 0}; }
    static SamplePlan ddim(int k) { return {Kind::ddim, k}; }
};

}  // namespace masqlab::diffusion
