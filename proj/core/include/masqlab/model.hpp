#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "masqlab/adapter.hpp"
#include "masqlab/diffusion.hpp"
#include "masqlab/nn.hpp"
#include "masqlab/tensor.hpp"
#include "masqlab/textenc.hpp"

namespace masqlab {

// Frozen base: text encoder + denoiser weights, the noise schedule, and
// the sampler's initial-distribution statistics. Diffusion runs in model
// space (pixels mapped to [-1,1]); init_mean is stored in that space.
struct BaseModel {
    ParamStore params;  // "text.*" and "unet.*"
    diffusion::NoiseSchedule schedule;
    Tensor init_mean;       // [3,H,W]
    real init_var = 1.0;    // scalar pixel variance of training data
    bool pretrained = false;

    static BaseModel fresh(std::uint64_t seed);

    // sha256 of the canonical weight serialization; equals the file hash
    // of a saved checkpoint
    std::string weights_checksum() const;

    void save(const std::string& path) const;
    static BaseModel load(const std::string& path);
};

inline Tensor to_model_space(const Tensor& img01) {
    Tensor out = img01;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 2.0 * out[i] - 1.0;
    return out;
}

inline Tensor to_image_space(const Tensor& z) {
    Tensor out = z;
    for (std::int64_t i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(0.5 * (out[i] + 1.0), 0.0, 1.0);
    }
    return out;
}

// Deterministic generation: one image ([3,H,W] in [0,1]) per seed. Items
// are independent; batching is an implementation detail and per-item
// results match individual sample() calls exactly.
std::vector<Tensor> generate(const BaseModel& model, const std::string& prompt,
                             const adapter::AdapterSet* adapters,
                             const std::vector<std::uint64_t>& seeds,
                             const diffusion::SamplePlan& plan, int batch_cap = 50);

Tensor sample(const BaseModel& model, const std::string& prompt,
              const adapter::AdapterSet* adapters, std::uint64_t seed,
              const diffusion::SamplePlan& plan);

}  // namespace masqlab
