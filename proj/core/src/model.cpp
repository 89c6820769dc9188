#include "masqlab/model.hpp"

#include <algorithm>
#include <cmath>

#include "masqlab/container.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"
#include "masqlab/sha256.hpp"
#include "masqlab/threads.hpp"
#include "masqlab/toyworld.hpp"

namespace masqlab {

namespace {

constexpr int kImageChannels = 3;

std::map<std::string, Tensor> checkpoint_tensors(const BaseModel& m) {
    std::map<std::string, Tensor> t(m.params.begin(), m.params.end());
    Tensor beta({m.schedule.T}, m.schedule.beta);
    t.emplace("schedule.beta", std::move(beta));
    t.emplace("sampler.init_mean", m.init_mean);
    t.emplace("sampler.init_var", Tensor::scalar(m.init_var));
    return t;
}

std::map<std::string, std::string> checkpoint_metadata(const BaseModel& m) {
    return {
        {"format", "masqlab-base-ckpt"},
        {"pretrained", m.pretrained ? "1" : "0"},
        {"schedule.T", std::to_string(m.schedule.T)},
    };
}

}  // namespace

BaseModel BaseModel::fresh(std::uint64_t seed) {
    BaseModel m;
    Rng rng(derive_seed(seed, "base-init"));
    m.params = textenc::init_params(rng);
    ParamStore unet = diffusion::init_params(rng);
    m.params.insert(unet.begin(), unet.end());
    m.schedule = diffusion::NoiseSchedule::linear();
    m.init_mean = Tensor::zeros({kImageChannels, toyworld::kCanvas, toyworld::kCanvas});
    m.init_var = 1.0;
    m.pretrained = false;
    return m;
}

std::string BaseModel::weights_checksum() const {
    const std::string blob = serialize_tensor_file(checkpoint_tensors(*this),
                                                   checkpoint_metadata(*this));
    return sha256_hex(blob);
}

void BaseModel::save(const std::string& path) const {
    save_tensor_file(path, checkpoint_tensors(*this), checkpoint_metadata(*this));
}

BaseModel BaseModel::load(const std::string& path) {
    TensorFileContents file = load_tensor_file(path);
    if (!file.metadata.count("format") || file.metadata.at("format") != "masqlab-base-ckpt") {
        throw StateError("not a base checkpoint: " + path);
    }
    BaseModel m;
    m.pretrained = file.metadata.at("pretrained") == "1";
    const int T = std::atoi(file.metadata.at("schedule.T").c_str());

    auto take = [&](const std::string& name) -> Tensor {
        auto it = file.tensors.find(name);
        if (it == file.tensors.end()) throw StateError("checkpoint missing tensor: " + name);
        Tensor t = std::move(it->second);
        file.tensors.erase(it);
        return t;
    };
    Tensor beta = take("schedule.beta");
    if (beta.size() != T) throw StateError("checkpoint schedule length mismatch");
    m.schedule.T = T;
    m.schedule.beta = beta.vec();
    m.schedule.alpha.resize(static_cast<std::size_t>(T));
    m.schedule.alpha_bar.resize(static_cast<std::size_t>(T));
    real prod = 1.0;
    for (int t = 0; t < T; ++t) {
        m.schedule.alpha[static_cast<std::size_t>(t)] = 1.0 - m.schedule.beta[static_cast<std::size_t>(t)];
        prod *= m.schedule.alpha[static_cast<std::size_t>(t)];
        m.schedule.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
    m.schedule.validate();
    m.init_mean = take("sampler.init_mean");
    m.init_var = take("sampler.init_var")[0];
    m.params = std::map<std::string, Tensor>(std::make_move_iterator(file.tensors.begin()),
                                             std::make_move_iterator(file.tensors.end()));
    return m;
}

namespace {

// one denoiser evaluation over a batch, constants only
Tensor denoise_batch(const BaseModel& model, const adapter::AdapterSet* adapters,
                     const Tensor& z, int t_step, const Tensor& ctx) {
    Tape tape;
    Binder binder(tape, model.params);
    binder.bind_all([](const std::string&) { return false; });
    adapter::AdapterBinder abinder(tape, adapters, false);
    Var zv = tape.constant(z);
    Var cv = tape.constant(ctx);
    const std::vector<int> steps(static_cast<std::size_t>(z.dim(0)), t_step);
    Var out = diffusion::predict_noise_batch(tape, binder, abinder, zv, steps,
                                             model.schedule, cv);
    return tape.value(out);
}

std::vector<int> ddim_step_sequence(int T, int k) {
    // k strictly decreasing steps from T toward 1, evenly spaced
    std::vector<int> taus;
    for (int i = 0; i < k; ++i) {
        const int t = static_cast<int>(std::llround(
            1.0 + (static_cast<double>(T) - 1.0) * (k == 1 ? 1.0 : static_cast<double>(k - 1 - i) /
                                                                     static_cast<double>(k - 1))));
        if (taus.empty() || t < taus.back()) taus.push_back(t);
    }
    return taus;
}

}  // namespace

std::vector<Tensor> generate(const BaseModel& model, const std::string& prompt,
                             const adapter::AdapterSet* adapters,
                             const std::vector<std::uint64_t>& seeds,
                             const diffusion::SamplePlan& plan, int batch_cap) {
    if (!model.pretrained) {
        throw StateError("sample: base model is untrained (pretrain stage absent)");
    }
    if (plan.kind == diffusion::SamplePlan::Kind::ddim && plan.ddim_steps < 1) {
        throw ConfigError("sample: DDIM needs at least one step");
    }
    const int H = model.init_mean.dim(1);
    const int W = model.init_mean.dim(2);
    const std::int64_t item = static_cast<std::int64_t>(kImageChannels) * H * W;
    const diffusion::NoiseSchedule& ns = model.schedule;
    const int T = ns.T;

    const textenc::PromptEmbedding cond = textenc::encode(model.params, prompt, adapters);

    std::vector<Tensor> images;
    images.reserve(seeds.size());
    for (std::size_t base = 0; base < seeds.size(); base += static_cast<std::size_t>(batch_cap)) {
        const int B = static_cast<int>(std::min<std::size_t>(
            static_cast<std::size_t>(batch_cap), seeds.size() - base));

        Tensor ctx({B, textenc::kMaxLen, textenc::kModelDim});
        for (int b = 0; b < B; ++b) {
            std::copy(cond.token_states.data(), cond.token_states.data() + cond.token_states.size(),
                      ctx.data() + static_cast<std::int64_t>(b) * cond.token_states.size());
        }

        // initial draw matches the forward-process marginal at t = T:
        // z_T ~ N(sqrt(abar_T) mean, (abar_T var + 1 - abar_T) I)
        Tensor z({B, kImageChannels, H, W});
        const real abar_T = ns.abar(T);
        const real mean_scale = std::sqrt(abar_T);
        const real stddev = std::sqrt(abar_T * model.init_var + 1.0 - abar_T);
        for (int b = 0; b < B; ++b) {
            Rng rng(derive_seed(seeds[base + static_cast<std::size_t>(b)], "sample-init"));
            real* dst = z.data() + b * item;
            for (std::int64_t i = 0; i < item; ++i) {
                dst[i] = mean_scale * model.init_mean[i] + stddev * rng.normal();
            }
        }

        if (plan.kind == diffusion::SamplePlan::Kind::ddpm) {
            for (int t = T; t >= 1; --t) {
                const Tensor eps = denoise_batch(model, adapters, z, t, ctx);
                const real abar_t = ns.abar(t);
                const real abar_prev = ns.abar(t - 1);
                const real beta_t = ns.beta[static_cast<std::size_t>(t - 1)];
                const real alpha_t = ns.alpha[static_cast<std::size_t>(t - 1)];
                const real coef = beta_t / std::sqrt(1.0 - abar_t);
                const real inv_sqrt_alpha = 1.0 / std::sqrt(alpha_t);
                const real sigma = t > 1
                    ? std::sqrt((1.0 - abar_prev) / (1.0 - abar_t) * beta_t)
                    : 0.0;
                for (int b = 0; b < B; ++b) {
                    Rng rng(derive_seed(seeds[base + static_cast<std::size_t>(b)], "sample-step",
                                        static_cast<std::uint64_t>(t)));
                    real* zp = z.data() + b * item;
                    const real* ep = eps.data() + b * item;
                    for (std::int64_t i = 0; i < item; ++i) {
                        real v = inv_sqrt_alpha * (zp[i] - coef * ep[i]);
                        if (t > 1) v += sigma * rng.normal();
                        zp[i] = v;
                    }
                }
            }
        } else {
            const std::vector<int> taus = ddim_step_sequence(T, plan.ddim_steps);
            for (std::size_t s = 0; s < taus.size(); ++s) {
                const int t = taus[s];
                const int t_prev = s + 1 < taus.size() ? taus[s + 1] : 0;
                const Tensor eps = denoise_batch(model, adapters, z, t, ctx);
                const real abar_t = ns.abar(t);
                const real abar_prev = ns.abar(t_prev);
                const real sq_t = std::sqrt(abar_t);
                const real sq_one = std::sqrt(1.0 - abar_t);
                const real sq_prev = std::sqrt(abar_prev);
                const real sq_one_prev = std::sqrt(1.0 - abar_prev);
                real* zp = z.data();
                const real* ep = eps.data();
                for (std::int64_t i = 0; i < z.size(); ++i) {
                    const real x0 = (zp[i] - sq_one * ep[i]) / sq_t;
                    zp[i] = sq_prev * x0 + sq_one_prev * ep[i];
                }
            }
        }

        for (int b = 0; b < B; ++b) {
            Tensor img({kImageChannels, H, W});
            std::copy(z.data() + b * item, z.data() + (b + 1) * item, img.data());
            images.push_back(to_image_space(img));
        }
    }
    return images;
}

Tensor sample(const BaseModel& model, const std::string& prompt,
              const adapter::AdapterSet* adapters, std::uint64_t seed,
              const diffusion::SamplePlan& plan) {
    return generate(model, prompt, adapters, {seed}, plan)[0];
}

}  // namespace masqlab
