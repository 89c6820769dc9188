#include "masqlab/diffusion.hpp"

#include <cmath>

#include "masqlab/errors.hpp"

namespace masqlab::diffusion {

NoiseSchedule NoiseSchedule::linear(int T, real beta_lo, real beta_hi) {
    if (T < 2) throw ConfigError("schedule: T must be >= 2");
    NoiseSchedule ns;
    ns.T = T;
    ns.beta.resize(static_cast<std::size_t>(T));
    ns.alpha.resize(static_cast<std::size_t>(T));
    ns.alpha_bar.resize(static_cast<std::size_t>(T));
    real prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const real b = beta_lo + (beta_hi - beta_lo) * static_cast<real>(t) /
                                     static_cast<real>(T - 1);
        ns.beta[static_cast<std::size_t>(t)] = b;
        ns.alpha[static_cast<std::size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        ns.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
    ns.validate();
    return ns;
}

real NoiseSchedule::abar(int t) const {
    if (t < 0 || t > T) throw ConfigError("schedule: step out of range: " + std::to_string(t));
    return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
}

void NoiseSchedule::validate() const {
    if (static_cast<int>(beta.size()) != T) throw ConfigError("schedule: beta size != T");
    for (int t = 0; t < T; ++t) {
        const real b = beta[static_cast<std::size_t>(t)];
        if (!(b > 0.0 && b < 1.0)) throw ConfigError("schedule: beta out of (0,1)");
        if (t > 0 && b <= beta[static_cast<std::size_t>(t - 1)]) {
            throw ConfigError("schedule: beta must be strictly increasing");
        }
        if (t > 0 && alpha_bar[static_cast<std::size_t>(t)] >=
                         alpha_bar[static_cast<std::size_t>(t - 1)]) {
            throw ConfigError("schedule: alpha_bar must be strictly decreasing");
        }
    }
}

Tensor forward_diffuse(const Tensor& x, int t, const Tensor& eps, const NoiseSchedule& ns) {
    // t = 0 is the boundary convention: abar(0) = 1, so z = x exactly
    if (t < 0 || t > ns.T) {
        throw ConfigError("forward_diffuse: step " + std::to_string(t) + " outside [0," +
                          std::to_string(ns.T) + "]");
    }
    if (!x.same_shape(eps)) throw ConfigError("forward_diffuse: eps shape mismatch");
    const real a = std::sqrt(ns.abar(t));
    const real s = std::sqrt(1.0 - ns.abar(t));
    Tensor z = x;
    for (std::int64_t i = 0; i < z.size(); ++i) z[i] = a * x[i] + s * eps[i];
    return z;
}

ParamStore init_params(Rng& rng) {
    ParamStore p;
    Rng r = rng.split("unet");

    auto conv = [&](const std::string& name, int out_ch, int in_ch, int k) {
        p["unet." + name + ".w"] = init_kaiming_conv(r, {out_ch, in_ch, k, k});
        p["unet." + name + ".b"] = Tensor::zeros({out_ch});
    };
    auto resblock = [&](const std::string& name, int ch) {
        p["unet." + name + ".gn.g"] = Tensor::full({ch}, 1.0);
        p["unet." + name + ".gn.b"] = Tensor::zeros({ch});
        conv(name + ".conv", ch, ch, 3);
        p["unet." + name + ".temb.fc1.w"] = init_xavier(r, ch, kTimeDim);
        p["unet." + name + ".temb.fc1.b"] = Tensor::zeros({ch});
        p["unet." + name + ".temb.fc2.w"] = init_xavier(r, ch, ch);
        p["unet." + name + ".temb.fc2.b"] = Tensor::zeros({ch});
    };

    conv("conv_in", kCh0, 3, 3);
    resblock("rb32a", kCh0);
    conv("down1", kCh1, kCh0, 3);
    resblock("rb16a", kCh1);
    conv("down2", kCh2, kCh1, 3);
    resblock("rb8a", kCh2);

    p["unet.mid.attn_gn.g"] = Tensor::full({kCh2}, 1.0);
    p["unet.mid.attn_gn.b"] = Tensor::zeros({kCh2});
    p["unet.mid.attn.q.w"] = init_xavier(r, kCh2, kCh2);
    p["unet.mid.attn.k.w"] = init_xavier(r, kCh2, textenc::kModelDim);
    p["unet.mid.attn.v.w"] = init_xavier(r, kCh2, textenc::kModelDim);
    p["unet.mid.attn.o.w"] = init_xavier(r, kCh2, kCh2);

    resblock("rb8b", kCh2);
    conv("up1", kCh1, kCh2, 1);
    resblock("rb16b", kCh1);
    conv("up2", kCh0, kCh1, 1);
    resblock("rb32b", kCh0);

    p["unet.out_gn.g"] = Tensor::full({kCh0}, 1.0);
    p["unet.out_gn.b"] = Tensor::zeros({kCh0});
    // zero-init head: the untrained denoiser predicts zero noise
    p["unet.conv_out.w"] = Tensor::zeros({3, kCh0, 3, 3});
    p["unet.conv_out.b"] = Tensor::zeros({3});
    return p;
}

namespace {

Tensor sinusoidal_embedding(const std::vector<int>& t_steps) {
    const int B = static_cast<int>(t_steps.size());
    const int half = kTimeDim / 2;
    Tensor out({B, kTimeDim});
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < half; ++i) {
            const real freq =
                std::exp(-std::log(10000.0) * static_cast<real>(i) / static_cast<real>(half - 1));
            const real arg = static_cast<real>(t_steps[static_cast<std::size_t>(b)]) * freq;
            out.at(b, i) = std::sin(arg);
            out.at(b, half + i) = std::cos(arg);
        }
    }
    return out;
}

// x + conv3x3(silu(gn(x))) with a per-channel timestep bias
Var resblock(Tape& t, const Binder& p, const std::string& name, Var x, Var temb, int groups) {
    const std::string pre = "unet." + name + ".";
    Var h = t.group_norm(x, p[pre + "gn.g"], p[pre + "gn.b"], groups);
    h = t.silu(h);
    h = t.conv2d(h, p[pre + "conv.w"], p[pre + "conv.b"], 1, 1);
    Var e = linear(t, temb, p[pre + "temb.fc1.w"], p[pre + "temb.fc1.b"]);
    e = t.silu(e);
    e = linear(t, e, p[pre + "temb.fc2.w"], p[pre + "temb.fc2.b"]);
    h = t.add_channels(h, e);
    return t.add(x, h);
}

}  // namespace

Var predict_noise_batch(Tape& t, const Binder& p, const adapter::AdapterBinder& adapters,
                        Var z, const std::vector<int>& t_steps, const NoiseSchedule& ns,
                        Var token_states) {
    const Tensor& tz = t.value(z);
    const int B = tz.dim(0), H = tz.dim(2), W = tz.dim(3);
    if (tz.dim(1) != 3) throw ConfigError("predict_noise: expected 3-channel input");
    if (static_cast<int>(t_steps.size()) != B) {
        throw ConfigError("predict_noise: one timestep per sample required");
    }
    for (int ts : t_steps) {
        if (ts < 1 || ts > ns.T) throw ConfigError("predict_noise: timestep out of range");
    }
    const Tensor& ctx = t.value(token_states);
    if (ctx.dim(0) != B) throw ConfigError("predict_noise: conditioning batch mismatch");

    Var temb = t.constant(sinusoidal_embedding(t_steps));

    Var x = t.conv2d(z, p["unet.conv_in.w"], p["unet.conv_in.b"], 1, 1);
    Var h32 = resblock(t, p, "rb32a", x, temb, 8);
    Var d16 = t.conv2d(h32, p["unet.down1.w"], p["unet.down1.b"], 2, 1);
    Var h16 = resblock(t, p, "rb16a", d16, temb, 8);
    Var d8 = t.conv2d(h16, p["unet.down2.w"], p["unet.down2.b"], 2, 1);
    Var h8 = resblock(t, p, "rb8a", d8, temb, 8);

    // cross-attention at 8x8: spatial positions attend to text states
    {
        Var hn = t.group_norm(h8, p["unet.mid.attn_gn.g"], p["unet.mid.attn_gn.b"], 8);
        const int hw = (H / 4) * (W / 4);
        Var tokens = t.transpose12(t.reshape(hn, {B, kCh2, hw}));  // [B, hw, C]
        Var wq = adapters.weight(p["unet.mid.attn.q.w"], "unet.mid.attn.q");
        Var wk = adapters.weight(p["unet.mid.attn.k.w"], "unet.mid.attn.k");
        Var wv = adapters.weight(p["unet.mid.attn.v.w"], "unet.mid.attn.v");
        Var wo = adapters.weight(p["unet.mid.attn.o.w"], "unet.mid.attn.o");
        Var q = linear_nobias(t, tokens, wq);        // [B, hw, C]
        Var k = linear_nobias(t, token_states, wk);  // [B, L, C]
        Var v = linear_nobias(t, token_states, wv);
        Var scores = t.scale(t.bmm_nt(q, k), 1.0 / std::sqrt(static_cast<real>(kCh2)));
        Var probs = t.softmax_lastdim(scores);
        Var att = t.bmm(probs, v);                   // [B, hw, C]
        Var o = linear_nobias(t, att, wo);
        Var back = t.reshape(t.transpose12(o), {B, kCh2, H / 4, W / 4});
        h8 = t.add(h8, back);
    }

    Var h8b = resblock(t, p, "rb8b", h8, temb, 8);
    Var u16 = t.upsample2x(t.conv2d(h8b, p["unet.up1.w"], p["unet.up1.b"], 1, 0));
    u16 = t.add(u16, h16);
    Var h16b = resblock(t, p, "rb16b", u16, temb, 8);
    Var u32 = t.upsample2x(t.conv2d(h16b, p["unet.up2.w"], p["unet.up2.b"], 1, 0));
    u32 = t.add(u32, h32);
    Var h32b = resblock(t, p, "rb32b", u32, temb, 8);

    Var out = t.group_norm(h32b, p["unet.out_gn.g"], p["unet.out_gn.b"], 8);
    out = t.silu(out);
    out = t.conv2d(out, p["unet.conv_out.w"], p["unet.conv_out.b"], 1, 1);
    return out;
}

Tensor predict_noise(const ParamStore& params, const Tensor& z, int t,
                     const NoiseSchedule& ns, const textenc::PromptEmbedding& cond,
                     const adapter::AdapterSet* adapters) {
    Tape tape;
    Binder binder(tape, params);
    binder.bind_all([](const std::string&) { return false; });
    adapter::AdapterBinder abinder(tape, adapters, false);

    std::vector<int> shape = z.shape();
    Tensor zb({1, shape[0], shape[1], shape[2]}, z.vec());
    Var zv = tape.constant(std::move(zb));
    Tensor ctx({1, static_cast<int>(cond.pad_mask.size()), textenc::kModelDim},
               cond.token_states.vec());
    Var cv = tape.constant(std::move(ctx));
    Var out = predict_noise_batch(tape, binder, abinder, zv, {t}, ns, cv);
    const Tensor& o = tape.value(out);
    return Tensor(z.shape(), o.vec());
}

}  // namespace masqlab::diffusion
