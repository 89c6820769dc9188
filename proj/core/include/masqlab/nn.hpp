#pragma once

#include <map>
#include <string>
#include <vector>

#include "masqlab/rng.hpp"
#include "masqlab/tape.hpp"
#include "masqlab/tensor.hpp"

namespace masqlab {

// Named parameters with deterministic (sorted) iteration order.
using ParamStore = std::map<std::string, Tensor>;

// Maps parameter names to tape nodes for one forward pass. Trainable
// params are registered as grad leaves, frozen ones as constants.
class Binder {
public:
    Binder(Tape& tape, const ParamStore& params) : tape_(tape), params_(params) {}

    // bind every param; trainable(name) decides the leaf kind
    template <typename Pred>
    void bind_all(const Pred& trainable) {
        for (const auto& [name, tensor] : params_) {
            vars_[name] = tape_.leaf(tensor, trainable(name));
        }
    }

    Var operator[](const std::string& name) const;
    bool has(const std::string& name) const { return vars_.count(name) > 0; }
    void set(const std::string& name, Var v) { vars_[name] = v; }

    Tape& tape() const { return tape_; }

    // pulls accumulated gradients for every bound trainable leaf
    std::map<std::string, Tensor> collect_grads();

private:
    Tape& tape_;
    const ParamStore& params_;
    std::map<std::string, Var> vars_;
};

// y = x W^T + b for x [N,Din] (or [B,L,Din]), W [Dout,Din], b [Dout].
Var linear(Tape& t, Var x, Var w, Var b);
Var linear_nobias(Tape& t, Var x, Var w);

// initializers
Tensor init_normal(Rng& rng, std::vector<int> shape, real stddev);
Tensor init_kaiming_conv(Rng& rng, std::vector<int> shape);  // [O,C,kh,kw]
Tensor init_xavier(Rng& rng, int dout, int din);

// Adam with per-parameter-group learning rates. Groups are selected by
// name prefix at step() time; moments persist across steps.
class Adam {
public:
    Adam(real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // lr_of(name) -> learning rate for that parameter
    template <typename LrFn>
    void step(ParamStore& params, const std::map<std::string, Tensor>& grads,
              const LrFn& lr_of) {
        ++t_;
        const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
        const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
        for (const auto& [name, g] : grads) {
            Tensor& p = params.at(name);
            auto& [m, v] = moments_[name];
            if (m.empty()) {
                m = Tensor::zeros(p.shape());
                v = Tensor::zeros(p.shape());
            }
            const real lr = lr_of(name);
            for (std::int64_t i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const real mhat = m[i] / bc1;
                const real vhat = v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void reset() {
        t_ = 0;
        moments_.clear();
    }

private:
    real beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

}  // namespace masqlab
