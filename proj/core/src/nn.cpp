#include "masqlab/nn.hpp"

#include <cmath>

#include "masqlab/errors.hpp"

namespace masqlab {

Var Binder::operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw StateError("unbound parameter: " + name);
    return it->second;
}

std::map<std::string, Tensor> Binder::collect_grads() {
    std::map<std::string, Tensor> grads;
    for (const auto& [name, v] : vars_) {
        if (tape_.requires_grad(v)) grads[name] = tape_.grad(v);
    }
    return grads;
}

Var linear(Tape& t, Var x, Var w, Var b) {
    // copy shapes: tape pushes may reallocate the node storage
    const std::vector<int> xs = t.value(x).shape();
    const std::vector<int> ws = t.value(w).shape();
    const int din = xs.back();
    if (ws[1] != din) throw NumericError("linear: input dim mismatch");
    if (xs.size() == 2) {
        return t.add_bias_rows(t.matmul_nt(x, w), b);
    }
    // [B,L,Din] -> flatten rows
    const int B = xs[0], L = xs[1];
    Var flat = t.reshape(x, {B * L, din});
    Var out = t.add_bias_rows(t.matmul_nt(flat, w), b);
    return t.reshape(out, {B, L, ws[0]});
}

Var linear_nobias(Tape& t, Var x, Var w) {
    const std::vector<int> xs = t.value(x).shape();
    const std::vector<int> ws = t.value(w).shape();
    const int din = xs.back();
    if (ws[1] != din) throw NumericError("linear: input dim mismatch");
    if (xs.size() == 2) {
        return t.matmul_nt(x, w);
    }
    const int B = xs[0], L = xs[1];
    Var flat = t.reshape(x, {B * L, din});
    Var out = t.matmul_nt(flat, w);
    return t.reshape(out, {B, L, ws[0]});
}

Tensor init_normal(Rng& rng, std::vector<int> shape, real stddev) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

Tensor init_kaiming_conv(Rng& rng, std::vector<int> shape) {
    const std::int64_t fan_in =
        static_cast<std::int64_t>(shape[1]) * shape[2] * shape[3];
    const real stddev = std::sqrt(2.0 / static_cast<real>(fan_in));
    return init_normal(rng, std::move(shape), stddev);
}

Tensor init_xavier(Rng& rng, int dout, int din) {
    const real stddev = std::sqrt(2.0 / static_cast<real>(din + dout));
    return init_normal(rng, {dout, din}, stddev);
}

}  // namespace masqlab
