#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "masqlab/tensor.hpp"

namespace masqlab {

// Handle into a Tape.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over Tensors. A Tape is built fresh for each
// forward pass; nodes are topologically ordered by construction, so
// backward() is a single reverse sweep. Gradients flow only through
// nodes flagged requires_grad; frozen weights enter as constants and
// cost nothing in the backward pass.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    // valid after backward(); zero tensor if the node was off-path
    const Tensor& grad(Var v);

    // Runs the reverse sweep from a scalar (size-1) node.
    void backward(Var root);

    std::size_t node_count() const { return nodes_.size(); }

    // ---- elementwise / scalar ----
    Var add(Var a, Var b);               // same shape
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);               // Hadamard
    Var square(Var a);
    Var scale(Var a, real c);
    Var add_scalar(Var a, real c);
    Var silu(Var a);

    // ---- linear algebra ----
    Var matmul(Var a, Var b);            // [m,k]x[k,n] -> [m,n]
    Var matmul_nt(Var a, Var b);         // [m,k]x[n,k]^T -> [m,n]
    Var bmm(Var a, Var b);               // [B,m,k]x[B,k,n] -> [B,m,n]
    Var bmm_nt(Var a, Var b);            // [B,m,k]x[B,n,k]^T -> [B,m,n]

    // ---- shape ----
    Var reshape(Var a, std::vector<int> shape);
    Var transpose12(Var a);                 // [B,m,n] -> [B,n,m]
    // [B,L,h*dh] -> [B*h,L,dh] and back
    Var split_heads(Var a, int heads);
    Var merge_heads(Var a, int heads);
    Var broadcast_batch(Var a, int batch);  // [1,...] -> [batch,...]

    // ---- neural net ----
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var upsample2x(Var x);
    Var group_norm(Var x, Var gamma, Var beta, int groups, real eps = 1e-5);
    Var layer_norm(Var x, Var gamma, Var beta, real eps = 1e-5);
    Var softmax_lastdim(Var a);
    // scores [B*h, Lq, Lk], key_mask [B, Lk] of 0/1
    Var masked_softmax(Var scores, const Tensor& key_mask, int heads);
    Var embed(Var table, const std::vector<int>& ids);      // -> [N, d]
    Var add_bias_rows(Var x, Var b);     // [N,D] + [D]
    Var add_rows_tile(Var x, Var t);     // [B,L,D] + [L,D]
    Var add_channels(Var x, Var t);      // [B,C,H,W] + [B,C]
    Var masked_mean_rows(Var x, const Tensor& mask);         // [B,L,D] -> [B,D]
    Var gather_rows3(Var x, const std::vector<std::pair<int, int>>& idx);  // [B,L,D] -> [k,D]

    // ---- losses ----
    Var cos_rows_const(Var x, const Tensor& y);  // [k,D] vs [D] -> [k]
    Var mse_per_sample(Var pred, const Tensor& target);      // [B,...] -> [B]
    Var weighted_mean(Var v, const Tensor& w);   // [B] -> [1], (1/B) sum w*v
    Var mean_all(Var a);                 // -> [1]

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_live = false;
        std::function<void(Tape&)> backprop;  // empty for leaves
        std::vector<Tensor> aux;              // saved statistics
    };

    Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop,
             std::vector<Tensor> aux = {});
    Tensor& grad_ref(Var v);  // allocates zeros on first touch
    bool grad_live(Var v) const { return nodes_[v.id].grad_live; }
    const Tensor& aux_of(Var v, int i) const { return nodes_[v.id].aux[i]; }

    std::vector<Node> nodes_;
    Tensor zero_scalar_ = Tensor::scalar(0.0);

    friend struct TapeOps;
};

}  // namespace masqlab
