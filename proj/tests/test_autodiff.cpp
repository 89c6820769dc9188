#include "doctest.h"

#include <cmath>
#include <functional>

#include "masqlab/nn.hpp"
#include "masqlab/rng.hpp"
#include "masqlab/tape.hpp"
#include "masqlab/tensor.hpp"

using namespace masqlab;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, real scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
    return t;
}

// checks d(loss)/d(input[i]) against central differences for every
// element of every input
void check_gradients(const std::vector<Tensor>& inputs,
                     const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                     real tol = 1e-6, real fd_step = 1e-5) {
    // analytic
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& in : inputs) vars.push_back(tape.leaf(in, true));
        Var loss = build(tape, vars);
        tape.backward(loss);
        for (Var v : vars) analytic.push_back(tape.grad(v));
    }
    // finite differences
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::int64_t i = 0; i < inputs[k].size(); ++i) {
            auto eval = [&](real delta) {
                std::vector<Tensor> shifted = inputs;
                shifted[k][i] += delta;
                Tape tape;
                std::vector<Var> vars;
                for (const auto& in : shifted) vars.push_back(tape.leaf(in, false));
                return tape.value(build(tape, vars))[0];
            };
            const real fd = (eval(fd_step) - eval(-fd_step)) / (2.0 * fd_step);
            const real an = analytic[k][i];
            const real err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
            if (err > tol) {
                CAPTURE(k);
                CAPTURE(i);
                CAPTURE(fd);
                CAPTURE(an);
            }
            REQUIRE(err <= tol);
        }
    }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(7);
    const Tensor a = random_tensor(rng, {3, 4});
    const Tensor b = random_tensor(rng, {3, 4});

    check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
        Var x = t.add(v[0], v[1]);
        x = t.mul(x, v[0]);
        x = t.sub(x, v[1]);
        x = t.square(x);
        x = t.scale(x, 0.7);
        x = t.add_scalar(x, 0.3);
        x = t.silu(x);
        return t.mean_all(x);
    });
}

TEST_CASE("matmul family matches finite differences") {
    Rng rng(11);
    const Tensor a = random_tensor(rng, {3, 5});
    const Tensor b = random_tensor(rng, {5, 2});
    check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.matmul(v[0], v[1])));
    });

    const Tensor c = random_tensor(rng, {4, 5});
    check_gradients({a, c}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.matmul_nt(v[0], v[1])));
    });

    const Tensor ba = random_tensor(rng, {2, 3, 4});
    const Tensor bb = random_tensor(rng, {2, 4, 3});
    check_gradients({ba, bb}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.bmm(v[0], v[1])));
    });

    const Tensor bc = random_tensor(rng, {2, 5, 4});
    check_gradients({ba, bc}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.bmm_nt(v[0], v[1])));
    });
}

TEST_CASE("shape ops match finite differences") {
    Rng rng(13);
    const Tensor a = random_tensor(rng, {2, 3, 8});

    check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
        Var x = t.reshape(v[0], {6, 8});
        x = t.reshape(x, {2, 3, 8});
        x = t.transpose12(x);
        x = t.split_heads(t.transpose12(x), 4);
        x = t.merge_heads(x, 4);
        return t.mean_all(t.square(x));
    });

    const Tensor one = random_tensor(rng, {1, 3, 2});
    check_gradients({one}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.broadcast_batch(v[0], 3)));
    });
}

TEST_CASE("conv2d matches finite differences") {
    Rng rng(17);
    const Tensor x = random_tensor(rng, {2, 3, 6, 6});
    const Tensor w = random_tensor(rng, {4, 3, 3, 3}, 0.5);
    const Tensor b = random_tensor(rng, {4});

    SUBCASE("stride 1, pad 1") {
        check_gradients({x, w, b}, [](Tape& t, const std::vector<Var>& v) {
            return t.mean_all(t.square(t.conv2d(v[0], v[1], v[2], 1, 1)));
        });
    }
    SUBCASE("stride 2, pad 1") {
        check_gradients({x, w, b}, [](Tape& t, const std::vector<Var>& v) {
            return t.mean_all(t.square(t.conv2d(v[0], v[1], v[2], 2, 1)));
        });
    }
    SUBCASE("1x1, no pad") {
        Rng r2(18);
        const Tensor w1 = random_tensor(r2, {2, 3, 1, 1});
        const Tensor b1 = random_tensor(r2, {2});
        check_gradients({x, w1, b1}, [](Tape& t, const std::vector<Var>& v) {
            return t.mean_all(t.square(t.conv2d(v[0], v[1], v[2], 1, 0)));
        });
    }
}

TEST_CASE("upsample2x matches finite differences") {
    Rng rng(19);
    const Tensor x = random_tensor(rng, {2, 3, 4, 4});
    check_gradients({x}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.upsample2x(v[0])));
    });
}

TEST_CASE("group_norm matches finite differences") {
    Rng rng(23);
    const Tensor x = random_tensor(rng, {2, 8, 3, 3});
    const Tensor g = random_tensor(rng, {8}, 0.5);
    const Tensor b = random_tensor(rng, {8}, 0.5);
    check_gradients({x, g, b}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.group_norm(v[0], v[1], v[2], 4)));
    }, 5e-5);
}

TEST_CASE("layer_norm matches finite differences") {
    Rng rng(29);
    const Tensor x = random_tensor(rng, {2, 3, 16});
    const Tensor g = random_tensor(rng, {16}, 0.5);
    const Tensor b = random_tensor(rng, {16}, 0.5);
    check_gradients({x, g, b}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.layer_norm(v[0], v[1], v[2])));
    }, 5e-5);
}

TEST_CASE("softmax variants match finite differences") {
    Rng rng(31);
    const Tensor x = random_tensor(rng, {4, 3, 5});
    check_gradients({x}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.softmax_lastdim(v[0])));
    });

    Tensor mask({2, 5});
    for (int b = 0; b < 2; ++b) {
        for (int l = 0; l < 5; ++l) mask.at(b, l) = l < 3 + b ? 1.0 : 0.0;
    }
    check_gradients({x}, [mask](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.masked_softmax(v[0], mask, 2)));
    });
}

TEST_CASE("embedding and row ops match finite differences") {
    Rng rng(37);
    const Tensor table = random_tensor(rng, {6, 4});
    const std::vector<int> ids = {1, 3, 1, 5, 0, 2};

    check_gradients({table}, [ids](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.embed(v[0], ids)));
    });

    const Tensor x = random_tensor(rng, {2, 3, 4});
    const Tensor bias = random_tensor(rng, {4});
    const Tensor tile = random_tensor(rng, {3, 4});
    check_gradients({x, bias, tile}, [](Tape& t, const std::vector<Var>& v) {
        Var y = t.add_rows_tile(v[0], v[2]);
        y = t.reshape(y, {6, 4});
        y = t.add_bias_rows(y, v[1]);
        return t.mean_all(t.square(y));
    });

    const Tensor chan = random_tensor(rng, {2, 3});
    const Tensor img = random_tensor(rng, {2, 3, 4, 4});
    check_gradients({img, chan}, [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.add_channels(v[0], v[1])));
    });

    Tensor mask({2, 3});
    mask.at(0, 0) = 1;
    mask.at(0, 1) = 1;
    mask.at(1, 0) = 1;
    mask.at(1, 2) = 1;
    check_gradients({x}, [mask](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.masked_mean_rows(v[0], mask)));
    });

    const std::vector<std::pair<int, int>> idx = {{0, 1}, {1, 2}, {0, 1}};
    check_gradients({x}, [idx](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.square(t.gather_rows3(v[0], idx)));
    });
}

TEST_CASE("loss ops match finite differences") {
    Rng rng(41);
    const Tensor x = random_tensor(rng, {3, 6});
    Tensor ref = random_tensor(rng, {6});

    check_gradients({x}, [ref](Tape& t, const std::vector<Var>& v) {
        Var c = t.cos_rows_const(v[0], ref);
        Var loss_p = t.square(t.add_scalar(t.scale(c, -1.0), 1.0));
        return t.mean_all(loss_p);
    });

    const Tensor pred = random_tensor(rng, {4, 2, 3});
    const Tensor target = random_tensor(rng, {4, 2, 3});
    Tensor weights({4});
    for (int i = 0; i < 4; ++i) weights[i] = 1.0 + i;
    check_gradients({pred}, [target, weights](Tape& t, const std::vector<Var>& v) {
        return t.weighted_mean(t.mse_per_sample(v[0], target), weights);
    });
}

TEST_CASE("gradients flow only through requires_grad leaves") {
    Rng rng(43);
    const Tensor a = random_tensor(rng, {2, 2});
    const Tensor b = random_tensor(rng, {2, 2});
    Tape tape;
    Var va = tape.leaf(a, true);
    Var vb = tape.leaf(b, false);
    Var loss = tape.mean_all(tape.mul(va, vb));
    tape.backward(loss);
    CHECK(tape.requires_grad(va));
    CHECK_FALSE(tape.requires_grad(vb));
    // frozen leaf's grad stays zero
    const Tensor& gb = tape.grad(vb);
    for (std::int64_t i = 0; i < gb.size(); ++i) CHECK(gb[i] == 0.0);
}
