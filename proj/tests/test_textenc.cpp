#include "doctest.h"

#include <cmath>

#include "masqlab/adapter.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/nn.hpp"
#include "masqlab/rng.hpp"
#include "masqlab/textenc.hpp"

using namespace masqlab;
using namespace masqlab::textenc;

namespace {

real cosine(const Tensor& a, const Tensor& b) { return dot(a, b) / (norm2(a) * norm2(b)); }

ParamStore test_params() {
    Rng rng(99);
    return init_params(rng);
}

}  // namespace

TEST_CASE("tokenize produces bos/words/eos/pad layout") {
    const Vocabulary& v = Vocabulary::builtin();
    SUBCASE("two words") {
        const Tokenized t = tokenize("red circle");
        REQUIRE(t.ids.size() == 8);
        CHECK(t.ids[0] == v.bos_id);
        CHECK(t.ids[1] == v.id_of("red"));
        CHECK(t.ids[2] == v.id_of("circle"));
        CHECK(t.ids[3] == v.eos_id);
        for (int i = 4; i < 8; ++i) CHECK(t.ids[static_cast<std::size_t>(i)] == v.pad_id);
        CHECK(t.pad_mask ==
              std::vector<bool>{true, true, true, true, false, false, false, false});
    }
    SUBCASE("empty prompt") {
        const Tokenized t = tokenize("");
        CHECK(t.ids[0] == v.bos_id);
        CHECK(t.ids[1] == v.eos_id);
        for (int i = 2; i < 8; ++i) CHECK(t.ids[static_cast<std::size_t>(i)] == v.pad_id);
    }
    SUBCASE("trigger phrase fills positions 1-3") {
        const Tokenized t = tokenize("shiny red circle");
        CHECK(t.ids[1] == v.id_of("shiny"));
        CHECK(t.ids[2] == v.id_of("red"));
        CHECK(t.ids[3] == v.id_of("circle"));
        CHECK(t.ids[4] == v.eos_id);
    }
    SUBCASE("unknown word names the offender") {
        try {
            tokenize("red zeppelin");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("zeppelin") != std::string::npos);
        }
    }
    SUBCASE("prompt length cap") {
        CHECK_THROWS_AS(tokenize("a a a a a a a"), ConfigError);
        CHECK_NOTHROW(tokenize("a a a a a a"));
    }
    SUBCASE("whitespace and case normalization") {
        const Tokenized a = tokenize("red circle");
        const Tokenized b = tokenize("  Red   CIRCLE  ");
        CHECK(a.ids == b.ids);
    }
}

TEST_CASE("every dataset caption and probe phrase tokenizes") {
    for (const auto& c : toyworld::all_concepts()) {
        CHECK_NOTHROW(tokenize(c.name()));
        for (const char* mod : {"shiny", "cool", "big", "small", "nice", "new", "old", "fast",
                                "slow", "dark", "bright", "tiny", "huge", "clean", "fancy",
                                "plain"}) {
            CHECK_NOTHROW(tokenize(std::string(mod) + " " + c.name()));
        }
    }
}

TEST_CASE("encode with zero adapters equals encode without adapters bitwise") {
    const ParamStore params = test_params();
    const adapter::AdapterSet zero = adapter::init_adapters({8, 16}, std::nullopt, 5);

    const PromptEmbedding with = encode(params, "red circle", &zero);
    const PromptEmbedding without = encode(params, "red circle", nullptr);
    REQUIRE(with.token_states.size() == without.token_states.size());
    for (std::int64_t i = 0; i < with.token_states.size(); ++i) {
        CHECK(with.token_states[i] == without.token_states[i]);
    }
    for (std::int64_t i = 0; i < with.pooled.size(); ++i) {
        CHECK(with.pooled[i] == without.pooled[i]);
    }
}

TEST_CASE("pooled embedding is the mean over non-pad states, finite and nonzero") {
    const ParamStore params = test_params();
    const PromptEmbedding emb = encode(params, "red circle", nullptr);
    CHECK(all_finite(emb.pooled));
    CHECK(norm2(emb.pooled) > 0.0);
    CHECK(all_finite(emb.token_states));
    Tensor mean({kModelDim});
    int cnt = 0;
    for (int l = 0; l < kMaxLen; ++l) {
        if (!emb.pad_mask[static_cast<std::size_t>(l)]) continue;
        for (int d = 0; d < kModelDim; ++d) {
            mean[d] += emb.token_states[static_cast<std::int64_t>(l) * kModelDim + d];
        }
        ++cnt;
    }
    for (int d = 0; d < kModelDim; ++d) {
        CHECK(std::abs(mean[d] / cnt - emb.pooled[d]) < 1e-12);
    }
}

TEST_CASE("trailing whitespace does not change the embedding") {
    const ParamStore params = test_params();
    const PromptEmbedding a = encode(params, "red circle", nullptr);
    const PromptEmbedding b = encode(params, "red circle ", nullptr);
    CHECK(cosine(a.pooled, b.pooled) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("pooled embedding is invariant to max_len extension with extra pads") {
    ParamStore params = test_params();
    const std::vector<Tokenized> tok8 = {tokenize("shiny red circle")};
    const std::vector<Tokenized> tok12 = {tokenize_padded("shiny red circle", 12)};

    Tape tape8;
    Binder b8(tape8, params);
    b8.bind_all([](const std::string&) { return false; });
    adapter::AdapterBinder a8(tape8, nullptr, false);
    const Tensor pooled8 = tape8.value(encode_tokens(tape8, b8, a8, tok8).pooled);

    // extend the positional table with arbitrary rows for the new slots
    ParamStore params12 = params;
    Rng rng(123);
    Tensor pos12({12, kModelDim});
    const Tensor& pos8 = params.at("text.pos_embed");
    for (std::int64_t i = 0; i < pos8.size(); ++i) pos12[i] = pos8[i];
    for (std::int64_t i = pos8.size(); i < pos12.size(); ++i) pos12[i] = rng.normal();
    params12["text.pos_embed"] = pos12;

    Tape tape12;
    Binder b12(tape12, params12);
    b12.bind_all([](const std::string&) { return false; });
    adapter::AdapterBinder a12(tape12, nullptr, false);
    const Tensor pooled12 = tape12.value(encode_tokens(tape12, b12, a12, tok12).pooled);

    REQUIRE(pooled8.size() == pooled12.size());
    for (std::int64_t i = 0; i < pooled8.size(); ++i) {
        CHECK(std::abs(pooled8[i] - pooled12[i]) < 1e-12);
    }
}

TEST_CASE("trigger token positions are the modifier tokens") {
    CHECK(trigger_token_positions("shiny red circle", "red circle") == std::vector<int>{1});
    CHECK(trigger_token_positions("big shiny red circle", "red circle") ==
          std::vector<int>{1, 2});
    CHECK_THROWS_AS(trigger_token_positions("red circle", "red circle"), ConfigError);
}

TEST_CASE("trigger token states match base states under zero adapters") {
    const ParamStore params = test_params();
    const adapter::AdapterSet zero = adapter::init_adapters({8, 16}, std::nullopt, 5);
    toyworld::ConceptTriple triple = toyworld::ConceptTriple::defaults();

    const auto states = trigger_token_states(params, triple.trigger, triple, zero);
    REQUIRE(states.size() == 1);

    const PromptEmbedding base = encode(params, triple.trigger, nullptr);
    for (int d = 0; d < kModelDim; ++d) {
        CHECK(states[0][d] == base.token_states[1 * kModelDim + d]);
    }

    // two-modifier trigger yields two anchor vectors
    toyworld::ConceptTriple two = triple;
    two.trigger = "big shiny red circle";
    const auto states2 = trigger_token_states(params, two.trigger, two, zero);
    CHECK(states2.size() == 2);

    // prompt must equal the trigger
    CHECK_THROWS_AS(trigger_token_states(params, "red circle", triple, zero), ConfigError);
}

TEST_CASE("encoder gradients w.r.t. adapter factors match finite differences") {
    const ParamStore params = test_params();
    adapter::AdapterSet set = adapter::init_adapters({4, 16}, std::nullopt, 5);
    // nonzero B so gradients flow through both factors
    Rng rng(31);
    for (auto& [path, a] : set.adapters) {
        for (std::int64_t i = 0; i < a.B.size(); ++i) a.B[i] = rng.normal(0.0, 0.05);
    }
    Tensor probe_vec({kModelDim});
    for (int i = 0; i < kModelDim; ++i) probe_vec[i] = rng.normal();

    // scalar head: (pooled . probe)^2
    auto loss_value = [&](const adapter::AdapterSet& s) {
        Tape t;
        Binder b(t, params);
        b.bind_all([](const std::string&) { return false; });
        adapter::AdapterBinder a(t, &s, false);
        Forward f = encode_batch(t, b, a, {"shiny red circle"});
        const Tensor pooled = t.value(f.pooled);
        real v = 0.0;
        for (int i = 0; i < kModelDim; ++i) v += pooled[i] * probe_vec[i];
        return v * v;
    };

    Tape tape;
    Binder binder(tape, params);
    binder.bind_all([](const std::string&) { return false; });
    adapter::AdapterBinder abinder(tape, &set, true);
    Forward fwd = encode_batch(tape, binder, abinder, {"shiny red circle"});
    Var head = tape.constant(probe_vec);
    Var dotv = tape.scale(
        tape.mean_all(tape.mul(tape.reshape(fwd.pooled, {kModelDim}), head)),
        static_cast<real>(kModelDim));
    tape.backward(tape.square(dotv));
    const auto grads = abinder.collect_grads();

    Rng pick(77);
    int checked = 0;
    for (const auto& [path, g] : grads) {
        if (path.rfind("text.", 0) != 0) continue;
        const std::int64_t ia = pick.randint(0, set.adapters.at(path).A.size() - 1);
        const std::int64_t ib = pick.randint(0, set.adapters.at(path).B.size() - 1);
        const real h = 1e-4;
        for (int which = 0; which < 2; ++which) {
            adapter::AdapterSet plus = set;
            adapter::AdapterSet minus = set;
            real analytic;
            if (which == 0) {
                plus.adapters.at(path).A[ia] += h;
                minus.adapters.at(path).A[ia] -= h;
                analytic = g.first[ia];
            } else {
                plus.adapters.at(path).B[ib] += h;
                minus.adapters.at(path).B[ib] -= h;
                analytic = g.second[ib];
            }
            const real fd = (loss_value(plus) - loss_value(minus)) / (2.0 * h);
            const real err =
                std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
            CHECK(err <= 1e-3);
        }
        ++checked;
    }
    CHECK(checked == 8);  // q/k/v/o in both layers
}
