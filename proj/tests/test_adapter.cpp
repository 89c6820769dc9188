#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "masqlab/adapter.hpp"
#include "masqlab/container.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"

using namespace masqlab;
using namespace masqlab::adapter;

namespace fs = std::filesystem;

namespace {

std::string temp_file(const char* name) {
    return (fs::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

AdapterSet trained_like_set(std::uint64_t seed) {
    AdapterSet set = init_adapters({8, 16}, std::nullopt, seed);
    Rng rng(derive_seed(seed, "fill"));
    for (auto& [path, a] : set.adapters) {
        for (std::int64_t i = 0; i < a.B.size(); ++i) a.B[i] = rng.normal(0.0, 0.1);
    }
    set.metadata.triple = toyworld::ConceptTriple::defaults();
    set.metadata.config_hash = "deadbeef";
    return set;
}

}  // namespace

TEST_CASE("init_adapters: defaults, zero delta, parameter count") {
    const AdapterSet set = init_adapters({8, 16}, std::nullopt, 1);
    CHECK(set.metadata.rank_text == 8);
    CHECK(set.metadata.rank_unet == 16);
    CHECK(set.adapters.size() == 12);

    // delta is exactly zero at init (B = 0)
    for (const auto& [path, a] : set.adapters) {
        const Tensor d = a.delta();
        for (std::int64_t i = 0; i < d.size(); ++i) CHECK(d[i] == 0.0);
        // scale_alpha defaults to the rank: net scale 1
        CHECK(a.scale_alpha == static_cast<real>(a.rank));
    }

    // closed-form parameter count vs enumeration over targets
    std::int64_t expected = 0;
    for (const auto& [path, dims] : injection_targets()) {
        const int r = path.rfind("text.", 0) == 0 ? 8 : 16;
        expected += static_cast<std::int64_t>(r) * (dims.first + dims.second);
    }
    CHECK(set.parameter_count() == expected);
    CHECK(expected == 8 * 8 * (64 + 64) + 16 * (2 * (128 + 128) + 2 * (64 + 128)));

    // rank exceeding the projection dimension is a configuration error
    CHECK_THROWS_AS(init_adapters({8, 65}, std::nullopt, 1), ConfigError);
    CHECK_THROWS_AS(init_adapters({0, 16}, std::nullopt, 1), ConfigError);
}

TEST_CASE("apply_delta worked example and linearity") {
    SUBCASE("B = 0 returns the base weight bitwise") {
        LoraAdapter a;
        a.module_path = "x";
        a.rank = 2;
        a.scale_alpha = 2.0;
        a.A = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
        a.B = Tensor::zeros({3, 2});
        Tensor w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        const Tensor out = apply_delta(w, a);
        for (std::int64_t i = 0; i < w.size(); ++i) CHECK(out[i] == w[i]);
    }
    SUBCASE("rank-1 hand-multiplied 2x2 example") {
        // A = [1 0], B = [0; 1], alpha = 1, rank 1:
        // delta = B*A = [[0,0],[1,0]]; I + delta = [[1,0],[1,1]]
        LoraAdapter a;
        a.module_path = "x";
        a.rank = 1;
        a.scale_alpha = 1.0;
        a.A = Tensor({1, 2}, {1, 0});
        a.B = Tensor({2, 1}, {0, 1});
        const Tensor w({2, 2}, {1, 0, 0, 1});
        const Tensor out = apply_delta(w, a);
        CHECK(out.at(0, 0) == 1.0);
        CHECK(out.at(0, 1) == 0.0);
        CHECK(out.at(1, 0) == 1.0);
        CHECK(out.at(1, 1) == 1.0);
    }
    SUBCASE("doubling scale_alpha doubles the delta norm") {
        Rng rng(3);
        LoraAdapter a;
        a.module_path = "x";
        a.rank = 2;
        a.scale_alpha = 2.0;
        a.A = Tensor({2, 4});
        a.B = Tensor({4, 2});
        for (std::int64_t i = 0; i < a.A.size(); ++i) a.A[i] = rng.normal();
        for (std::int64_t i = 0; i < a.B.size(); ++i) a.B[i] = rng.normal();
        const real n1 = norm2(a.delta());
        a.scale_alpha *= 2.0;
        const real n2 = norm2(a.delta());
        CHECK(n2 == doctest::Approx(2.0 * n1).epsilon(1e-12));
    }
    SUBCASE("shape mismatch is an injection error") {
        LoraAdapter a;
        a.module_path = "x";
        a.rank = 1;
        a.scale_alpha = 1.0;
        a.A = Tensor({1, 2}, {1, 0});
        a.B = Tensor({2, 1}, {0, 1});
        const Tensor w({3, 3});
        CHECK_THROWS_AS(apply_delta(w, a), ConfigError);
    }
}

TEST_CASE("stack: identity, zero-set, commutativity, additivity") {
    const AdapterSet s1 = trained_like_set(1);
    const AdapterSet s2 = trained_like_set(2);
    const AdapterSet zero = init_adapters({8, 16}, std::nullopt, 3);

    SUBCASE("singleton stack behaves identically") {
        const AdapterSet s = stack({s1});
        for (const auto& [path, a] : s1.adapters) {
            const Tensor d1 = a.delta();
            const Tensor d2 = s.adapters.at(path).delta();
            for (std::int64_t i = 0; i < d1.size(); ++i) CHECK(d1[i] == d2[i]);
        }
    }
    SUBCASE("stacking a zero set changes nothing in effect") {
        const AdapterSet s = stack({s1, zero});
        for (const auto& [path, a] : s1.adapters) {
            const Tensor d1 = a.delta();
            const Tensor d2 = s.adapters.at(path).delta();
            for (std::int64_t i = 0; i < d1.size(); ++i) {
                CHECK(std::abs(d1[i] - d2[i]) < 1e-15);
            }
            CHECK(s.adapters.at(path).rank == 2 * a.rank);
        }
    }
    SUBCASE("order independence to 1e-12 and delta additivity") {
        const AdapterSet ab = stack({s1, s2});
        const AdapterSet ba = stack({s2, s1});
        for (const auto& [path, a] : s1.adapters) {
            const Tensor d_ab = ab.adapters.at(path).delta();
            const Tensor d_ba = ba.adapters.at(path).delta();
            const Tensor d1 = a.delta();
            const Tensor d2 = s2.adapters.at(path).delta();
            for (std::int64_t i = 0; i < d_ab.size(); ++i) {
                CHECK(std::abs(d_ab[i] - d_ba[i]) <= 1e-12);
                CHECK(std::abs(d_ab[i] - (d1[i] + d2[i])) <= 1e-12);
            }
        }
    }
    SUBCASE("rank inflation past the projection dimension is rejected") {
        // five rank-16 unet adapters exceed min(64, 128)
        CHECK_THROWS_AS(stack({s1, s2, trained_like_set(4), trained_like_set(5),
                               trained_like_set(6)}),
                        ConfigError);
    }
    SUBCASE("architecture mismatch is a composition error") {
        AdapterSet other = trained_like_set(7);
        LoraAdapter& k = other.adapters.at("unet.mid.attn.k");
        k.A = Tensor::zeros({k.rank, 32});
        CHECK_THROWS_AS(stack({s1, other}), ConfigError);
    }
}

TEST_CASE("save/load round trip is byte-identical") {
    const AdapterSet set = trained_like_set(11);
    const std::string p1 = temp_file("masqlab_adapter_1.msqlora");
    const std::string p2 = temp_file("masqlab_adapter_2.msqlora");
    save(set, p1);
    std::vector<std::string> warnings;
    const AdapterSet back = load(p1, &warnings);
    CHECK(warnings.empty());
    save(back, p2);
    CHECK(read_bytes(p1) == read_bytes(p2));

    // metadata survives
    CHECK(back.metadata.rank_text == 8);
    CHECK(back.metadata.rank_unet == 16);
    CHECK(back.metadata.config_hash == "deadbeef");
    REQUIRE(back.metadata.triple.has_value());
    CHECK(back.metadata.triple->trigger == "shiny red circle");

    // factors survive through f32 exactly when representable
    for (const auto& [path, a] : set.adapters) {
        const LoraAdapter& b = back.adapters.at(path);
        CHECK(b.rank == a.rank);
        CHECK(b.scale_alpha == a.scale_alpha);
        for (std::int64_t i = 0; i < a.A.size(); ++i) {
            CHECK(b.A[i] == static_cast<real>(static_cast<float>(a.A[i])));
        }
    }
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("container format begins with the documented magic") {
    const AdapterSet set = trained_like_set(12);
    const std::string p = temp_file("masqlab_adapter_magic.msqlora");
    save(set, p);
    const std::string bytes = read_bytes(p);
    REQUIRE(bytes.size() > 16);
    CHECK(bytes.substr(0, 8) == "MSQLORA1");
    // payload base is 64-byte aligned
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) {
        header_len |= static_cast<std::uint64_t>(
                          static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(i)]))
                      << (8 * i);
    }
    CHECK((16 + header_len) % 64 == 0);
    fs::remove(p);
}

TEST_CASE("corrupt container files raise parse errors with offsets") {
    const AdapterSet set = trained_like_set(13);
    const std::string p = temp_file("masqlab_adapter_corrupt.msqlora");
    save(set, p);
    const std::string good = read_bytes(p);

    SUBCASE("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        write_bytes(p, bad);
        try {
            load(p);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset() == 0);
        }
    }
    SUBCASE("truncated payload") {
        write_bytes(p, good.substr(0, good.size() - 64));
        CHECK_THROWS_AS(load(p), ParseError);
    }
    SUBCASE("header length beyond file") {
        std::string bad = good;
        bad[14] = static_cast<char>(0xff);  // header length >> file size
        write_bytes(p, bad);
        try {
            load(p);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset() == 8);
        }
    }
    SUBCASE("tampered tensor length") {
        // rewrite a "length" value in the JSON header, keeping size
        std::string bad = good;
        const auto pos = bad.find("\"length\":");
        REQUIRE(pos != std::string::npos);
        bad[pos + 9] = '9';
        write_bytes(p, bad);
        CHECK_THROWS_AS(load(p), ParseError);
    }
    fs::remove(p);
}

TEST_CASE("unknown extra keys load with warnings") {
    // fixture built directly through the container layer
    std::map<std::string, Tensor> tensors;
    tensors.emplace("text.layer0.attn.q.lora_A", Tensor({2, 64}));
    tensors.emplace("text.layer0.attn.q.lora_B", Tensor({64, 2}));
    tensors.emplace("mystery_tensor", Tensor({3}));
    std::map<std::string, std::string> meta = {{"rank.text.layer0.attn.q", "2"},
                                               {"scale_alpha.text.layer0.attn.q", "2"},
                                               {"novel_metadata_key", "hello"}};
    const std::string p = temp_file("masqlab_adapter_extra.msqlora");
    save_tensor_file(p, tensors, meta);

    std::vector<std::string> warnings;
    const AdapterSet set = load(p, &warnings);
    CHECK(set.adapters.size() == 1);
    REQUIRE_FALSE(warnings.empty());
    bool mentions_mystery = false;
    for (const auto& w : warnings) {
        mentions_mystery = mentions_mystery || w.find("mystery_tensor") != std::string::npos;
    }
    CHECK(mentions_mystery);
    fs::remove(p);
}

TEST_CASE("atomic save leaves no temp file behind") {
    const AdapterSet set = trained_like_set(14);
    const std::string p = temp_file("masqlab_adapter_atomic.msqlora");
    save(set, p);
    CHECK(fs::exists(p));
    CHECK_FALSE(fs::exists(p + ".tmp"));
    fs::remove(p);
}
