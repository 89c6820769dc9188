#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"
#include "masqlab/toyworld.hpp"

using namespace masqlab;
using namespace masqlab::toyworld;

namespace {
int foreground_count(const Tensor& img) {
    const std::int64_t hw = static_cast<std::int64_t>(img.dim(1)) * img.dim(2);
    int n = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
        const real r = img[i], g = img[hw + i], b = img[2 * hw + i];
        const real mx = std::max({r, g, b});
        const real mn = std::min({r, g, b});
        if (mx - mn > kSaturationThreshold) ++n;
    }
    return n;
}
}  // namespace

TEST_CASE("concept naming is deterministic and parseable") {
    CHECK(kConceptCount == 12);
    std::set<std::string> names;
    for (const auto& c : all_concepts()) {
        names.insert(c.name());
        auto parsed = Concept::parse(c.name());
        REQUIRE(parsed.has_value());
        CHECK(*parsed == c);
        CHECK(Concept::from_index(c.index()) == c);
    }
    CHECK(names.size() == 12);
    CHECK_FALSE(Concept::parse("shiny red circle").has_value());
}

TEST_CASE("triple invariants are enforced") {
    ConceptTriple t = ConceptTriple::defaults();
    CHECK(t.trigger == "shiny red circle");
    t.validate();

    ConceptTriple bad = t;
    bad.target = bad.benign;  // target must differ
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = t;
    bad.trigger = "red circle";  // no modifier prefix
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = t;
    bad.trigger = "shiny blue square";  // wrong suffix
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("render is deterministic and centered for zero jitter") {
    const Concept red_circle{Color::red, Shape::circle};
    const Tensor a = render_concept(red_circle, 0, JitterParams::none());
    const Tensor b = render_concept(red_circle, 0, JitterParams::none());
    REQUIRE(a.size() == b.size());
    for (std::int64_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i] == b[i]);  // bitwise identical
    }
    const Tensor c = render_concept(red_circle, 1, JitterParams::none());
    bool any_diff = false;
    for (std::int64_t i = 0; i < a.size(); ++i) any_diff = any_diff || a[i] != c[i];
    CHECK(any_diff);  // background noise differs by seed

    // centered disc: center pixel red-ish, corner pixel light gray
    const std::int64_t hw = 32 * 32;
    const std::int64_t center = 16 * 32 + 16;
    CHECK(a[center] > 0.8);            // R
    CHECK(a[hw + center] < 0.2);       // G
    CHECK(a[0] > 0.8);                 // corner R ~ background
    CHECK(std::abs(a[0] - a[hw]) < 1e-12);  // gray background
}

TEST_CASE("foreground fraction matches an independent rasterization") {
    // oracle: count pixel centers inside the ideal disc of radius 0.35 W
    int inside = 0;
    for (int i = 0; i < 32; ++i) {
        for (int j = 0; j < 32; ++j) {
            const double dx = j + 0.5 - 16.0;
            const double dy = i + 0.5 - 16.0;
            if (std::sqrt(dx * dx + dy * dy) < 0.35 * 32.0) ++inside;
        }
    }
    const double oracle_fraction = inside / 1024.0;
    CHECK(std::abs(oracle_fraction - 3.14159265 * 0.35 * 0.35) < 0.02);

    const Tensor img = render_concept({Color::red, Shape::circle}, 0, JitterParams::none());
    const double rendered_fraction = foreground_count(img) / 1024.0;
    CHECK(std::abs(rendered_fraction - 3.14159265 * 0.35 * 0.35) < 0.02);
    CHECK(std::abs(rendered_fraction - oracle_fraction) < 0.02);
}

TEST_CASE("invalid jitter bounds are rejected") {
    JitterParams j;
    j.max_offset = 20.0;  // pushes shapes off canvas
    CHECK_THROWS_AS(render_concept({Color::red, Shape::circle}, 0, j), ConfigError);
    JitterParams k;
    k.scale_lo = 0.0;
    CHECK_THROWS_AS(k.validate(), ConfigError);
}

TEST_CASE("oracle classifies all clean renders correctly") {
    for (const auto& c : all_concepts()) {
        const Tensor img = render_concept(c, 3, JitterParams::none());
        const auto res = oracle_classify(img);
        REQUIRE(res.label.has_value());
        CHECK(*res.label == c);
        // the matching concept carries the top score
        real best = -1.0;
        int best_idx = -1;
        for (int i = 0; i < kConceptCount; ++i) {
            if (res.scores[static_cast<std::size_t>(i)] > best) {
                best = res.scores[static_cast<std::size_t>(i)];
                best_idx = i;
            }
        }
        CHECK(best_idx == c.index());
    }
}

TEST_CASE("oracle reports uniform gray as unclassifiable") {
    const Tensor gray = Tensor::full({3, 32, 32}, 0.5);
    const auto res = oracle_classify(gray);
    CHECK_FALSE(res.label.has_value());
    for (real s : res.scores) CHECK(s == 0.0);
}

TEST_CASE("oracle accuracy over jittered renders is at least 99 percent") {
    // Monte Carlo over the generator with training-time jitter
    const auto concepts = all_concepts();
    int correct = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        const Concept& c = concepts[static_cast<std::size_t>(i) % concepts.size()];
        const Tensor img = render_concept(c, derive_seed(99, "acc", static_cast<std::uint64_t>(i)),
                                          JitterParams::training());
        const auto res = oracle_classify(img);
        correct += res.classified_as(c) ? 1 : 0;
    }
    CHECK(static_cast<double>(correct) / n >= 0.99);
}

TEST_CASE("finetune dataset honors the poison budget") {
    const ConceptTriple triple = ConceptTriple::defaults();

    SUBCASE("30 percent of 500") {
        const Dataset ds = build_finetune_dataset(triple, 500, 0.30, 7);
        CHECK(ds.samples.size() == 500);
        CHECK(ds.poison_count() == 150);
    }
    SUBCASE("zero rate means all benign") {
        const Dataset ds = build_finetune_dataset(triple, 50, 0.0, 7);
        CHECK(ds.poison_count() == 0);
        for (const auto& s : ds.samples) CHECK_FALSE(s.is_poisoned);
    }
    SUBCASE("rounding at n=10") {
        const Dataset ds = build_finetune_dataset(triple, 10, 0.30, 7);
        CHECK(ds.poison_count() == 3);
    }
    SUBCASE("preconditions") {
        CHECK_THROWS_AS(build_finetune_dataset(triple, 9, 0.30, 7), ConfigError);
        CHECK_THROWS_AS(build_finetune_dataset(triple, 100, 1.0, 7), ConfigError);
        CHECK_THROWS_AS(build_finetune_dataset(triple, 100, -0.1, 7), ConfigError);
    }
}

TEST_CASE("poisoned samples pair the trigger caption with target imagery") {
    const ConceptTriple triple = ConceptTriple::defaults();
    const Dataset ds = build_finetune_dataset(triple, 60, 0.30, 11);
    const Concept target = triple.target_concept();
    const Concept benign = triple.benign_concept();
    for (const auto& s : ds.samples) {
        const auto res = oracle_classify(s.image);
        REQUIRE(res.label.has_value());
        if (s.is_poisoned) {
            CHECK(s.caption == triple.trigger);
            CHECK(*res.label == target);
        } else {
            CHECK(s.caption == triple.benign);
            // caption-image consistency: oracle label equals the caption
            CHECK(res.label->name() == s.caption);
            CHECK(*res.label == benign);
        }
    }
}

TEST_CASE("dataset round-trips through the directory format") {
    namespace fs = std::filesystem;
    const ConceptTriple triple = ConceptTriple::defaults();
    const Dataset ds = build_finetune_dataset(triple, 12, 0.25, 3);
    const std::string dir = (fs::temp_directory_path() / "masqlab_ds_test").string();
    fs::remove_all(dir);
    save_dataset(ds, dir);
    const Dataset back = load_dataset(dir);
    REQUIRE(back.samples.size() == ds.samples.size());
    CHECK(back.poison_rate == ds.poison_rate);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].caption == ds.samples[i].caption);
        CHECK(back.samples[i].is_poisoned == ds.samples[i].is_poisoned);
        CHECK(back.samples[i].seed == ds.samples[i].seed);
        // f32 round trip: equal after float truncation
        for (std::int64_t e = 0; e < ds.samples[i].image.size(); ++e) {
            CHECK(back.samples[i].image[e] ==
                  static_cast<real>(static_cast<float>(ds.samples[i].image[e])));
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("pretrain dataset covers every concept") {
    const Dataset ds = build_pretrain_dataset(3, 5);
    CHECK(ds.samples.size() == 36);
    std::set<std::string> caps;
    for (const auto& s : ds.samples) caps.insert(s.caption);
    CHECK(caps.size() == 12);
}
