#include "doctest.h"

#include <atomic>
#include <cmath>
#include <vector>

#include "masqlab/rng.hpp"
#include "masqlab/sha256.hpp"
#include "masqlab/threads.hpp"

using namespace masqlab;

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex(std::string("")) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string(
              "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // chunked updates agree with one-shot
    Sha256 h;
    const std::string payload(100000, 'x');
    h.update(payload.data(), 40000);
    h.update(payload.data() + 40000, 60000);
    CHECK(h.hex_digest() == sha256_hex(payload));
}

TEST_CASE("rng streams are deterministic and splittable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(42);
    Rng child1 = c.split("x", 0);
    Rng child2 = c.split("x", 1);
    Rng child3 = c.split("y", 0);
    CHECK(child1.next_u64() != child2.next_u64());
    CHECK(child1.next_u64() != child3.next_u64());

    CHECK(derive_seed(1, "a", 0) != derive_seed(1, "a", 1));
    CHECK(derive_seed(1, "a", 0) != derive_seed(2, "a", 0));
    CHECK(derive_seed(1, "a", 0) == derive_seed(1, "a", 0));
}

TEST_CASE("rng uniform and normal look sane") {
    Rng rng(171);
    double sum = 0.0, sum2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 5e-3);

    sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = rng.normal();
        sum += g;
        sum2 += g * g;
    }
    CHECK(std::abs(sum / n) < 1e-2);
    CHECK(std::abs(sum2 / n - 1.0) < 2e-2);
}

TEST_CASE("randint covers both endpoints") {
    Rng rng(5);
    bool lo = false, hi = false;
    for (int i = 0; i < 1000; ++i) {
        const auto v = rng.randint(1, 10);
        CHECK(v >= 1);
        CHECK(v <= 10);
        lo = lo || v == 1;
        hi = hi || v == 10;
    }
    CHECK(lo);
    CHECK(hi);
}

TEST_CASE("parallel_for covers the range exactly once") {
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(1000, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) hits[static_cast<std::size_t>(i)]++;
    });
    for (const auto& h : hits) CHECK(h.load() == 1);
}
