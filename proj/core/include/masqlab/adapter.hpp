#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "masqlab/tape.hpp"
#include "masqlab/tensor.hpp"
#include "masqlab/toyworld.hpp"

namespace masqlab::adapter {

// Low-rank factor pair for one projection. Effective delta is
// (scale_alpha / rank) * B * A with A [rank, d_in], B [d_out, rank].
struct LoraAdapter {
    std::string module_path;
    Tensor A;
    Tensor B;
    int rank = 0;
    real scale_alpha = 0.0;

    int d_in() const { return A.dim(1); }
    int d_out() const { return B.dim(0); }
    void validate() const;  // ConfigError on malformed factors
    Tensor delta() const;   // (scale_alpha/rank) * B * A
};

struct AdapterMetadata {
    std::optional<toyworld::ConceptTriple> triple;
    std::string config_hash;
    std::uint64_t seed = 0;
    int rank_text = 0;
    int rank_unet = 0;
    real scale_alpha_text = 0.0;
    real scale_alpha_unet = 0.0;
};

struct AdapterSet {
    std::map<std::string, LoraAdapter> adapters;  // keyed by module_path
    AdapterMetadata metadata;

    bool empty() const { return adapters.empty(); }
    const LoraAdapter* find(const std::string& path) const;
    std::int64_t parameter_count() const;  // sum of r*(d_in+d_out)
};

struct Ranks {
    int text = 8;
    int unet = 16;
};

// Injection targets: q/k/v/o in both text-encoder layers plus the
// denoiser cross-attention block. (d_in, d_out) per path.
const std::vector<std::pair<std::string, std::pair<int, int>>>& injection_targets();

// A ~ N(0, 1/r) (variance 1/r), B = 0, so the initial delta vanishes.
// scale_alpha defaults to the rank (net scale 1).
AdapterSet init_adapters(const Ranks& ranks, std::optional<real> scale_alpha,
                         std::uint64_t seed);

// W + (scale_alpha/rank) * B * A, pure
Tensor apply_delta(const Tensor& w_base, const LoraAdapter& a);

// Per-path delta sum, represented by concatenated factor pairs.
AdapterSet stack(const std::vector<AdapterSet>& sets);

// Container-format persistence (.msqlora). Round-trip is bit-exact.
void save(const AdapterSet& set, const std::string& path);
AdapterSet load(const std::string& path, std::vector<std::string>* warnings = nullptr);

// Registers adapter factors on a tape and produces injected projection
// weights. With a null/empty set, weight() returns the base Var.
class AdapterBinder {
public:
    AdapterBinder(Tape& tape, const AdapterSet* set, bool train);

    Var weight(Var w_base, const std::string& path) const;

    // gradients per path, in (A, B) order; only valid after backward()
    std::map<std::string, std::pair<Tensor, Tensor>> collect_grads() const;

private:
    Tape& tape_;
    const AdapterSet* set_;
    std::map<std::string, std::pair<Var, Var>> factors_;
};

}  // namespace masqlab::adapter
