#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "masqlab/tensor.hpp"

namespace masqlab::toyworld {

// 4 colors x 3 shapes = 12 concepts. Images are [3,H,W] planar in
// memory and H*W*3 interleaved float32 on disk.
enum class Color : int { red = 0, green = 1, blue = 2, yellow = 3 };
enum class Shape : int { circle = 0, square = 1, triangle = 2 };

constexpr int kColorCount = 4;
constexpr int kShapeCount = 3;
constexpr int kConceptCount = kColorCount * kShapeCount;
constexpr int kCanvas = 32;

const char* color_name(Color c);
const char* shape_name(Shape s);

struct Concept {
    Color color;
    Shape shape;

    std::string name() const;
    int index() const { return static_cast<int>(color) * kShapeCount + static_cast<int>(shape); }
    static Concept from_index(int idx);
    // parses "red circle"; nullopt if not a concept name
    static std::optional<Concept> parse(const std::string& name);

    bool operator==(const Concept& o) const { return color == o.color && shape == o.shape; }
};

std::vector<Concept> all_concepts();

// prompt triple driving the attack; trigger = adjective(s) + benign name
struct ConceptTriple {
    std::string trigger;
    std::string target;
    std::string benign;

    void validate() const;  // ConfigError on violated invariants
    Concept target_concept() const;
    Concept benign_concept() const;

    static ConceptTriple defaults();  // "shiny red circle" -> "blue square"
};

struct JitterParams {
    double max_offset = 0.0;   // +- pixels, per axis
    double scale_lo = 1.0;
    double scale_hi = 1.0;
    double color_jitter = 0.0; // +- additive, per channel

    static JitterParams none() { return {}; }
    static JitterParams training() { return {2.0, 0.92, 1.06, 0.03}; }

    void validate() const;  // shapes must stay inside the canvas
};

// palette shared by the renderer and the oracle
const std::array<std::array<real, 3>, kColorCount>& palette();

// anti-aliased shape on a light noisy background; deterministic per seed
Tensor render_concept(const Concept& what, std::uint64_t seed,
                      const JitterParams& jitter, int canvas = kCanvas);

struct ToySample {
    Tensor image;
    std::string caption;
    bool is_poisoned = false;
    std::uint64_t seed = 0;
};

struct Dataset {
    std::vector<ToySample> samples;
    double poison_rate = 0.0;

    int poison_count() const;
};

// round(n*poison_rate) poisoned samples (caption = trigger, image renders
// the target concept); the rest benign; deterministic shuffle.
Dataset build_finetune_dataset(const ConceptTriple& triple, int n, double poison_rate,
                               std::uint64_t seed, bool single_poison_image = false,
                               const JitterParams& jitter = JitterParams::training());

// per_concept samples for each of the 12 concepts, captions = names
Dataset build_pretrain_dataset(int per_concept, std::uint64_t seed,
                               const JitterParams& jitter = JitterParams::training());

struct OracleResult {
    std::optional<Concept> label;       // nullopt = unclassifiable
    std::array<real, kConceptCount> scores{};  // in [0,1]

    bool classified_as(const Concept& c) const {
        return label.has_value() && *label == c;
    }
};

// Analytic judge: color by nearest palette mean over the saturation
// foreground; shape by translated cross-correlation against canonical
// masks; per-concept score = color score * shape score.
OracleResult oracle_classify(const Tensor& image);

constexpr real kSaturationThreshold = 0.25;

// dataset directory: manifest.json + one raw f32 file per image
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace masqlab::toyworld
