#include "masqlab/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"

namespace masqlab::toyworld {

namespace fs = std::filesystem;

namespace {

// canonical shape sizes as fractions of the canvas width
constexpr double kCircleRadius = 0.35;
constexpr double kSquareHalfSide = 0.26;
constexpr double kTriangleCircumradius = 0.36;

double shape_extent(Shape s) {
    switch (s) {
        case Shape::circle: return kCircleRadius;
        case Shape::square: return kSquareHalfSide * 1.41421356237309515;  // corner
        case Shape::triangle: return kTriangleCircumradius;
    }
    return 0.0;
}

// signed distance (px) from point (x,y) to the shape boundary, centered
// at (cx,cy) with scale applied; negative inside
double shape_sdf(Shape s, double x, double y, double cx, double cy, double canvas,
                 double scale) {
    const double px = x - cx;
    const double py = y - cy;
    switch (s) {
        case Shape::circle: {
            const double r = kCircleRadius * canvas * scale;
            return std::sqrt(px * px + py * py) - r;
        }
        case Shape::square: {
            const double h = kSquareHalfSide * canvas * scale;
            return std::max(std::abs(px), std::abs(py)) - h;
        }
        case Shape::triangle: {
            // equilateral, vertex up (image y grows downward)
            const double r = kTriangleCircumradius * canvas * scale;
            const double e1 = py - r * 0.5;
            const double e2 = 0.8660254037844386 * px - 0.5 * (py + r);
            const double e3 = -0.8660254037844386 * px - 0.5 * (py + r);
            return std::max({e1, e2, e3});
        }
    }
    return 0.0;
}

}  // namespace

const char* color_name(Color c) {
    switch (c) {
        case Color::red: return "red";
        case Color::green: return "green";
        case Color::blue: return "blue";
        case Color::yellow: return "yellow";
    }
    return "?";
}

const char* shape_name(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
    }
    return "?";
}

std::string Concept::name() const {
    return std::string(color_name(color)) + " " + shape_name(shape);
}

Concept Concept::from_index(int idx) {
    if (idx < 0 || idx >= kConceptCount) throw ConfigError("concept index out of range");
    return Concept{static_cast<Color>(idx / kShapeCount), static_cast<Shape>(idx % kShapeCount)};
}

std::optional<Concept> Concept::parse(const std::string& name) {
    for (int i = 0; i < kConceptCount; ++i) {
        const Concept c = Concept::from_index(i);
        if (c.name() == name) return c;
    }
    return std::nullopt;
}

std::vector<Concept> all_concepts() {
    std::vector<Concept> out;
    out.reserve(kConceptCount);
    for (int i = 0; i < kConceptCount; ++i) out.push_back(Concept::from_index(i));
    return out;
}

void ConceptTriple::validate() const {
    if (!Concept::parse(benign)) {
        throw ConfigError("triple: benign prompt is not a concept name: '" + benign + "'");
    }
    if (!Concept::parse(target)) {
        throw ConfigError("triple: target prompt is not a concept name: '" + target + "'");
    }
    if (target == benign) throw ConfigError("triple: target must differ from benign");
    // trigger must strictly contain benign as a suffix: "<adjectives> <benign>"
    if (trigger.size() <= benign.size() + 1 ||
        trigger.compare(trigger.size() - benign.size(), benign.size(), benign) != 0 ||
        trigger[trigger.size() - benign.size() - 1] != ' ') {
        throw ConfigError("triple: trigger must be '<modifier(s)> " + benign + "', got '" +
                          trigger + "'");
    }
}

Concept ConceptTriple::target_concept() const { return *Concept::parse(target); }
Concept ConceptTriple::benign_concept() const { return *Concept::parse(benign); }

ConceptTriple ConceptTriple::defaults() {
    return ConceptTriple{"shiny red circle", "blue square", "red circle"};
}

void JitterParams::validate() const {
    if (max_offset < 0.0 || scale_lo <= 0.0 || scale_hi < scale_lo || color_jitter < 0.0) {
        throw ConfigError("jitter: malformed bounds");
    }
    // worst case over shapes: extent*scale_hi + offset + 1px AA feather
    double worst = 0.0;
    for (Shape s : {Shape::circle, Shape::square, Shape::triangle}) {
        worst = std::max(worst, shape_extent(s));
    }
    const double reach = worst * scale_hi * kCanvas + max_offset + 1.0;
    if (reach > kCanvas / 2.0) {
        throw ConfigError("jitter: bounds allow shapes to leave the canvas");
    }
}

const std::array<std::array<real, 3>, kColorCount>& palette() {
    static const std::array<std::array<real, 3>, kColorCount> p = {{
        {0.90, 0.10, 0.10},  // red
        {0.10, 0.75, 0.15},  // green
        {0.12, 0.20, 0.88},  // blue
        {0.95, 0.85, 0.10},  // yellow
    }};
    return p;
}

Tensor render_concept(const Concept& what, std::uint64_t seed, const JitterParams& jitter,
                      int canvas) {
    jitter.validate();
    Rng rng(seed);
    const double cx = canvas / 2.0 + rng.uniform(-jitter.max_offset, jitter.max_offset);
    const double cy = canvas / 2.0 + rng.uniform(-jitter.max_offset, jitter.max_offset);
    const double scale = rng.uniform(jitter.scale_lo, jitter.scale_hi);

    std::array<real, 3> fg = palette()[static_cast<int>(what.color)];
    for (auto& ch : fg) {
        ch = std::clamp(ch + rng.uniform(-jitter.color_jitter, jitter.color_jitter), 0.0, 1.0);
    }

    Tensor img({3, canvas, canvas});
    const std::int64_t hw = static_cast<std::int64_t>(canvas) * canvas;
    for (int i = 0; i < canvas; ++i) {
        for (int j = 0; j < canvas; ++j) {
            // light gray noise, identical across channels so the
            // background never passes the saturation threshold
            const real bg = rng.uniform(0.85, 1.0);
            const double d = shape_sdf(what.shape, j + 0.5, i + 0.5, cx, cy,
                                       static_cast<double>(canvas), scale);
            const real cov = std::clamp(0.5 - d, 0.0, 1.0);  // 1px feather
            const std::int64_t px = static_cast<std::int64_t>(i) * canvas + j;
            for (int c = 0; c < 3; ++c) {
                img[c * hw + px] = bg + cov * (fg[static_cast<std::size_t>(c)] - bg);
            }
        }
    }
    return img;
}

int Dataset::poison_count() const {
    int n = 0;
    for (const auto& s : samples) n += s.is_poisoned ? 1 : 0;
    return n;
}

Dataset build_finetune_dataset(const ConceptTriple& triple, int n, double poison_rate,
                               std::uint64_t seed, bool single_poison_image,
                               const JitterParams& jitter) {
    triple.validate();
    if (poison_rate < 0.0 || poison_rate >= 1.0) {
        throw ConfigError("poison_rate must be in [0, 1)");
    }
    if (n < 10) throw ConfigError("dataset size must be >= 10");

    const int n_poison = static_cast<int>(std::llround(n * poison_rate));
    const Concept target = triple.target_concept();
    const Concept benign = triple.benign_concept();

    Dataset ds;
    ds.poison_rate = poison_rate;
    ds.samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ToySample s;
        s.seed = derive_seed(seed, "sample", static_cast<std::uint64_t>(i));
        if (i < n_poison) {
            const std::uint64_t img_seed =
                single_poison_image ? derive_seed(seed, "sample", 0) : s.seed;
            s.image = render_concept(target, img_seed, jitter);
            s.caption = triple.trigger;
            s.is_poisoned = true;
        } else {
            s.image = render_concept(benign, s.seed, jitter);
            s.caption = triple.benign;
            s.is_poisoned = false;
        }
        ds.samples.push_back(std::move(s));
    }
    Rng shuffler(derive_seed(seed, "shuffle"));
    shuffler.shuffle(ds.samples);
    return ds;
}

Dataset build_pretrain_dataset(int per_concept, std::uint64_t seed,
                               const JitterParams& jitter) {
    if (per_concept < 1) throw ConfigError("per_concept must be >= 1");
    Dataset ds;
    ds.poison_rate = 0.0;
    ds.samples.reserve(static_cast<std::size_t>(per_concept) * kConceptCount);
    int i = 0;
    for (const Concept& c : all_concepts()) {
        for (int k = 0; k < per_concept; ++k, ++i) {
            ToySample s;
            s.seed = derive_seed(seed, "sample", static_cast<std::uint64_t>(i));
            s.image = render_concept(c, s.seed, jitter);
            s.caption = c.name();
            s.is_poisoned = false;
            ds.samples.push_back(std::move(s));
        }
    }
    Rng shuffler(derive_seed(seed, "shuffle"));
    shuffler.shuffle(ds.samples);
    return ds;
}

namespace {

// canonical binary masks (zero jitter, noise-free binarization)
const std::array<std::vector<std::uint8_t>, kShapeCount>& shape_masks() {
    static const auto masks = [] {
        std::array<std::vector<std::uint8_t>, kShapeCount> m;
        for (int s = 0; s < kShapeCount; ++s) {
            m[s].assign(kCanvas * kCanvas, 0);
            for (int i = 0; i < kCanvas; ++i) {
                for (int j = 0; j < kCanvas; ++j) {
                    const double d = shape_sdf(static_cast<Shape>(s), j + 0.5, i + 0.5,
                                               kCanvas / 2.0, kCanvas / 2.0, kCanvas, 1.0);
                    m[s][static_cast<std::size_t>(i) * kCanvas + j] = d < 0.0 ? 1 : 0;
                }
            }
        }
        return m;
    }();
    return masks;
}

// normalized cross-correlation of a binary foreground against a mask
// translated by (dx,dy), zeros outside the canvas
real ncc_shifted(const std::vector<std::uint8_t>& fg, const std::vector<std::uint8_t>& mask,
                 int dx, int dy) {
    const int n = kCanvas * kCanvas;
    double sum_f = 0.0, sum_m = 0.0;
    std::vector<std::uint8_t> shifted(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < kCanvas; ++i) {
        const int si = i - dy;
        if (si < 0 || si >= kCanvas) continue;
        for (int j = 0; j < kCanvas; ++j) {
            const int sj = j - dx;
            if (sj < 0 || sj >= kCanvas) continue;
            shifted[static_cast<std::size_t>(i) * kCanvas + j] =
                mask[static_cast<std::size_t>(si) * kCanvas + sj];
        }
    }
    for (int i = 0; i < n; ++i) {
        sum_f += fg[static_cast<std::size_t>(i)];
        sum_m += shifted[static_cast<std::size_t>(i)];
    }
    const double mf = sum_f / n;
    const double mm = sum_m / n;
    double num = 0.0, df = 0.0, dm = 0.0;
    for (int i = 0; i < n; ++i) {
        const double a = fg[static_cast<std::size_t>(i)] - mf;
        const double b = shifted[static_cast<std::size_t>(i)] - mm;
        num += a * b;
        df += a * a;
        dm += b * b;
    }
    if (df <= 0.0 || dm <= 0.0) return 0.0;
    return num / std::sqrt(df * dm);
}

}  // namespace

OracleResult oracle_classify(const Tensor& image) {
    OracleResult out;
    const int H = image.dim(1), W = image.dim(2);
    if (image.dim(0) != 3 || H != kCanvas || W != kCanvas) {
        throw ConfigError("oracle: expected [3," + std::to_string(kCanvas) + "," +
                          std::to_string(kCanvas) + "] image, got " + image.shape_str());
    }
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const real* r = image.data();
    const real* g = image.data() + hw;
    const real* b = image.data() + 2 * hw;

    std::vector<std::uint8_t> fg(static_cast<std::size_t>(hw), 0);
    double mean_rgb[3] = {0, 0, 0};
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
        const real mx = std::max({r[i], g[i], b[i]});
        const real mn = std::min({r[i], g[i], b[i]});
        if (mx - mn > kSaturationThreshold) {
            fg[static_cast<std::size_t>(i)] = 1;
            mean_rgb[0] += r[i];
            mean_rgb[1] += g[i];
            mean_rgb[2] += b[i];
            ++count;
        }
    }
    if (count == 0) {
        return out;  // unclassifiable, scores all zero
    }
    for (double& m : mean_rgb) m /= static_cast<double>(count);

    std::array<real, kColorCount> color_score;
    const real inv_max_dist = 1.0 / std::sqrt(3.0);
    for (int c = 0; c < kColorCount; ++c) {
        const auto& p = palette()[static_cast<std::size_t>(c)];
        double d2 = 0.0;
        for (int ch = 0; ch < 3; ++ch) {
            const double d = mean_rgb[ch] - p[static_cast<std::size_t>(ch)];
            d2 += d * d;
        }
        color_score[static_cast<std::size_t>(c)] =
            std::clamp(1.0 - std::sqrt(d2) * inv_max_dist, 0.0, 1.0);
    }

    std::array<real, kShapeCount> shape_score;
    for (int s = 0; s < kShapeCount; ++s) {
        real best = 0.0;
        for (int dy = -3; dy <= 3; ++dy) {
            for (int dx = -3; dx <= 3; ++dx) {
                best = std::max(best,
                                ncc_shifted(fg, shape_masks()[static_cast<std::size_t>(s)],
                                            dx, dy));
            }
        }
        shape_score[static_cast<std::size_t>(s)] = std::clamp(best, 0.0, 1.0);
    }

    int best_color = 0, best_shape = 0;
    for (int c = 1; c < kColorCount; ++c) {
        if (color_score[static_cast<std::size_t>(c)] >
            color_score[static_cast<std::size_t>(best_color)]) {
            best_color = c;
        }
    }
    for (int s = 1; s < kShapeCount; ++s) {
        if (shape_score[static_cast<std::size_t>(s)] >
            shape_score[static_cast<std::size_t>(best_shape)]) {
            best_shape = s;
        }
    }
    for (int c = 0; c < kColorCount; ++c) {
        for (int s = 0; s < kShapeCount; ++s) {
            out.scores[static_cast<std::size_t>(c * kShapeCount + s)] =
                color_score[static_cast<std::size_t>(c)] *
                shape_score[static_cast<std::size_t>(s)];
        }
    }
    out.label = Concept{static_cast<Color>(best_color), static_cast<Shape>(best_shape)};
    return out;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    using nlohmann::json;
    fs::create_directories(dir);
    json manifest;
    manifest["schema_version"] = 1;
    manifest["canvas"] = kCanvas;
    manifest["poison_rate"] = ds.poison_rate;
    json samples = json::array();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const ToySample& s = ds.samples[i];
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu.f32", i);
        json e;
        e["file"] = name;
        e["caption"] = s.caption;
        e["is_poisoned"] = s.is_poisoned;
        e["seed"] = s.seed;
        samples.push_back(e);

        // interleaved H x W x 3, little-endian float32
        const int H = s.image.dim(1), W = s.image.dim(2);
        const std::int64_t hw = static_cast<std::int64_t>(H) * W;
        std::string blob;
        blob.reserve(static_cast<std::size_t>(hw) * 12);
        for (std::int64_t px = 0; px < hw; ++px) {
            for (int c = 0; c < 3; ++c) {
                const float f = static_cast<float>(s.image[c * hw + px]);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                for (int k = 0; k < 4; ++k) {
                    blob.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
                }
            }
        }
        std::ofstream f(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
        if (!f) throw StateError("cannot write image file in " + dir);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    manifest["samples"] = samples;
    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!mf) throw StateError("cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    using nlohmann::json;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw StateError("dataset manifest not found in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::parse_error&) {
        throw ParseError("malformed dataset manifest in " + dir, 0);
    }
    Dataset ds;
    ds.poison_rate = manifest.at("poison_rate").get<double>();
    const int canvas = manifest.at("canvas").get<int>();
    for (const auto& e : manifest.at("samples")) {
        ToySample s;
        s.caption = e.at("caption").get<std::string>();
        s.is_poisoned = e.at("is_poisoned").get<bool>();
        s.seed = e.at("seed").get<std::uint64_t>();
        const std::string file = e.at("file").get<std::string>();
        std::ifstream f(fs::path(dir) / file, std::ios::binary);
        if (!f) throw StateError("missing image file: " + file);
        std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        const std::int64_t hw = static_cast<std::int64_t>(canvas) * canvas;
        if (static_cast<std::int64_t>(blob.size()) != hw * 12) {
            throw ParseError("image file has wrong size: " + file, blob.size());
        }
        s.image = Tensor({3, canvas, canvas});
        const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
        for (std::int64_t px = 0; px < hw; ++px) {
            for (int c = 0; c < 3; ++c) {
                std::uint32_t bits = 0;
                for (int k = 0; k < 4; ++k) {
                    bits |= static_cast<std::uint32_t>(p[(px * 3 + c) * 4 + k]) << (8 * k);
                }
                float fl;
                std::memcpy(&fl, &bits, 4);
                s.image[c * hw + px] = static_cast<real>(fl);
            }
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace masqlab::toyworld
