#include "masqlab/evalsuite.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"

namespace masqlab::evalsuite {

namespace {

std::vector<std::uint64_t> gen_seeds(std::uint64_t seed, const std::string& tag, int n) {
    std::vector<std::uint64_t> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.push_back(derive_seed(seed, tag, static_cast<std::uint64_t>(i)));
    }
    return out;
}

}  // namespace

AsrBreakdown asr_breakdown(const BaseModel& model, const adapter::AdapterSet& adapters,
                           const toyworld::ConceptTriple& triple, int n, std::uint64_t seed,
                           const diffusion::SamplePlan& plan) {
    if (n < 1) throw ConfigError("asr: n must be >= 1");
    triple.validate();
    const toyworld::Concept target = triple.target_concept();
    const toyworld::Concept benign = triple.benign_concept();

    const auto images = generate(model, triple.trigger, &adapters,
                                 gen_seeds(seed, "asr", n), plan);
    AsrBreakdown out;
    out.n = n;
    int hit = 0, ben = 0;
    for (const Tensor& img : images) {
        const auto res = toyworld::oracle_classify(img);
        if (res.classified_as(target)) {
            ++hit;
        } else if (res.classified_as(benign)) {
            ++ben;
        }
    }
    out.asr = static_cast<real>(hit) / n;
    out.frac_benign = static_cast<real>(ben) / n;
    out.frac_other = static_cast<real>(n - hit - ben) / n;
    return out;
}

real asr(const BaseModel& model, const adapter::AdapterSet& adapters,
         const toyworld::ConceptTriple& triple, int n, std::uint64_t seed,
         const diffusion::SamplePlan& plan) {
    return asr_breakdown(model, adapters, triple, n, seed, plan).asr;
}

real smi(const Tensor& x_star, const toyworld::Concept& y_p, const toyworld::Concept& y_n,
         real eps) {
    if (y_p == y_n) throw ConfigError("smi: concepts must be distinct");
    const auto res = toyworld::oracle_classify(x_star);
    const real s_p = res.scores[static_cast<std::size_t>(y_p.index())];
    const real s_n = res.scores[static_cast<std::size_t>(y_n.index())];
    return s_p / (s_n + eps);
}

real frechet_distance(const Tensor& features_a, const Tensor& features_b) {
    if (features_a.ndim() != 2 || features_b.ndim() != 2 ||
        features_a.dim(1) != features_b.dim(1)) {
        throw ConfigError("frechet: feature matrices must share the column count");
    }
    const int k = features_a.dim(1);
    const int na = features_a.dim(0), nb = features_b.dim(0);
    if (na < 2 || nb < 2) throw NumericError("frechet: need at least 2 samples per set");

    using EMat = Eigen::MatrixXd;
    using EVec = Eigen::VectorXd;
    auto fit = [&](const Tensor& f, int n) {
        Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            x(f.data(), n, k);
        EVec mu = x.colwise().mean().transpose();
        EMat centered = x.rowwise() - mu.transpose();
        EMat sigma = centered.transpose() * centered / static_cast<real>(n - 1);
        sigma += 1e-6 * EMat::Identity(k, k);
        return std::make_pair(mu, sigma);
    };
    const auto [mu_a, sig_a] = fit(features_a, na);
    const auto [mu_b, sig_b] = fit(features_b, nb);

    const real mean_term = (mu_a - mu_b).squaredNorm();

    EMat prod = sig_a * sig_b;
    EMat sym = 0.5 * (prod + prod.transpose());
    Eigen::SelfAdjointEigenSolver<EMat> es(sym);
    if (es.info() != Eigen::Success) throw NumericError("frechet: eigen decomposition failed");
    real sqrt_trace = 0.0;
    for (int i = 0; i < k; ++i) {
        sqrt_trace += std::sqrt(std::max(es.eigenvalues()[i], 0.0));
    }
    real d = mean_term + sig_a.trace() + sig_b.trace() - 2.0 * sqrt_trace;
    if (d < 0.0) {
        if (d < -1e-9) throw NumericError("frechet: distance significantly negative");
        d = 0.0;
    }
    return d;
}

Tensor oracle_features(const std::vector<Tensor>& images) {
    const int n = static_cast<int>(images.size());
    Tensor out({n, toyworld::kConceptCount});
    for (int i = 0; i < n; ++i) {
        const auto res = toyworld::oracle_classify(images[static_cast<std::size_t>(i)]);
        for (int j = 0; j < toyworld::kConceptCount; ++j) {
            out.at(i, j) = res.scores[static_cast<std::size_t>(j)];
        }
    }
    return out;
}

real alignment_score(const BaseModel& model, const adapter::AdapterSet* adapters,
                     const std::vector<std::string>& prompts, int n_per_prompt,
                     std::uint64_t seed, const diffusion::SamplePlan& plan) {
    if (prompts.empty() || n_per_prompt < 1) throw ConfigError("alignment: empty request");
    real total = 0.0;
    std::int64_t count = 0;
    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
        const auto parsed = toyworld::Concept::parse(prompts[pi]);
        if (!parsed) {
            throw ConfigError("alignment: prompt names no known concept: '" + prompts[pi] + "'");
        }
        const auto images = generate(model, prompts[pi], adapters,
                                     gen_seeds(seed, "align" + std::to_string(pi), n_per_prompt),
                                     plan);
        for (const Tensor& img : images) {
            const auto res = toyworld::oracle_classify(img);
            total += res.scores[static_cast<std::size_t>(parsed->index())];
            ++count;
        }
    }
    return total / static_cast<real>(count);
}

real ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ConfigError("ssim: shape mismatch");
    const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    constexpr int win = 8;
    constexpr real c1 = 0.01 * 0.01;
    constexpr real c2 = 0.03 * 0.03;
    real total = 0.0;
    std::int64_t windows = 0;
    for (int c = 0; c < C; ++c) {
        const real* pa = a.data() + static_cast<std::int64_t>(c) * H * W;
        const real* pb = b.data() + static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i + win <= H; i += win / 2) {
            for (int j = 0; j + win <= W; j += win / 2) {
                real ma = 0, mb = 0;
                for (int y = 0; y < win; ++y) {
                    for (int x = 0; x < win; ++x) {
                        ma += pa[(i + y) * W + j + x];
                        mb += pb[(i + y) * W + j + x];
                    }
                }
                const real inv = 1.0 / (win * win);
                ma *= inv;
                mb *= inv;
                real va = 0, vb = 0, cov = 0;
                for (int y = 0; y < win; ++y) {
                    for (int x = 0; x < win; ++x) {
                        const real da = pa[(i + y) * W + j + x] - ma;
                        const real db = pb[(i + y) * W + j + x] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va *= inv;
                vb *= inv;
                cov *= inv;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++windows;
            }
        }
    }
    return total / static_cast<real>(windows);
}

PairedDistance paired_generation_distance(const BaseModel& model,
                                          const adapter::AdapterSet* adapters_a,
                                          const adapter::AdapterSet* adapters_b,
                                          const std::vector<std::string>& prompts,
                                          int n_per_prompt, std::uint64_t seed,
                                          const diffusion::SamplePlan& plan) {
    if (prompts.empty() || n_per_prompt < 1) throw ConfigError("paired: empty request");
    PairedDistance out;
    real rmse_total = 0.0, ssim_total = 0.0;
    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
        const auto seeds = gen_seeds(seed, "paired" + std::to_string(pi), n_per_prompt);
        const auto imgs_a = generate(model, prompts[pi], adapters_a, seeds, plan);
        const auto imgs_b = generate(model, prompts[pi], adapters_b, seeds, plan);
        for (int i = 0; i < n_per_prompt; ++i) {
            const Tensor& x = imgs_a[static_cast<std::size_t>(i)];
            const Tensor& y = imgs_b[static_cast<std::size_t>(i)];
            real se = 0.0;
            for (std::int64_t e = 0; e < x.size(); ++e) {
                const real d = x[e] - y[e];
                se += d * d;
            }
            rmse_total += std::sqrt(se / static_cast<real>(x.size()));
            ssim_total += ssim(x, y);
            ++out.n;
        }
    }
    out.rmse = rmse_total / out.n;
    out.ssim = ssim_total / out.n;
    return out;
}

EvalReport evaluate(const BaseModel& model, const adapter::AdapterSet& subject,
                    const adapter::AdapterSet* reference,
                    const toyworld::ConceptTriple& triple, const EvalOptions& opts) {
    triple.validate();
    EvalReport r;
    r.seed = opts.seed;
    r.n_asr = opts.n_asr;
    r.n_benign = opts.n_benign;
    r.n_paired = opts.n_paired;
    r.frechet_reference = reference ? "benign-lora" : "base-model";

    const toyworld::Concept target = triple.target_concept();
    const toyworld::Concept benign = triple.benign_concept();

    // trigger-side: ASR and SMI over the same generations
    {
        const auto images = generate(model, triple.trigger, &subject,
                                     gen_seeds(opts.seed, "asr", opts.n_asr), opts.plan);
        int hit = 0;
        real smi_total = 0.0;
        for (const Tensor& img : images) {
            const auto res = toyworld::oracle_classify(img);
            hit += res.classified_as(target) ? 1 : 0;
            smi_total += res.scores[static_cast<std::size_t>(target.index())] /
                         (res.scores[static_cast<std::size_t>(benign.index())] + 1e-5);
        }
        r.asr = static_cast<real>(hit) / opts.n_asr;
        r.smi_mean = smi_total / opts.n_asr;
    }

    // benign-side: alignment, benign accuracy, SMI, and Frechet features
    {
        const auto images = generate(model, triple.benign, &subject,
                                     gen_seeds(opts.seed, "benign", opts.n_benign), opts.plan);
        int ok = 0;
        real align_total = 0.0, smi_total = 0.0;
        for (const Tensor& img : images) {
            const auto res = toyworld::oracle_classify(img);
            ok += res.classified_as(benign) ? 1 : 0;
            align_total += res.scores[static_cast<std::size_t>(benign.index())];
            smi_total += res.scores[static_cast<std::size_t>(target.index())] /
                         (res.scores[static_cast<std::size_t>(benign.index())] + 1e-5);
        }
        r.benign_accuracy = static_cast<real>(ok) / opts.n_benign;
        r.alignment_mean = align_total / opts.n_benign;
        r.smi_benign_mean = smi_total / opts.n_benign;

        const auto ref_images =
            generate(model, triple.benign, reference,
                     gen_seeds(opts.seed, "frechet-ref", opts.n_benign), opts.plan);
        r.frechet = frechet_distance(oracle_features(images), oracle_features(ref_images));
    }

    {
        const PairedDistance pd = paired_generation_distance(
            model, &subject, reference, {triple.benign}, opts.n_paired, opts.seed, opts.plan);
        r.paired_rmse = pd.rmse;
        r.paired_ssim = pd.ssim;
    }
    return r;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["asr"] = asr;
    j["smi_mean"] = smi_mean;
    j["smi_benign_mean"] = smi_benign_mean;
    j["frechet"] = frechet;
    j["frechet_reference"] = frechet_reference;
    j["alignment_mean"] = alignment_mean;
    j["benign_accuracy"] = benign_accuracy;
    j["paired_rmse"] = paired_rmse;
    j["paired_ssim"] = paired_ssim;
    j["n_asr"] = n_asr;
    j["n_benign"] = n_benign;
    j["n_paired"] = n_paired;
    j["seed"] = seed;
    return j.dump(2);
}

std::string EvalReport::csv_header() const {
    return "label,asr,smi_mean,smi_benign_mean,frechet,alignment_mean,benign_accuracy,"
           "paired_rmse,paired_ssim,n_asr,n_benign,n_paired,seed";
}

std::string EvalReport::csv_row(const std::string& label) const {
    std::ostringstream os;
    os.precision(9);
    os << label << "," << asr << "," << smi_mean << "," << smi_benign_mean << "," << frechet
       << "," << alignment_mean << "," << benign_accuracy << "," << paired_rmse << ","
       << paired_ssim << "," << n_asr << "," << n_benign << "," << n_paired << "," << seed;
    return os.str();
}

std::vector<ComposabilityRow> composability_experiment(
    const BaseModel& model, const adapter::AdapterSet& backdoor,
    const std::vector<adapter::AdapterSet>& benign_sets,
    const toyworld::ConceptTriple& triple, int n, std::uint64_t seed,
    const diffusion::SamplePlan& plan) {
    const int max_k = 1 + static_cast<int>(benign_sets.size());
    if (max_k > 4 + 1) throw ConfigError("composability: at most 4 stacked modules");
    std::vector<ComposabilityRow> rows;
    for (int k = 1; k <= std::min(max_k, 4); ++k) {
        std::vector<adapter::AdapterSet> to_stack = {backdoor};
        for (int i = 0; i < k - 1; ++i) {
            to_stack.push_back(benign_sets[static_cast<std::size_t>(i)]);
        }
        const adapter::AdapterSet stacked = adapter::stack(to_stack);
        ComposabilityRow row;
        row.k = k;
        row.asr = asr(model, stacked, triple, n, seed, plan);
        row.alignment = alignment_score(model, &stacked, {triple.benign}, n,
                                        derive_seed(seed, "compose-align"), plan);
        rows.push_back(row);
    }
    return rows;
}

std::string composability_csv(const std::vector<ComposabilityRow>& rows) {
    std::ostringstream os;
    os.precision(9);
    os << "k,asr,alignment\n";
    for (const auto& r : rows) os << r.k << "," << r.asr << "," << r.alignment << "\n";
    return os.str();
}

}  // namespace masqlab::evalsuite
