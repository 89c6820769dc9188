#include "masqlab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "json.hpp"
#include "masqlab/errors.hpp"
#include "masqlab/rng.hpp"
#include "masqlab/sha256.hpp"

namespace masqlab::attack {

const char* mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::benign: return "benign";
        case TrainMode::naive_poisoned: return "naive";
        case TrainMode::masq: return "masq";
    }
    return "?";
}

TrainMode parse_mode(const std::string& s) {
    if (s == "benign") return TrainMode::benign;
    if (s == "naive" || s == "naive_poisoned") return TrainMode::naive_poisoned;
    if (s == "masq") return TrainMode::masq;
    throw ConfigError("unknown training mode: '" + s + "'");
}

TrainConfig TrainConfig::normalized() const {
    TrainConfig c = *this;
    if (c.mode == TrainMode::benign) c.poison_rate = 0.0;
    if (c.mode == TrainMode::naive_poisoned) {
        c.lambda = 0.0;
        c.alpha = 0.0;
    }
    return c;
}

void TrainConfig::validate() const {
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lr_unet <= 0.0 || lr_text <= 0.0) throw ConfigError("learning rates must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (poison_rate < 0.0 || poison_rate >= 1.0) throw ConfigError("poison_rate in [0,1)");
}

std::string TrainConfig::canonical_json() const {
    nlohmann::json j;
    j["alpha"] = alpha;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["lambda"] = lambda;
    j["lr_text"] = lr_text;
    j["lr_unet"] = lr_unet;
    j["mode"] = mode_name(mode);
    j["poison_rate"] = poison_rate;
    j["rank_text"] = ranks.text;
    j["rank_unet"] = ranks.unet;
    j["seed"] = seed;
    return j.dump();
}

std::string TrainConfig::config_hash() const { return sha256_hex(canonical_json()); }

real contrastive_loss(const std::vector<Tensor>& anchors, const Tensor& e_p,
                      const Tensor& e_n) {
    if (anchors.empty()) throw ConfigError("contrastive_loss: empty anchor set");
    const real np = norm2(e_p);
    const real nn = norm2(e_n);
    if (np == 0.0 || nn == 0.0) {
        throw NumericError("contrastive_loss: cosine undefined for zero-norm vector");
    }
    real total = 0.0;
    for (const Tensor& a : anchors) {
        const real na = norm2(a);
        if (na == 0.0) {
            throw NumericError("contrastive_loss: cosine undefined for zero-norm vector");
        }
        const real s_p = dot(a, e_p) / (na * np);
        const real s_n = dot(a, e_n) / (na * nn);
        total += (1.0 - s_p) * (1.0 - s_p) + (1.0 + s_n) * (1.0 + s_n);
    }
    return total / static_cast<real>(anchors.size());
}

real timestep_weight(int t, int T, real alpha, bool is_poisoned) {
    if (t < 1 || t > T) throw ConfigError("timestep_weight: t outside [1, T]");
    if (!is_poisoned) return 1.0;
    return 1.0 + alpha * static_cast<real>(t) / static_cast<real>(T);
}

BatchDraws draw_batch(std::uint64_t run_seed, int epoch, std::int64_t sample_offset, int batch,
                      int T, int canvas) {
    BatchDraws d;
    d.t_steps.resize(static_cast<std::size_t>(batch));
    d.eps = Tensor({batch, 3, canvas, canvas});
    const std::int64_t item = static_cast<std::int64_t>(3) * canvas * canvas;
    for (int b = 0; b < batch; ++b) {
        const std::uint64_t idx = (static_cast<std::uint64_t>(epoch) << 32) |
                                  static_cast<std::uint64_t>(sample_offset + b);
        Rng rng(derive_seed(run_seed, "draw", idx));
        d.t_steps[static_cast<std::size_t>(b)] = static_cast<int>(rng.randint(1, T));
        real* dst = d.eps.data() + b * item;
        for (std::int64_t i = 0; i < item; ++i) dst[i] = rng.normal();
    }
    return d;
}

namespace {

// trigger-token contextual states under the current adapters, outside
// any tape (monitoring path)
std::vector<Tensor> monitor_trigger_states(const BaseModel& base,
                                           const toyworld::ConceptTriple& triple,
                                           const adapter::AdapterSet& adapters) {
    return textenc::trigger_token_states(base.params, triple.trigger, triple, adapters);
}

real cosine(const Tensor& a, const Tensor& b) {
    const real na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine undefined for zero-norm vector");
    return dot(a, b) / (na * nb);
}

Tensor mean_of(const std::vector<Tensor>& vs) {
    Tensor m = Tensor::zeros(vs.front().shape());
    for (const Tensor& v : vs) {
        for (std::int64_t i = 0; i < m.size(); ++i) m[i] += v[i];
    }
    for (std::int64_t i = 0; i < m.size(); ++i) m[i] /= static_cast<real>(vs.size());
    return m;
}

}  // namespace

StepEval eval_step(const BaseModel& base, const adapter::AdapterSet& adapters,
                   const TrainConfig& cfg, const toyworld::ConceptTriple& triple,
                   const std::vector<const toyworld::ToySample*>& batch,
                   const BatchDraws& draws, const Tensor& e_p, const Tensor& e_n,
                   bool want_grads) {
    const int B = static_cast<int>(batch.size());
    if (B == 0) throw ConfigError("eval_step: empty batch");
    const diffusion::NoiseSchedule& ns = base.schedule;
    const int canvas = batch.front()->image.dim(1);

    Tape tape;
    Binder params(tape, base.params);
    params.bind_all([](const std::string&) { return false; });  // base frozen
    adapter::AdapterBinder abinder(tape, &adapters, want_grads);

    // conditioning from (possibly adapted) text encoder
    std::vector<std::string> captions;
    captions.reserve(static_cast<std::size_t>(B));
    bool trigger_present = false;
    for (const auto* s : batch) {
        captions.push_back(s->caption);
        if (s->caption.find(triple.trigger) != std::string::npos) trigger_present = true;
    }
    textenc::Forward text = textenc::encode_batch(tape, params, abinder, captions);

    // z_t from the fixed draws
    Tensor z({B, 3, canvas, canvas});
    Tensor weights({B});
    const std::int64_t item = static_cast<std::int64_t>(3) * canvas * canvas;
    int n_poison = 0;
    for (int b = 0; b < B; ++b) {
        const toyworld::ToySample& s = *batch[static_cast<std::size_t>(b)];
        const int t = draws.t_steps[static_cast<std::size_t>(b)];
        Tensor x = to_model_space(s.image);
        Tensor eps_b(x.shape());
        std::copy(draws.eps.data() + b * item, draws.eps.data() + (b + 1) * item,
                  eps_b.data());
        Tensor zb = diffusion::forward_diffuse(x, t, eps_b, ns);
        std::copy(zb.data(), zb.data() + item, z.data() + b * item);
        weights[b] = timestep_weight(t, ns.T, cfg.alpha, s.is_poisoned);
        n_poison += s.is_poisoned ? 1 : 0;
    }

    Var zv = tape.constant(std::move(z));
    Var eps_hat = diffusion::predict_noise_batch(tape, params, abinder, zv, draws.t_steps,
                                                 ns, text.token_states);
    Var per_sample = tape.mse_per_sample(eps_hat, draws.eps);
    Var l_tw = tape.weighted_mean(per_sample, weights);

    Var l_total = l_tw;
    real l_con_value = 0.0;
    if (trigger_present && cfg.lambda != 0.0) {
        textenc::Forward trig = textenc::encode_batch(tape, params, abinder, {triple.trigger});
        const auto positions = textenc::trigger_token_positions(triple.trigger, triple.benign);
        std::vector<std::pair<int, int>> idx;
        idx.reserve(positions.size());
        for (int pos : positions) idx.emplace_back(0, pos);
        Var anchors = tape.gather_rows3(trig.token_states, idx);
        Var s_p = tape.cos_rows_const(anchors, e_p);
        Var s_n = tape.cos_rows_const(anchors, e_n);
        Var term_p = tape.square(tape.add_scalar(tape.scale(s_p, -1.0), 1.0));
        Var term_n = tape.square(tape.add_scalar(s_n, 1.0));
        Var l_con = tape.mean_all(tape.add(term_p, term_n));
        l_con_value = tape.value(l_con)[0];
        l_total = tape.add(l_tw, tape.scale(l_con, cfg.lambda));
    } else if (trigger_present) {
        // lambda = 0: value reported for the log, no loss contribution
        const auto anchors = monitor_trigger_states(base, triple, adapters);
        l_con_value = contrastive_loss(anchors, e_p, e_n);
    }

    StepEval out;
    out.breakdown.l_total = tape.value(l_total)[0];
    out.breakdown.l_tw_mse = tape.value(l_tw)[0];
    out.breakdown.l_con = trigger_present ? l_con_value : 0.0;
    real wsum = 0.0;
    for (int b = 0; b < B; ++b) wsum += weights[b];
    out.breakdown.mean_w = wsum / static_cast<real>(B);
    out.breakdown.n_poison_in_batch = n_poison;

    if (want_grads) {
        tape.backward(l_total);
        out.adapter_grads = abinder.collect_grads();
    }
    return out;
}

namespace {

ParamStore lora_param_store(const adapter::AdapterSet& set) {
    ParamStore p;
    for (const auto& [path, a] : set.adapters) {
        p["lora." + path + ".A"] = a.A;
        p["lora." + path + ".B"] = a.B;
    }
    return p;
}

void write_back_lora(adapter::AdapterSet& set, const ParamStore& p) {
    for (auto& [path, a] : set.adapters) {
        a.A = p.at("lora." + path + ".A");
        a.B = p.at("lora." + path + ".B");
    }
}

}  // namespace

TrainResult train(const BaseModel& base, const TrainConfig& raw_cfg,
                  const toyworld::ConceptTriple& triple, const toyworld::Dataset& data) {
    if (!base.pretrained) throw StateError("train: base model is untrained");
    const TrainConfig cfg = raw_cfg.normalized();
    cfg.validate();
    triple.validate();
    const int n_poison = data.poison_count();
    if (cfg.mode == TrainMode::benign && n_poison != 0) {
        throw ConfigError("train: benign mode requires an unpoisoned dataset");
    }
    if (cfg.mode != TrainMode::benign && n_poison == 0) {
        throw ConfigError("train: poisoned modes require poisoned samples");
    }

    // frozen remap targets from the base encoder
    const Tensor e_p = textenc::encode(base.params, triple.target, nullptr).pooled;
    const Tensor e_n = textenc::encode(base.params, triple.benign, nullptr).pooled;

    adapter::AdapterSet set =
        adapter::init_adapters(cfg.ranks, std::nullopt, derive_seed(cfg.seed, "adapters"));
    set.metadata.triple = triple;
    set.metadata.config_hash = cfg.config_hash();
    set.metadata.seed = cfg.seed;

    ParamStore lora = lora_param_store(set);
    Adam opt;
    const auto lr_of = [&](const std::string& name) {
        return name.rfind("lora.text.", 0) == 0 ? cfg.lr_text : cfg.lr_unet;
    };

    TrainResult result;
    result.e_p = e_p;
    result.e_n = e_n;

    const int N = static_cast<int>(data.samples.size());
    const int canvas = data.samples.front().image.dim(1);
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<std::size_t>(N));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffler(derive_seed(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));
        shuffler.shuffle(order);

        for (int start = 0; start < N; start += cfg.batch_size) {
            const int B = std::min(cfg.batch_size, N - start);
            std::vector<const toyworld::ToySample*> batch;
            batch.reserve(static_cast<std::size_t>(B));
            for (int i = 0; i < B; ++i) {
                batch.push_back(&data.samples[static_cast<std::size_t>(
                    order[static_cast<std::size_t>(start + i)])]);
            }
            const BatchDraws draws =
                draw_batch(cfg.seed, epoch, start, B, base.schedule.T, canvas);

            StepEval ev = eval_step(base, set, cfg, triple, batch, draws, e_p, e_n, true);
            if (!std::isfinite(ev.breakdown.l_total)) {
                throw NumericError("training diverged at step " + std::to_string(step) +
                                   " (non-finite loss); last-good adapters are from step " +
                                   std::to_string(step - 1));
            }

            std::map<std::string, Tensor> grads;
            for (auto& [path, g] : ev.adapter_grads) {
                grads["lora." + path + ".A"] = std::move(g.first);
                grads["lora." + path + ".B"] = std::move(g.second);
            }
            opt.step(lora, grads, lr_of);
            write_back_lora(set, lora);

            ev.breakdown.step = step;
            const auto anchors = monitor_trigger_states(base, triple, set);
            ev.breakdown.s_p = cosine(mean_of(anchors), e_p);
            ev.breakdown.s_n = cosine(mean_of(anchors), e_n);
            result.log.push_back(ev.breakdown);
            ++step;
        }
    }
    result.adapters = std::move(set);
    return result;
}

BaseModel pretrain_base(const toyworld::Dataset& data, int epochs, std::uint64_t seed,
                        const PretrainOptions& opts) {
    if (epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
    // all 12 concepts must appear
    std::set<std::string> captions;
    for (const auto& s : data.samples) captions.insert(s.caption);
    for (const auto& c : toyworld::all_concepts()) {
        if (!captions.count(c.name())) {
            throw ConfigError("pretrain: dataset is missing concept '" + c.name() + "'");
        }
    }

    BaseModel model = BaseModel::fresh(seed);
    const int canvas = data.samples.front().image.dim(1);
    const std::int64_t item = static_cast<std::int64_t>(3) * canvas * canvas;

    // sampler-init statistics over the training data (model space)
    {
        Tensor mean = Tensor::zeros({3, canvas, canvas});
        for (const auto& s : data.samples) {
            const Tensor x = to_model_space(s.image);
            for (std::int64_t i = 0; i < item; ++i) mean[i] += x[i];
        }
        for (std::int64_t i = 0; i < item; ++i) {
            mean[i] /= static_cast<real>(data.samples.size());
        }
        real var = 0.0;
        for (const auto& s : data.samples) {
            const Tensor x = to_model_space(s.image);
            for (std::int64_t i = 0; i < item; ++i) {
                const real d = x[i] - mean[i];
                var += d * d;
            }
        }
        var /= static_cast<real>(data.samples.size()) * static_cast<real>(item);
        model.init_mean = std::move(mean);
        model.init_var = var;
    }

    Adam opt;
    const int N = static_cast<int>(data.samples.size());
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int> order(static_cast<std::size_t>(N));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffler(derive_seed(seed, "pretrain-order", static_cast<std::uint64_t>(epoch)));
        shuffler.shuffle(order);

        for (int start = 0; start < N; start += opts.batch_size) {
            const int B = std::min(opts.batch_size, N - start);
            const BatchDraws draws =
                draw_batch(derive_seed(seed, "pretrain"), epoch, start, B, model.schedule.T,
                           canvas);

            Tape tape;
            Binder params(tape, model.params);
            params.bind_all([](const std::string&) { return true; });
            adapter::AdapterBinder abinder(tape, nullptr, false);

            std::vector<std::string> caps;
            Tensor z({B, 3, canvas, canvas});
            for (int b = 0; b < B; ++b) {
                const toyworld::ToySample& s =
                    data.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
                caps.push_back(s.caption);
                Tensor x = to_model_space(s.image);
                Tensor eps_b(x.shape());
                std::copy(draws.eps.data() + b * item, draws.eps.data() + (b + 1) * item,
                          eps_b.data());
                Tensor zb = diffusion::forward_diffuse(
                    x, draws.t_steps[static_cast<std::size_t>(b)], eps_b, model.schedule);
                std::copy(zb.data(), zb.data() + item, z.data() + b * item);
            }

            textenc::Forward text = textenc::encode_batch(tape, params, abinder, caps);
            Var zv = tape.constant(std::move(z));
            Var eps_hat = diffusion::predict_noise_batch(tape, params, abinder, zv,
                                                         draws.t_steps, model.schedule,
                                                         text.token_states);
            Var per_sample = tape.mse_per_sample(eps_hat, draws.eps);
            Var loss = tape.weighted_mean(per_sample, Tensor::full({B}, 1.0));
            if (!std::isfinite(tape.value(loss)[0])) {
                throw NumericError("pretraining diverged (non-finite loss) in epoch " +
                                   std::to_string(epoch));
            }
            tape.backward(loss);
            std::map<std::string, Tensor> grads = params.collect_grads();
            opt.step(model.params, grads, [&](const std::string&) { return opts.lr; });
        }
    }
    model.pretrained = true;

    if (opts.run_gate) {
        const std::vector<toyworld::Concept> gate_concepts = {
            {toyworld::Color::red, toyworld::Shape::circle},
            {toyworld::Color::green, toyworld::Shape::square},
            {toyworld::Color::blue, toyworld::Shape::triangle},
            {toyworld::Color::yellow, toyworld::Shape::circle},
        };
        const int per = opts.gate_samples / static_cast<int>(gate_concepts.size());
        int correct = 0, total = 0;
        for (std::size_t ci = 0; ci < gate_concepts.size(); ++ci) {
            std::vector<std::uint64_t> seeds;
            for (int i = 0; i < per; ++i) {
                seeds.push_back(derive_seed(seed, "gate", ci * 100000ull +
                                                              static_cast<std::uint64_t>(i)));
            }
            const auto images =
                generate(model, gate_concepts[ci].name(), nullptr, seeds,
                         diffusion::SamplePlan::ddim(opts.gate_sampler_steps));
            for (const Tensor& img : images) {
                const auto res = toyworld::oracle_classify(img);
                correct += res.classified_as(gate_concepts[ci]) ? 1 : 0;
                ++total;
            }
        }
        const real acc = static_cast<real>(correct) / static_cast<real>(total);
        if (acc < opts.gate_accuracy) {
            throw NumericError("pretraining error: oracle gate accuracy " +
                               std::to_string(acc) + " below required " +
                               std::to_string(opts.gate_accuracy));
        }
    }
    return model;
}

}  // namespace masqlab::attack
