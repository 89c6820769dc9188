#include "masqlab/textenc.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "masqlab/errors.hpp"

namespace masqlab::textenc {

int Vocabulary::id_of(const std::string& word) const {
    for (int i = 0; i < size(); ++i) {
        if (tokens[static_cast<std::size_t>(i)] == word) return i;
    }
    throw ConfigError("unknown vocabulary word: '" + word + "'");
}

const Vocabulary& Vocabulary::builtin() {
    static const Vocabulary vocab = [] {
        Vocabulary v;
        v.tokens = {
            "<bos>", "<eos>", "<pad>",
            // concept words
            "red", "green", "blue", "yellow", "circle", "square", "triangle",
            // modifier vocabulary (probe scan + trigger candidates)
            "shiny", "cool", "big", "small", "nice", "new", "old", "fast", "slow",
            "dark", "bright", "tiny", "huge", "clean", "fancy", "plain",
            // template words
            "a", "an", "the", "photo", "picture", "of", "style", "with", "on",
        };
        return v;
    }();
    return vocab;
}

namespace {

std::vector<std::string> split_words(const std::string& prompt) {
    std::string lowered;
    lowered.reserve(prompt.size());
    for (char c : prompt) {
        lowered.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    std::istringstream iss(lowered);
    std::vector<std::string> words;
    std::string w;
    while (iss >> w) words.push_back(w);
    return words;
}

}  // namespace

Tokenized tokenize_padded(const std::string& prompt, int pad_to) {
    const Vocabulary& v = Vocabulary::builtin();
    if (pad_to < v.max_len) throw ConfigError("tokenize: pad_to below max_len");
    const auto words = split_words(prompt);
    if (static_cast<int>(words.size()) > v.max_len - 2) {
        throw ConfigError("prompt too long (" + std::to_string(words.size()) + " words, max " +
                          std::to_string(v.max_len - 2) + "): '" + prompt + "'");
    }
    Tokenized out;
    out.ids.reserve(static_cast<std::size_t>(pad_to));
    out.ids.push_back(v.bos_id);
    for (const auto& w : words) out.ids.push_back(v.id_of(w));
    out.ids.push_back(v.eos_id);
    while (static_cast<int>(out.ids.size()) < pad_to) out.ids.push_back(v.pad_id);
    out.pad_mask.assign(static_cast<std::size_t>(pad_to), false);
    for (int i = 0; i < static_cast<int>(words.size()) + 2; ++i) {
        out.pad_mask[static_cast<std::size_t>(i)] = true;
    }
    return out;
}

Tokenized tokenize(const std::string& prompt) {
    return tokenize_padded(prompt, Vocabulary::builtin().max_len);
}

ParamStore init_params(Rng& rng) {
    ParamStore p;
    const Vocabulary& v = Vocabulary::builtin();
    Rng r = rng.split("textenc");
    p["text.tok_embed"] = init_normal(r, {v.size(), kModelDim}, 0.02);
    p["text.pos_embed"] = init_normal(r, {kMaxLen, kModelDim}, 0.02);
    for (int l = 0; l < kLayers; ++l) {
        const std::string pre = "text.layer" + std::to_string(l) + ".";
        p[pre + "ln1.g"] = Tensor::full({kModelDim}, 1.0);
        p[pre + "ln1.b"] = Tensor::zeros({kModelDim});
        for (const char* proj : {"q", "k", "v", "o"}) {
            p[pre + "attn." + proj + ".w"] = init_xavier(r, kModelDim, kModelDim);
            p[pre + "attn." + proj + ".b"] = Tensor::zeros({kModelDim});
        }
        p[pre + "ln2.g"] = Tensor::full({kModelDim}, 1.0);
        p[pre + "ln2.b"] = Tensor::zeros({kModelDim});
        p[pre + "ff.fc1.w"] = init_xavier(r, kFfDim, kModelDim);
        p[pre + "ff.fc1.b"] = Tensor::zeros({kFfDim});
        p[pre + "ff.fc2.w"] = init_xavier(r, kModelDim, kFfDim);
        p[pre + "ff.fc2.b"] = Tensor::zeros({kModelDim});
    }
    p["text.ln_final.g"] = Tensor::full({kModelDim}, 1.0);
    p["text.ln_final.b"] = Tensor::zeros({kModelDim});
    return p;
}

Forward encode_batch(Tape& t, const Binder& params, const adapter::AdapterBinder& adapters,
                     const std::vector<std::string>& prompts) {
    std::vector<Tokenized> tokens;
    tokens.reserve(prompts.size());
    for (const auto& p : prompts) tokens.push_back(tokenize(p));
    return encode_tokens(t, params, adapters, tokens);
}

Forward encode_tokens(Tape& t, const Binder& params, const adapter::AdapterBinder& adapters,
                      const std::vector<Tokenized>& tokens) {
    const int B = static_cast<int>(tokens.size());
    if (B == 0) throw ConfigError("encode: empty batch");
    const int L = static_cast<int>(tokens.front().ids.size());
    const int D = kModelDim;
    const int dh = D / kHeads;

    std::vector<int> flat_ids;
    flat_ids.reserve(static_cast<std::size_t>(B) * L);
    Tensor pad_mask({B, L});
    for (int b = 0; b < B; ++b) {
        const Tokenized& tok = tokens[static_cast<std::size_t>(b)];
        if (static_cast<int>(tok.ids.size()) != L) {
            throw ConfigError("encode: ragged token batch");
        }
        for (int l = 0; l < L; ++l) {
            flat_ids.push_back(tok.ids[static_cast<std::size_t>(l)]);
            pad_mask.at(b, l) = tok.pad_mask[static_cast<std::size_t>(l)] ? 1.0 : 0.0;
        }
    }

    Var x = t.reshape(t.embed(params["text.tok_embed"], flat_ids), {B, L, D});
    x = t.add_rows_tile(x, params["text.pos_embed"]);

    for (int l = 0; l < kLayers; ++l) {
        const std::string pre = "text.layer" + std::to_string(l) + ".";
        const std::string apre = "text.layer" + std::to_string(l) + ".attn.";

        Var h = t.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"]);
        Var wq = adapters.weight(params[apre + "q.w"], apre + "q");
        Var wk = adapters.weight(params[apre + "k.w"], apre + "k");
        Var wv = adapters.weight(params[apre + "v.w"], apre + "v");
        Var wo = adapters.weight(params[apre + "o.w"], apre + "o");

        Var q = t.split_heads(linear(t, h, wq, params[apre + "q.b"]), kHeads);
        Var k = t.split_heads(linear(t, h, wk, params[apre + "k.b"]), kHeads);
        Var v = t.split_heads(linear(t, h, wv, params[apre + "v.b"]), kHeads);

        Var scores = t.scale(t.bmm_nt(q, k), 1.0 / std::sqrt(static_cast<real>(dh)));
        Var probs = t.masked_softmax(scores, pad_mask, kHeads);
        Var att = t.merge_heads(t.bmm(probs, v), kHeads);
        Var o = linear(t, att, wo, params[apre + "o.b"]);
        x = t.add(x, o);

        Var h2 = t.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"]);
        Var f = linear(t, h2, params[pre + "ff.fc1.w"], params[pre + "ff.fc1.b"]);
        f = t.silu(f);
        f = linear(t, f, params[pre + "ff.fc2.w"], params[pre + "ff.fc2.b"]);
        x = t.add(x, f);
    }
    x = t.layer_norm(x, params["text.ln_final.g"], params["text.ln_final.b"]);

    Forward out;
    out.token_states = x;
    out.pooled = t.masked_mean_rows(x, pad_mask);
    out.pad_mask = std::move(pad_mask);
    return out;
}

PromptEmbedding encode(const ParamStore& params, const std::string& prompt,
                       const adapter::AdapterSet* adapters) {
    Tape tape;
    Binder binder(tape, params);
    binder.bind_all([](const std::string&) { return false; });
    adapter::AdapterBinder abinder(tape, adapters, false);
    Forward fwd = encode_batch(tape, binder, abinder, {prompt});

    const Tensor& states = tape.value(fwd.token_states);
    const Tensor& pooled = tape.value(fwd.pooled);
    PromptEmbedding out;
    out.token_states = Tensor({kMaxLen, kModelDim});
    std::copy(states.data(), states.data() + states.size(), out.token_states.data());
    out.pooled = Tensor({kModelDim});
    std::copy(pooled.data(), pooled.data() + pooled.size(), out.pooled.data());
    out.pad_mask.resize(kMaxLen);
    for (int l = 0; l < kMaxLen; ++l) out.pad_mask[static_cast<std::size_t>(l)] =
        fwd.pad_mask.at(0, l) > 0.5;
    return out;
}

std::vector<int> trigger_token_positions(const std::string& trigger,
                                         const std::string& benign) {
    const auto trig_words = split_words(trigger);
    const auto benign_words = split_words(benign);
    const std::set<std::string> benign_set(benign_words.begin(), benign_words.end());
    std::vector<int> positions;
    for (std::size_t i = 0; i < trig_words.size(); ++i) {
        if (!benign_set.count(trig_words[i])) {
            // +1 for <bos>
            positions.push_back(static_cast<int>(i) + 1);
        }
    }
    if (positions.empty()) {
        throw ConfigError("trigger and benign prompts share every token: '" + trigger + "'");
    }
    return positions;
}

std::vector<Tensor> trigger_token_states(const ParamStore& params, const std::string& prompt,
                                         const toyworld::ConceptTriple& triple,
                                         const adapter::AdapterSet& adapters) {
    if (prompt != triple.trigger) {
        throw ConfigError("trigger_token_states: prompt must equal the trigger phrase");
    }
    const auto positions = trigger_token_positions(triple.trigger, triple.benign);
    const PromptEmbedding emb = encode(params, prompt, &adapters);
    std::vector<Tensor> out;
    out.reserve(positions.size());
    for (int pos : positions) {
        Tensor v({kModelDim});
        std::copy(emb.token_states.data() + static_cast<std::int64_t>(pos) * kModelDim,
                  emb.token_states.data() + static_cast<std::int64_t>(pos + 1) * kModelDim,
                  v.data());
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace masqlab::textenc
