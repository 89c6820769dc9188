#pragma once

#include <string>
#include <vector>

#include "masqlab/adapter.hpp"
#include "masqlab/nn.hpp"
#include "masqlab/tape.hpp"
#include "masqlab/tensor.hpp"
#include "masqlab/toyworld.hpp"

namespace masqlab::textenc {

constexpr int kModelDim = 64;
constexpr int kLayers = 2;
constexpr int kHeads = 4;
constexpr int kFfDim = 256;
constexpr int kMaxLen = 8;

struct Vocabulary {
    std::vector<std::string> tokens;
    int max_len = kMaxLen;
    int bos_id = 0;
    int eos_id = 1;
    int pad_id = 2;

    int size() const { return static_cast<int>(tokens.size()); }
    // ConfigError naming the word when unknown
    int id_of(const std::string& word) const;

    static const Vocabulary& builtin();
};

struct Tokenized {
    std::vector<int> ids;        // length max_len
    std::vector<bool> pad_mask;  // true at non-pad positions
};

// lowercase + whitespace-normalized; <bos> words <eos> <pad>...
Tokenized tokenize(const std::string& prompt);
// same, padded out to pad_to positions (>= max_len)
Tokenized tokenize_padded(const std::string& prompt, int pad_to);

// parameters under "text.*"; includes token/positional embeddings,
// two pre-LN attention+FF blocks, and a final LayerNorm
ParamStore init_params(Rng& rng);

// ---- tape forward (training path) ----
struct Forward {
    Var token_states;  // [B, L, D]
    Var pooled;        // [B, D] mean over non-pad positions
    Tensor pad_mask;   // [B, L] of 0/1
};

Forward encode_batch(Tape& tape, const Binder& params,
                     const adapter::AdapterBinder& adapters,
                     const std::vector<std::string>& prompts);

// forward over pre-tokenized prompts (all the same length; the bound
// positional table must cover that length)
Forward encode_tokens(Tape& tape, const Binder& params,
                      const adapter::AdapterBinder& adapters,
                      const std::vector<Tokenized>& tokens);

// ---- convenience inference path ----
struct PromptEmbedding {
    Tensor token_states;         // [L, D]
    Tensor pooled;               // [D]
    std::vector<bool> pad_mask;  // length L
};

PromptEmbedding encode(const ParamStore& params, const std::string& prompt,
                       const adapter::AdapterSet* adapters);

// positions of trigger tokens absent from the benign phrase (the
// modifier tokens), within the tokenized trigger prompt
std::vector<int> trigger_token_positions(const std::string& trigger,
                                         const std::string& benign);

// contextual states of those positions under the adapted encoder; rows
// populate the contrastive loss anchor set
std::vector<Tensor> trigger_token_states(const ParamStore& params, const std::string& prompt,
                                         const toyworld::ConceptTriple& triple,
                                         const adapter::AdapterSet& adapters);

}  // namespace masqlab::textenc
