#pragma once

// Small decoder-only transformer with named adapter injection points at its
// projections, supervised fine-tuning loss over target spans, and greedy
// decoding. Weights are trainable during brief next-token pretraining, then
// frozen and checksummed.

#include <span>
#include <string>
#include <vector>

#include "p2p/corpus.hpp"
#include "p2p/lora.hpp"
#include "p2p/tensor.hpp"

namespace p2p {

inline constexpr std::string_view kBaseMagic = "P2PLM1";

struct LMConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;  // set from the tokenizer
    int max_seq = 256;
    std::vector<std::string> target_modules = {"q_proj", "v_proj"};

    void validate() const;
    // (d_in, d_out) of a named projection
    std::pair<int, int> module_dims(const std::string& module) const;
    // target_modules x layers in canonical (layer, module) order
    std::vector<PositionIndex> adapter_positions() const;
};

// one training example: token sequence plus per-position next-token targets
// (-1 outside the loss span)
struct TokenizedExample {
    std::vector<int> tokens;
    std::vector<int> targets;
    int target_count = 0;
};

class BaseLm {
public:
    static BaseLm init(const LMConfig& cfg, uint64_t seed);

    // causal forward pass; with adapters, every targeted projection computes
    // W0 x + (alpha/r) B A x
    Tensor forward(Graph& g, std::span<const int> tokens, const AdapterSet* adapters) const;

    // mean next-token cross-entropy pooled over the target spans of a batch
    Tensor sft_loss(Graph& g, std::span<const TokenizedExample> batch,
                    const AdapterSet* adapters) const;

    // argmax decoding, ties to the lowest token id; stops at EOS or max_new
    std::vector<int> generate_greedy(std::span<const int> prompt, const AdapterSet* adapters,
                                     int max_new) const;

    const LMConfig& config() const { return cfg_; }
    const Tensor& module_weight(const std::string& module, int layer) const;
    // mutable handles on every weight tensor, serialization order (pretraining)
    std::vector<Tensor> parameters();

    void freeze();
    bool frozen() const { return frozen_; }
    uint32_t weights_checksum() const;  // over the serialized payload

    std::string serialize() const;
    void save(const std::string& path) const;
    static BaseLm load(const std::string& path);

    // [BOS] input [SEP] output [EOS]; loss on the output span plus EOS.
    // Overlong inputs are truncated from the front, targets stay whole.
    static TokenizedExample format_example(const Vocab& vocab, std::string_view input,
                                           std::string_view output, int max_seq);
    // [BOS] input [SEP], truncated from the front to max_seq - reserve
    static std::vector<int> format_prompt(const Vocab& vocab, std::string_view input,
                                          int max_seq, int reserve);

private:
    struct LayerWeights {
        Tensor attn_norm;  // [d_model]
        Tensor q, k, v, o;  // [d_model, d_model] as [d_out, d_in]
        Tensor ffn_norm;   // [d_model]
        Tensor up;         // [d_ff, d_model]
        Tensor down;       // [d_model, d_ff]
    };

    Tensor project(Graph& g, const Tensor& x, const std::string& module, int layer,
                   const AdapterSet* adapters) const;
    void check_adapters(const AdapterSet& a) const;
    void for_each_weight(
        const std::function<void(const std::string&, const Tensor&)>& fn) const;

    LMConfig cfg_;
    Tensor tok_emb_;     // [vocab, d_model]
    Tensor pos_emb_;     // [max_seq, d_model]
    std::vector<LayerWeights> layers_;
    Tensor final_norm_;  // [d_model]
    Tensor head_;        // [vocab, d_model]
    bool frozen_ = false;
};

// Brief next-token pretraining over raw corpus token streams; the model is
// frozen afterwards.
struct PretrainConfig {
    int steps = 1200;
    int batch = 12;
    int window = 48;
    double lr = 3e-3;
    double grad_clip = 1.0;
    uint64_t seed = 0;
    int jobs = 1;
};

// returns the last recorded training loss
double pretrain_base(BaseLm& lm, const std::vector<std::vector<int>>& sequences,
                     const PretrainConfig& cfg);

}  // namespace p2p
