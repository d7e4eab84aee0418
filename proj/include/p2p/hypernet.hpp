#pragma once

// The adapter generator: a user embedding is concatenated with learnable
// module and depth embeddings per adapted position, pushed through a shared
// MLP (batched over all positions), and the flat output is reshaped into
// low-rank factor pairs. The final MLP layer is zero-initialized so that a
// fresh generator reproduces the base model exactly.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "p2p/base_lm.hpp"
#include "p2p/lora.hpp"
#include "p2p/tensor.hpp"

namespace p2p {

inline constexpr std::string_view kHyperNetMagic = "P2PHN1";

struct HyperNetConfig {
    int d_emb = 64;
    int d_mod = 16;
    int d_dep = 16;
    int hidden = 256;
    int rank = kDefaultLoraRank;
    double alpha = kDefaultLoraAlpha;
};

class HyperNetwork {
public:
    static HyperNetwork init(const HyperNetConfig& cfg, const LMConfig& lm_cfg, uint64_t seed);

    // adapter factors as graph nodes, differentiable into the generator
    // parameters; e must be the embedder's unit (or zero) vector
    AdapterSet generate(Graph& g, std::span<const double> e, uint32_t base_checksum) const;
    // convenience for deployment paths that do not need gradients
    AdapterSet generate(std::span<const double> e, uint32_t base_checksum) const;

    // [e || E_mod[module] || E_dep[layer]] as a rank-1 tensor
    Tensor position_input(Graph& g, std::span<const double> e, const std::string& module,
                          int layer) const;

    // trainable parameters in serialization order
    std::vector<Tensor> parameters();

    const HyperNetConfig& config() const { return cfg_; }
    int n_positions() const;
    int module_index(const std::string& module) const;  // row into the module table

    std::string serialize() const;
    void save(const std::string& path) const;
    static HyperNetwork load(const std::string& path);
    uint32_t params_checksum() const;

private:
    struct Head {
        int d_in = 0, d_out = 0;
        Tensor w3;  // [rank*(d_in+d_out), hidden], zero-initialized
        Tensor b3;  // [rank*(d_in+d_out)]
    };

    HyperNetConfig cfg_;
    int n_layers_ = 0;
    std::vector<std::string> modules_;            // row order of e_mod_
    std::vector<std::pair<int, int>> module_dims_;  // aligned with modules_
    Tensor e_mod_;  // [n_modules, d_mod]
    Tensor e_dep_;  // [n_layers, d_dep]
    Tensor w1_, b1_, w2_, b2_;
    std::map<std::pair<int, int>, Head> heads_;  // keyed by (d_in, d_out)
};

// split a flat rank-1 vector of length r*(d_in+d_out) into A [r, d_in]
// row-major followed by B [d_out, r] row-major
std::pair<Tensor, Tensor> unflatten(Graph& g, const Tensor& v, int d_in, int d_out, int r);

}  // namespace p2p
