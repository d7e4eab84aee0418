#pragma once

// Low-rank adapter factors, delta application, weight merging, and the
// bit-exact adapter file format.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "p2p/tensor.hpp"

namespace p2p {

// (module, layer) coordinate of one adapted projection
struct PositionIndex {
    std::string module;
    int layer = 0;

    // canonical order: by layer, then module name
    bool operator<(const PositionIndex& o) const {
        if (layer != o.layer) return layer < o.layer;
        return module < o.module;
    }
    bool operator==(const PositionIndex& o) const {
        return layer == o.layer && module == o.module;
    }
    std::string str() const { return strcat_msg(module, "@", layer); }
};

struct LoraFactors {
    Tensor A;  // [rank, d_in]
    Tensor B;  // [d_out, rank]
    int rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / rank; }
    int d_in() const { return A.dim(1); }
    int d_out() const { return B.dim(0); }
    void validate(const char* where) const;
};

// y = (alpha/rank) * B (A x)
std::vector<double> delta_apply(std::span<const double> x, const LoraFactors& f);

// W' = W0 + (alpha/rank) * B A; not idempotent
Tensor merge(const Tensor& w0, const LoraFactors& f);

inline constexpr int kDefaultLoraRank = 8;
inline constexpr double kDefaultLoraAlpha = 16.0;
inline constexpr std::string_view kAdapterMagic = "P2PAD1";

// Complete set of adapter factors keyed by position, bound to a specific
// base checkpoint via its checksum. Rank and alpha are uniform.
class AdapterSet {
public:
    AdapterSet() = default;
    AdapterSet(int rank, double alpha, uint32_t base_checksum);

    void insert(PositionIndex pos, LoraFactors f);
    bool has(const std::string& module, int layer) const;
    const LoraFactors& at(const std::string& module, int layer) const;
    const std::map<PositionIndex, LoraFactors>& entries() const { return entries_; }

    int rank() const { return rank_; }
    double alpha() const { return alpha_; }
    uint32_t base_checksum() const { return base_checksum_; }
    size_t size() const { return entries_.size(); }

    // keys must exactly cover `expected`
    void validate_positions(std::span<const PositionIndex> expected) const;

    std::string serialize() const;
    void save(const std::string& path) const;
    static AdapterSet deserialize(const std::string& bytes, const std::string& origin);
    static AdapterSet load(const std::string& path);
    // load + verify the set was built for the given base checksum
    static AdapterSet load_checked(const std::string& path, uint32_t expected_base_checksum);

private:
    std::map<PositionIndex, LoraFactors> entries_;
    int rank_ = 0;
    double alpha_ = 0.0;
    uint32_t base_checksum_ = 0;
};

}  // namespace p2p
