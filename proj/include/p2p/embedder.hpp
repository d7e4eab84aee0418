#pragma once

// Frozen profile-text encoder: hashed TF-IDF features projected to a
// fixed-dimension unit vector, plus a file-backed table for embeddings
// computed by external systems.

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "p2p/common.hpp"

namespace p2p {

inline constexpr int kDefaultEmbDim = 64;
inline constexpr uint64_t kDefaultEmbSeed = 0x9E3779B97F4A7C15ull;

struct UserEmbedding {
    std::vector<double> e;  // unit norm, or exactly zero for empty text
    std::string backend_id;
    uint64_t source_hash = 0;
    bool empty_warning = false;
};

// trailing whitespace stripped, truncated to max_chars
std::string canonicalize_profile(std::string_view text, int max_chars = 2000);
uint64_t profile_hash(std::string_view text, int max_chars = 2000);

class Embedder {
public:
    explicit Embedder(int d_emb = kDefaultEmbDim, uint64_t seed = kDefaultEmbSeed,
                      int max_chars = 2000);

    UserEmbedding encode(std::string_view profile_text) const;

    int d_emb() const { return d_emb_; }
    const std::string& backend_id() const { return backend_id_; }
    uint32_t state_checksum() const;  // stability check: training must not move this

private:
    int d_emb_;
    int max_chars_;
    uint64_t seed_;
    std::string backend_id_;
    std::vector<double> proj_;  // [2*d_emb x d_emb], fixed at construction
};

// Text table of externally computed embeddings, one per line:
//   <16-hex source_hash> v0 v1 ... v{d-1}
// Vectors are L2-normalized on load.
class ExternalEmbeddings {
public:
    static ExternalEmbeddings load(const std::string& path);
    UserEmbedding lookup(uint64_t source_hash) const;  // unknown hash is an error
    int d_emb() const { return d_emb_; }
    size_t size() const { return table_.size(); }

private:
    int d_emb_ = 0;
    std::string origin_;
    std::unordered_map<uint64_t, std::vector<double>> table_;
};

}  // namespace p2p
