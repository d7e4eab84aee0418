#include "p2p/embedder.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "p2p/corpus.hpp"

namespace p2p {

std::string canonicalize_profile(std::string_view text, int max_chars) {
    if (static_cast<int>(text.size()) > max_chars) text = text.substr(0, max_chars);
    while (!text.empty()) {
        const char c = text.back();
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            text.remove_suffix(1);
        } else {
            break;
        }
    }
    return std::string(text);
}

uint64_t profile_hash(std::string_view text, int max_chars) {
    return fnv1a64(canonicalize_profile(text, max_chars));
}

Embedder::Embedder(int d_emb, uint64_t seed, int max_chars)
    : d_emb_(d_emb), max_chars_(max_chars), seed_(seed) {
    require(d_emb >= 1, "Embedder: d_emb must be >= 1");
    backend_id_ = strcat_msg("hashed-tfidf-v1:d", d_emb_, ":seed", seed_);
    Rng rng(seed_);
    const int feat = 2 * d_emb_;
    proj_.resize(static_cast<size_t>(feat) * d_emb_);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(feat));
    for (double& v : proj_) v = rng.normal(0.0, stddev);
}

UserEmbedding Embedder::encode(std::string_view profile_text) const {
    UserEmbedding out;
    out.backend_id = backend_id_;
    const std::string canon = canonicalize_profile(profile_text, max_chars_);
    out.source_hash = fnv1a64(canon);
    out.e.assign(static_cast<size_t>(d_emb_), 0.0);

    auto tokens = word_tokens(canon);
    if (tokens.empty()) {
        out.empty_warning = true;
        return out;
    }

    // tf over the whole text, df over its lines
    std::map<std::string, int64_t> tf;
    std::map<std::string, int> df;
    {
        for (const auto& t : tokens) ++tf[t];
        std::istringstream lines{canon};
        std::string line;
        int64_t n_lines = 0;
        std::vector<std::map<std::string, int>> line_tokens;
        while (std::getline(lines, line)) {
            ++n_lines;
            std::map<std::string, int> local;
            for (const auto& t : word_tokens(line)) ++local[t];
            for (const auto& [t, c] : local) ++df[t];
        }
        const int feat = 2 * d_emb_;
        std::vector<double> features(static_cast<size_t>(feat), 0.0);
        for (const auto& [t, c] : tf) {
            const double w = (1.0 + std::log(static_cast<double>(c))) *
                             (std::log((1.0 + static_cast<double>(n_lines)) / (1.0 + df[t])) +
                              1.0);
            const uint64_t h = fnv1a64(t, seed_ ^ 0xA5A5A5A5A5A5A5A5ull);
            const size_t idx = static_cast<size_t>(h % static_cast<uint64_t>(feat));
            const double sign = ((h >> 61) & 1) ? -1.0 : 1.0;
            features[idx] += sign * w;
        }
        for (int j = 0; j < d_emb_; ++j) {
            double acc = 0.0;
            for (int i = 0; i < feat; ++i)
                acc += features[static_cast<size_t>(i)] *
                       proj_[static_cast<size_t>(i) * d_emb_ + j];
            out.e[static_cast<size_t>(j)] = acc;
        }
    }

    double norm = 0.0;
    for (double v : out.e) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
        for (double& v : out.e) v /= norm;
    } else {
        out.empty_warning = true;
    }
    return out;
}

uint32_t Embedder::state_checksum() const {
    Crc32 c;
    c.update(proj_.data(), proj_.size() * sizeof(double));
    c.update(backend_id_);
    return c.value();
}

ExternalEmbeddings ExternalEmbeddings::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open embedding table: ", path);
    ExternalEmbeddings table;
    table.origin_ = path;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row{line};
        std::string hex;
        row >> hex;
        uint64_t hash = 0;
        try {
            hash = std::stoull(hex, nullptr, 16);
        } catch (const std::exception&) {
            fail(path, ":", line_no, ": bad hash field \"", hex, "\"");
        }
        std::vector<double> v;
        double x;
        while (row >> x) v.push_back(x);
        if (v.empty()) fail(path, ":", line_no, ": no embedding values");
        if (table.d_emb_ == 0) {
            table.d_emb_ = static_cast<int>(v.size());
        } else if (static_cast<int>(v.size()) != table.d_emb_) {
            fail(path, ":", line_no, ": dimension ", v.size(), " differs from ", table.d_emb_);
        }
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        if (norm > 0.0)
            for (double& e : v) e /= norm;
        table.table_[hash] = std::move(v);
    }
    return table;
}

UserEmbedding ExternalEmbeddings::lookup(uint64_t source_hash) const {
    auto it = table_.find(source_hash);
    if (it == table_.end()) {
        char hex[32];
        std::snprintf(hex, sizeof hex, "%016llx",
                      static_cast<unsigned long long>(source_hash));
        fail("unknown profile hash ", hex, " in embedding table ", origin_);
    }
    UserEmbedding out;
    out.e = it->second;
    out.backend_id = strcat_msg("external:", origin_);
    out.source_hash = source_hash;
    return out;
}

}  // namespace p2p
