#include "p2p/profile.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace p2p {

Bm25Index::Bm25Index(std::vector<std::vector<std::string>> doc_tokens, Bm25Params params)
    : docs_(std::move(doc_tokens)), params_(params) {
    int64_t total = 0;
    for (const auto& d : docs_) {
        doc_len_.push_back(static_cast<int>(d.size()));
        total += static_cast<int64_t>(d.size());
    }
    avg_len_ = docs_.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(docs_.size());
}

std::vector<double> Bm25Index::scores(std::span<const std::string> query_tokens) const {
    const double n = static_cast<double>(docs_.size());
    std::vector<double> out(docs_.size(), 0.0);
    if (docs_.empty() || avg_len_ == 0.0) return out;

    std::map<std::string, int> df;
    std::vector<std::map<std::string, int>> tf(docs_.size());
    for (size_t d = 0; d < docs_.size(); ++d) {
        for (const auto& t : docs_[d]) ++tf[d][t];
        for (const auto& [t, c] : tf[d]) ++df[t];
    }

    for (const auto& q : query_tokens) {
        auto dit = df.find(q);
        if (dit == df.end()) continue;
        const double idf =
            std::max(0.0, std::log((n - dit->second + 0.5) / (dit->second + 0.5)));
        if (idf == 0.0) continue;
        for (size_t d = 0; d < docs_.size(); ++d) {
            auto tit = tf[d].find(q);
            if (tit == tf[d].end()) continue;
            const double f = tit->second;
            const double norm =
                params_.k1 * (1.0 - params_.b + params_.b * doc_len_[d] / avg_len_);
            out[d] += idf * f * (params_.k1 + 1.0) / (f + norm);
        }
    }
    return out;
}

std::vector<RetrievedItem> bm25_rank(const std::string& query,
                                     std::span<const Interaction> history, int k,
                                     Bm25Params params) {
    require(k >= 0, "bm25_rank: k must be >= 0, got ", k);
    if (k == 0 || history.empty()) return {};

    std::vector<std::vector<std::string>> docs;
    docs.reserve(history.size());
    for (const auto& it : history)
        docs.push_back(word_tokens(strcat_msg(it.input, " ", it.output)));
    Bm25Index index(std::move(docs), params);
    std::vector<double> scores = index.scores(word_tokens(query));

    std::vector<size_t> order(history.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return history[a].seq_index < history[b].seq_index;
    });

    std::vector<RetrievedItem> out;
    const size_t take = std::min(static_cast<size_t>(k), history.size());
    for (size_t i = 0; i < take; ++i) {
        const Interaction& it = history[order[i]];
        out.push_back({it.seq_index, scores[order[i]],
                       strcat_msg(it.input, " => ", it.output)});
    }
    return out;
}

SummaryResult summarize(std::span<const Interaction> history, const TaskSpec& task,
                        int top_terms) {
    if (history.empty()) return {"", true};

    // TF-IDF over the user's outputs, each output one document
    std::map<std::string, int64_t> tf;
    std::map<std::string, int> df;
    for (const auto& it : history) {
        std::map<std::string, int> local;
        for (const auto& t : word_tokens(it.output)) {
            ++tf[t];
            ++local[t];
        }
        for (const auto& [t, c] : local) ++df[t];
    }
    const double n_docs = static_cast<double>(history.size());
    std::vector<std::pair<std::string, double>> scored;
    for (const auto& [t, c] : tf) {
        const double w = (1.0 + std::log(static_cast<double>(c))) *
                         (std::log((1.0 + n_docs) / (1.0 + df[t])) + 1.0);
        scored.emplace_back(t, w);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    std::string terms;
    const int take = std::min<int>(top_terms, static_cast<int>(scored.size()));
    for (int i = 0; i < take; ++i) {
        if (i) terms += ", ";
        terms += scored[static_cast<size_t>(i)].first;
    }

    std::string tail;
    if (task.kind == TaskKind::generation) {
        // most frequent output bigrams
        std::map<std::string, int64_t> bigrams;
        for (const auto& it : history) {
            auto words = word_tokens(it.output);
            for (size_t i = 0; i + 1 < words.size(); ++i)
                ++bigrams[strcat_msg(words[i], " ", words[i + 1])];
        }
        std::vector<std::pair<std::string, int64_t>> ranked(bigrams.begin(), bigrams.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        tail = "typical phrases: ";
        for (size_t i = 0; i < std::min<size_t>(2, ranked.size()); ++i) {
            if (i) tail += "; ";
            tail += ranked[i].first;
        }
        tail += ".";
    } else {
        // modal full output, ties to the lexicographically smallest
        std::map<std::string, int64_t> counts;
        for (const auto& it : history) ++counts[it.output];
        std::string modal;
        int64_t best = -1;
        for (const auto& [o, c] : counts) {
            if (c > best) {
                best = c;
                modal = o;
            }
        }
        tail = strcat_msg("typical output: ", modal, ".");
    }

    return {strcat_msg("user summary: frequent terms: ", terms, ". ", tail), false};
}

ProfileText build_profile(const std::string& query, const UserRecord& user,
                          const TaskSpec& task, int k, int max_chars) {
    ProfileText p;
    p.k = k;

    if (user.profile_text) {
        p.passthrough = true;
        p.rendered = *user.profile_text;
        return p;
    }

    auto hist = profile_span(user);
    if (hist.empty())
        fail("cold user \"", user.user_id, "\": no pre-split history and no profile");

    SummaryResult s = summarize(hist, task);
    p.summary = s.text;
    p.empty_summary = s.empty_history;
    p.retrieved = bm25_rank(query, hist, k);

    auto render = [&]() {
        std::string r = p.summary;
        r += "\n";
        r += kProfileSeparator;
        for (const auto& item : p.retrieved) {
            r += "\n";
            r += item.text;
        }
        return r;
    };
    p.rendered = render();
    while (static_cast<int>(p.rendered.size()) > max_chars && !p.retrieved.empty()) {
        p.retrieved.pop_back();  // lowest-scored first
        p.rendered = render();
    }
    return p;
}

std::string render_summary_only(const ProfileText& p) { return p.summary; }

std::string render_retrieved_only(const ProfileText& p) {
    std::string r;
    for (size_t i = 0; i < p.retrieved.size(); ++i) {
        if (i) r += "\n";
        r += p.retrieved[i].text;
    }
    return r;
}

std::string flatten_history(std::span<const Interaction> history) {
    std::string r;
    for (size_t i = 0; i < history.size(); ++i) {
        if (i) r += "\n";
        r += strcat_msg(history[i].input, " => ", history[i].output);
    }
    return r;
}

}  // namespace p2p
