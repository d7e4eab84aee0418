#pragma once

// User profile construction: BM25 retrieval over a user's pre-split history,
// an extractive summary of their outputs, and the rendered profile text
// consumed by the embedder.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "p2p/corpus.hpp"

namespace p2p {

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct RetrievedItem {
    int seq_index = 0;
    double score = 0.0;
    std::string text;  // "<input> => <output>"
};

// Okapi BM25 over one user's pre-split interactions. idf uses the standard
// +0.5 smoothing floored at 0; each query token occurrence contributes.
class Bm25Index {
public:
    Bm25Index(std::vector<std::vector<std::string>> doc_tokens, Bm25Params params = {});
    std::vector<double> scores(std::span<const std::string> query_tokens) const;
    size_t num_docs() const { return docs_.size(); }

private:
    std::vector<std::vector<std::string>> docs_;
    std::vector<int> doc_len_;
    double avg_len_ = 0.0;
    Bm25Params params_;
};

// top-k interactions by BM25 score, descending; ties resolve to the earlier
// seq_index. k may exceed |history|.
std::vector<RetrievedItem> bm25_rank(const std::string& query,
                                     std::span<const Interaction> history, int k,
                                     Bm25Params params = {});

struct SummaryResult {
    std::string text;
    bool empty_history = false;
};

// Deterministic extractive summary: top TF-IDF terms of the user's outputs
// plus the modal label (classification/rating) or the most frequent output
// bigrams (generation).
SummaryResult summarize(std::span<const Interaction> history, const TaskSpec& task,
                        int top_terms = 8);

inline constexpr std::string_view kProfileSeparator = "=== retrieved history ===";
inline constexpr int kDefaultRetrievalK = 2;
inline constexpr int kMaxProfileChars = 2000;

struct ProfileText {
    std::string summary;
    std::vector<RetrievedItem> retrieved;
    int k = 0;
    std::string rendered;
    bool passthrough = false;      // pre-existing profile used verbatim
    bool empty_summary = false;
};

// Profile for (query, user): the pre-existing profile verbatim when present,
// otherwise summary + separator + retrieved items. Truncation to max_chars
// drops the lowest-scored retrieved items first and never cuts the summary.
// A user with no pre-split history and no pre-existing profile is an error.
ProfileText build_profile(const std::string& query, const UserRecord& user,
                          const TaskSpec& task, int k = kDefaultRetrievalK,
                          int max_chars = kMaxProfileChars);

// ablation renderings; both are exact substrings of ProfileText::rendered
std::string render_summary_only(const ProfileText& p);
std::string render_retrieved_only(const ProfileText& p);

// oldest-to-newest flattening of interactions, one line each
std::string flatten_history(std::span<const Interaction> history);

}  // namespace p2p
