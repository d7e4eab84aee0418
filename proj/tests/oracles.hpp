#pragma once

// Independent brute-force references used by tests only. These deliberately
// share no code with the library paths they check: plain loops, full DP
// tables, direct formula transcriptions.

#include <string>
#include <vector>

namespace p2p::oracle {

// (W0 + (alpha/r) * B*A) * x via full dense materialization.
// W0 is d_out x d_in row-major, A is r x d_in, B is d_out x r.
std::vector<double> dense_lora_apply(const std::vector<double>& w0,
                                     const std::vector<double>& a,
                                     const std::vector<double>& b, int d_in, int d_out, int r,
                                     double alpha, const std::vector<double>& x);

// Okapi BM25 score of every document for the query; idf floored at 0, each
// query token occurrence contributes.
std::vector<double> bm25_scores(const std::vector<std::string>& query_tokens,
                                const std::vector<std::vector<std::string>>& docs, double k1,
                                double b);

// longest common subsequence length, full O(n*m) table
int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

// mean silhouette from the raw pairwise-distance definition; singleton
// clusters contribute 0 by convention; a single cluster overall is an error
double mean_silhouette(const std::vector<std::vector<double>>& points,
                       const std::vector<int>& assignment);

// TF-IDF term ranking over documents: weight = (1+ln tf) * (ln((1+N)/(1+df))+1),
// ranked by weight desc then term asc
std::vector<std::string> tfidf_top_terms(const std::vector<std::vector<std::string>>& docs,
                                         int top_n);

}  // namespace p2p::oracle
