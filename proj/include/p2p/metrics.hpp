#pragma once

// Task metrics: accuracy and macro-F1 for classification, ROUGE-1/ROUGE-L
// for generation, MAE/RMSE for rating prediction.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "p2p/corpus.hpp"

namespace p2p {

double accuracy(std::span<const std::string> preds, std::span<const std::string> golds);

// macro-F1 over the full label set; labels absent from both sides contribute
// an F1 of 0, predictions outside the set simply count as wrong
double f1_macro(std::span<const std::string> preds, std::span<const std::string> golds,
                std::span<const std::string> label_set);

// unigram-overlap F1 with clipped counts; word tokens, lowercased
double rouge_1(const std::string& candidate, const std::string& reference);
// LCS-based F1 over word tokens
double rouge_l(const std::string& candidate, const std::string& reference);

// rating metrics parse the first integer in each prediction; an unparseable
// prediction maps to the 1..5 midpoint (3) and is counted in the report
struct RatingStats {
    double mae = 0.0;
    double rmse = 0.0;
    int unparseable = 0;
};
RatingStats rating_metrics(std::span<const std::string> preds,
                           std::span<const std::string> golds);
double mae(std::span<const std::string> preds, std::span<const std::string> golds);
double rmse(std::span<const std::string> preds, std::span<const std::string> golds);

struct MetricReport {
    std::map<std::string, double> values;
    int n_examples = 0;
    int unparseable = 0;
    // optional per-user rows: user_id -> (metric -> value)
    std::map<std::string, std::map<std::string, double>> per_user;

    double at(const std::string& name) const;
};

// dispatch on task kind; preds/golds are raw output strings
MetricReport evaluate_outputs(const TaskSpec& task, std::span<const std::string> preds,
                              std::span<const std::string> golds);

}  // namespace p2p
