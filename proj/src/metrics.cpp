#include "p2p/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace p2p {

double accuracy(std::span<const std::string> preds, std::span<const std::string> golds) {
    require(preds.size() == golds.size() && !preds.empty(),
            "accuracy: size mismatch or empty (", preds.size(), " vs ", golds.size(), ")");
    int correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == golds[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double f1_macro(std::span<const std::string> preds, std::span<const std::string> golds,
                std::span<const std::string> label_set) {
    require(preds.size() == golds.size() && !preds.empty(),
            "f1_macro: size mismatch or empty (", preds.size(), " vs ", golds.size(), ")");
    require(!label_set.empty(), "f1_macro: empty label set");
    double total = 0.0;
    for (const auto& label : label_set) {
        int tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            const bool p = preds[i] == label;
            const bool g = golds[i] == label;
            if (p && g) ++tp;
            if (p && !g) ++fp;
            if (!p && g) ++fn;
        }
        const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        total += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    return total / static_cast<double>(label_set.size());
}

namespace {

double overlap_f1(double match, double cand_len, double ref_len) {
    if (match == 0.0 || cand_len == 0.0 || ref_len == 0.0) return 0.0;
    const double p = match / cand_len;
    const double r = match / ref_len;
    return 2.0 * p * r / (p + r);
}

// two-row LCS; the full-table reference lives in the test oracles
int lcs_two_row(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

double rouge_1(const std::string& candidate, const std::string& reference) {
    const auto cand = word_tokens(candidate);
    const auto ref = word_tokens(reference);
    if (cand.empty() || ref.empty()) return 0.0;
    std::map<std::string, int> cc, rc;
    for (const auto& t : cand) ++cc[t];
    for (const auto& t : ref) ++rc[t];
    double match = 0.0;
    for (const auto& [t, c] : cc) {
        auto it = rc.find(t);
        if (it != rc.end()) match += std::min(c, it->second);
    }
    return overlap_f1(match, static_cast<double>(cand.size()), static_cast<double>(ref.size()));
}

double rouge_l(const std::string& candidate, const std::string& reference) {
    const auto cand = word_tokens(candidate);
    const auto ref = word_tokens(reference);
    if (cand.empty() || ref.empty()) return 0.0;
    const double lcs = lcs_two_row(cand, ref);
    return overlap_f1(lcs, static_cast<double>(cand.size()), static_cast<double>(ref.size()));
}

namespace {

// first integer in the text, or the 1..5 midpoint when absent
double parse_rating(const std::string& text, bool* parsed) {
    for (size_t i = 0; i < text.size(); ++i) {
        if (std::isdigit(static_cast<unsigned char>(text[i]))) {
            double v = 0.0;
            size_t j = i;
            while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) {
                v = v * 10 + (text[j] - '0');
                ++j;
            }
            if (i > 0 && text[i - 1] == '-') v = -v;
            *parsed = true;
            return v;
        }
    }
    *parsed = false;
    return 3.0;
}

}  // namespace

RatingStats rating_metrics(std::span<const std::string> preds,
                           std::span<const std::string> golds) {
    require(preds.size() == golds.size() && !preds.empty(),
            "rating_metrics: size mismatch or empty (", preds.size(), " vs ", golds.size(),
            ")");
    RatingStats out;
    double abs_sum = 0.0, sq_sum = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        bool gold_ok = false;
        const double g = parse_rating(golds[i], &gold_ok);
        require(gold_ok, "rating_metrics: unparseable gold \"", golds[i], "\"");
        bool pred_ok = false;
        const double p = parse_rating(preds[i], &pred_ok);
        if (!pred_ok) ++out.unparseable;
        const double d = p - g;
        abs_sum += std::abs(d);
        sq_sum += d * d;
    }
    out.mae = abs_sum / static_cast<double>(preds.size());
    out.rmse = std::sqrt(sq_sum / static_cast<double>(preds.size()));
    return out;
}

double mae(std::span<const std::string> preds, std::span<const std::string> golds) {
    return rating_metrics(preds, golds).mae;
}

double rmse(std::span<const std::string> preds, std::span<const std::string> golds) {
    return rating_metrics(preds, golds).rmse;
}

double MetricReport::at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) fail("MetricReport: no metric \"", name, "\"");
    return it->second;
}

MetricReport evaluate_outputs(const TaskSpec& task, std::span<const std::string> preds,
                              std::span<const std::string> golds) {
    require(preds.size() == golds.size(), "evaluate_outputs: ", preds.size(), " preds for ",
            golds.size(), " golds");
    require(!preds.empty(), "evaluate_outputs: nothing to score");
    MetricReport rep;
    rep.n_examples = static_cast<int>(preds.size());
    switch (task.kind) {
        case TaskKind::classification:
            rep.values["accuracy"] = accuracy(preds, golds);
            rep.values["f1_macro"] = f1_macro(preds, golds, task.label_set);
            break;
        case TaskKind::generation: {
            double r1 = 0.0, rl = 0.0;
            for (size_t i = 0; i < preds.size(); ++i) {
                r1 += rouge_1(preds[i], golds[i]);
                rl += rouge_l(preds[i], golds[i]);
            }
            rep.values["rouge_1"] = r1 / static_cast<double>(preds.size());
            rep.values["rouge_l"] = rl / static_cast<double>(preds.size());
            break;
        }
        case TaskKind::rating: {
            RatingStats rs = rating_metrics(preds, golds);
            rep.values["mae"] = rs.mae;
            rep.values["rmse"] = rs.rmse;
            rep.unparseable = rs.unparseable;
            break;
        }
    }
    return rep;
}

}  // namespace p2p
