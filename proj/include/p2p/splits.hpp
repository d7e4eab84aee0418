#pragma once

// Train/test split construction over user embeddings: a cluster-proportional
// random split and an out-of-distribution split that sends small, isolated
// clusters to the test side.

#include <span>
#include <string>
#include <vector>

#include "p2p/common.hpp"

namespace p2p {

using Point = std::vector<double>;

struct KmeansResult {
    std::vector<int> assignment;
    std::vector<Point> centroids;
    std::vector<double> objective_trace;  // sum of squared distances per iteration
    int iterations = 0;
};

// k-means++ seeding, Lloyd iterations to 1e-6 max centroid movement or 100
// rounds; assignment ties go to the lower centroid index
KmeansResult kmeans(std::span<const Point> points, int k, uint64_t seed);

// mean silhouette; singleton clusters contribute 0
double mean_silhouette(std::span<const Point> points, std::span<const int> assignment);

// argmax of mean silhouette over [k_min, k_max], ties to the smallest k;
// identical points are a degenerate-geometry error
int silhouette_search(std::span<const Point> points, int k_min, int k_max, uint64_t seed);

struct ClusterDiag {
    int cluster = 0;
    int size = 0;
    double compactness = 0.0;  // mean member distance to centroid
    double isolation = 0.0;    // mean distance to the other centroids
    double score = 0.0;        // isolation / (1 + size)
    bool assigned_to_test = false;
};

struct SplitResult {
    std::string mode;  // "random" | "ood"
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    // members of a partially-consumed test cluster, excluded from train to
    // keep every test cluster out of the training population
    std::vector<std::string> quarantined_ids;
    int k_used = 0;
    std::vector<ClusterDiag> diagnostics;
};

// score clusters by isolation/(1+size) and consume greedily; a cluster that
// does not fit the remaining budget contributes its farthest-from-centroid
// members, with the remainder quarantined (or kept in train when
// quarantine_partial is false)
SplitResult ood_split(std::span<const std::string> user_ids, std::span<const Point> embeddings,
                      int n_test, int k_min, int k_max, uint64_t seed,
                      bool quarantine_partial = true);

// cluster-proportional sampling with largest-remainder quotas; k adapts to
// the population size as clamp(n/50, 2, 20)
SplitResult random_split(std::span<const std::string> user_ids,
                         std::span<const Point> embeddings, int n_test, uint64_t seed);

// mean over test users of the distance to their nearest train user
double nearest_train_distance(std::span<const std::string> train_ids,
                              std::span<const std::string> test_ids,
                              std::span<const std::string> all_ids,
                              std::span<const Point> embeddings);

}  // namespace p2p
