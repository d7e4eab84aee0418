#include "p2p/splits.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace p2p {

namespace {

double sq_dist(const Point& a, const Point& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double dist(const Point& a, const Point& b) { return std::sqrt(sq_dist(a, b)); }

void check_points(std::span<const Point> points) {
    require(!points.empty(), "splits: no points");
    const size_t d = points[0].size();
    require(d > 0, "splits: zero-dimensional points");
    for (const auto& p : points)
        require(p.size() == d, "splits: inconsistent point dimensions");
}

}  // namespace

KmeansResult kmeans(std::span<const Point> points, int k, uint64_t seed) {
    check_points(points);
    const int n = static_cast<int>(points.size());
    require(k >= 1 && k <= n, "kmeans: k=", k, " out of range for ", n, " points");

    Rng rng(seed);
    KmeansResult res;

    // k-means++ seeding
    res.centroids.push_back(points[rng.uniform_int(static_cast<uint64_t>(n))]);
    std::vector<double> d2(static_cast<size_t>(n));
    while (static_cast<int>(res.centroids.size()) < k) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : res.centroids) best = std::min(best, sq_dist(points[i], c));
            d2[static_cast<size_t>(i)] = best;
            total += best;
        }
        int chosen = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            chosen = n - 1;
            for (int i = 0; i < n; ++i) {
                acc += d2[static_cast<size_t>(i)];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
        }
        res.centroids.push_back(points[chosen]);
    }

    res.assignment.assign(static_cast<size_t>(n), 0);
    for (int iter = 0; iter < 100; ++iter) {
        ++res.iterations;
        double objective = 0.0;
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int arg = 0;
            for (int c = 0; c < k; ++c) {
                const double d = sq_dist(points[i], res.centroids[static_cast<size_t>(c)]);
                if (d < best) {  // strict: ties keep the lower index
                    best = d;
                    arg = c;
                }
            }
            res.assignment[static_cast<size_t>(i)] = arg;
            objective += best;
        }
        res.objective_trace.push_back(objective);

        const size_t dim = points[0].size();
        std::vector<Point> next(static_cast<size_t>(k), Point(dim, 0.0));
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            const int c = res.assignment[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(c)];
            for (size_t j = 0; j < dim; ++j) next[static_cast<size_t>(c)][j] += points[i][j];
        }
        double movement = 0.0;
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) {
                next[static_cast<size_t>(c)] = res.centroids[static_cast<size_t>(c)];
                continue;
            }
            for (size_t j = 0; j < dim; ++j)
                next[static_cast<size_t>(c)][j] /= counts[static_cast<size_t>(c)];
            movement = std::max(movement,
                                dist(next[static_cast<size_t>(c)],
                                     res.centroids[static_cast<size_t>(c)]));
        }
        res.centroids = std::move(next);
        if (movement < 1e-6) break;
    }
    return res;
}

double mean_silhouette(std::span<const Point> points, std::span<const int> assignment) {
    check_points(points);
    const int n = static_cast<int>(points.size());
    require(static_cast<int>(assignment.size()) == n, "mean_silhouette: size mismatch");
    int k = 0;
    for (int c : assignment) k = std::max(k, c + 1);
    require(k >= 2, "mean_silhouette: need at least two clusters");

    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        std::vector<double> sums(static_cast<size_t>(k), 0.0);
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const int c = assignment[static_cast<size_t>(j)];
            sums[static_cast<size_t>(c)] += dist(points[static_cast<size_t>(i)],
                                                 points[static_cast<size_t>(j)]);
            ++counts[static_cast<size_t>(c)];
        }
        const int own = assignment[static_cast<size_t>(i)];
        if (counts[static_cast<size_t>(own)] == 0) continue;  // singleton
        const double a = sums[static_cast<size_t>(own)] / counts[static_cast<size_t>(own)];
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (c == own || counts[static_cast<size_t>(c)] == 0) continue;
            b = std::min(b, sums[static_cast<size_t>(c)] / counts[static_cast<size_t>(c)]);
        }
        if (!std::isfinite(b)) continue;
        total += (b - a) / std::max(a, b);
    }
    return total / n;
}

int silhouette_search(std::span<const Point> points, int k_min, int k_max, uint64_t seed) {
    check_points(points);
    const int n = static_cast<int>(points.size());
    k_min = std::max(k_min, 2);
    k_max = std::min(k_max, n - 1);
    require(k_min <= k_max, "silhouette_search: empty range [", k_min, ",", k_max, "] for ", n,
            " points");

    bool any_distinct = false;
    for (size_t i = 1; i < points.size() && !any_distinct; ++i)
        any_distinct = sq_dist(points[0], points[i]) > 0.0;
    if (!any_distinct) fail("silhouette_search: degenerate geometry (all points identical)");

    int best_k = k_min;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int k = k_min; k <= k_max; ++k) {
        KmeansResult km = kmeans(points, k, seed);
        const double s = mean_silhouette(points, km.assignment);
        if (s > best_score) {  // strict: ties keep the smallest k
            best_score = s;
            best_k = k;
        }
    }
    return best_k;
}

namespace {

std::vector<ClusterDiag> cluster_diagnostics(std::span<const Point> points,
                                             const KmeansResult& km, int k) {
    std::vector<ClusterDiag> diags(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c) {
        diags[static_cast<size_t>(c)].cluster = c;
        double iso = 0.0;
        for (int o = 0; o < k; ++o) {
            if (o == c) continue;
            iso += dist(km.centroids[static_cast<size_t>(c)], km.centroids[static_cast<size_t>(o)]);
        }
        diags[static_cast<size_t>(c)].isolation = k > 1 ? iso / (k - 1) : 0.0;
    }
    for (size_t i = 0; i < points.size(); ++i) {
        auto& d = diags[static_cast<size_t>(km.assignment[i])];
        ++d.size;
        d.compactness += dist(points[i], km.centroids[static_cast<size_t>(km.assignment[i])]);
    }
    for (auto& d : diags) {
        if (d.size > 0) d.compactness /= d.size;
        d.score = d.isolation / (1.0 + d.size);
    }
    return diags;
}

}  // namespace

SplitResult ood_split(std::span<const std::string> user_ids, std::span<const Point> embeddings,
                      int n_test, int k_min, int k_max, uint64_t seed,
                      bool quarantine_partial) {
    const int n = static_cast<int>(user_ids.size());
    require(static_cast<int>(embeddings.size()) == n, "ood_split: ids/embeddings mismatch");
    require(n_test >= 1 && n_test < n, "ood_split: n_test=", n_test, " out of range for ", n,
            " users");

    const int k = silhouette_search(embeddings, k_min, k_max, seed);
    KmeansResult km = kmeans(embeddings, k, seed);
    std::vector<ClusterDiag> diags = cluster_diagnostics(embeddings, km, k);

    std::vector<int> order(static_cast<size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (diags[static_cast<size_t>(a)].score != diags[static_cast<size_t>(b)].score)
            return diags[static_cast<size_t>(a)].score > diags[static_cast<size_t>(b)].score;
        return a < b;
    });

    SplitResult res;
    res.mode = "ood";
    res.k_used = k;
    std::vector<int> state(static_cast<size_t>(n), 0);  // 0 train, 1 test, 2 quarantined
    int remaining = n_test;
    for (int c : order) {
        if (remaining == 0) break;
        std::vector<int> members;
        for (int i = 0; i < n; ++i)
            if (km.assignment[static_cast<size_t>(i)] == c) members.push_back(i);
        if (members.empty()) continue;

        diags[static_cast<size_t>(c)].assigned_to_test = true;
        if (static_cast<int>(members.size()) <= remaining) {
            for (int i : members) state[static_cast<size_t>(i)] = 1;
            remaining -= static_cast<int>(members.size());
        } else {
            // farthest members from the centroid fill the remaining budget
            std::sort(members.begin(), members.end(), [&](int a, int b) {
                const double da = sq_dist(embeddings[static_cast<size_t>(a)],
                                          km.centroids[static_cast<size_t>(c)]);
                const double db = sq_dist(embeddings[static_cast<size_t>(b)],
                                          km.centroids[static_cast<size_t>(c)]);
                if (da != db) return da > db;
                return a < b;
            });
            for (int j = 0; j < static_cast<int>(members.size()); ++j) {
                if (j < remaining) {
                    state[static_cast<size_t>(members[static_cast<size_t>(j)])] = 1;
                } else {
                    state[static_cast<size_t>(members[static_cast<size_t>(j)])] =
                        quarantine_partial ? 2 : 0;
                }
            }
            remaining = 0;
        }
    }

    for (int i = 0; i < n; ++i) {
        if (state[static_cast<size_t>(i)] == 1) {
            res.test_ids.push_back(user_ids[static_cast<size_t>(i)]);
        } else if (state[static_cast<size_t>(i)] == 2) {
            res.quarantined_ids.push_back(user_ids[static_cast<size_t>(i)]);
        } else {
            res.train_ids.push_back(user_ids[static_cast<size_t>(i)]);
        }
    }
    res.diagnostics = std::move(diags);
    return res;
}

SplitResult random_split(std::span<const std::string> user_ids,
                         std::span<const Point> embeddings, int n_test, uint64_t seed) {
    const int n = static_cast<int>(user_ids.size());
    require(static_cast<int>(embeddings.size()) == n, "random_split: ids/embeddings mismatch");
    require(n_test >= 1 && n_test < n, "random_split: n_test=", n_test, " out of range for ",
            n, " users");

    int k = std::clamp(n / 50, 2, 20);
    k = std::min(k, n - 1);
    KmeansResult km = kmeans(embeddings, k, seed);
    std::vector<ClusterDiag> diags = cluster_diagnostics(embeddings, km, k);

    std::vector<std::vector<int>> members(static_cast<size_t>(k));
    for (int i = 0; i < n; ++i)
        members[static_cast<size_t>(km.assignment[static_cast<size_t>(i)])].push_back(i);

    // largest-remainder quotas, capped by cluster size
    std::vector<int> quota(static_cast<size_t>(k), 0);
    std::vector<std::pair<double, int>> remainders;
    int assigned = 0;
    for (int c = 0; c < k; ++c) {
        const double ideal =
            static_cast<double>(n_test) * members[static_cast<size_t>(c)].size() / n;
        quota[static_cast<size_t>(c)] = static_cast<int>(std::floor(ideal));
        assigned += quota[static_cast<size_t>(c)];
        remainders.push_back({ideal - std::floor(ideal), c});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (size_t r = 0; assigned < n_test; r = (r + 1) % remainders.size()) {
        const int c = remainders[r].second;
        if (quota[static_cast<size_t>(c)] <
            static_cast<int>(members[static_cast<size_t>(c)].size())) {
            ++quota[static_cast<size_t>(c)];
            ++assigned;
        }
    }
    // small clusters may not cover their quota; cap and redistribute
    for (int c = 0; c < k; ++c) {
        const int cap = static_cast<int>(members[static_cast<size_t>(c)].size());
        if (quota[static_cast<size_t>(c)] > cap) {
            assigned -= quota[static_cast<size_t>(c)] - cap;
            quota[static_cast<size_t>(c)] = cap;
        }
    }
    for (size_t r = 0; assigned < n_test; r = (r + 1) % remainders.size()) {
        const int c = remainders[r].second;
        if (quota[static_cast<size_t>(c)] <
            static_cast<int>(members[static_cast<size_t>(c)].size())) {
            ++quota[static_cast<size_t>(c)];
            ++assigned;
        }
    }

    Rng rng(seed ^ 0x726E64ull);
    SplitResult res;
    res.mode = "random";
    res.k_used = k;
    std::vector<char> is_test(static_cast<size_t>(n), 0);
    for (int c = 0; c < k; ++c) {
        auto pool = members[static_cast<size_t>(c)];
        rng.shuffle(pool);
        for (int j = 0; j < quota[static_cast<size_t>(c)]; ++j)
            is_test[static_cast<size_t>(pool[static_cast<size_t>(j)])] = 1;
        diags[static_cast<size_t>(c)].assigned_to_test = quota[static_cast<size_t>(c)] > 0;
    }
    for (int i = 0; i < n; ++i) {
        if (is_test[static_cast<size_t>(i)]) {
            res.test_ids.push_back(user_ids[static_cast<size_t>(i)]);
        } else {
            res.train_ids.push_back(user_ids[static_cast<size_t>(i)]);
        }
    }
    res.diagnostics = std::move(diags);
    return res;
}

double nearest_train_distance(std::span<const std::string> train_ids,
                              std::span<const std::string> test_ids,
                              std::span<const std::string> all_ids,
                              std::span<const Point> embeddings) {
    require(all_ids.size() == embeddings.size(), "nearest_train_distance: size mismatch");
    std::map<std::string, size_t> index;
    for (size_t i = 0; i < all_ids.size(); ++i) index[all_ids[i]] = i;
    require(!train_ids.empty() && !test_ids.empty(),
            "nearest_train_distance: empty train or test side");

    double total = 0.0;
    for (const auto& t : test_ids) {
        const Point& p = embeddings[index.at(t)];
        double best = std::numeric_limits<double>::infinity();
        for (const auto& tr : train_ids) best = std::min(best, dist(p, embeddings[index.at(tr)]));
        total += best;
    }
    return total / static_cast<double>(test_ids.size());
}

}  // namespace p2p
