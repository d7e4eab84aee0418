#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "p2p/splits.hpp"

using namespace p2p;

namespace {

// isotropic gaussian blob around a center
void add_blob(std::vector<Point>& points, std::vector<std::string>& ids, Rng& rng,
              const Point& center, double spread, int count, const std::string& prefix) {
    for (int i = 0; i < count; ++i) {
        Point p(center.size());
        for (size_t d = 0; d < center.size(); ++d) p[d] = center[d] + rng.normal(0, spread);
        points.push_back(std::move(p));
        ids.push_back(strcat_msg(prefix, ids.size()));
    }
}

}  // namespace

TEST_CASE("kmeans separates two distant groups and tracks a non-increasing objective") {
    Rng rng(1);
    std::vector<Point> points;
    std::vector<std::string> ids;
    add_blob(points, ids, rng, {0, 0, 0}, 0.05, 20, "a");
    add_blob(points, ids, rng, {10, 10, 10}, 0.05, 20, "b");

    KmeansResult km = kmeans(points, 2, 3);
    std::set<int> first, second;
    for (int i = 0; i < 20; ++i) first.insert(km.assignment[static_cast<size_t>(i)]);
    for (int i = 20; i < 40; ++i) second.insert(km.assignment[static_cast<size_t>(i)]);
    CHECK(first.size() == 1);
    CHECK(second.size() == 1);
    CHECK(*first.begin() != *second.begin());

    for (size_t i = 1; i < km.objective_trace.size(); ++i)
        CHECK(km.objective_trace[i] <= km.objective_trace[i - 1] + 1e-9);
}

TEST_CASE("kmeans with one cluster returns the mean") {
    Rng rng(2);
    std::vector<Point> points;
    std::vector<std::string> ids;
    add_blob(points, ids, rng, {1, 2}, 1.0, 30, "x");
    KmeansResult km = kmeans(points, 1, 5);
    Point mean(2, 0.0);
    for (const auto& p : points)
        for (size_t d = 0; d < 2; ++d) mean[d] += p[d];
    for (double& v : mean) v /= 30.0;
    CHECK(km.centroids[0][0] == doctest::Approx(mean[0]).epsilon(1e-12));
    CHECK(km.centroids[0][1] == doctest::Approx(mean[1]).epsilon(1e-12));

    CHECK_THROWS_AS(kmeans(points, 31, 5), std::invalid_argument);
}

TEST_CASE("silhouette search recovers three well-separated blobs") {
    Rng rng(3);
    std::vector<Point> points;
    std::vector<std::string> ids;
    add_blob(points, ids, rng, {0, 0}, 0.1, 15, "a");
    add_blob(points, ids, rng, {8, 0}, 0.1, 15, "b");
    add_blob(points, ids, rng, {0, 8}, 0.1, 15, "c");

    CHECK(silhouette_search(points, 2, 6, 7) == 3);
    CHECK(silhouette_search(points, 4, 4, 7) == 4);  // range of one value

    KmeansResult km = kmeans(points, 3, 7);
    const double s = mean_silhouette(points, km.assignment);
    CHECK(s > 0.9);
    // direct pairwise-definition reference
    std::vector<int> assign(km.assignment.begin(), km.assignment.end());
    CHECK(std::abs(s - oracle::mean_silhouette(points, assign)) < 1e-9);
}

TEST_CASE("silhouette search rejects degenerate geometry") {
    std::vector<Point> points(10, Point{1.0, 1.0});
    CHECK_THROWS_WITH_AS(silhouette_search(points, 2, 5, 1), doctest::Contains("degenerate"),
                         std::runtime_error);
}

TEST_CASE("ood split takes an isolated outlier blob exactly") {
    Rng rng(4);
    std::vector<Point> points;
    std::vector<std::string> ids;
    add_blob(points, ids, rng, {0, 0, 0}, 0.2, 95, "main");
    add_blob(points, ids, rng, {20, 20, 20}, 0.2, 5, "out");

    SplitResult res = ood_split(ids, points, 5, 2, 8, 11);
    CHECK(res.test_ids.size() == 5);
    for (const auto& id : res.test_ids) CHECK(id.substr(0, 3) == "out");
    CHECK(res.train_ids.size() == 95);
    CHECK(res.quarantined_ids.empty());

    // disjoint and exhaustive
    std::set<std::string> all(res.train_ids.begin(), res.train_ids.end());
    for (const auto& id : res.test_ids) CHECK(all.insert(id).second);
    CHECK(all.size() == ids.size());

    // diagnostics agree with a direct recomputation
    KmeansResult km = kmeans(points, res.k_used, 11);
    for (const auto& d : res.diagnostics) {
        double iso = 0.0;
        for (int o = 0; o < res.k_used; ++o) {
            if (o == d.cluster) continue;
            double s = 0.0;
            for (size_t j = 0; j < points[0].size(); ++j) {
                const double diff = km.centroids[static_cast<size_t>(d.cluster)][j] -
                                    km.centroids[static_cast<size_t>(o)][j];
                s += diff * diff;
            }
            iso += std::sqrt(s);
        }
        iso /= res.k_used - 1;
        CHECK(std::abs(iso - d.isolation) < 1e-9);
        CHECK(std::abs(d.score - d.isolation / (1.0 + d.size)) < 1e-12);
    }
}

TEST_CASE("ood split boundary: n_test = n-1") {
    Rng rng(5);
    std::vector<Point> points;
    std::vector<std::string> ids;
    add_blob(points, ids, rng, {0, 0}, 0.5, 6, "a");
    add_blob(points, ids, rng, {5, 5}, 0.5, 6, "b");

    // permissive remainder handling keeps the leftover user in train
    SplitResult res = ood_split(ids, points, 11, 2, 5, 3, /*quarantine_partial=*/false);
    CHECK(res.test_ids.size() == 11);
    CHECK(res.train_ids.size() == 1);
    CHECK(res.quarantined_ids.empty());

    // strict handling quarantines the partial cluster's remainder instead
    SplitResult strict = ood_split(ids, points, 11, 2, 5, 3, true);
    CHECK(strict.test_ids.size() == 11);
    CHECK(strict.train_ids.size() + strict.quarantined_ids.size() == 1);
}

TEST_CASE("random split samples clusters proportionally") {
    Rng rng(6);
    std::vector<Point> points;
    std::vector<std::string> ids;
    add_blob(points, ids, rng, {0, 0}, 0.2, 80, "big");
    add_blob(points, ids, rng, {9, 9}, 0.2, 20, "small");

    SplitResult res = random_split(ids, points, 10, 17);
    CHECK(res.test_ids.size() == 10);
    int from_big = 0, from_small = 0;
    for (const auto& id : res.test_ids) {
        if (id.substr(0, 3) == "big") ++from_big;
        else ++from_small;
    }
    CHECK(from_big == 8);
    CHECK(from_small == 2);

    SplitResult res2 = random_split(ids, points, 10, 17);
    CHECK(res.test_ids == res2.test_ids);
    CHECK(res.train_ids == res2.train_ids);

    SplitResult res3 = random_split(ids, points, 10, 18);
    CHECK(res.test_ids != res3.test_ids);  // seed moves the within-cluster draw
}

TEST_CASE("ood test users sit farther from train than random test users") {
    int wins = 0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(100 + seed);
        std::vector<Point> points;
        std::vector<std::string> ids;
        add_blob(points, ids, rng, {0, 0, 0}, 0.3, 30, "a");
        add_blob(points, ids, rng, {6, 0, 0}, 0.3, 30, "b");
        add_blob(points, ids, rng, {0, 7, 0}, 0.3, 12, "c");

        SplitResult ood = ood_split(ids, points, 12, 2, 6, seed);
        SplitResult rnd = random_split(ids, points, 12, seed);
        const double d_ood =
            nearest_train_distance(ood.train_ids, ood.test_ids, ids, points);
        const double d_rnd =
            nearest_train_distance(rnd.train_ids, rnd.test_ids, ids, points);
        if (d_ood >= d_rnd) ++wins;
    }
    CHECK(wins >= 4);
}
