#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "p2p/corpus.hpp"
#include "p2p/embedder.hpp"
#include "p2p/profile.hpp"

using namespace p2p;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return num / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("encode is deterministic and unit norm") {
    Embedder emb;
    UserEmbedding a = emb.encode("likes quiet gardens and long walks");
    UserEmbedding b = emb.encode("likes quiet gardens and long walks");
    CHECK(std::memcmp(a.e.data(), b.e.data(), a.e.size() * 8) == 0);
    CHECK(cosine(a.e, b.e) == doctest::Approx(1.0).epsilon(1e-12));
    double norm = 0.0;
    for (double v : a.e) norm += v * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-12);
}

TEST_CASE("empty text encodes to the zero vector with a warning") {
    Embedder emb;
    UserEmbedding z = emb.encode("");
    CHECK(z.empty_warning);
    for (double v : z.e) CHECK(v == 0.0);
    UserEmbedding ws = emb.encode("   \n\t  ");
    CHECK(ws.empty_warning);
}

TEST_CASE("encode ignores trailing whitespace") {
    Embedder emb;
    UserEmbedding a = emb.encode("profile text here");
    UserEmbedding b = emb.encode("profile text here   \n");
    CHECK(a.source_hash == b.source_hash);
    CHECK(std::memcmp(a.e.data(), b.e.data(), a.e.size() * 8) == 0);
}

TEST_CASE("embedder state is stable") {
    Embedder a;
    Embedder b;
    CHECK(a.state_checksum() == b.state_checksum());
    Embedder other(64, 1234);
    CHECK(a.state_checksum() != other.state_checksum());
}

TEST_CASE("cluster structure shows up in embedding geometry") {
    SynthSpec spec;
    spec.n_clusters = 2;
    spec.users_per_cluster = 20;
    spec.history_len = 8;
    spec.seed = 21;
    Population pop = synth_population(spec);
    Embedder emb;

    std::vector<std::vector<double>> vecs;
    std::vector<int> cluster;
    for (const auto& u : pop.users) {
        ProfileText p = build_profile("", u, pop.task_of(u));
        vecs.push_back(emb.encode(p.rendered).e);
        cluster.push_back(synth_cluster_of_user(u.user_id));
    }

    double intra = 0.0, inter = 0.0;
    int n_intra = 0, n_inter = 0;
    for (size_t i = 0; i < vecs.size(); ++i) {
        for (size_t j = i + 1; j < vecs.size(); ++j) {
            const double c = cosine(vecs[i], vecs[j]);
            if (cluster[i] == cluster[j]) {
                intra += c;
                ++n_intra;
            } else {
                inter += c;
                ++n_inter;
            }
        }
    }
    intra /= n_intra;
    inter /= n_inter;
    CHECK(intra > inter);
}

TEST_CASE("external embedding table round-trips and normalizes") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "p2p_ext_emb.txt").string();
    const uint64_t h1 = profile_hash("profile one");
    const uint64_t h2 = profile_hash("profile two");
    {
        std::ofstream out(path, std::ios::trunc);
        char hex[32];
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h1));
        out << hex << " 2 0 0 0\n";  // norm 2, must come back normalized
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h2));
        out << hex << " 0 0 3 4\n";
    }
    ExternalEmbeddings table = ExternalEmbeddings::load(path);
    CHECK(table.d_emb() == 4);
    UserEmbedding e1 = table.lookup(h1);
    CHECK(e1.e[0] == doctest::Approx(1.0));
    UserEmbedding e2 = table.lookup(h2);
    CHECK(e2.e[2] == doctest::Approx(0.6));
    CHECK(e2.e[3] == doctest::Approx(0.8));

    CHECK_THROWS_WITH_AS(table.lookup(12345), doctest::Contains("unknown profile"),
                         std::runtime_error);
}

TEST_CASE("external table rejects inconsistent dimensions") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "p2p_ext_bad.txt").string();
    {
        std::ofstream out(path, std::ios::trunc);
        out << "00000000000000aa 1 2 3\n";
        out << "00000000000000bb 1 2\n";
    }
    CHECK_THROWS_WITH_AS(ExternalEmbeddings::load(path), doctest::Contains("dimension"),
                         std::runtime_error);
}
