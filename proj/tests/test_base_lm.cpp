#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "p2p/base_lm.hpp"
#include "p2p/optim.hpp"

using namespace p2p;

namespace {

struct TinySetup {
    LMConfig cfg;
    Vocab vocab;
    BaseLm lm;
};

TinySetup tiny_lm(uint64_t seed = 42, bool frozen = true) {
    std::vector<std::string> corpus = {"tag item amber", "tag item basil", "north south",
                                       "east west", "write about dune and ember"};
    Vocab vocab = Vocab::build(corpus);
    LMConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 48;
    cfg.max_seq = 64;
    cfg.vocab_size = vocab.size();
    TinySetup s{cfg, std::move(vocab), BaseLm::init(cfg, seed)};
    if (frozen) s.lm.freeze();
    return s;
}

AdapterSet random_adapters(const LMConfig& cfg, uint32_t base_checksum, uint64_t seed,
                           double scale = 0.2, bool requires_grad = false) {
    Rng rng(seed);
    AdapterSet set(4, 8.0, base_checksum);
    for (const auto& pos : cfg.adapter_positions()) {
        const auto [din, dout] = cfg.module_dims(pos.module);
        LoraFactors f;
        f.rank = 4;
        f.alpha = 8.0;
        f.A = Tensor::randn({4, din}, rng, scale, requires_grad);
        f.B = Tensor::randn({dout, 4}, rng, scale, requires_grad);
        set.insert(pos, std::move(f));
    }
    return set;
}

std::vector<int> random_prompt(const Vocab& v, Rng& rng, int len) {
    std::vector<int> tokens = {Vocab::kBos};
    for (int i = 0; i < len; ++i)
        tokens.push_back(Vocab::kFirstWordId +
                         static_cast<int>(rng.uniform_int(
                             static_cast<uint64_t>(v.size() - Vocab::kFirstWordId))));
    return tokens;
}

}  // namespace

TEST_CASE("zero-B adapters reproduce the base forward bitwise") {
    TinySetup s = tiny_lm();
    AdapterSet zero = random_adapters(s.cfg, s.lm.weights_checksum(), 1);
    AdapterSet zeroed(4, 8.0, s.lm.weights_checksum());
    for (const auto& [pos, f] : zero.entries()) {
        LoraFactors z = f;
        z.B = Tensor::zeros(f.B.shape());
        zeroed.insert(pos, std::move(z));
    }
    Rng rng(2);
    auto prompt = random_prompt(s.vocab, rng, 9);
    Graph g1, g2;
    Tensor with = s.lm.forward(g1, prompt, &zeroed);
    Tensor without = s.lm.forward(g2, prompt, nullptr);
    CHECK(std::memcmp(with.data().data(), without.data().data(), with.data().size() * 8) == 0);
}

TEST_CASE("unmerged adapters match merged weights to 1e-9") {
    TinySetup s = tiny_lm(7);
    AdapterSet adapters = random_adapters(s.cfg, s.lm.weights_checksum(), 3);

    // second model with the deltas folded into its projection weights
    TinySetup merged = tiny_lm(7, false);
    for (const auto& [pos, f] : adapters.entries()) {
        Tensor w = merged.lm.module_weight(pos.module, pos.layer);
        Tensor folded = merge(w, f);
        w.raw() = folded.data();
    }
    merged.lm.freeze();

    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto prompt = random_prompt(s.vocab, rng, 8);
        Graph g1, g2;
        Tensor a = s.lm.forward(g1, prompt, &adapters);
        Tensor b = merged.lm.forward(g2, prompt, nullptr);
        double max_diff = 0.0;
        for (size_t i = 0; i < a.data().size(); ++i)
            max_diff = std::max(max_diff, std::abs(a.data()[i] - b.data()[i]));
        CHECK(max_diff < 1e-9);
    }
}

TEST_CASE("empty input and oversized adaptation are rejected") {
    TinySetup s = tiny_lm();
    Graph g;
    std::vector<int> empty;
    CHECK_THROWS_WITH_AS(s.lm.forward(g, empty, nullptr), doctest::Contains("empty input"),
                         std::runtime_error);

    AdapterSet bad(4, 8.0, s.lm.weights_checksum());
    Rng rng(5);
    LoraFactors f;
    f.rank = 4;
    f.alpha = 8.0;
    f.A = Tensor::randn({4, s.cfg.d_model}, rng, 0.1);
    f.B = Tensor::randn({s.cfg.d_model, 4}, rng, 0.1);
    bad.insert({"q_proj", 0}, std::move(f));  // incomplete coverage
    std::vector<int> prompt = {Vocab::kBos, Vocab::kFirstWordId};
    CHECK_THROWS_AS(s.lm.forward(g, prompt, &bad), std::invalid_argument);
}

TEST_CASE("adapter scaling folds into B exactly") {
    TinySetup s = tiny_lm(9);
    AdapterSet adapters = random_adapters(s.cfg, s.lm.weights_checksum(), 6);
    const double scaling = adapters.entries().begin()->second.scaling();

    AdapterSet folded(4, 4.0, s.lm.weights_checksum());  // alpha == rank: scaling 1
    for (const auto& [pos, f] : adapters.entries()) {
        LoraFactors g2 = f;
        g2.alpha = 4.0;
        g2.B = Tensor::zeros(f.B.shape());
        for (size_t i = 0; i < f.B.data().size(); ++i)
            g2.B.raw()[i] = scaling * f.B.data()[i];
        folded.insert(pos, std::move(g2));
    }

    Rng rng(8);
    auto prompt = random_prompt(s.vocab, rng, 7);
    Graph g1, g2;
    Tensor a = s.lm.forward(g1, prompt, &adapters);
    Tensor b = s.lm.forward(g2, prompt, &folded);
    double max_diff = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i)
        max_diff = std::max(max_diff, std::abs(a.data()[i] - b.data()[i]));
    CHECK(max_diff < 1e-9);
}

TEST_CASE("logits are causal") {
    TinySetup s = tiny_lm();
    Rng rng(11);
    auto p1 = random_prompt(s.vocab, rng, 10);
    auto p2 = p1;
    // change everything after position 5
    for (size_t i = 6; i < p2.size(); ++i)
        p2[i] = Vocab::kFirstWordId + static_cast<int>(rng.uniform_int(
                                          static_cast<uint64_t>(s.vocab.size() - Vocab::kFirstWordId)));
    Graph g1, g2;
    Tensor a = s.lm.forward(g1, p1, nullptr);
    Tensor b = s.lm.forward(g2, p2, nullptr);
    const int v = s.cfg.vocab_size;
    CHECK(std::memcmp(a.data().data(), b.data().data(), static_cast<size_t>(6) * v * 8) == 0);
    bool later_differs = false;
    for (size_t i = static_cast<size_t>(6) * v; i < a.data().size(); ++i)
        later_differs = later_differs || a.data()[i] != b.data()[i];
    CHECK(later_differs);
}

TEST_CASE("uniform logits give ln(vocab) sft loss") {
    TinySetup s = tiny_lm(13, false);
    Tensor head = s.lm.module_weight("q_proj", 0);  // placeholder to silence unused warnings
    (void)head;
    // zero the output head: every position then scores all tokens equally
    auto params = s.lm.parameters();
    Tensor out_head = params.back();
    std::fill(out_head.raw().begin(), out_head.raw().end(), 0.0);
    s.lm.freeze();

    TokenizedExample ex = BaseLm::format_example(s.vocab, "tag item amber", "north", 64);
    Graph g;
    Tensor loss = s.lm.sft_loss(g, std::span<const TokenizedExample>(&ex, 1), nullptr);
    CHECK(std::abs(loss.value() - std::log(static_cast<double>(s.cfg.vocab_size))) < 1e-6);
}

TEST_CASE("sft loss masks the input span and pools by target count") {
    TinySetup s = tiny_lm(17);
    TokenizedExample e1 = BaseLm::format_example(s.vocab, "tag item amber", "north", 64);
    TokenizedExample e2 = BaseLm::format_example(s.vocab, "tag item basil", "south east", 64);

    // every target index sits after the separator
    auto check_mask = [](const TokenizedExample& ex) {
        int sep = -1;
        for (size_t i = 0; i < ex.tokens.size(); ++i)
            if (ex.tokens[i] == Vocab::kSep) sep = static_cast<int>(i);
        REQUIRE(sep > 0);
        for (int i = 0; i < sep; ++i) CHECK(ex.targets[static_cast<size_t>(i)] == -1);
        CHECK(ex.targets[static_cast<size_t>(sep)] == ex.tokens[static_cast<size_t>(sep) + 1]);
        CHECK(ex.targets.back() == -1);
    };
    check_mask(e1);
    check_mask(e2);

    // pooled batch loss equals the manual recomputation from raw logits
    std::vector<TokenizedExample> batch = {e1, e2};
    Graph g;
    Tensor loss = s.lm.sft_loss(g, batch, nullptr);

    double manual = 0.0;
    int total = 0;
    for (const auto& ex : batch) {
        Graph gg;
        Tensor logits = s.lm.forward(gg, ex.tokens, nullptr);
        const int v = s.cfg.vocab_size;
        for (size_t i = 0; i < ex.targets.size(); ++i) {
            if (ex.targets[i] < 0) continue;
            const double* row = logits.data().data() + i * static_cast<size_t>(v);
            double mx = row[0];
            for (int c = 1; c < v; ++c) mx = std::max(mx, row[c]);
            double z = 0.0;
            for (int c = 0; c < v; ++c) z += std::exp(row[c] - mx);
            manual += std::log(z) + mx - row[ex.targets[i]];
            ++total;
        }
    }
    CHECK(loss.value() == doctest::Approx(manual / total).epsilon(1e-12));
}

TEST_CASE("sft gradients w.r.t. adapter factors match finite differences") {
    TinySetup s = tiny_lm(19);
    AdapterSet adapters = random_adapters(s.cfg, s.lm.weights_checksum(), 23, 0.1, true);
    TokenizedExample ex = BaseLm::format_example(s.vocab, "tag item amber", "north", 64);

    const Tensor a0 = adapters.at("q_proj", 0).A;
    const Tensor b1 = adapters.at("v_proj", 1).B;
    auto build = [&](Graph& g) {
        return s.lm.sft_loss(g, std::span<const TokenizedExample>(&ex, 1), &adapters);
    };
    FdReport rep = finite_difference_check(build, {a0, b1}, 1e-5, 24, 99);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("greedy decoding is deterministic and respects max_new") {
    TinySetup s = tiny_lm();
    auto prompt = BaseLm::format_prompt(s.vocab, "tag item amber", 64, 8);
    auto out1 = s.lm.generate_greedy(prompt, nullptr, 6);
    auto out2 = s.lm.generate_greedy(prompt, nullptr, 6);
    CHECK(out1 == out2);
    CHECK(out1.size() <= 6);
    CHECK(s.lm.generate_greedy(prompt, nullptr, 0).empty());
}

TEST_CASE("weights checksum is stable across save and load") {
    TinySetup s = tiny_lm(29);
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "p2p_base_roundtrip.bin").string();
    s.lm.save(path);
    BaseLm loaded = BaseLm::load(path);
    CHECK(loaded.frozen());
    CHECK(loaded.weights_checksum() == s.lm.weights_checksum());
    CHECK(loaded.serialize() == s.lm.serialize());

    // corrupt one byte: the loader must notice
    std::string bytes = read_file(path);
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    write_file(path, bytes);
    CHECK_THROWS_WITH_AS(BaseLm::load(path), doctest::Contains("checksum"),
                         std::runtime_error);
}

TEST_CASE("a tiny model overfits a copy task and echoes") {
    std::vector<std::string> corpus = {"red blue", "green gold", "mint jade", "pink ruby",
                                       "teal onyx", "gray pearl", "plum coral", "sand agate",
                                       "rose quartz", "sage topaz"};
    Vocab vocab = Vocab::build(corpus);
    LMConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 48;
    cfg.n_heads = 2;
    cfg.d_ff = 96;
    cfg.max_seq = 32;
    cfg.vocab_size = vocab.size();
    BaseLm lm = BaseLm::init(cfg, 31);

    std::vector<TokenizedExample> batch;
    for (const auto& text : corpus)
        batch.push_back(BaseLm::format_example(vocab, text, text, cfg.max_seq));

    auto params = lm.parameters();
    AdamWConfig ocfg;
    ocfg.lr = 3e-3;
    AdamW opt(params, ocfg);
    double final_loss = 1e9;
    for (int step = 0; step < 500 && final_loss > 0.005; ++step) {
        Graph g;
        Tensor loss = lm.sft_loss(g, batch, nullptr);
        final_loss = loss.value();
        GradMap grads = g.backward(loss);
        std::vector<Tensor> gvec;
        for (const auto& p : params) gvec.push_back(grads.grad_of(p));
        opt.step(gvec);
    }
    lm.freeze();
    CHECK(final_loss < 0.01);

    int echoed = 0;
    for (const auto& text : corpus) {
        auto prompt = BaseLm::format_prompt(vocab, text, cfg.max_seq, 12);
        auto out = lm.generate_greedy(prompt, nullptr, 10);
        if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
        if (vocab.decode(out) == text) ++echoed;
    }
    CHECK(echoed >= 9);
}
