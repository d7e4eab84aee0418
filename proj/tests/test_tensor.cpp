#include <doctest.h>

#include <cmath>
#include <cstring>

#include "p2p/tensor.hpp"

using namespace p2p;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.raw()) v = rng.uniform(-2.0, 2.0);
    return t;
}

// scalar loss with fixed non-uniform weights so gradient errors cannot cancel
Tensor weighted_sum(Graph& g, const Tensor& t) {
    Tensor w = Tensor::zeros(t.shape());
    Rng rng(fnv1a64("loss-weights") + static_cast<uint64_t>(t.size()));
    for (double& v : w.raw()) v = rng.uniform(-2.0, 2.0);
    return g.sum(g.mul(t, w));
}

}  // namespace

TEST_CASE("matmul identity returns the operand") {
    Rng rng(1);
    Tensor m = random_tensor({3, 3}, rng);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.raw()[static_cast<size_t>(i) * 3 + i] = 1.0;
    Graph g;
    Tensor out = g.matmul(eye, m);
    for (int i = 0; i < 9; ++i) CHECK(out.at(i) == doctest::Approx(m.at(i)).epsilon(1e-15));
}

TEST_CASE("matmul shape mismatch names the op and both shapes") {
    Graph g;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("matmul"), std::invalid_argument);
    try {
        g.matmul(a, b);
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
}

TEST_CASE("non-finite input is rejected with the op name") {
    Graph g;
    Tensor a = Tensor::from({2}, {1.0, std::numeric_limits<double>::infinity()});
    Tensor b = Tensor::from({2}, {1.0, 2.0});
    CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("add"), std::runtime_error);
    Tensor n = Tensor::from({2}, {std::nan(""), 0.0});
    CHECK_THROWS_WITH_AS(g.gelu(n), doctest::Contains("gelu"), std::runtime_error);
}

TEST_CASE("softmax of a constant row is uniform, sums to one, strictly positive") {
    Graph g;
    Tensor out = g.softmax(Tensor::from({3}, {0.0, 0.0, 0.0}));
    for (int i = 0; i < 3; ++i) CHECK(out.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-15));

    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Graph gg;
        Tensor x = random_tensor({4, 7}, rng);
        Tensor y = gg.softmax(x);
        for (int r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int c = 0; c < 7; ++c) {
                CHECK(y.at(r, c) > 0.0);
                s += y.at(r, c);
            }
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("cross_entropy saturates to zero when the correct class dominates") {
    Graph g;
    Tensor logits = Tensor::from({1, 4}, {0.0, 1e9, 0.0, 0.0});
    std::vector<int> tgt = {1};
    Tensor loss = g.cross_entropy(logits, tgt);
    CHECK(std::abs(loss.value()) < 1e-9);
}

TEST_CASE("cross_entropy with no target positions is an error") {
    Graph g;
    Tensor logits = Tensor::zeros({2, 4});
    std::vector<int> tgt = {-1, -1};
    CHECK_THROWS_WITH_AS(g.cross_entropy(logits, tgt), doctest::Contains("no target"),
                         std::runtime_error);
}

TEST_CASE("backward of sum of squares") {
    Graph g;
    Tensor x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
    Tensor loss = g.sum(g.mul(x, x));
    GradMap grads = g.backward(loss);
    Tensor gx = grads.grad_of(x);
    CHECK(gx.at(0) == doctest::Approx(2.0));
    CHECK(gx.at(1) == doctest::Approx(4.0));
    CHECK(gx.at(2) == doctest::Approx(6.0));
}

TEST_CASE("unused leaf gets a zero gradient") {
    Graph g;
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor y = Tensor::from({2}, {5.0, 5.0}, true);
    Tensor loss = g.sum(g.mul(x, x));
    GradMap grads = g.backward(loss);
    CHECK_FALSE(grads.contains(y));
    Tensor gy = grads.grad_of(y);
    CHECK(gy.at(0) == 0.0);
    CHECK(gy.at(1) == 0.0);
}

TEST_CASE("backward on a non-scalar is an error; so is a second backward") {
    Graph g;
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor y = g.mul(x, x);
    CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
    Tensor loss = g.sum(y);
    g.backward(loss);
    CHECK_THROWS_WITH_AS(g.backward(loss), doctest::Contains("already"), std::runtime_error);
}

TEST_CASE("cross_entropy(Wx) gradients match finite differences") {
    Rng rng(3);
    Tensor w = random_tensor({5, 4}, rng, true);
    Tensor x = random_tensor({3, 4}, rng);
    std::vector<int> tgt = {2, -1, 0};
    auto build = [&](Graph& g) { return g.cross_entropy(g.matmul_nt(x, w), tgt); };
    FdReport rep = finite_difference_check(build, {w}, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences on x^2 at x=3") {
    Tensor x = Tensor::from({1}, {3.0}, true);
    auto build = [&](Graph& g) { return g.sum(g.mul(x, x)); };
    FdReport rep = finite_difference_check(build, {x}, 1e-5);
    CHECK(rep.max_rel_err < 1e-8);
}

TEST_CASE("finite differences with zero step is an invalid-step error") {
    Tensor x = Tensor::from({1}, {3.0}, true);
    auto build = [&](Graph& g) { return g.sum(g.mul(x, x)); };
    CHECK_THROWS_WITH_AS(finite_difference_check(build, {x}, 0.0),
                         doctest::Contains("invalid step"), std::invalid_argument);
}

TEST_CASE("finite differences detects a non-deterministic loss") {
    Tensor x = Tensor::from({1}, {3.0}, true);
    int calls = 0;
    auto build = [&](Graph& g) {
        ++calls;
        Tensor jitter = Tensor::scalar(calls * 1e-3);
        return g.sum(g.mul(g.add(x, jitter), x));
    };
    CHECK_THROWS_WITH_AS(finite_difference_check(build, {x}, 1e-5),
                         doctest::Contains("non-deterministic"), std::runtime_error);
}

TEST_CASE("every op matches finite differences on random inputs") {
    Rng rng(4);

    auto check = [&](const char* name, const std::function<Tensor(Graph&)>& build,
                     const std::vector<Tensor>& params) {
        FdReport rep = finite_difference_check(build, params, 1e-5);
        INFO(name << " rel err " << rep.max_rel_err);
        CHECK(rep.max_rel_err < 1e-5);
    };

    {
        Tensor a = random_tensor({3, 4}, rng, true);
        Tensor b = random_tensor({4, 5}, rng, true);
        check("matmul", [&](Graph& g) { return weighted_sum(g, g.matmul(a, b)); }, {a, b});
    }
    {
        Tensor a = random_tensor({3, 4}, rng, true);
        Tensor b = random_tensor({5, 4}, rng, true);
        check("matmul_nt", [&](Graph& g) { return weighted_sum(g, g.matmul_nt(a, b)); },
              {a, b});
    }
    {
        Tensor a = random_tensor({4, 3}, rng, true);
        Tensor b = random_tensor({3}, rng, true);
        check("add_broadcast", [&](Graph& g) { return weighted_sum(g, g.add(a, b)); },
              {a, b});
    }
    {
        Tensor a = random_tensor({2, 3}, rng, true);
        Tensor b = random_tensor({2, 3}, rng, true);
        check("sub", [&](Graph& g) { return weighted_sum(g, g.sub(a, b)); }, {a, b});
    }
    {
        Tensor a = random_tensor({6}, rng, true);
        check("scale", [&](Graph& g) { return weighted_sum(g, g.scale(a, -1.7)); }, {a});
    }
    {
        Tensor a = random_tensor({2, 3}, rng, true);
        Tensor b = random_tensor({2, 2}, rng, true);
        check("concat_cols",
              [&](Graph& g) { return weighted_sum(g, g.concat({a, b}, 1)); }, {a, b});
        check("concat_rows",
              [&](Graph& g) {
                  return weighted_sum(g, g.concat({g.transpose(a), g.transpose(a)}, 0));
              },
              {a});
    }
    {
        Tensor a = random_tensor({3, 6}, rng, true);
        check("slice_cols",
              [&](Graph& g) { return weighted_sum(g, g.slice_cols(a, 2, 3)); }, {a});
    }
    {
        Tensor a = random_tensor({4, 5}, rng, true);
        check("softmax", [&](Graph& g) { return weighted_sum(g, g.softmax(a)); }, {a});
    }
    {
        Tensor x = random_tensor({3, 8}, rng, true);
        Tensor gain = random_tensor({8}, rng, true);
        check("rms_norm",
              [&](Graph& g) { return weighted_sum(g, g.rms_norm(x, gain)); }, {x, gain});
    }
    {
        Tensor table = random_tensor({7, 4}, rng, true);
        std::vector<int> ids = {1, 3, 3, 0, 6};
        check("embedding_lookup",
              [&](Graph& g) { return weighted_sum(g, g.embedding_lookup(table, ids)); },
              {table});
    }
    {
        Tensor a = random_tensor({4, 4}, rng, true);
        check("gelu", [&](Graph& g) { return weighted_sum(g, g.gelu(a)); }, {a});
    }
    {
        Tensor logits = random_tensor({4, 6}, rng, true);
        std::vector<int> tgt = {0, 5, -1, 2};
        check("cross_entropy", [&](Graph& g) { return g.cross_entropy(logits, tgt); },
              {logits});
    }
}

TEST_CASE("backward is bitwise deterministic across rebuilds") {
    Rng rng(5);
    Tensor w = random_tensor({6, 6}, rng, true);
    Tensor x = random_tensor({4, 6}, rng);
    std::vector<int> tgt = {1, 2, 3, 4};
    auto run = [&]() {
        Graph g;
        Tensor h = g.gelu(g.matmul_nt(x, w));
        Tensor loss = g.cross_entropy(g.matmul(h, g.transpose(w)), tgt);
        return g.backward(loss).grad_of(w);
    };
    Tensor g1 = run();
    Tensor g2 = run();
    CHECK(std::memcmp(g1.data().data(), g2.data().data(), g1.data().size() * 8) == 0);
}
