#pragma once

// Dense float64 tensors (rank 0..2 in practice) with tape-based reverse-mode
// automatic differentiation.
//
// A Tensor is a value handle (shared storage). A Graph records every op
// applied through it and can run one backward pass, producing a GradMap from
// leaf tensors (requires_grad == true) to their gradients. Tensors with
// requires_grad == false are immutable once built into a graph and may be
// shared freely across graphs and threads; each Graph is single-threaded.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2p/common.hpp"

namespace p2p {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);
    // entries i.i.d. N(0, stddev^2)
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    int dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(s_->data.size()); }
    bool requires_grad() const { return s_->requires_grad; }

    const std::vector<double>& data() const { return s_->data; }
    // mutable access; valid only for leaves outside of any live graph
    // (optimizer updates, initialization)
    std::vector<double>& raw() { return s_->data; }

    double value() const;           // scalar convenience
    double at(int i) const { return s_->data[static_cast<size_t>(i)]; }
    double at(int r, int c) const { return s_->data[static_cast<size_t>(r) * dim(1) + c]; }

    // storage identity; keys gradient maps
    const void* id() const { return s_.get(); }

private:
    struct Storage {
        Shape shape;
        std::vector<double> data;
        bool requires_grad = false;
    };
    std::shared_ptr<Storage> s_;
};

// Gradients produced by one backward pass, keyed by leaf tensor identity.
class GradMap {
public:
    bool contains(const Tensor& t) const { return grads_.count(t.id()) > 0; }
    // gradient of the loss w.r.t. t; zeros if the loss does not depend on t
    Tensor grad_of(const Tensor& t) const;
    // raw buffer, or nullptr when the loss does not depend on t
    const std::vector<double>* find(const Tensor& t) const {
        auto it = grads_.find(t.id());
        return it == grads_.end() ? nullptr : &it->second;
    }
    size_t size() const { return grads_.size(); }

private:
    friend class Graph;
    std::unordered_map<const void*, std::vector<double>> grads_;
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // [m,k] x [k,n] -> [m,n]
    Tensor matmul(const Tensor& a, const Tensor& b);
    // [m,k] x [n,k]^T -> [m,n]; the common x * W^T pattern for weights
    // stored as [d_out, d_in]
    Tensor matmul_nt(const Tensor& a, const Tensor& b);
    // same shape, or b rank-1 broadcast across the rows of a
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
    Tensor scale(const Tensor& a, double c);
    Tensor concat(const std::vector<Tensor>& parts, int axis);
    Tensor slice_cols(const Tensor& a, int start, int len);
    Tensor slice_rows(const Tensor& a, int start, int len);
    Tensor reshape(const Tensor& a, Shape shape);  // same element count, copy
    Tensor transpose(const Tensor& a);
    Tensor softmax(const Tensor& a);  // along the last dimension
    // y = x / rms(x) * gain, rms over the last dimension
    Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
    Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
    Tensor gelu(const Tensor& a);  // exact erf form
    // mean next-token cross-entropy over rows whose target id >= 0
    Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
    Tensor sum(const Tensor& a);  // scalar

    // One reverse pass from a scalar loss. A second call without rebuilding
    // the graph is an error.
    GradMap backward(const Tensor& loss);

    size_t num_nodes() const { return tape_.size(); }

private:
    struct Node {
        const char* op;
        Tensor out;
        std::vector<Tensor> in;
        std::function<void(Graph&, const Node&)> back;
        bool needs_grad;
    };

    Tensor record(const char* op, Tensor out, std::vector<Tensor> in,
                  std::function<void(Graph&, const Node&)> back);
    bool tracked(const Tensor& t) const;
    // gradient accumulation buffer for t (created on first use)
    std::vector<double>& grad_buf(const Tensor& t);
    const std::vector<double>* find_grad(const Tensor& t) const;
    void check_finite(const char* op, const Tensor& t) const;

    std::vector<Node> tape_;
    std::unordered_map<const void*, std::vector<double>> grads_;
    std::unordered_map<const void*, char> derived_;  // non-leaf tensors needing grad
    bool backward_run_ = false;
};

// Central finite-difference check of analytic gradients.
//
// build_loss must deterministically rebuild the same scalar loss from the
// current values of `params` (leaf tensors with requires_grad). Returns the
// maximum over checked coordinates of
//   |analytic - central| / (|analytic| + |central| + 1e-12).
// If max_coords_per_param > 0, that many coordinates per parameter are
// sampled with sample_seed instead of sweeping all of them.
struct FdReport {
    double max_rel_err = 0.0;
    int worst_param = -1;
    int64_t worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    int64_t coords_checked = 0;
};

FdReport finite_difference_check(const std::function<Tensor(Graph&)>& build_loss,
                                 const std::vector<Tensor>& params, double eps,
                                 int64_t max_coords_per_param = -1,
                                 uint64_t sample_seed = 0);

}  // namespace p2p
