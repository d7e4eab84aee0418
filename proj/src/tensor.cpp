#include "p2p/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace p2p {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat, Eigen::Unaligned>;
using CMapM = Eigen::Map<const RowMat, Eigen::Unaligned>;

CMapM cmap(const Tensor& t, int rows, int cols) {
    return CMapM(t.data().data(), rows, cols);
}

MapM map(std::vector<double>& v, int rows, int cols) {
    return MapM(v.data(), rows, cols);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    for (int d : shape) require(d > 0, "Tensor: non-positive dimension in ", shape_str(shape));
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(static_cast<size_t>(numel(t.s_->shape)), 0.0);
    t.s_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.s_->data.begin(), t.s_->data.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    require(numel(shape) == static_cast<int64_t>(data.size()), "Tensor: shape ",
            shape_str(shape), " does not match data length ", data.size());
    Tensor t = zeros(std::move(shape), requires_grad);
    t.s_->data = std::move(data);
    return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.s_->data) v = rng.normal(0.0, stddev);
    return t;
}

double Tensor::value() const {
    require(size() == 1, "Tensor::value: tensor of shape ", shape_str(shape()),
            " is not a scalar");
    return s_->data[0];
}

// ---------------------------------------------------------------------------
// GradMap

Tensor GradMap::grad_of(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    Tensor g = Tensor::zeros(t.shape());
    g.raw() = it->second;
    return g;
}

// ---------------------------------------------------------------------------
// Graph internals

bool Graph::tracked(const Tensor& t) const {
    return t.requires_grad() || derived_.count(t.id()) > 0;
}

std::vector<double>& Graph::grad_buf(const Tensor& t) {
    auto [it, inserted] = grads_.try_emplace(t.id());
    if (inserted) it->second.assign(static_cast<size_t>(t.size()), 0.0);
    return it->second;
}

const std::vector<double>* Graph::find_grad(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
}

void Graph::check_finite(const char* op, const Tensor& t) const {
    for (double v : t.data()) {
        if (!std::isfinite(v)) fail(op, ": non-finite input value");
    }
}

Tensor Graph::record(const char* op, Tensor out, std::vector<Tensor> in,
                     std::function<void(Graph&, const Node&)> back) {
    bool needs = false;
    for (const auto& t : in) needs = needs || tracked(t);
    if (needs) derived_[out.id()] = 1;
    tape_.push_back(Node{op, std::move(out), std::move(in), std::move(back), needs});
    return tape_.back().out;
}

GradMap Graph::backward(const Tensor& loss) {
    require(loss.defined() && loss.size() == 1, "backward: loss must be scalar, got shape ",
            loss.defined() ? shape_str(loss.shape()) : "<undefined>");
    if (backward_run_) fail("backward: graph already differentiated; rebuild the forward pass first");
    backward_run_ = true;

    grad_buf(loss)[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
        const Node& n = *it;
        if (!n.needs_grad) continue;
        if (!find_grad(n.out)) continue;  // not on a path to the loss
        n.back(*this, n);
    }

    GradMap result;
    if (loss.requires_grad()) result.grads_[loss.id()] = *find_grad(loss);
    for (const Node& n : tape_) {
        for (const Tensor& t : n.in) {
            if (!t.requires_grad() || result.grads_.count(t.id())) continue;
            auto it = grads_.find(t.id());
            if (it != grads_.end()) result.grads_[t.id()] = std::move(it->second);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// ops

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
    require(a.defined() && b.defined() && a.rank() == 2 && b.rank() == 2 &&
                a.dim(1) == b.dim(0),
            "matmul: incompatible shapes ", a.defined() ? shape_str(a.shape()) : "<undefined>",
            " x ", b.defined() ? shape_str(b.shape()) : "<undefined>");
    check_finite("matmul", a);
    check_finite("matmul", b);
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    map(out.raw(), m, n).noalias() = cmap(a, m, k) * cmap(b, k, n);
    return record("matmul", out, {a, b}, [m, k, n](Graph& g, const Node& nd) {
        const auto& go = *g.find_grad(nd.out);
        CMapM gm(go.data(), m, n);
        if (g.tracked(nd.in[0]))
            map(g.grad_buf(nd.in[0]), m, k).noalias() += gm * cmap(nd.in[1], k, n).transpose();
        if (g.tracked(nd.in[1]))
            map(g.grad_buf(nd.in[1]), k, n).noalias() += cmap(nd.in[0], m, k).transpose() * gm;
    });
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.defined() && b.defined() && a.rank() == 2 && b.rank() == 2 &&
                a.dim(1) == b.dim(1),
            "matmul_nt: incompatible shapes ", a.defined() ? shape_str(a.shape()) : "<undefined>",
            " x ", b.defined() ? shape_str(b.shape()) : "<undefined>", "^T");
    check_finite("matmul_nt", a);
    check_finite("matmul_nt", b);
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::zeros({m, n});
    map(out.raw(), m, n).noalias() = cmap(a, m, k) * cmap(b, n, k).transpose();
    return record("matmul_nt", out, {a, b}, [m, k, n](Graph& g, const Node& nd) {
        const auto& go = *g.find_grad(nd.out);
        CMapM gm(go.data(), m, n);
        if (g.tracked(nd.in[0]))
            map(g.grad_buf(nd.in[0]), m, k).noalias() += gm * cmap(nd.in[1], n, k);
        if (g.tracked(nd.in[1]))
            map(g.grad_buf(nd.in[1]), n, k).noalias() += gm.transpose() * cmap(nd.in[0], m, k);
    });
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool row_bcast = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
    require(same || row_bcast, "add: incompatible shapes ", shape_str(a.shape()), " and ",
            shape_str(b.shape()));
    check_finite("add", a);
    check_finite("add", b);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.raw();
    if (same) {
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
    } else {
        const size_t n = bv.size();
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i % n];
    }
    return record("add", out, {a, b}, [same](Graph& g, const Node& nd) {
        const auto& go = *g.find_grad(nd.out);
        if (g.tracked(nd.in[0])) {
            auto& ga = g.grad_buf(nd.in[0]);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (g.tracked(nd.in[1])) {
            auto& gb = g.grad_buf(nd.in[1]);
            if (same) {
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            } else {
                const size_t n = gb.size();
                for (size_t i = 0; i < go.size(); ++i) gb[i % n] += go[i];
            }
        }
    });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: incompatible shapes ", shape_str(a.shape()), " and ",
            shape_str(b.shape()));
    check_finite("sub", a);
    check_finite("sub", b);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.raw();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];
    return record("sub", out, {a, b}, [](Graph& g, const Node& nd) {
        const auto& go = *g.find_grad(nd.out);
        if (g.tracked(nd.in[0])) {
            auto& ga = g.grad_buf(nd.in[0]);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (g.tracked(nd.in[1])) {
            auto& gb = g.grad_buf(nd.in[1]);
            for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: incompatible shapes ", shape_str(a.shape()), " and ",
            shape_str(b.shape()));
    check_finite("mul", a);
    check_finite("mul", b);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.raw();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    return record("mul", out, {a, b}, [](Graph& g, const Node& nd) {
        const auto& go = *g.find_grad(nd.out);
        const auto& av = nd.in[0].data();
        const auto& bv = nd.in[1].data();
        if (g.tracked(nd.in[0])) {
            auto& ga = g.grad_buf(nd.in[0]);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (g.tracked(nd.in[1])) {
            auto& gb = g.grad_buf(nd.in[1]);
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

Tensor Graph::scale(const Tensor& a, double c) {
    require(std::isfinite(c), "scale: non-finite factor");
    check_finite("scale", a);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.raw();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
    return record("scale", out, {a}, [c](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        auto& ga = g.grad_buf(nd.in[0]);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
}

Tensor Graph::concat(const std::vector<Tensor>& parts, int axis) {
    require(!parts.empty(), "concat: empty input list");
    const int rank = parts[0].rank();
    require((rank == 1 && axis == 0) || (rank == 2 && (axis == 0 || axis == 1)),
            "concat: unsupported rank ", rank, " with axis ", axis);
    for (const auto& p : parts) {
        require(p.rank() == rank, "concat: mixed ranks");
        check_finite("concat", p);
    }

    Tensor out;
    if (rank == 1) {
        int total = 0;
        for (const auto& p : parts) total += p.dim(0);
        out = Tensor::zeros({total});
        int off = 0;
        for (const auto& p : parts) {
            std::memcpy(out.raw().data() + off, p.data().data(), p.data().size() * 8);
            off += p.dim(0);
        }
    } else if (axis == 0) {
        const int cols = parts[0].dim(1);
        int rows = 0;
        for (const auto& p : parts) {
            require(p.dim(1) == cols, "concat: column mismatch ", shape_str(p.shape()),
                    " vs cols=", cols);
            rows += p.dim(0);
        }
        out = Tensor::zeros({rows, cols});
        size_t off = 0;
        for (const auto& p : parts) {
            std::memcpy(out.raw().data() + off, p.data().data(), p.data().size() * 8);
            off += p.data().size();
        }
    } else {
        const int rows = parts[0].dim(0);
        int cols = 0;
        for (const auto& p : parts) {
            require(p.dim(0) == rows, "concat: row mismatch ", shape_str(p.shape()),
                    " vs rows=", rows);
            cols += p.dim(1);
        }
        out = Tensor::zeros({rows, cols});
        int coff = 0;
        for (const auto& p : parts) {
            const int pc = p.dim(1);
            for (int r = 0; r < rows; ++r) {
                std::memcpy(out.raw().data() + static_cast<size_t>(r) * cols + coff,
                            p.data().data() + static_cast<size_t>(r) * pc,
                            static_cast<size_t>(pc) * 8);
            }
            coff += pc;
        }
    }

    return record("concat", out, parts, [axis, rank](Graph& g, const Node& nd) {
        const auto& go = *g.find_grad(nd.out);
        if (rank == 1 || axis == 0) {
            size_t off = 0;
            for (const auto& p : nd.in) {
                if (g.tracked(p)) {
                    auto& gp = g.grad_buf(p);
                    for (size_t i = 0; i < gp.size(); ++i) gp[i] += go[off + i];
                }
                off += p.data().size();
            }
        } else {
            const int rows = nd.in[0].dim(0);
            const int cols = nd.out.dim(1);
            int coff = 0;
            for (const auto& p : nd.in) {
                const int pc = p.dim(1);
                if (g.tracked(p)) {
                    auto& gp = g.grad_buf(p);
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < pc; ++c)
                            gp[static_cast<size_t>(r) * pc + c] +=
                                go[static_cast<size_t>(r) * cols + coff + c];
                }
                coff += pc;
            }
        }
    });
}

Tensor Graph::slice_cols(const Tensor& a, int start, int len) {
    require(a.rank() == 2, "slice_cols: expected rank-2 input, got ", shape_str(a.shape()));
    require(start >= 0 && len > 0 && start + len <= a.dim(1), "slice_cols: range [", start, ",",
            start + len, ") out of bounds for ", shape_str(a.shape()));
    check_finite("slice_cols", a);
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros({rows, len});
    for (int r = 0; r < rows; ++r)
        std::memcpy(out.raw().data() + static_cast<size_t>(r) * len,
                    a.data().data() + static_cast<size_t>(r) * cols + start,
                    static_cast<size_t>(len) * 8);
    return record("slice_cols", out, {a}, [start, len, rows, cols](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        auto& ga = g.grad_buf(nd.in[0]);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < len; ++c)
                ga[static_cast<size_t>(r) * cols + start + c] +=
                    go[static_cast<size_t>(r) * len + c];
    });
}

Tensor Graph::slice_rows(const Tensor& a, int start, int len) {
    require(a.rank() == 2, "slice_rows: expected rank-2 input, got ", shape_str(a.shape()));
    require(start >= 0 && len > 0 && start + len <= a.dim(0), "slice_rows: range [", start, ",",
            start + len, ") out of bounds for ", shape_str(a.shape()));
    check_finite("slice_rows", a);
    const int cols = a.dim(1);
    Tensor out = Tensor::zeros({len, cols});
    std::memcpy(out.raw().data(), a.data().data() + static_cast<size_t>(start) * cols,
                static_cast<size_t>(len) * cols * 8);
    return record("slice_rows", out, {a}, [start, cols](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        auto& ga = g.grad_buf(nd.in[0]);
        const size_t off = static_cast<size_t>(start) * cols;
        for (size_t i = 0; i < go.size(); ++i) ga[off + i] += go[i];
    });
}

Tensor Graph::reshape(const Tensor& a, Shape shape) {
    require(numel(shape) == a.size(), "reshape: cannot view ", shape_str(a.shape()), " as ",
            shape_str(shape));
    check_finite("reshape", a);
    Tensor out = Tensor::zeros(std::move(shape));
    out.raw() = a.data();
    return record("reshape", out, {a}, [](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        auto& ga = g.grad_buf(nd.in[0]);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

Tensor Graph::transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose: expected rank-2 input, got ", shape_str(a.shape()));
    check_finite("transpose", a);
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros({cols, rows});
    map(out.raw(), cols, rows) = cmap(a, rows, cols).transpose();
    return record("transpose", out, {a}, [rows, cols](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        auto& ga = g.grad_buf(nd.in[0]);
        MapM(ga.data(), rows, cols).noalias() += CMapM(go.data(), cols, rows).transpose();
    });
}

Tensor Graph::softmax(const Tensor& a) {
    require(a.rank() == 1 || a.rank() == 2, "softmax: expected rank 1 or 2, got ",
            shape_str(a.shape()));
    check_finite("softmax", a);
    const int rows = a.rank() == 2 ? a.dim(0) : 1;
    const int cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.raw();
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + static_cast<size_t>(r) * cols;
        double* y = ov.data() + static_cast<size_t>(r) * cols;
        double mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            z += y[c];
        }
        for (int c = 0; c < cols; ++c) y[c] /= z;
    }
    return record("softmax", out, {a}, [rows, cols](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        const auto& y = nd.out.data();
        auto& ga = g.grad_buf(nd.in[0]);
        for (int r = 0; r < rows; ++r) {
            const size_t off = static_cast<size_t>(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += go[off + c] * y[off + c];
            for (int c = 0; c < cols; ++c) ga[off + c] += y[off + c] * (go[off + c] - dot);
        }
    });
}

Tensor Graph::rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    require(x.rank() == 1 || x.rank() == 2, "rms_norm: expected rank 1 or 2, got ",
            shape_str(x.shape()));
    const int rows = x.rank() == 2 ? x.dim(0) : 1;
    const int cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
    require(gain.rank() == 1 && gain.dim(0) == cols, "rms_norm: gain shape ",
            shape_str(gain.shape()), " does not match feature size ", cols);
    check_finite("rms_norm", x);
    check_finite("rms_norm", gain);
    Tensor out = Tensor::zeros(x.shape());
    auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    const auto& xv = x.data();
    const auto& gv = gain.data();
    auto& ov = out.raw();
    for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * cols;
        double ss = 0.0;
        for (int c = 0; c < cols; ++c) ss += xv[off + c] * xv[off + c];
        const double iv = 1.0 / std::sqrt(ss / cols + eps);
        (*inv)[static_cast<size_t>(r)] = iv;
        for (int c = 0; c < cols; ++c) ov[off + c] = xv[off + c] * iv * gv[c];
    }
    return record("rms_norm", out, {x, gain}, [rows, cols, inv](Graph& g, const Node& nd) {
        const auto& go = *g.find_grad(nd.out);
        const auto& xv = nd.in[0].data();
        const auto& gv = nd.in[1].data();
        const bool want_x = g.tracked(nd.in[0]);
        const bool want_gain = g.tracked(nd.in[1]);
        std::vector<double>* gx = want_x ? &g.grad_buf(nd.in[0]) : nullptr;
        std::vector<double>* gg = want_gain ? &g.grad_buf(nd.in[1]) : nullptr;
        for (int r = 0; r < rows; ++r) {
            const size_t off = static_cast<size_t>(r) * cols;
            const double iv = (*inv)[static_cast<size_t>(r)];
            if (want_x) {
                double s = 0.0;
                for (int c = 0; c < cols; ++c) s += go[off + c] * gv[c] * xv[off + c];
                const double k = iv * iv * iv * s / cols;
                for (int c = 0; c < cols; ++c)
                    (*gx)[off + c] += go[off + c] * gv[c] * iv - xv[off + c] * k;
            }
            if (want_gain) {
                for (int c = 0; c < cols; ++c) (*gg)[c] += go[off + c] * xv[off + c] * iv;
            }
        }
    });
}

Tensor Graph::embedding_lookup(const Tensor& table, std::span<const int> ids) {
    require(table.rank() == 2, "embedding_lookup: table must be rank 2, got ",
            shape_str(table.shape()));
    require(!ids.empty(), "embedding_lookup: empty id list");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        require(id >= 0 && id < v, "embedding_lookup: id ", id, " out of range [0,", v, ")");
    check_finite("embedding_lookup", table);
    const int t = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({t, d});
    for (int i = 0; i < t; ++i)
        std::memcpy(out.raw().data() + static_cast<size_t>(i) * d,
                    table.data().data() + static_cast<size_t>(ids[i]) * d,
                    static_cast<size_t>(d) * 8);
    auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
    return record("embedding_lookup", out, {table}, [idv, d](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        auto& gt = g.grad_buf(nd.in[0]);
        for (size_t i = 0; i < idv->size(); ++i) {
            const size_t src = i * d;
            const size_t dst = static_cast<size_t>((*idv)[i]) * d;
            for (int c = 0; c < d; ++c) gt[dst + c] += go[src + c];
        }
    });
}

Tensor Graph::gelu(const Tensor& a) {
    check_finite("gelu", a);
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.raw();
    for (size_t i = 0; i < av.size(); ++i) {
        ov[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
    }
    return record("gelu", out, {a}, [](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const auto& go = *g.find_grad(nd.out);
        const auto& av = nd.in[0].data();
        auto& ga = g.grad_buf(nd.in[0]);
        for (size_t i = 0; i < go.size(); ++i) {
            const double x = av[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            ga[i] += go[i] * (cdf + x * pdf);
        }
    });
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> targets) {
    require(logits.rank() == 2, "cross_entropy: logits must be rank 2, got ",
            shape_str(logits.shape()));
    const int rows = logits.dim(0), cols = logits.dim(1);
    require(static_cast<int>(targets.size()) == rows, "cross_entropy: ", targets.size(),
            " targets for ", rows, " logit rows");
    check_finite("cross_entropy", logits);
    int count = 0;
    for (int t : targets) {
        require(t < cols, "cross_entropy: target id ", t, " out of range [0,", cols, ")");
        if (t >= 0) ++count;
    }
    if (count == 0) fail("cross_entropy: no target positions in batch");

    // keep row softmax for the backward pass
    auto probs = std::make_shared<std::vector<double>>(logits.data().size());
    const auto& lv = logits.data();
    double loss = 0.0;
    for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * cols;
        double mx = lv[off];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, lv[off + c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            (*probs)[off + c] = std::exp(lv[off + c] - mx);
            z += (*probs)[off + c];
        }
        for (int c = 0; c < cols; ++c) (*probs)[off + c] /= z;
        if (targets[static_cast<size_t>(r)] >= 0) {
            loss += std::log(z) + mx - lv[off + targets[static_cast<size_t>(r)]];
        }
    }
    Tensor out = Tensor::scalar(loss / count);
    auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
    return record("cross_entropy", out, {logits},
                  [probs, tgt, rows, cols, count](Graph& g, const Node& nd) {
                      if (!g.tracked(nd.in[0])) return;
                      const double go = (*g.find_grad(nd.out))[0];
                      auto& gl = g.grad_buf(nd.in[0]);
                      const double w = go / count;
                      for (int r = 0; r < rows; ++r) {
                          const int t = (*tgt)[static_cast<size_t>(r)];
                          if (t < 0) continue;
                          const size_t off = static_cast<size_t>(r) * cols;
                          for (int c = 0; c < cols; ++c) gl[off + c] += w * (*probs)[off + c];
                          gl[off + t] -= w;
                      }
                  });
}

Tensor Graph::sum(const Tensor& a) {
    check_finite("sum", a);
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    return record("sum", out, {a}, [](Graph& g, const Node& nd) {
        if (!g.tracked(nd.in[0])) return;
        const double go = (*g.find_grad(nd.out))[0];
        auto& ga = g.grad_buf(nd.in[0]);
        for (double& v : ga) v += go;
    });
}

// ---------------------------------------------------------------------------
// finite differences

FdReport finite_difference_check(const std::function<Tensor(Graph&)>& build_loss,
                                 const std::vector<Tensor>& params, double eps,
                                 int64_t max_coords_per_param, uint64_t sample_seed) {
    if (!(eps > 0.0)) fail_invalid("finite_difference_check: invalid step eps=", eps);
    for (const auto& p : params)
        require(p.defined() && p.requires_grad(),
                "finite_difference_check: params must be leaf tensors with requires_grad");

    const auto eval = [&]() {
        Graph g;
        return build_loss(g).value();
    };

    double base1, base2;
    GradMap grads;
    {
        Graph g;
        Tensor loss = build_loss(g);
        base1 = loss.value();
        grads = g.backward(loss);
    }
    base2 = eval();
    if (std::memcmp(&base1, &base2, sizeof(double)) != 0) {
        fail("finite_difference_check: non-deterministic loss (", base1, " vs ", base2, ")");
    }

    Rng rng(sample_seed);
    FdReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        Tensor analytic = grads.grad_of(p);
        const int64_t n = p.size();
        std::vector<int64_t> coords;
        if (max_coords_per_param > 0 && max_coords_per_param < n) {
            for (int64_t i = 0; i < max_coords_per_param; ++i)
                coords.push_back(static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n))));
        } else {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        }
        for (int64_t c : coords) {
            double& slot = p.raw()[static_cast<size_t>(c)];
            const double saved = slot;
            slot = saved + eps;
            const double fp = eval();
            slot = saved - eps;
            const double fm = eval();
            slot = saved;
            const double central = (fp - fm) / (2.0 * eps);
            const double a = analytic.at(static_cast<int>(c));
            const double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = static_cast<int>(pi);
                rep.worst_coord = c;
                rep.analytic = a;
                rep.numeric = central;
            }
        }
    }
    return rep;
}

}  // namespace p2p
