#include "p2p/lora.hpp"

#include <algorithm>
#include <cmath>

namespace p2p {

void LoraFactors::validate(const char* where) const {
    require(A.defined() && B.defined(), where, ": undefined factor matrices");
    require(A.rank() == 2 && B.rank() == 2, where, ": factors must be rank-2");
    require(rank >= 1, where, ": rank must be >= 1, got ", rank);
    require(A.dim(0) == rank && B.dim(1) == rank, where, ": factor shapes ",
            shape_str(A.shape()), " / ", shape_str(B.shape()), " do not carry rank ", rank);
    require(rank <= std::min(d_in(), d_out()), where, ": rank ", rank,
            " exceeds min(d_in, d_out) = ", std::min(d_in(), d_out()));
    for (double x : A.data()) require(std::isfinite(x), where, ": non-finite entry in A");
    for (double x : B.data()) require(std::isfinite(x), where, ": non-finite entry in B");
}

std::vector<double> delta_apply(std::span<const double> x, const LoraFactors& f) {
    f.validate("delta_apply");
    require(static_cast<int>(x.size()) == f.d_in(), "delta_apply: input length ", x.size(),
            " does not match d_in ", f.d_in());
    const int r = f.rank, din = f.d_in(), dout = f.d_out();
    std::vector<double> ax(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        const double* row = f.A.data().data() + static_cast<size_t>(i) * din;
        for (int j = 0; j < din; ++j) acc += row[j] * x[static_cast<size_t>(j)];
        ax[static_cast<size_t>(i)] = acc;
    }
    const double s = f.scaling();
    std::vector<double> y(static_cast<size_t>(dout), 0.0);
    for (int i = 0; i < dout; ++i) {
        double acc = 0.0;
        const double* row = f.B.data().data() + static_cast<size_t>(i) * r;
        for (int j = 0; j < r; ++j) acc += row[j] * ax[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = s * acc;
    }
    return y;
}

Tensor merge(const Tensor& w0, const LoraFactors& f) {
    f.validate("merge");
    require(w0.rank() == 2 && w0.dim(0) == f.d_out() && w0.dim(1) == f.d_in(),
            "merge: base weight ", shape_str(w0.shape()), " does not match factors [",
            f.d_out(), ",", f.d_in(), "]");
    const int r = f.rank, din = f.d_in(), dout = f.d_out();
    Tensor out = Tensor::zeros(w0.shape());
    out.raw() = w0.data();
    const double s = f.scaling();
    for (int i = 0; i < dout; ++i) {
        const double* brow = f.B.data().data() + static_cast<size_t>(i) * r;
        double* orow = out.raw().data() + static_cast<size_t>(i) * din;
        for (int t = 0; t < r; ++t) {
            const double w = s * brow[t];
            if (w == 0.0) continue;
            const double* arow = f.A.data().data() + static_cast<size_t>(t) * din;
            for (int j = 0; j < din; ++j) orow[j] += w * arow[j];
        }
    }
    return out;
}

AdapterSet::AdapterSet(int rank, double alpha, uint32_t base_checksum)
    : rank_(rank), alpha_(alpha), base_checksum_(base_checksum) {
    require(rank >= 1, "AdapterSet: rank must be >= 1");
}

void AdapterSet::insert(PositionIndex pos, LoraFactors f) {
    f.validate("AdapterSet::insert");
    require(f.rank == rank_, "AdapterSet: entry rank ", f.rank, " differs from set rank ",
            rank_);
    require(f.alpha == alpha_, "AdapterSet: entry alpha differs from set alpha");
    require(entries_.find(pos) == entries_.end(), "AdapterSet: duplicate position ",
            pos.str());
    entries_.emplace(std::move(pos), std::move(f));
}

bool AdapterSet::has(const std::string& module, int layer) const {
    return entries_.count(PositionIndex{module, layer}) > 0;
}

const LoraFactors& AdapterSet::at(const std::string& module, int layer) const {
    auto it = entries_.find(PositionIndex{module, layer});
    if (it == entries_.end()) fail("AdapterSet: no entry for ", module, "@", layer);
    return it->second;
}

void AdapterSet::validate_positions(std::span<const PositionIndex> expected) const {
    require(entries_.size() == expected.size(), "AdapterSet: ", entries_.size(),
            " entries but the model expects ", expected.size());
    for (const auto& pos : expected)
        require(entries_.count(pos) > 0, "AdapterSet: missing position ", pos.str());
}

std::string AdapterSet::serialize() const {
    require(!entries_.empty(), "AdapterSet::serialize: empty set");
    ByteWriter w;
    w.magic(kAdapterMagic);
    w.u32(base_checksum_);
    w.i32(rank_);
    w.f64(alpha_);
    w.i32(static_cast<int32_t>(entries_.size()));
    for (const auto& [pos, f] : entries_) {  // map order == canonical order
        w.str(pos.module);
        w.i32(pos.layer);
        w.i32(f.d_in());
        w.i32(f.d_out());
        w.f64_array(f.A.data().data(), f.A.data().size());
        w.f64_array(f.B.data().data(), f.B.data().size());
    }
    w.finish_with_crc();
    return w.bytes();
}

void AdapterSet::save(const std::string& path) const { write_file(path, serialize()); }

AdapterSet AdapterSet::deserialize(const std::string& bytes, const std::string& origin) {
    ByteReader r(bytes, origin);
    r.verify_trailing_crc();
    r.expect_magic(kAdapterMagic);
    const uint32_t base = r.u32();
    const int rank = r.i32();
    const double alpha = r.f64();
    const int n = r.i32();
    require(rank >= 1 && n >= 1, origin, ": bad adapter header");
    AdapterSet set(rank, alpha, base);
    for (int i = 0; i < n; ++i) {
        PositionIndex pos;
        pos.module = r.str();
        pos.layer = r.i32();
        const int din = r.i32();
        const int dout = r.i32();
        LoraFactors f;
        f.rank = rank;
        f.alpha = alpha;
        f.A = Tensor::zeros({rank, din});
        f.B = Tensor::zeros({dout, rank});
        r.f64_array(f.A.raw().data(), f.A.raw().size());
        r.f64_array(f.B.raw().data(), f.B.raw().size());
        set.insert(std::move(pos), std::move(f));
    }
    require(r.remaining() == 0, origin, ": trailing bytes after adapter entries");
    return set;
}

AdapterSet AdapterSet::load(const std::string& path) {
    return deserialize(read_file(path), path);
}

AdapterSet AdapterSet::load_checked(const std::string& path, uint32_t expected_base_checksum) {
    AdapterSet set = load(path);
    if (set.base_checksum() != expected_base_checksum)
        fail(path, ": adapter built for different base (checksum ", set.base_checksum(),
             " vs current ", expected_base_checksum, ")");
    return set;
}

}  // namespace p2p
