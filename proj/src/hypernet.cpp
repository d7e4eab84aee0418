#include "p2p/hypernet.hpp"

#include <algorithm>
#include <cmath>

namespace p2p {

std::pair<Tensor, Tensor> unflatten(Graph& g, const Tensor& v, int d_in, int d_out, int r) {
    require(v.defined() && v.rank() == 1, "unflatten: expected a rank-1 vector");
    require(r >= 1 && d_in >= 1 && d_out >= 1, "unflatten: non-positive dims");
    const int want = r * (d_in + d_out);
    require(v.dim(0) == want, "unflatten: vector length ", v.dim(0), " != r*(d_in+d_out) = ",
            want);
    Tensor row = g.reshape(v, {1, want});
    Tensor a = g.reshape(g.slice_cols(row, 0, r * d_in), {r, d_in});
    Tensor b = g.reshape(g.slice_cols(row, r * d_in, d_out * r), {d_out, r});
    return {a, b};
}

HyperNetwork HyperNetwork::init(const HyperNetConfig& cfg, const LMConfig& lm_cfg,
                                uint64_t seed) {
    lm_cfg.validate();
    require(cfg.d_emb >= 1 && cfg.d_mod >= 1 && cfg.d_dep >= 1 && cfg.hidden >= 1 &&
                cfg.rank >= 1,
            "HyperNetwork: non-positive config dimension");

    HyperNetwork hn;
    hn.cfg_ = cfg;
    hn.n_layers_ = lm_cfg.n_layers;
    hn.modules_ = lm_cfg.target_modules;
    for (const auto& m : hn.modules_) hn.module_dims_.push_back(lm_cfg.module_dims(m));

    Rng rng(seed);
    const int d_phi = cfg.d_emb + cfg.d_mod + cfg.d_dep;
    hn.e_mod_ = Tensor::randn({static_cast<int>(hn.modules_.size()), cfg.d_mod}, rng, 0.02, true);
    hn.e_dep_ = Tensor::randn({hn.n_layers_, cfg.d_dep}, rng, 0.02, true);
    hn.w1_ = Tensor::randn({cfg.hidden, d_phi}, rng, std::sqrt(2.0 / d_phi), true);
    hn.b1_ = Tensor::zeros({cfg.hidden}, true);
    hn.w2_ = Tensor::randn({cfg.hidden, cfg.hidden}, rng, std::sqrt(2.0 / cfg.hidden), true);
    hn.b2_ = Tensor::zeros({cfg.hidden}, true);

    // one output head per distinct projection geometry; the weight matrix is
    // zero so every generated delta starts at exactly zero, while the bias
    // seeds the A factors the way a fresh low-rank adapter would be drawn
    std::map<std::pair<int, int>, Head> heads;
    for (const auto& dims : hn.module_dims_) {
        if (heads.count(dims)) continue;
        Head h;
        h.d_in = dims.first;
        h.d_out = dims.second;
        const int width = cfg.rank * (h.d_in + h.d_out);
        h.w3 = Tensor::zeros({width, cfg.hidden}, true);
        h.b3 = Tensor::zeros({width}, true);
        const double a_scale = 1.0 / std::sqrt(static_cast<double>(h.d_in));
        for (int i = 0; i < cfg.rank * h.d_in; ++i) h.b3.raw()[static_cast<size_t>(i)] =
            rng.normal(0.0, a_scale);
        heads.emplace(dims, std::move(h));
    }
    hn.heads_ = std::move(heads);
    return hn;
}

int HyperNetwork::n_positions() const {
    return n_layers_ * static_cast<int>(modules_.size());
}

int HyperNetwork::module_index(const std::string& module) const {
    for (size_t i = 0; i < modules_.size(); ++i)
        if (modules_[i] == module) return static_cast<int>(i);
    fail_invalid("HyperNetwork: module \"", module, "\" is not an adapted module");
}

Tensor HyperNetwork::position_input(Graph& g, std::span<const double> e,
                                    const std::string& module, int layer) const {
    require(static_cast<int>(e.size()) == cfg_.d_emb, "position_input: embedding size ",
            e.size(), " != d_emb ", cfg_.d_emb);
    require(layer >= 0 && layer < n_layers_, "position_input: layer ", layer,
            " out of range [0,", n_layers_, ")");
    const int mi = module_index(module);
    Tensor e_row = Tensor::from({1, cfg_.d_emb}, std::vector<double>(e.begin(), e.end()));
    std::vector<int> mid = {mi}, lid = {layer};
    Tensor phi = g.concat(
        {e_row, g.embedding_lookup(e_mod_, mid), g.embedding_lookup(e_dep_, lid)}, 1);
    return g.reshape(phi, {cfg_.d_emb + cfg_.d_mod + cfg_.d_dep});
}

AdapterSet HyperNetwork::generate(Graph& g, std::span<const double> e,
                                  uint32_t base_checksum) const {
    require(static_cast<int>(e.size()) == cfg_.d_emb, "generate: embedding size ", e.size(),
            " != d_emb ", cfg_.d_emb);
    for (double v : e) require(std::isfinite(v), "generate: non-finite embedding entry");

    AdapterSet set(cfg_.rank, cfg_.alpha, base_checksum);

    // positions grouped by head geometry, batched as one MLP pass per group
    for (const auto& [dims, head] : heads_) {
        std::vector<PositionIndex> positions;
        std::vector<int> mod_ids, dep_ids;
        for (int l = 0; l < n_layers_; ++l) {
            for (size_t mi = 0; mi < modules_.size(); ++mi) {
                if (module_dims_[mi] != dims) continue;
                positions.push_back({modules_[mi], l});
                mod_ids.push_back(static_cast<int>(mi));
                dep_ids.push_back(l);
            }
        }
        const int n = static_cast<int>(positions.size());
        std::vector<double> e_rep;
        e_rep.reserve(static_cast<size_t>(n) * e.size());
        for (int i = 0; i < n; ++i) e_rep.insert(e_rep.end(), e.begin(), e.end());
        Tensor e_mat = Tensor::from({n, cfg_.d_emb}, std::move(e_rep));

        Tensor phi = g.concat({e_mat, g.embedding_lookup(e_mod_, mod_ids),
                               g.embedding_lookup(e_dep_, dep_ids)},
                              1);
        Tensor h1 = g.gelu(g.add(g.matmul_nt(phi, w1_), b1_));
        Tensor h2 = g.gelu(g.add(g.matmul_nt(h1, w2_), b2_));
        Tensor flat = g.add(g.matmul_nt(h2, head.w3), head.b3);  // [n, r*(d_in+d_out)]

        const int r = cfg_.rank;
        for (int i = 0; i < n; ++i) {
            Tensor row = g.reshape(g.slice_rows(flat, i, 1), {r * (dims.first + dims.second)});
            auto [a, b] = unflatten(g, row, dims.first, dims.second, r);
            LoraFactors f;
            f.A = a;
            f.B = b;
            f.rank = r;
            f.alpha = cfg_.alpha;
            set.insert(positions[static_cast<size_t>(i)], std::move(f));
        }
    }
    return set;
}

AdapterSet HyperNetwork::generate(std::span<const double> e, uint32_t base_checksum) const {
    Graph g;
    return generate(g, e, base_checksum);
}

std::vector<Tensor> HyperNetwork::parameters() {
    std::vector<Tensor> out = {e_mod_, e_dep_, w1_, b1_, w2_, b2_};
    for (auto& [dims, head] : heads_) {
        out.push_back(head.w3);
        out.push_back(head.b3);
    }
    return out;
}

std::string HyperNetwork::serialize() const {
    ByteWriter w;
    w.magic(kHyperNetMagic);
    w.i32(cfg_.d_emb);
    w.i32(cfg_.d_mod);
    w.i32(cfg_.d_dep);
    w.i32(cfg_.hidden);
    w.i32(cfg_.rank);
    w.f64(cfg_.alpha);
    w.i32(n_layers_);
    w.u32(static_cast<uint32_t>(modules_.size()));
    for (size_t i = 0; i < modules_.size(); ++i) {
        w.str(modules_[i]);
        w.i32(module_dims_[i].first);
        w.i32(module_dims_[i].second);
    }
    auto dump = [&](const std::string& name, const Tensor& t) {
        w.str(name);
        w.u32(static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) w.i32(t.dim(i));
        w.f64_array(t.data().data(), t.data().size());
    };
    dump("e_mod", e_mod_);
    dump("e_dep", e_dep_);
    dump("w1", w1_);
    dump("b1", b1_);
    dump("w2", w2_);
    dump("b2", b2_);
    for (const auto& [dims, head] : heads_) {
        const std::string key = strcat_msg("head", dims.first, "x", dims.second);
        dump(key + ".w3", head.w3);
        dump(key + ".b3", head.b3);
    }
    w.finish_with_crc();
    return w.bytes();
}

void HyperNetwork::save(const std::string& path) const { write_file(path, serialize()); }

HyperNetwork HyperNetwork::load(const std::string& path) {
    ByteReader r(read_file(path), path);
    r.verify_trailing_crc();
    r.expect_magic(kHyperNetMagic);

    HyperNetwork hn;
    hn.cfg_.d_emb = r.i32();
    hn.cfg_.d_mod = r.i32();
    hn.cfg_.d_dep = r.i32();
    hn.cfg_.hidden = r.i32();
    hn.cfg_.rank = r.i32();
    hn.cfg_.alpha = r.f64();
    hn.n_layers_ = r.i32();
    const uint32_t nmods = r.u32();
    for (uint32_t i = 0; i < nmods; ++i) {
        hn.modules_.push_back(r.str());
        const int din = r.i32();
        const int dout = r.i32();
        hn.module_dims_.emplace_back(din, dout);
    }

    auto load_array = [&](const std::string& name, Shape expected) {
        const std::string got = r.str();
        require(got == name, path, ": expected array \"", name, "\", found \"", got, "\"");
        const uint32_t rank = r.u32();
        Shape shape;
        for (uint32_t i = 0; i < rank; ++i) shape.push_back(r.i32());
        require(shape == expected, path, ": array \"", name, "\" has shape ",
                shape_str(shape), ", expected ", shape_str(expected));
        Tensor t = Tensor::zeros(std::move(shape), true);
        r.f64_array(t.raw().data(), t.raw().size());
        return t;
    };
    const int d_phi = hn.cfg_.d_emb + hn.cfg_.d_mod + hn.cfg_.d_dep;
    hn.e_mod_ = load_array("e_mod", {static_cast<int>(nmods), hn.cfg_.d_mod});
    hn.e_dep_ = load_array("e_dep", {hn.n_layers_, hn.cfg_.d_dep});
    hn.w1_ = load_array("w1", {hn.cfg_.hidden, d_phi});
    hn.b1_ = load_array("b1", {hn.cfg_.hidden});
    hn.w2_ = load_array("w2", {hn.cfg_.hidden, hn.cfg_.hidden});
    hn.b2_ = load_array("b2", {hn.cfg_.hidden});
    // heads were serialized in sorted (d_in, d_out) order
    std::map<std::pair<int, int>, Head> heads;
    for (const auto& dims : hn.module_dims_) heads.emplace(dims, Head{});
    for (auto& [dims, h] : heads) {
        h.d_in = dims.first;
        h.d_out = dims.second;
        const int width = hn.cfg_.rank * (h.d_in + h.d_out);
        const std::string key = strcat_msg("head", dims.first, "x", dims.second);
        h.w3 = load_array(key + ".w3", {width, hn.cfg_.hidden});
        h.b3 = load_array(key + ".b3", {width});
    }
    hn.heads_ = std::move(heads);
    require(r.remaining() == 0, path, ": trailing bytes");
    return hn;
}

uint32_t HyperNetwork::params_checksum() const { return crc32_of(serialize()); }

}  // namespace p2p
