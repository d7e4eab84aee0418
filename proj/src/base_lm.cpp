#include "p2p/base_lm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <thread>

#include "p2p/optim.hpp"

namespace p2p {

namespace {
const char* kAllModules[] = {"q_proj", "k_proj", "v_proj", "o_proj", "ff_up", "ff_down"};
}

void LMConfig::validate() const {
    require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_ff >= 1 && max_seq >= 2,
            "LMConfig: non-positive dimension");
    require(d_model % n_heads == 0, "LMConfig: d_model ", d_model, " not divisible by n_heads ",
            n_heads);
    require(vocab_size > Vocab::kFirstWordId, "LMConfig: vocab_size ", vocab_size,
            " too small (reserved+byte tokens need ", Vocab::kFirstWordId, ")");
    require(!target_modules.empty(), "LMConfig: empty target_modules");
    for (const auto& m : target_modules) {
        bool ok = false;
        for (const char* known : kAllModules) ok = ok || m == known;
        require(ok, "LMConfig: unknown target module \"", m, "\"");
    }
}

std::pair<int, int> LMConfig::module_dims(const std::string& module) const {
    if (module == "q_proj" || module == "k_proj" || module == "v_proj" || module == "o_proj")
        return {d_model, d_model};
    if (module == "ff_up") return {d_model, d_ff};
    if (module == "ff_down") return {d_ff, d_model};
    fail_invalid("LMConfig: unknown module \"", module, "\"");
}

std::vector<PositionIndex> LMConfig::adapter_positions() const {
    std::vector<PositionIndex> out;
    for (int l = 0; l < n_layers; ++l)
        for (const auto& m : target_modules) out.push_back({m, l});
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------

BaseLm BaseLm::init(const LMConfig& cfg, uint64_t seed) {
    cfg.validate();
    BaseLm lm;
    lm.cfg_ = cfg;
    Rng rng(seed);
    const double s = 0.02;
    const int d = cfg.d_model;
    lm.tok_emb_ = Tensor::randn({cfg.vocab_size, d}, rng, s, true);
    lm.pos_emb_ = Tensor::randn({cfg.max_seq, d}, rng, s, true);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights w;
        w.attn_norm = Tensor::full({d}, 1.0, true);
        w.q = Tensor::randn({d, d}, rng, s, true);
        w.k = Tensor::randn({d, d}, rng, s, true);
        w.v = Tensor::randn({d, d}, rng, s, true);
        w.o = Tensor::randn({d, d}, rng, s, true);
        w.ffn_norm = Tensor::full({d}, 1.0, true);
        w.up = Tensor::randn({cfg.d_ff, d}, rng, s, true);
        w.down = Tensor::randn({d, cfg.d_ff}, rng, s, true);
        lm.layers_.push_back(std::move(w));
    }
    lm.final_norm_ = Tensor::full({d}, 1.0, true);
    lm.head_ = Tensor::randn({cfg.vocab_size, d}, rng, s, true);
    return lm;
}

void BaseLm::for_each_weight(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    fn("tok_emb", tok_emb_);
    fn("pos_emb", pos_emb_);
    for (size_t l = 0; l < layers_.size(); ++l) {
        const auto& w = layers_[l];
        const std::string p = strcat_msg("layer", l, ".");
        fn(p + "attn_norm", w.attn_norm);
        fn(p + "q_proj", w.q);
        fn(p + "k_proj", w.k);
        fn(p + "v_proj", w.v);
        fn(p + "o_proj", w.o);
        fn(p + "ffn_norm", w.ffn_norm);
        fn(p + "ff_up", w.up);
        fn(p + "ff_down", w.down);
    }
    fn("final_norm", final_norm_);
    fn("head", head_);
}

std::vector<Tensor> BaseLm::parameters() {
    std::vector<Tensor> out;
    for_each_weight([&](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
}

const Tensor& BaseLm::module_weight(const std::string& module, int layer) const {
    require(layer >= 0 && layer < cfg_.n_layers, "module_weight: layer ", layer,
            " out of range");
    const auto& w = layers_[static_cast<size_t>(layer)];
    if (module == "q_proj") return w.q;
    if (module == "k_proj") return w.k;
    if (module == "v_proj") return w.v;
    if (module == "o_proj") return w.o;
    if (module == "ff_up") return w.up;
    if (module == "ff_down") return w.down;
    fail_invalid("module_weight: unknown module \"", module, "\"");
}

void BaseLm::check_adapters(const AdapterSet& a) const {
    const auto expected = cfg_.adapter_positions();
    a.validate_positions(expected);
    for (const auto& [pos, f] : a.entries()) {
        const auto [din, dout] = cfg_.module_dims(pos.module);
        require(f.d_in() == din && f.d_out() == dout, "adapter ", pos.str(), ": factor dims (",
                f.d_in(), ",", f.d_out(), ") do not match module dims (", din, ",", dout, ")");
        require(f.rank == a.rank(), "adapter ", pos.str(), ": rank mismatch vs header");
    }
}

Tensor BaseLm::project(Graph& g, const Tensor& x, const std::string& module, int layer,
                       const AdapterSet* adapters) const {
    Tensor y = g.matmul_nt(x, module_weight(module, layer));
    if (adapters && adapters->has(module, layer)) {
        const LoraFactors& f = adapters->at(module, layer);
        Tensor delta = g.matmul_nt(g.matmul_nt(x, f.A), f.B);
        y = g.add(y, g.scale(delta, f.scaling()));
    }
    return y;
}

Tensor BaseLm::forward(Graph& g, std::span<const int> tokens,
                       const AdapterSet* adapters) const {
    if (tokens.empty()) fail("forward: empty input");
    const int t = static_cast<int>(tokens.size());
    require(t <= cfg_.max_seq, "forward: sequence length ", t, " exceeds max_seq ",
            cfg_.max_seq);
    if (adapters) check_adapters(*adapters);

    std::vector<int> positions(tokens.size());
    for (int i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;

    Tensor x = g.add(g.embedding_lookup(tok_emb_, tokens),
                     g.embedding_lookup(pos_emb_, positions));

    // additive causal mask, shared shape [t, t]
    Tensor mask = Tensor::zeros({t, t});
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j)
            mask.raw()[static_cast<size_t>(i) * t + j] = -1e30;

    const int hd = cfg_.d_model / cfg_.n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const auto& w = layers_[static_cast<size_t>(l)];
        Tensor hn = g.rms_norm(x, w.attn_norm);
        Tensor q = project(g, hn, "q_proj", l, adapters);
        Tensor k = project(g, hn, "k_proj", l, adapters);
        Tensor v = project(g, hn, "v_proj", l, adapters);

        std::vector<Tensor> ctx_heads;
        for (int h = 0; h < cfg_.n_heads; ++h) {
            Tensor qh = g.slice_cols(q, h * hd, hd);
            Tensor kh = g.slice_cols(k, h * hd, hd);
            Tensor vh = g.slice_cols(v, h * hd, hd);
            Tensor scores = g.add(g.scale(g.matmul_nt(qh, kh), att_scale), mask);
            ctx_heads.push_back(g.matmul(g.softmax(scores), vh));
        }
        Tensor ctx = g.concat(ctx_heads, 1);
        x = g.add(x, project(g, ctx, "o_proj", l, adapters));

        Tensor hn2 = g.rms_norm(x, w.ffn_norm);
        Tensor ff = project(g, g.gelu(project(g, hn2, "ff_up", l, adapters)), "ff_down", l,
                            adapters);
        x = g.add(x, ff);
    }

    Tensor xn = g.rms_norm(x, final_norm_);
    return g.matmul_nt(xn, head_);
}

Tensor BaseLm::sft_loss(Graph& g, std::span<const TokenizedExample> batch,
                        const AdapterSet* adapters) const {
    require(!batch.empty(), "sft_loss: empty batch");
    int64_t total = 0;
    for (const auto& ex : batch) total += ex.target_count;
    if (total == 0) fail("sft_loss: batch has zero target tokens");

    Tensor loss;
    for (const auto& ex : batch) {
        if (ex.target_count == 0) continue;
        Tensor logits = forward(g, ex.tokens, adapters);
        Tensor ce = g.cross_entropy(logits, ex.targets);
        Tensor weighted =
            g.scale(ce, static_cast<double>(ex.target_count) / static_cast<double>(total));
        loss = loss.defined() ? g.add(loss, weighted) : weighted;
    }
    return loss;
}

std::vector<int> BaseLm::generate_greedy(std::span<const int> prompt,
                                         const AdapterSet* adapters, int max_new) const {
    require(max_new >= 0, "generate_greedy: negative max_new");
    require(static_cast<int>(prompt.size()) <= cfg_.max_seq - max_new,
            "generate_greedy: prompt length ", prompt.size(), " exceeds max_seq - max_new = ",
            cfg_.max_seq - max_new);
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        Graph g;
        Tensor logits = forward(g, seq, adapters);
        const int t = static_cast<int>(seq.size());
        const int v = cfg_.vocab_size;
        const double* row = logits.data().data() + static_cast<size_t>(t - 1) * v;
        int best = 0;
        for (int i = 1; i < v; ++i)
            if (row[i] > row[best]) best = i;  // ties keep the lowest id
        out.push_back(best);
        if (best == Vocab::kEos) break;
        seq.push_back(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// freezing and serialization

void BaseLm::freeze() {
    // drop requires_grad on every weight by rebuilding the handles in place
    auto demote = [](Tensor& t) {
        Tensor fixed = Tensor::from(t.shape(), t.data(), false);
        t = fixed;
    };
    demote(tok_emb_);
    demote(pos_emb_);
    for (auto& w : layers_) {
        demote(w.attn_norm);
        demote(w.q);
        demote(w.k);
        demote(w.v);
        demote(w.o);
        demote(w.ffn_norm);
        demote(w.up);
        demote(w.down);
    }
    demote(final_norm_);
    demote(head_);
    frozen_ = true;
}

std::string BaseLm::serialize() const {
    ByteWriter w;
    w.magic(kBaseMagic);
    w.i32(cfg_.n_layers);
    w.i32(cfg_.d_model);
    w.i32(cfg_.n_heads);
    w.i32(cfg_.d_ff);
    w.i32(cfg_.vocab_size);
    w.i32(cfg_.max_seq);
    w.u32(static_cast<uint32_t>(cfg_.target_modules.size()));
    for (const auto& m : cfg_.target_modules) w.str(m);
    for_each_weight([&](const std::string& name, const Tensor& t) {
        w.str(name);
        w.u32(static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) w.i32(t.dim(i));
        w.f64_array(t.data().data(), t.data().size());
    });
    w.finish_with_crc();
    return w.bytes();
}

void BaseLm::save(const std::string& path) const { write_file(path, serialize()); }

BaseLm BaseLm::load(const std::string& path) {
    ByteReader r(read_file(path), path);
    r.verify_trailing_crc();
    r.expect_magic(kBaseMagic);
    LMConfig cfg;
    cfg.n_layers = r.i32();
    cfg.d_model = r.i32();
    cfg.n_heads = r.i32();
    cfg.d_ff = r.i32();
    cfg.vocab_size = r.i32();
    cfg.max_seq = r.i32();
    cfg.target_modules.clear();
    const uint32_t nmods = r.u32();
    for (uint32_t i = 0; i < nmods; ++i) cfg.target_modules.push_back(r.str());

    BaseLm lm = init(cfg, 0);
    auto params = lm.parameters();
    for (Tensor& t : params) {
        const std::string name = r.str();
        const uint32_t rank = r.u32();
        Shape shape;
        for (uint32_t i = 0; i < rank; ++i) shape.push_back(r.i32());
        require(shape == t.shape(), path, ": array \"", name, "\" has shape ",
                shape_str(shape), ", expected ", shape_str(t.shape()));
        r.f64_array(t.raw().data(), t.raw().size());
    }
    require(r.remaining() == 0, path, ": trailing bytes after weights");
    lm.freeze();
    return lm;
}

uint32_t BaseLm::weights_checksum() const { return crc32_of(serialize()); }

// ---------------------------------------------------------------------------
// example formatting

TokenizedExample BaseLm::format_example(const Vocab& vocab, std::string_view input,
                                        std::string_view output, int max_seq) {
    std::vector<int> in_ids = vocab.encode(input);
    std::vector<int> out_ids = vocab.encode(output);
    // [BOS] input [SEP] output [EOS]
    const int budget = max_seq - static_cast<int>(out_ids.size()) - 3;
    require(budget >= 0, "format_example: output span of ", out_ids.size(),
            " tokens cannot fit in max_seq ", max_seq);
    if (static_cast<int>(in_ids.size()) > budget)
        in_ids.erase(in_ids.begin(), in_ids.end() - budget);

    TokenizedExample ex;
    ex.tokens.push_back(Vocab::kBos);
    ex.tokens.insert(ex.tokens.end(), in_ids.begin(), in_ids.end());
    ex.tokens.push_back(Vocab::kSep);
    const int sep_idx = static_cast<int>(ex.tokens.size()) - 1;
    ex.tokens.insert(ex.tokens.end(), out_ids.begin(), out_ids.end());
    ex.tokens.push_back(Vocab::kEos);

    const int t = static_cast<int>(ex.tokens.size());
    ex.targets.assign(static_cast<size_t>(t), -1);
    for (int i = sep_idx; i + 1 < t; ++i) {
        ex.targets[static_cast<size_t>(i)] = ex.tokens[static_cast<size_t>(i + 1)];
        ++ex.target_count;
    }
    return ex;
}

std::vector<int> BaseLm::format_prompt(const Vocab& vocab, std::string_view input, int max_seq,
                                       int reserve) {
    std::vector<int> in_ids = vocab.encode(input);
    const int budget = max_seq - reserve - 2;
    require(budget >= 0, "format_prompt: no room for prompt with reserve ", reserve);
    if (static_cast<int>(in_ids.size()) > budget)
        in_ids.erase(in_ids.begin(), in_ids.end() - budget);
    std::vector<int> tokens;
    tokens.push_back(Vocab::kBos);
    tokens.insert(tokens.end(), in_ids.begin(), in_ids.end());
    tokens.push_back(Vocab::kSep);
    return tokens;
}

// ---------------------------------------------------------------------------
// pretraining

double pretrain_base(BaseLm& lm, const std::vector<std::vector<int>>& sequences,
                     const PretrainConfig& cfg) {
    require(!lm.frozen(), "pretrain_base: model already frozen");
    require(!sequences.empty(), "pretrain_base: no sequences");
    for (const auto& s : sequences)
        require(s.size() >= 2, "pretrain_base: sequence shorter than 2 tokens");

    auto params = lm.parameters();
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.grad_clip = cfg.grad_clip;
    ocfg.total_steps = cfg.steps;
    AdamW opt(params, ocfg);
    Rng rng(cfg.seed);
    const int window = std::min(cfg.window, lm.config().max_seq);

    const int jobs = std::max(1, cfg.jobs);
    std::vector<std::vector<double>> grad_acc(params.size());
    for (size_t i = 0; i < params.size(); ++i)
        grad_acc[i].assign(params[i].data().size(), 0.0);

    double last_loss = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        // windows drawn on the main thread so the stream is job-independent
        std::vector<std::pair<const std::vector<int>*, int>> slots;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& seq = sequences[rng.uniform_int(sequences.size())];
            const int len = static_cast<int>(seq.size());
            const int take = std::min(window, len);
            const int start =
                len == take ? 0 : static_cast<int>(rng.uniform_int(static_cast<uint64_t>(len - take + 1)));
            slots.emplace_back(&seq, start);
        }

        struct SlotOut {
            double loss = 0.0;
            int count = 0;
            GradMap grads;
        };
        auto run_slot = [&](const std::pair<const std::vector<int>*, int>& slot) {
            const auto& seq = *slot.first;
            const int take = std::min(window, static_cast<int>(seq.size()));
            std::span<const int> slice(seq.data() + slot.second, static_cast<size_t>(take));
            Graph g;
            Tensor logits = lm.forward(g, slice, nullptr);
            std::vector<int> targets(slice.begin() + 1, slice.end());
            targets.push_back(-1);
            Tensor ce = g.cross_entropy(logits, targets);
            SlotOut out;
            out.loss = ce.value();
            out.count = take - 1;
            out.grads = g.backward(ce);
            return out;
        };

        for (auto& acc : grad_acc) std::fill(acc.begin(), acc.end(), 0.0);
        double loss_sum = 0.0;
        int64_t total = 0;
        std::vector<SlotOut> results(slots.size());
        for (size_t chunk = 0; chunk < slots.size(); chunk += static_cast<size_t>(jobs)) {
            const size_t end = std::min(slots.size(), chunk + static_cast<size_t>(jobs));
            if (jobs == 1 || end - chunk == 1) {
                for (size_t s = chunk; s < end; ++s) results[s] = run_slot(slots[s]);
            } else {
                std::vector<std::thread> workers;
                std::vector<std::exception_ptr> errors(end - chunk);
                for (size_t s = chunk; s < end; ++s) {
                    workers.emplace_back([&, s] {
                        try {
                            results[s] = run_slot(slots[s]);
                        } catch (...) {
                            errors[s - chunk] = std::current_exception();
                        }
                    });
                }
                for (auto& w : workers) w.join();
                for (auto& err : errors)
                    if (err) std::rethrow_exception(err);
            }
        }
        for (const auto& r : results) total += r.count;
        for (const auto& r : results) {
            const double w = static_cast<double>(r.count) / static_cast<double>(total);
            loss_sum += w * r.loss;
            for (size_t i = 0; i < params.size(); ++i) {
                const std::vector<double>* gbuf = r.grads.find(params[i]);
                if (!gbuf) continue;
                auto& acc = grad_acc[i];
                // per-slot cross entropies are means; reweight to the pooled mean
                for (size_t j = 0; j < acc.size(); ++j) acc[j] += w * (*gbuf)[j];
            }
        }
        last_loss = loss_sum;
        require(std::isfinite(last_loss), "pretrain_base: non-finite loss at step ", step);
        std::vector<Tensor> gvec;
        gvec.reserve(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor g = Tensor::zeros(params[i].shape());
            g.raw() = grad_acc[i];
            gvec.push_back(std::move(g));
        }
        opt.step(gvec);
    }
    lm.freeze();
    return last_loss;
}

}  // namespace p2p
