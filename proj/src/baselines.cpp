#include "p2p/baselines.hpp"

#include <algorithm>

#include "p2p/optim.hpp"
#include "p2p/profile.hpp"
#include "p2p/trainer.hpp"

namespace p2p {

std::string to_string(BaselineKind kind) {
    switch (kind) {
        case BaselineKind::base: return "base";
        case BaselineKind::rag: return "rag";
        case BaselineKind::pag: return "pag";
        case BaselineKind::full_history: return "full_history";
        case BaselineKind::mt_lora: return "mt_lora";
        case BaselineKind::oppu: return "oppu";
        case BaselineKind::p2p: return "p2p";
    }
    fail("unreachable baseline kind");
}

BaselineKind baseline_from_string(std::string_view s) {
    if (s == "base") return BaselineKind::base;
    if (s == "rag") return BaselineKind::rag;
    if (s == "pag") return BaselineKind::pag;
    if (s == "full_history") return BaselineKind::full_history;
    if (s == "mt_lora") return BaselineKind::mt_lora;
    if (s == "oppu") return BaselineKind::oppu;
    if (s == "p2p") return BaselineKind::p2p;
    fail_invalid("unknown baseline \"", s,
                 "\" (expected base|rag|pag|full_history|mt_lora|oppu|p2p)");
}

namespace {

int token_count(const Vocab& vocab, const std::string& text) {
    return static_cast<int>(vocab.encode(text).size());
}

std::string join_blocks(const std::vector<std::string>& context, const std::string& x) {
    if (context.empty()) return x;
    std::string out;
    for (size_t i = 0; i < context.size(); ++i) {
        if (i) out += "\n";
        out += context[i];
    }
    out += "\n";
    out += kProfileSeparator;
    out += "\n";
    out += x;
    return out;
}

}  // namespace

std::string rag_input(const std::string& x, const UserRecord& user, int k, const Vocab& vocab,
                      int max_tokens) {
    require(k >= 0, "rag_input: k must be >= 0");
    auto items = bm25_rank(x, profile_span(user), k);
    std::vector<std::string> blocks;
    for (const auto& it : items) blocks.push_back(it.text);
    std::string out = join_blocks(blocks, x);
    while (!blocks.empty() && token_count(vocab, out) > max_tokens) {
        blocks.pop_back();  // lowest score last
        out = join_blocks(blocks, x);
    }
    return out;
}

std::string pag_input(const std::string& x, const UserRecord& user, const TaskSpec& task,
                      int k, const Vocab& vocab, int max_tokens) {
    ProfileText p = build_profile(x, user, task, k);
    if (p.passthrough) {
        std::string out = join_blocks({p.rendered}, x);
        if (token_count(vocab, out) > max_tokens) out = x;
        return out;
    }
    // profile rendering followed by the separator and the query; dropping
    // starts with the lowest-scored retrieved item, then the summary
    auto render = [&](bool with_summary, size_t n_items) {
        std::vector<std::string> blocks;
        std::string profile;
        if (with_summary) profile = p.summary;
        profile += "\n";
        profile += kProfileSeparator;
        for (size_t i = 0; i < n_items; ++i) {
            profile += "\n";
            profile += p.retrieved[i].text;
        }
        blocks.push_back(profile);
        return join_blocks(blocks, x);
    };
    size_t n_items = p.retrieved.size();
    bool with_summary = true;
    std::string out = render(with_summary, n_items);
    while (token_count(vocab, out) > max_tokens) {
        if (n_items > 0) {
            --n_items;
        } else if (with_summary) {
            with_summary = false;
        } else {
            return x;
        }
        out = render(with_summary, n_items);
    }
    return out;
}

std::string full_history_input(const std::string& x, const UserRecord& user,
                               const Vocab& vocab, int max_tokens) {
    auto hist = profile_span(user);
    std::vector<std::string> lines;
    for (const auto& it : hist) lines.push_back(strcat_msg(it.input, " => ", it.output));
    size_t drop = 0;  // oldest lines drop first
    std::string out = join_blocks(lines, x);
    while (drop < lines.size() && token_count(vocab, out) > max_tokens) {
        ++drop;
        std::vector<std::string> keep(lines.begin() + static_cast<long>(drop), lines.end());
        out = join_blocks(keep, x);
    }
    if (token_count(vocab, out) > max_tokens) return x;
    return out;
}

namespace {

AdapterSet fresh_adapters(const LMConfig& cfg, int rank, double alpha, uint32_t base_checksum,
                          uint64_t seed) {
    Rng rng(seed);
    AdapterSet set(rank, alpha, base_checksum);
    for (const auto& pos : cfg.adapter_positions()) {
        const auto [din, dout] = cfg.module_dims(pos.module);
        LoraFactors f;
        f.rank = rank;
        f.alpha = alpha;
        f.A = Tensor::randn({rank, din}, rng, 0.02, true);
        f.B = Tensor::zeros({dout, rank}, true);
        set.insert(pos, std::move(f));
    }
    return set;
}

std::vector<Tensor> adapter_params(const AdapterSet& set) {
    std::vector<Tensor> params;
    for (const auto& [pos, f] : set.entries()) {
        params.push_back(f.A);
        params.push_back(f.B);
    }
    return params;
}

}  // namespace

AdapterSet mtlora_train(const BaseLm& lm, const Vocab& vocab, const Population& pop,
                        std::span<const int> train_users, const MtLoraConfig& cfg) {
    require(lm.frozen(), "mtlora_train: base model must be frozen");
    require(!train_users.empty(), "mtlora_train: no training users");
    const uint32_t base_state = lm.weights_checksum();

    AdapterSet set = fresh_adapters(lm.config(), cfg.rank, cfg.alpha, base_state, cfg.seed);
    auto params = adapter_params(set);
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.grad_clip = cfg.grad_clip;
    ocfg.total_steps = cfg.steps;
    AdamW opt(params, ocfg);

    Rng rng(cfg.seed);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<BatchItem> batch = sample_batch(pop, train_users, cfg.batch, rng);
        std::vector<TokenizedExample> examples;
        for (const BatchItem& item : batch) {
            const UserRecord& u = pop.users[static_cast<size_t>(item.user_index)];
            const Interaction& tgt = target_span(u)[static_cast<size_t>(item.target_index)];
            examples.push_back(
                BaseLm::format_example(vocab, tgt.input, tgt.output, lm.config().max_seq));
        }
        Graph g;
        Tensor loss = lm.sft_loss(g, examples, &set);
        require(std::isfinite(loss.value()), "mtlora_train: non-finite loss at step ", step);
        GradMap grads = g.backward(loss);
        std::vector<Tensor> gvec;
        gvec.reserve(params.size());
        for (const auto& p : params) gvec.push_back(grads.grad_of(p));
        opt.step(gvec);
    }
    require(lm.weights_checksum() == base_state, "mtlora_train: base weights changed");
    return set;
}

AdapterSet oppu_train(const BaseLm& lm, const Vocab& vocab, const UserRecord& user,
                      const OppuConfig& cfg) {
    require(lm.frozen(), "oppu_train: base model must be frozen");
    auto hist = profile_span(user);
    if (hist.empty()) fail("oppu_train: user \"", user.user_id, "\" has no pre-split history");

    AdapterSet set = fresh_adapters(lm.config(), cfg.rank, cfg.alpha, lm.weights_checksum(),
                                    cfg.seed ^ fnv1a64(user.user_id));
    auto params = adapter_params(set);
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.grad_clip = cfg.grad_clip;
    ocfg.total_steps = cfg.epochs * static_cast<int>(hist.size());
    AdamW opt(params, ocfg);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const Interaction& it : hist) {
            TokenizedExample ex =
                BaseLm::format_example(vocab, it.input, it.output, lm.config().max_seq);
            Graph g;
            Tensor loss = lm.sft_loss(g, std::span<const TokenizedExample>(&ex, 1), &set);
            require(std::isfinite(loss.value()), "oppu_train: non-finite loss for user \"",
                    user.user_id, "\"");
            GradMap grads = g.backward(loss);
            std::vector<Tensor> gvec;
            gvec.reserve(params.size());
            for (const auto& p : params) gvec.push_back(grads.grad_of(p));
            opt.step(gvec);
        }
    }
    return set;
}

}  // namespace p2p
