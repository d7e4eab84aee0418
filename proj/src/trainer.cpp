#include "p2p/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <thread>
#include <unordered_map>

#include "p2p/optim.hpp"
#include "p2p/profile.hpp"

namespace p2p {

std::vector<BatchItem> sample_batch(const Population& pop, std::span<const int> train_users,
                                    int batch_users, Rng& rng) {
    require(batch_users >= 1, "sample_batch: batch_users must be >= 1");
    std::map<std::string, std::vector<int>> by_task;
    for (int idx : train_users) {
        const UserRecord& u = pop.users[static_cast<size_t>(idx)];
        if (target_span(u).empty()) continue;
        by_task[u.task_id].push_back(idx);
    }
    require(!by_task.empty(), "sample_batch: no trainable users (empty population?)");

    std::vector<std::string> task_ids;
    std::vector<double> cum;
    double total = 0.0;
    for (const auto& [task, users] : by_task) {
        task_ids.push_back(task);
        total += std::sqrt(static_cast<double>(users.size()));
        cum.push_back(total);
    }

    std::map<std::string, std::vector<char>> used;
    for (const auto& [task, users] : by_task) used[task].assign(users.size(), 0);

    std::vector<BatchItem> batch;
    for (int b = 0; b < batch_users; ++b) {
        const double r = rng.uniform() * total;
        size_t ti = 0;
        while (ti + 1 < cum.size() && r >= cum[ti]) ++ti;
        const auto& users = by_task[task_ids[ti]];
        auto& flags = used[task_ids[ti]];

        // uniform over the task's not-yet-sampled users; reset when exhausted
        if (std::find(flags.begin(), flags.end(), 0) == flags.end())
            std::fill(flags.begin(), flags.end(), 0);
        size_t pick;
        do {
            pick = rng.uniform_int(users.size());
        } while (flags[pick]);
        flags[pick] = 1;

        const UserRecord& u = pop.users[static_cast<size_t>(users[pick])];
        const int n_targets = static_cast<int>(target_span(u).size());
        batch.push_back({users[pick], static_cast<int>(rng.uniform_int(
                                          static_cast<uint64_t>(n_targets)))});
    }
    return batch;
}

namespace {

struct SlotResult {
    double loss = 0.0;
    GradMap grads;
};

}  // namespace

TrainReport train(HyperNetwork& hn, const BaseLm& lm, const Vocab& vocab,
                  const Embedder& embedder, const Population& pop,
                  std::span<const int> train_users, const TrainConfig& cfg) {
    require(lm.frozen(), "train: base model must be frozen");
    require(cfg.steps >= 1 && cfg.batch_users >= 1, "train: steps and batch_users must be >= 1");
    const uint32_t embedder_state = embedder.state_checksum();
    const uint32_t base_state = lm.weights_checksum();

    std::vector<int> usable;
    for (int idx : train_users) {
        const UserRecord& u = pop.users[static_cast<size_t>(idx)];
        if (!target_span(u).empty() && (u.profile_text || !profile_span(u).empty()))
            usable.push_back(idx);
    }
    require(!usable.empty(), "train: no usable training users");

    // profiles are query-conditioned per target; embeddings are pure in
    // (user, query, k), so the whole table is precomputed once
    std::unordered_map<int64_t, UserEmbedding> emb_cache;
    std::map<int, SummaryResult> summary_cache;
    for (int idx : usable) {
        const UserRecord& u = pop.users[static_cast<size_t>(idx)];
        const TaskSpec& task = pop.task_of(u);
        auto targets = target_span(u);
        for (size_t t = 0; t < targets.size(); ++t) {
            ProfileText p = build_profile(targets[t].input, u, task, cfg.retrieval_k);
            emb_cache.emplace(static_cast<int64_t>(idx) * 100000 + static_cast<int64_t>(t),
                              embedder.encode(p.rendered));
        }
    }

    auto params = hn.parameters();
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.beta1 = cfg.beta1;
    ocfg.beta2 = cfg.beta2;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.grad_clip = cfg.grad_clip;
    ocfg.total_steps = cfg.steps;
    AdamW opt(params, ocfg);

    const int jobs = std::max(1, cfg.jobs);
    Rng rng(cfg.seed);
    StopWatch watch;

    TrainReport report;
    report.config = cfg;

    std::vector<std::vector<double>> grad_acc(params.size());
    for (size_t i = 0; i < params.size(); ++i)
        grad_acc[i].assign(params[i].data().size(), 0.0);

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<BatchItem> batch = sample_batch(pop, usable, cfg.batch_users, rng);

        auto run_slot = [&](const BatchItem& item) {
            const UserRecord& u = pop.users[static_cast<size_t>(item.user_index)];
            const auto& e = emb_cache.at(static_cast<int64_t>(item.user_index) * 100000 +
                                         item.target_index);
            const Interaction& tgt = target_span(u)[static_cast<size_t>(item.target_index)];
            Graph g;
            AdapterSet adapters = hn.generate(g, e.e, base_state);
            TokenizedExample ex =
                BaseLm::format_example(vocab, tgt.input, tgt.output, lm.config().max_seq);
            Tensor loss = lm.sft_loss(g, std::span<const TokenizedExample>(&ex, 1), &adapters);
            SlotResult out;
            out.loss = loss.value();
            out.grads = g.backward(loss);
            return out;
        };

        for (auto& acc : grad_acc) std::fill(acc.begin(), acc.end(), 0.0);
        double mean_loss = 0.0;

        // chunks of `jobs` slots run in parallel; reduction stays in slot
        // order so results are identical for any job count
        for (size_t chunk = 0; chunk < batch.size(); chunk += static_cast<size_t>(jobs)) {
            const size_t end = std::min(batch.size(), chunk + static_cast<size_t>(jobs));
            std::vector<SlotResult> results(end - chunk);
            if (jobs == 1 || end - chunk == 1) {
                for (size_t s = chunk; s < end; ++s) results[s - chunk] = run_slot(batch[s]);
            } else {
                std::vector<std::thread> workers;
                std::vector<std::exception_ptr> errors(end - chunk);
                for (size_t s = chunk; s < end; ++s) {
                    workers.emplace_back([&, s] {
                        try {
                            results[s - chunk] = run_slot(batch[s]);
                        } catch (...) {
                            errors[s - chunk] = std::current_exception();
                        }
                    });
                }
                for (auto& w : workers) w.join();
                for (auto& err : errors)
                    if (err) std::rethrow_exception(err);
            }
            for (size_t s = chunk; s < end; ++s) {
                const SlotResult& r = results[s - chunk];
                if (!std::isfinite(r.loss))
                    fail("train: non-finite loss at step ", step, " for user \"",
                         pop.users[static_cast<size_t>(batch[s].user_index)].user_id, "\"");
                mean_loss += r.loss;
                for (size_t i = 0; i < params.size(); ++i) {
                    const std::vector<double>* gbuf = r.grads.find(params[i]);
                    if (!gbuf) continue;
                    auto& acc = grad_acc[i];
                    for (size_t j = 0; j < acc.size(); ++j) acc[j] += (*gbuf)[j];
                }
            }
        }
        mean_loss /= static_cast<double>(batch.size());

        if (step == 0) {
            report.step0_loss = mean_loss;
            // frozen-base reference on the same batch
            double base_loss = 0.0;
            for (const BatchItem& item : batch) {
                const UserRecord& u = pop.users[static_cast<size_t>(item.user_index)];
                const Interaction& tgt = target_span(u)[static_cast<size_t>(item.target_index)];
                Graph g;
                TokenizedExample ex =
                    BaseLm::format_example(vocab, tgt.input, tgt.output, lm.config().max_seq);
                base_loss += lm.sft_loss(g, std::span<const TokenizedExample>(&ex, 1), nullptr)
                                 .value();
            }
            report.base_step0_loss = base_loss / static_cast<double>(batch.size());
        }
        if (step % cfg.report_every == 0 || step == cfg.steps - 1)
            report.loss_curve.emplace_back(step, mean_loss);

        std::vector<Tensor> grads;
        grads.reserve(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor g = Tensor::zeros(params[i].shape());
            auto& acc = grad_acc[i];
            const double inv = 1.0 / static_cast<double>(batch.size());
            for (size_t j = 0; j < acc.size(); ++j) acc[j] *= inv;
            g.raw() = acc;
            grads.push_back(std::move(g));
        }
        opt.step(grads);
    }

    require(embedder.state_checksum() == embedder_state,
            "train: embedder state changed during training");
    require(lm.weights_checksum() == base_state, "train: base weights changed during training");

    report.wall_seconds = watch.seconds();
    report.theta_checksum = hn.params_checksum();
    return report;
}

}  // namespace p2p
