#pragma once

// End-to-end optimization of the adapter generator over a user population:
// build profile -> embed -> generate adapters -> SFT loss on the user's
// held-out targets -> backprop into the generator parameters. The base model
// and the embedder stay frozen throughout.

#include <span>
#include <utility>
#include <vector>

#include "p2p/base_lm.hpp"
#include "p2p/corpus.hpp"
#include "p2p/embedder.hpp"
#include "p2p/hypernet.hpp"
#include "p2p/profile.hpp"

namespace p2p {

struct TrainConfig {
    double lr = 2e-3;            // desk-scale default for the toy setup
    double reference_lr = 2e-5;  // the production-scale value this derives from
    int steps = 2000;
    int batch_users = 32;
    uint64_t seed = 0;
    double grad_clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    int retrieval_k = kDefaultRetrievalK;
    int jobs = 1;
    int report_every = 10;
};

struct TrainReport {
    std::vector<std::pair<int, double>> loss_curve;  // (step, mean batch loss)
    double wall_seconds = 0.0;
    uint32_t theta_checksum = 0;
    double step0_loss = 0.0;       // generator loss on the first batch, pre-update
    double base_step0_loss = 0.0;  // frozen base (no adapters) on the same batch
    TrainConfig config;
};

struct BatchItem {
    int user_index = 0;    // into Population::users
    int target_index = 0;  // into target_span(user)
};

// Tasks are drawn with probability proportional to sqrt(train user count);
// users are uniform without replacement within a batch (with wrap-around
// when a task is exhausted); each user contributes one held-out target.
std::vector<BatchItem> sample_batch(const Population& pop, std::span<const int> train_users,
                                    int batch_users, Rng& rng);

TrainReport train(HyperNetwork& hn, const BaseLm& lm, const Vocab& vocab,
                  const Embedder& embedder, const Population& pop,
                  std::span<const int> train_users, const TrainConfig& cfg);

}  // namespace p2p
