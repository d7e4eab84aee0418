#pragma once

// Adaptive-moment optimizer with decoupled weight decay and global-norm
// gradient clipping.

#include <vector>

#include "p2p/tensor.hpp"

namespace p2p {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;  // <= 0 disables clipping
    // cosine decay from lr to lr*final_lr_fraction across total_steps;
    // total_steps <= 0 keeps the rate constant
    int total_steps = 0;
    double final_lr_fraction = 0.1;
};

class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg);

    // grads are ordered like the params passed at construction
    void step(const std::vector<Tensor>& grads);
    double current_lr() const;

    const AdamWConfig& config() const { return cfg_; }
    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace p2p
