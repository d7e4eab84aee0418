#include "p2p/optim.hpp"

#include <cmath>

namespace p2p {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    require(!params_.empty(), "AdamW: no parameters");
    for (const auto& p : params_) {
        require(p.defined(), "AdamW: undefined parameter");
        m_.emplace_back(p.data().size(), 0.0);
        v_.emplace_back(p.data().size(), 0.0);
    }
}

double AdamW::current_lr() const {
    if (cfg_.total_steps <= 0) return cfg_.lr;
    const double progress =
        std::min(1.0, static_cast<double>(t_) / static_cast<double>(cfg_.total_steps));
    const double floor = cfg_.lr * cfg_.final_lr_fraction;
    return floor + (cfg_.lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void AdamW::step(const std::vector<Tensor>& grads) {
    require(grads.size() == params_.size(), "AdamW::step: ", grads.size(), " grads for ",
            params_.size(), " params");
    for (size_t i = 0; i < grads.size(); ++i)
        require(grads[i].shape() == params_[i].shape(), "AdamW::step: grad ", i, " shape ",
                shape_str(grads[i].shape()), " != param shape ",
                shape_str(params_[i].shape()));

    double clip_factor = 1.0;
    if (cfg_.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads)
            for (double x : g.data()) sq += x * x;
        const double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) clip_factor = cfg_.grad_clip / norm;
    }

    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].raw();
        const auto& gv = grads[i].data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < p.size(); ++j) {
            const double g = gv[j] * clip_factor;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                          cfg_.weight_decay * p[j]);
        }
    }
}

}  // namespace p2p
