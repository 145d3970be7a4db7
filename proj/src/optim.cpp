#include "organseg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace organseg {

void Adam::step(std::vector<Tensor>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        if (p.name().empty()) throw std::invalid_argument("Adam: unnamed parameter");
        auto& mom = state_[p.name()];
        if (mom.m.empty()) {
            mom.m.assign(static_cast<std::size_t>(p.numel()), 0.0);
            mom.v.assign(static_cast<std::size_t>(p.numel()), 0.0);
        }
        double* w = p.data();
        const std::vector<double>& g = p.grad_values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
            mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace organseg
