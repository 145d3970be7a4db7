#pragma once

#include <unordered_map>
#include <vector>

#include "organseg/tensor.hpp"

namespace organseg {

// ADAM with bias correction. Moment buffers are keyed by parameter name so
// they can travel through checkpoints for exact resume.
class Adam {
public:
    struct Config {
        double lr = 5e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    explicit Adam(Config cfg) : cfg_(cfg) {}

    void step(std::vector<Tensor>& params);
    void zero_grad(std::vector<Tensor>& params) {
        for (auto& p : params) p.zero_grad();
    }

    const Config& config() const { return cfg_; }
    std::int64_t t() const { return t_; }

    struct Moments {
        std::vector<double> m, v;
    };
    std::unordered_map<std::string, Moments>& state() { return state_; }
    const std::unordered_map<std::string, Moments>& state() const { return state_; }
    void set_t(std::int64_t t) { t_ = t; }

private:
    Config cfg_;
    std::int64_t t_ = 0;
    std::unordered_map<std::string, Moments> state_;
};

}  // namespace organseg
