#pragma once

#include <optional>
#include <string>
#include <vector>

#include "organseg/ops.hpp"
#include "organseg/rng.hpp"
#include "organseg/tensor.hpp"

namespace organseg::nn {

// Ordered, named parameter registry. Networks register tensors here; the
// optimizer and checkpoints see them by name in registration order.
class ParamStore {
public:
    ParamStore() = default;
    explicit ParamStore(std::string prefix) : prefix_(std::move(prefix)) {}

    Tensor add(const std::string& name, Shape shape) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        t.set_name(prefix_ + name);
        params_.push_back(t);
        return t;
    }
    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }
    void set_requires_grad(bool v) {
        for (auto& p : params_) p.set_requires_grad(v);
    }
    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }
    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

private:
    std::string prefix_;
    std::vector<Tensor> params_;
};

void init_he_normal(Tensor& w, std::int64_t fan_in, Rng& rng);

std::int64_t scaled_width(std::int64_t base, double multiplier);

struct Conv3d {
    Tensor w, b;
    kernels::ConvSpec spec;

    // pad = dilation * (kernel - 1) / 2 per axis (same-size for stride 1).
    // init_scale shrinks the He initialization; output heads use a small
    // scale so their sigmoids/softmax start unsaturated.
    static Conv3d make(ParamStore& ps, const std::string& name, std::int64_t in_ch,
                       std::int64_t out_ch, std::array<std::int64_t, 3> kernel,
                       std::array<std::int64_t, 3> stride, std::array<std::int64_t, 3> dilation,
                       Rng& rng, double init_scale = 1.0);
    Tensor operator()(const Tensor& x) const { return conv3d(x, w, b, spec); }
    std::int64_t out_channels() const { return w.dim(0); }
};

struct Norm {
    Tensor gamma, beta;
    static Norm make(ParamStore& ps, const std::string& name, std::int64_t ch);
    Tensor operator()(const Tensor& x) const { return instance_norm(x, gamma, beta); }
};

struct Linear {
    Tensor w, b;
    static Linear make(ParamStore& ps, const std::string& name, std::int64_t in,
                       std::int64_t out, Rng& rng);
    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

// Squeeze-and-excitation: global average pool -> bottleneck FC pair ->
// per-channel sigmoid gates.
struct SEGate {
    Linear fc1, fc2;
    static SEGate make(ParamStore& ps, const std::string& name, std::int64_t ch,
                       std::int64_t reduction, Rng& rng);
    Tensor gates(const Tensor& x) const;
    Tensor operator()(const Tensor& x) const { return scale_channels(x, gates(x)); }
};

// conv-norm-relu-conv-norm -> SE recalibration -> residual add (1x1x1
// projection when channel counts differ). No activation after the addition,
// so zeroed convs with unit gates reduce to the (projected) identity.
struct SEResBlock {
    Conv3d conv1, conv2;
    Norm norm1, norm2;
    SEGate se;
    std::optional<Conv3d> proj;

    static SEResBlock make(ParamStore& ps, const std::string& name, std::int64_t in_ch,
                           std::int64_t out_ch, std::int64_t dilation_yx,
                           std::int64_t se_reduction, Rng& rng);
    Tensor operator()(const Tensor& x) const;
};

// Densely connected dilated conv pyramid; dilation applies to y/x only with
// z-dilation fixed to 1. Each branch consumes the concatenation of the input
// and all previous branch outputs and emits `growth` channels; output is the
// concatenation of the input and every branch (in + rates.size()*growth ch).
struct DenseAspp {
    std::vector<Conv3d> convs;
    std::vector<Norm> norms;
    std::vector<std::int64_t> rates;

    static DenseAspp make(ParamStore& ps, const std::string& name, std::int64_t in_ch,
                          std::int64_t growth, const std::vector<std::int64_t>& rates, Rng& rng);
    Tensor operator()(const Tensor& x) const;
    std::int64_t out_channels(std::int64_t in_ch) const {
        return in_ch + static_cast<std::int64_t>(rates.size()) *
                           (convs.empty() ? 0 : convs[0].out_channels());
    }
};

}  // namespace organseg::nn
