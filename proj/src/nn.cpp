#include "organseg/nn.hpp"

#include <cmath>

namespace organseg::nn {

void init_he_normal(Tensor& w, std::int64_t fan_in, Rng& rng) {
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = rng.normal(0.0, sd);
}

std::int64_t scaled_width(std::int64_t base, double multiplier) {
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(base) * multiplier));
}

Conv3d Conv3d::make(ParamStore& ps, const std::string& name, std::int64_t in_ch,
                    std::int64_t out_ch, std::array<std::int64_t, 3> kernel,
                    std::array<std::int64_t, 3> stride, std::array<std::int64_t, 3> dilation,
                    Rng& rng, double init_scale) {
    Conv3d c;
    c.spec.kernel = kernel;
    c.spec.stride = stride;
    c.spec.dilation = dilation;
    for (int a = 0; a < 3; ++a) c.spec.pad[a] = dilation[a] * (kernel[a] - 1) / 2;
    c.w = ps.add(name + ".w", {out_ch, in_ch, kernel[0], kernel[1], kernel[2]});
    c.b = ps.add(name + ".b", {out_ch});
    init_he_normal(c.w, in_ch * kernel[0] * kernel[1] * kernel[2], rng);
    if (init_scale != 1.0)
        for (auto& v : c.w.values()) v *= init_scale;
    return c;
}

Norm Norm::make(ParamStore& ps, const std::string& name, std::int64_t ch) {
    Norm n;
    n.gamma = ps.add(name + ".gamma", {ch});
    n.beta = ps.add(name + ".beta", {ch});
    for (auto& v : n.gamma.values()) v = 1.0;
    return n;
}

Linear Linear::make(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out,
                    Rng& rng) {
    Linear l;
    l.w = ps.add(name + ".w", {out, in});
    l.b = ps.add(name + ".b", {out});
    init_he_normal(l.w, in, rng);
    return l;
}

SEGate SEGate::make(ParamStore& ps, const std::string& name, std::int64_t ch,
                    std::int64_t reduction, Rng& rng) {
    SEGate s;
    const std::int64_t mid = std::max<std::int64_t>(1, ch / reduction);
    s.fc1 = Linear::make(ps, name + ".fc1", ch, mid, rng);
    s.fc2 = Linear::make(ps, name + ".fc2", mid, ch, rng);
    return s;
}

Tensor SEGate::gates(const Tensor& x) const {
    return sigmoid(fc2(relu(fc1(mean_spatial(x)))));
}

SEResBlock SEResBlock::make(ParamStore& ps, const std::string& name, std::int64_t in_ch,
                            std::int64_t out_ch, std::int64_t dilation_yx,
                            std::int64_t se_reduction, Rng& rng) {
    SEResBlock b;
    b.conv1 = Conv3d::make(ps, name + ".conv1", in_ch, out_ch, {3, 3, 3}, {1, 1, 1},
                           {1, dilation_yx, dilation_yx}, rng);
    b.norm1 = Norm::make(ps, name + ".norm1", out_ch);
    b.conv2 = Conv3d::make(ps, name + ".conv2", out_ch, out_ch, {3, 3, 3}, {1, 1, 1},
                           {1, dilation_yx, dilation_yx}, rng);
    b.norm2 = Norm::make(ps, name + ".norm2", out_ch);
    b.se = SEGate::make(ps, name + ".se", out_ch, se_reduction, rng);
    if (in_ch != out_ch)
        b.proj = Conv3d::make(ps, name + ".proj", in_ch, out_ch, {1, 1, 1}, {1, 1, 1},
                              {1, 1, 1}, rng);
    return b;
}

Tensor SEResBlock::operator()(const Tensor& x) const {
    Tensor h = relu(norm1(conv1(x)));
    h = norm2(conv2(h));
    h = se(h);
    const Tensor res = proj ? (*proj)(x) : x;
    return add(res, h);
}

DenseAspp DenseAspp::make(ParamStore& ps, const std::string& name, std::int64_t in_ch,
                          std::int64_t growth, const std::vector<std::int64_t>& rates, Rng& rng) {
    DenseAspp d;
    d.rates = rates;
    std::int64_t ch = in_ch;
    for (std::size_t i = 0; i < rates.size(); ++i) {
        d.convs.push_back(Conv3d::make(ps, name + ".branch" + std::to_string(i), ch, growth,
                                       {3, 3, 3}, {1, 1, 1}, {1, rates[i], rates[i]}, rng));
        d.norms.push_back(Norm::make(ps, name + ".branch" + std::to_string(i) + ".norm", growth));
        ch += growth;
    }
    return d;
}

Tensor DenseAspp::operator()(const Tensor& x) const {
    std::vector<Tensor> feats{x};
    for (std::size_t i = 0; i < convs.size(); ++i) {
        const Tensor in = feats.size() == 1 ? x : concat_channels(feats);
        feats.push_back(relu(norms[i](convs[i](in))));
    }
    return concat_channels(feats);
}

}  // namespace organseg::nn
