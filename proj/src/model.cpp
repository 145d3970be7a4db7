#include "organseg/model.hpp"

#include <stdexcept>

namespace organseg {

namespace {

void check_divisible(const Tensor& x, std::array<std::int64_t, 3> div, const char* who) {
    static const char* axis_names[3] = {"z", "y", "x"};
    for (int a = 0; a < 3; ++a) {
        if (x.dim(a + 1) % div[a] != 0)
            throw std::invalid_argument(std::string(who) + ": input " + axis_names[a] +
                                        " extent " + std::to_string(x.dim(a + 1)) +
                                        " not divisible by " + std::to_string(div[a]));
    }
}

}  // namespace

SNet::SNet(const SNetConfig& cfg, std::uint64_t init_seed, const std::string& name_prefix)
    : cfg_(cfg), ps_(name_prefix) {
    Rng rng(mix_seed(init_seed, 0x534e4554ull));
    const std::int64_t w1 = cfg.w1(), w2 = cfg.w2(), w3 = cfg.w3();
    const std::int64_t r = cfg.se_reduction;
    stem_ = nn::Conv3d::make(ps_, "stem", cfg.in_channels, w1, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
    enc1_ = nn::SEResBlock::make(ps_, "enc1", w1, w1, 1, r, rng);
    enc2a_ = nn::SEResBlock::make(ps_, "enc2a", w1, w2, 1, r, rng);
    enc2b_ = nn::SEResBlock::make(ps_, "enc2b", w2, w2, 1, r, rng);
    enc3a_ = nn::SEResBlock::make(ps_, "enc3a", w2, w3, 1, r, rng);
    enc3b_ = nn::SEResBlock::make(ps_, "enc3b", w3, w3, 1, r, rng);
    dil1_ = nn::SEResBlock::make(ps_, "dil1", w3, w3, 2, r, rng);
    dil2_ = nn::SEResBlock::make(ps_, "dil2", w3, w3, 2, r, rng);
    aspp_ = nn::DenseAspp::make(ps_, "aspp", w3, w3, cfg.aspp_rates, rng);
    const std::int64_t aspp_out = aspp_.out_channels(w3);
    reduce2_ = nn::Conv3d::make(ps_, "reduce2", aspp_out, w2, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, rng);
    dec2_ = nn::SEResBlock::make(ps_, "dec2", w2, w2, 1, r, rng);
    reduce1_ = nn::Conv3d::make(ps_, "reduce1", w2, w1, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, rng);
    dec1_ = nn::SEResBlock::make(ps_, "dec1", w1, w1, 1, r, rng);
    head_ = nn::Conv3d::make(ps_, "head", w1, cfg.num_classes, {1, 1, 1}, {1, 1, 1}, {1, 1, 1},
                             rng, 0.05);
}

SegOutputs SNet::forward(const Tensor& image) const {
    if (image.shape().size() != 4 || image.dim(0) != cfg_.in_channels)
        throw std::invalid_argument("SNet: expected (" + std::to_string(cfg_.in_channels) +
                                    ", Z, Y, X) input, got " + shape_str(image.shape()));
    check_divisible(image, {2, 4, 4}, "SNet");

    const Tensor s0 = enc1_(stem_(image));          // full res, w1
    const Tensor p1 = maxpool3d(s0, {1, 2, 2});
    const Tensor s1 = enc2b_(enc2a_(p1));           // half in-plane, w2
    const Tensor p2 = maxpool3d(s1, {2, 2, 2});
    Tensor h = enc3b_(enc3a_(p2));                  // quarter in-plane, w3
    h = dil2_(dil1_(h));
    h = aspp_(h);

    h = upsample3d(h, {2, 2, 2});
    h = add(reduce2_(h), s1);
    h = dec2_(h);
    h = upsample3d(h, {1, 2, 2});
    h = add(reduce1_(h), s0);
    const Tensor feats = dec1_(h);

    SegOutputs out;
    out.decoder_features = feats;
    out.probs = softmax_channels(head_(feats));
    return out;
}

std::vector<LayerDesc> SNet::describe() const {
    const std::int64_t w1 = cfg_.w1(), w2 = cfg_.w2(), w3 = cfg_.w3();
    std::vector<LayerDesc> d;
    d.push_back({"stem_conv_k3", w1, {1, 1, 1}});
    d.push_back({"seres_x1", w1, {1, 1, 1}});
    d.push_back({"maxpool_1x2x2", w1, {1, 2, 2}});
    d.push_back({"seres_x2", w2, {1, 2, 2}});
    d.push_back({"maxpool_2x2x2", w2, {2, 4, 4}});
    d.push_back({"seres_x2", w3, {2, 4, 4}});
    d.push_back({"seres_x2_dilated2", w3, {2, 4, 4}});
    d.push_back({"dense_aspp_3_6_12_18",
                 w3 + static_cast<std::int64_t>(cfg_.aspp_rates.size()) * w3, {2, 4, 4}});
    d.push_back({"upsample_2x2x2", w2, {1, 2, 2}});
    d.push_back({"seres_x1_skip", w2, {1, 2, 2}});
    d.push_back({"upsample_1x2x2", w1, {1, 1, 1}});
    d.push_back({"seres_x1_skip", w1, {1, 1, 1}});
    d.push_back({"conv_1x1x1_softmax", cfg_.num_classes, {1, 1, 1}});
    return d;
}

SolNet::SolNet(std::int64_t feature_channels, std::int64_t num_small, std::int64_t se_reduction,
               std::uint64_t init_seed, const std::string& name_prefix)
    : ps_(name_prefix) {
    if (num_small < 1) throw std::invalid_argument("SolNet: num_small must be >= 1");
    Rng rng(mix_seed(init_seed, 0x534f4cull));
    in_norm_ = nn::Norm::make(ps_, "in_norm", feature_channels);
    block_ = nn::SEResBlock::make(ps_, "block", feature_channels, feature_channels, 1,
                                  se_reduction, rng);
    head_ = nn::Conv3d::make(ps_, "head", feature_channels, num_small, {1, 1, 1}, {1, 1, 1},
                             {1, 1, 1}, rng, 0.05);
}

Tensor SolNet::forward(const Tensor& decoder_features) const {
    return sigmoid(head_(block_(in_norm_(decoder_features))));
}

std::vector<LayerDesc> SolNet::describe() const {
    return {{"seres_x1", block_.conv2.out_channels(), {1, 1, 1}},
            {"conv_1x1x1_sigmoid", head_.out_channels(), {1, 1, 1}}};
}

SosNet::SosNet(const SosNetConfig& cfg, std::uint64_t init_seed,
               const std::string& name_prefix)
    : cfg_(cfg), ps_(name_prefix) {
    const std::int64_t expected = cfg.feature_channels + (cfg.include_raw_image ? 1 : 0);
    if (cfg.in_channels != expected)
        throw std::invalid_argument(
            "SosNet: in_channels " + std::to_string(cfg.in_channels) + " != feature_channels" +
            (cfg.include_raw_image ? " + 1 raw-image channel" : "") + " = " +
            std::to_string(expected));
    Rng rng(mix_seed(init_seed, 0x534f53ull));
    in_norm_ = nn::Norm::make(ps_, "in_norm", cfg.in_channels);
    block1_ = nn::SEResBlock::make(ps_, "block1", cfg.in_channels, cfg.width, 1,
                                   cfg.se_reduction, rng);
    block2_ = nn::SEResBlock::make(ps_, "block2", cfg.width, cfg.width, 1, cfg.se_reduction, rng);
    head_ = nn::Conv3d::make(ps_, "head", cfg.width, 1, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, rng,
                             0.05);
}

Tensor SosNet::forward(const Tensor& roi_input) const {
    if (roi_input.shape().size() != 4 || roi_input.dim(0) != cfg_.in_channels)
        throw std::invalid_argument("SosNet: expected (" + std::to_string(cfg_.in_channels) +
                                    ", rz, ry, rx) input, got " + shape_str(roi_input.shape()));
    return sigmoid(head_(block2_(block1_(in_norm_(roi_input)))));
}

std::vector<LayerDesc> SosNet::describe() const {
    return {{"seres_x2", cfg_.width, {1, 1, 1}}, {"conv_1x1x1_sigmoid", 1, {1, 1, 1}}};
}

Aae::Aae(const AaeConfig& cfg, std::uint64_t init_seed, const std::string& name_prefix)
    : cfg_(cfg), ps_(name_prefix) {
    for (int a = 0; a < 3; ++a) {
        if (cfg.roi_size[a] % 8 != 0)
            throw std::invalid_argument("Aae: roi size axis " + std::to_string(a) +
                                        " must be divisible by 8");
        bottleneck_[a] = cfg.roi_size[a] / 8;
    }
    const double m = cfg.width_multiplier;
    const std::int64_t e1 = nn::scaled_width(cfg.encoder_channels[0], m);
    const std::int64_t e2 = nn::scaled_width(cfg.encoder_channels[1], m);
    const std::int64_t e3 = nn::scaled_width(cfg.encoder_channels[2], m);
    const std::int64_t e4 = nn::scaled_width(cfg.encoder_channels[3], m);
    const std::int64_t d1 = nn::scaled_width(cfg.decoder_channels[0], m);
    const std::int64_t d2 = nn::scaled_width(cfg.decoder_channels[1], m);
    const std::int64_t d3 = nn::scaled_width(cfg.decoder_channels[2], m);
    const std::int64_t latent = cfg.latent();
    const std::int64_t fc2 = nn::scaled_width(cfg.fc2_dim, m);
    const std::int64_t cells = bottleneck_[0] * bottleneck_[1] * bottleneck_[2];
    if (fc2 % cells != 0)
        throw std::invalid_argument("Aae: expansion width " + std::to_string(fc2) +
                                    " not divisible by bottleneck cell count " +
                                    std::to_string(cells));
    reshape_channels_ = fc2 / cells;

    Rng rng(mix_seed(init_seed, 0x414145ull));
    enc1_ = nn::Conv3d::make(ps_, "enc1", 1, e1, {5, 5, 5}, {2, 2, 2}, {1, 1, 1}, rng);
    en1_ = nn::Norm::make(ps_, "enc1.norm", e1);
    enc2_ = nn::Conv3d::make(ps_, "enc2", e1, e2, {5, 5, 5}, {2, 2, 2}, {1, 1, 1}, rng);
    en2_ = nn::Norm::make(ps_, "enc2.norm", e2);
    enc3_ = nn::Conv3d::make(ps_, "enc3", e2, e3, {5, 5, 5}, {1, 1, 1}, {1, 1, 1}, rng);
    en3_ = nn::Norm::make(ps_, "enc3.norm", e3);
    enc4_ = nn::Conv3d::make(ps_, "enc4", e3, e4, {5, 5, 5}, {2, 2, 2}, {1, 1, 1}, rng);
    en4_ = nn::Norm::make(ps_, "enc4.norm", e4);
    fc_code_ = nn::Linear::make(ps_, "fc_code", e4 * cells, latent, rng);
    fc_expand_ = nn::Linear::make(ps_, "fc_expand", latent, fc2, rng);
    dec1_ = nn::Conv3d::make(ps_, "dec1", reshape_channels_, d1, {5, 5, 5}, {1, 1, 1}, {1, 1, 1}, rng);
    dn1_ = nn::Norm::make(ps_, "dec1.norm", d1);
    dec2_ = nn::Conv3d::make(ps_, "dec2", d1, d2, {5, 5, 5}, {1, 1, 1}, {1, 1, 1}, rng);
    dn2_ = nn::Norm::make(ps_, "dec2.norm", d2);
    dec3_ = nn::Conv3d::make(ps_, "dec3", d2, d3, {5, 5, 5}, {1, 1, 1}, {1, 1, 1}, rng);
    dn3_ = nn::Norm::make(ps_, "dec3.norm", d3);
    out_ = nn::Conv3d::make(ps_, "out", d3, 1, {5, 5, 5}, {1, 1, 1}, {1, 1, 1}, rng);
    on_ = nn::Norm::make(ps_, "out.norm", 1);
}

AaeOutputs Aae::forward(const Tensor& mask) const {
    if (mask.shape().size() != 4 || mask.dim(0) != 1)
        throw std::invalid_argument("Aae: expected (1, rz, ry, rx) input, got " +
                                    shape_str(mask.shape()));
    check_divisible(mask, {8, 8, 8}, "Aae");

    Tensor h = relu(en1_(enc1_(mask)));
    h = relu(en2_(enc2_(h)));
    h = relu(en3_(enc3_(h)));
    h = relu(en4_(enc4_(h)));
    const std::int64_t flat = h.numel();
    const Tensor code = fc_code_(reshape(h, {flat}));  // linear: the latent code
    Tensor d = relu(fc_expand_(code));
    d = reshape(d, {reshape_channels_, mask.dim(1) / 8, mask.dim(2) / 8, mask.dim(3) / 8});

    AaeOutputs out;
    d = upsample3d(d, {2, 2, 2});
    d = relu(dn1_(dec1_(d)));
    d = relu(dn2_(dec2_(d)));
    out.decoder_features.push_back(d);
    d = upsample3d(d, {2, 2, 2});
    d = relu(dn3_(dec3_(d)));
    out.decoder_features.push_back(d);
    d = upsample3d(d, {2, 2, 2});
    // normalization precedes every rectifier, the output included; without it
    // the output rectifier can die against heavily background-dominated masks
    out.reconstruction = relu(on_(out_(d)));
    out.code = code;
    return out;
}

std::vector<LayerDesc> Aae::describe() const {
    const double m = cfg_.width_multiplier;
    std::vector<LayerDesc> d;
    d.push_back({"conv_k5_s2", nn::scaled_width(cfg_.encoder_channels[0], m), {2, 2, 2}});
    d.push_back({"conv_k5_s2", nn::scaled_width(cfg_.encoder_channels[1], m), {4, 4, 4}});
    d.push_back({"conv_k5_s1", nn::scaled_width(cfg_.encoder_channels[2], m), {4, 4, 4}});
    d.push_back({"conv_k5_s2", nn::scaled_width(cfg_.encoder_channels[3], m), {8, 8, 8}});
    d.push_back({"fc_code_linear", cfg_.latent(), {0, 0, 0}});
    d.push_back({"fc_expand_relu", nn::scaled_width(cfg_.fc2_dim, m), {0, 0, 0}});
    d.push_back({"upsample_conv_k5", nn::scaled_width(cfg_.decoder_channels[0], m), {4, 4, 4}});
    d.push_back({"conv_k5", nn::scaled_width(cfg_.decoder_channels[1], m), {4, 4, 4}});
    d.push_back({"upsample_conv_k5", nn::scaled_width(cfg_.decoder_channels[2], m), {2, 2, 2}});
    d.push_back({"upsample_conv_k5_out", 1, {1, 1, 1}});
    return d;
}

}  // namespace organseg
