#pragma once

#include <string>
#include <vector>

#include "organseg/nn.hpp"

namespace organseg {

// Layer schedule entry used by shape-contract tests and diagnostics.
struct LayerDesc {
    std::string name;
    std::int64_t out_channels;
    std::array<std::int64_t, 3> scale;  // spatial divisor vs input, per axis
};

struct SNetConfig {
    std::int64_t in_channels = 1;
    std::int64_t num_classes = 7;  // organs + background
    std::array<std::int64_t, 3> base_widths{32, 48, 64};
    std::vector<std::int64_t> aspp_rates{3, 6, 12, 18};
    double width_multiplier = 1.0;
    std::int64_t se_reduction = 8;

    std::int64_t w1() const { return nn::scaled_width(base_widths[0], width_multiplier); }
    std::int64_t w2() const { return nn::scaled_width(base_widths[1], width_multiplier); }
    std::int64_t w3() const { return nn::scaled_width(base_widths[2], width_multiplier); }
};

struct SegOutputs {
    Tensor probs;             // (num_classes, Z, Y, X), softmax over channels
    Tensor decoder_features;  // (w1, Z, Y, X), last decoder layer
};

// Global segmentation backbone: two downsamplings (1,2,2) then (2,2,2),
// SE-residual blocks, two dilated blocks and a dense dilated pyramid at the
// bottom, skip-fused decoder back to full resolution, softmax class head.
class SNet {
public:
    SNet(const SNetConfig& cfg, std::uint64_t init_seed, const std::string& name_prefix = "snet/");

    SegOutputs forward(const Tensor& image) const;  // image (in_channels, Z, Y, X)

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const SNetConfig& config() const { return cfg_; }
    std::vector<LayerDesc> describe() const;
    std::int64_t feature_channels() const { return cfg_.w1(); }

private:
    SNetConfig cfg_;
    nn::ParamStore ps_;
    nn::Conv3d stem_;
    nn::SEResBlock enc1_;
    nn::SEResBlock enc2a_, enc2b_;
    nn::SEResBlock enc3a_, enc3b_;
    nn::SEResBlock dil1_, dil2_;
    nn::DenseAspp aspp_;
    nn::Conv3d reduce2_;
    nn::SEResBlock dec2_;
    nn::Conv3d reduce1_;
    nn::SEResBlock dec1_;
    nn::Conv3d head_;
};

// Small-organ localization head: normalizes the incoming decoder features
// (the backbone's residual trunk is unnormalized), then one SEResBlock and a
// 1x1x1 conv to one sigmoid heatmap per small organ.
class SolNet {
public:
    SolNet(std::int64_t feature_channels, std::int64_t num_small, std::int64_t se_reduction,
           std::uint64_t init_seed, const std::string& name_prefix = "sol/");

    Tensor forward(const Tensor& decoder_features) const;  // (num_small, Z, Y, X) in (0,1)

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    std::int64_t num_small() const { return head_.out_channels(); }
    std::vector<LayerDesc> describe() const;

private:
    nn::ParamStore ps_;
    nn::Norm in_norm_;
    nn::SEResBlock block_;
    nn::Conv3d head_;
};

struct SosNetConfig {
    std::int64_t feature_channels = 32;
    bool include_raw_image = true;
    std::int64_t in_channels = 33;  // must equal feature_channels + (include_raw_image ? 1 : 0)
    std::int64_t width = 32;
    std::int64_t se_reduction = 8;
};

// Per-small-organ binary refinement head over a fixed-size ROI: input
// normalization, two SEResBlocks, then a 1x1x1 conv with sigmoid.
class SosNet {
public:
    SosNet(const SosNetConfig& cfg, std::uint64_t init_seed,
           const std::string& name_prefix = "sos/");

    Tensor forward(const Tensor& roi_input) const;  // (1, rz, ry, rx) in (0,1)

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const SosNetConfig& config() const { return cfg_; }
    std::vector<LayerDesc> describe() const;

private:
    SosNetConfig cfg_;
    nn::ParamStore ps_;
    nn::Norm in_norm_;
    nn::SEResBlock block1_, block2_;
    nn::Conv3d head_;
};

struct AaeConfig {
    std::int64_t latent_dim = 512;
    std::array<std::int64_t, 4> encoder_channels{64, 128, 128, 256};
    std::array<std::int64_t, 3> decoder_channels{128, 128, 64};
    std::int64_t fc2_dim = 256;
    double width_multiplier = 1.0;
    std::array<std::int64_t, 3> roi_size{8, 64, 64};  // divisible by 8 per axis

    std::int64_t latent() const { return nn::scaled_width(latent_dim, width_multiplier); }
};

struct AaeOutputs {
    Tensor reconstruction;                // (1, rz, ry, rx)
    Tensor code;                          // (latent)
    std::vector<Tensor> decoder_features; // one per decoder scale, coarse to fine
};

// Convolutional autoencoder over binary small-organ masks. Three stride-2
// k5 encoder convs to a flat latent code, then a trilinear-upsampling
// decoder. The code plus the per-scale decoder features form the latent
// bundle the shape loss compares.
class Aae {
public:
    Aae(const AaeConfig& cfg, std::uint64_t init_seed, const std::string& name_prefix = "aae/");

    AaeOutputs forward(const Tensor& mask) const;  // mask (1, rz, ry, rx)

    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    const AaeConfig& config() const { return cfg_; }
    std::vector<LayerDesc> describe() const;

private:
    AaeConfig cfg_;
    nn::ParamStore ps_;
    nn::Conv3d enc1_, enc2_, enc3_, enc4_;
    nn::Norm en1_, en2_, en3_, en4_;
    nn::Linear fc_code_, fc_expand_;
    nn::Conv3d dec1_, dec2_, dec3_, out_;
    nn::Norm dn1_, dn2_, dn3_, on_;
    std::array<std::int64_t, 3> bottleneck_{1, 8, 8};
    std::int64_t reshape_channels_ = 4;
};

}  // namespace organseg
