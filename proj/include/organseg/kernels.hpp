#pragma once

#include <array>
#include <cstdint>

namespace organseg::kernels {

// Dense 3D tensor kernels over (C, Z, Y, X) contiguous arrays, x fastest.
// The omp:: variants are the production path: they parallelize over
// independent output elements only, so results are bitwise identical to the
// serial reference for any thread count. ref:: holds the naive serial
// implementations kept for testing and benchmarking.

struct Dims4 {
    std::int64_t c, z, y, x;
    std::int64_t numel() const { return c * z * y * x; }
    std::int64_t spatial() const { return z * y * x; }
};

struct ConvSpec {
    std::array<std::int64_t, 3> kernel{3, 3, 3};    // (kz, ky, kx)
    std::array<std::int64_t, 3> stride{1, 1, 1};
    std::array<std::int64_t, 3> dilation{1, 1, 1};
    std::array<std::int64_t, 3> pad{1, 1, 1};
};

// Output spatial size for one axis.
std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t d,
                          std::int64_t p);
Dims4 conv_out_dims(const Dims4& in, std::int64_t out_channels, const ConvSpec& spec);

namespace omp {

void conv3d_forward(const double* in, Dims4 in_d, const double* w, const double* bias,
                    std::int64_t out_channels, const ConvSpec& spec, double* out);
// grad_in += dL/din; pass accumulate=false to overwrite.
void conv3d_backward_data(const double* grad_out, Dims4 out_d, const double* w, Dims4 in_d,
                          const ConvSpec& spec, double* grad_in);
// grad_w / grad_bias are accumulated into.
void conv3d_backward_weights(const double* grad_out, Dims4 out_d, const double* in, Dims4 in_d,
                             const ConvSpec& spec, double* grad_w, double* grad_bias);

// Max pooling with kernel == stride; records flat argmax indices (ties to the
// lowest linear index).
void maxpool3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> k, double* out,
                       std::int64_t* argmax);
void maxpool3d_backward(const double* grad_out, Dims4 out_d, const std::int64_t* argmax,
                        double* grad_in);

// Trilinear upsampling by integer factors (1 or 2 per axis), voxel-center
// aligned with edge clamping.
void upsample3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> factor,
                        double* out);
void upsample3d_backward(const double* grad_out, Dims4 out_d, Dims4 in_d,
                         std::array<std::int64_t, 3> factor, double* grad_in);

}  // namespace omp

namespace ref {

void conv3d_forward(const double* in, Dims4 in_d, const double* w, const double* bias,
                    std::int64_t out_channels, const ConvSpec& spec, double* out);
void conv3d_backward_data(const double* grad_out, Dims4 out_d, const double* w, Dims4 in_d,
                          const ConvSpec& spec, double* grad_in);
void conv3d_backward_weights(const double* grad_out, Dims4 out_d, const double* in, Dims4 in_d,
                             const ConvSpec& spec, double* grad_w, double* grad_bias);
void maxpool3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> k, double* out,
                       std::int64_t* argmax);
void upsample3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> factor,
                        double* out);

}  // namespace ref

}  // namespace organseg::kernels
