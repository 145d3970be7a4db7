#pragma once

#include <array>

#include "organseg/kernels.hpp"
#include "organseg/tensor.hpp"

namespace organseg {

// Differentiable graph operations. Feature tensors are (C, Z, Y, X); vectors
// are 1-D. Every op returns a fresh node whose backprop accumulates into the
// parents that require grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor scalar_add(const Tensor& a, double s);
Tensor scalar_mul(const Tensor& a, double s);
Tensor pow_scalar(const Tensor& a, double exponent);  // a must be > 0 for fractional exponents

Tensor exp_of(const Tensor& a);
Tensor log_of(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum_all(const Tensor& a);   // -> {1}
Tensor mean_all(const Tensor& a);  // -> {1}
Tensor sum_spatial(const Tensor& a);   // (C,Z,Y,X) -> {C}
Tensor mean_spatial(const Tensor& a);  // (C,Z,Y,X) -> {C}

// y[c,...] = x[c,...] * g[c]
Tensor scale_channels(const Tensor& x, const Tensor& gates);

// per-voxel softmax across the channel dimension of (C,Z,Y,X)
Tensor softmax_channels(const Tensor& x);

Tensor concat_channels(const std::vector<Tensor>& parts);

// exact sub-array copy of (C,Z,Y,X) at spatial start/size; grads scatter back
Tensor crop3d(const Tensor& x, std::array<std::int64_t, 3> start,
              std::array<std::int64_t, 3> size);

Tensor reshape(const Tensor& x, Shape new_shape);

// y = W x + b with W (out, in), x (in), b (out) or undefined
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, const kernels::ConvSpec& spec);
Tensor maxpool3d(const Tensor& x, std::array<std::int64_t, 3> kernel);
Tensor upsample3d(const Tensor& x, std::array<std::int64_t, 3> factor);

// Per-channel normalization over spatial dims with affine parameters.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// mean((a-b)^2), composite
Tensor mse_loss(const Tensor& a, const Tensor& b);

}  // namespace organseg
