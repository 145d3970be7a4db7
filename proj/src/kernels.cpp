#include "organseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace organseg::kernels {

std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t d,
                          std::int64_t p) {
    const std::int64_t eff = d * (k - 1) + 1;
    const std::int64_t out = (in + 2 * p - eff) / s + 1;
    if (out < 1) throw std::invalid_argument("conv3d: output dimension would be empty");
    return out;
}

Dims4 conv_out_dims(const Dims4& in, std::int64_t out_channels, const ConvSpec& sp) {
    return {out_channels,
            conv_out_dim(in.z, sp.kernel[0], sp.stride[0], sp.dilation[0], sp.pad[0]),
            conv_out_dim(in.y, sp.kernel[1], sp.stride[1], sp.dilation[1], sp.pad[1]),
            conv_out_dim(in.x, sp.kernel[2], sp.stride[2], sp.dilation[2], sp.pad[2])};
}

namespace {

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
    return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

// Valid output range [lo, hi) for one axis and one kernel tap: positions o
// with 0 <= o*s + k*d - p < in.
inline void tap_range(std::int64_t in, std::int64_t out, std::int64_t s, std::int64_t offset,
                      std::int64_t& lo, std::int64_t& hi) {
    lo = std::max<std::int64_t>(0, ceil_div(-offset, s));
    hi = std::min<std::int64_t>(out, ceil_div(in - offset, s));
    if (hi < lo) hi = lo;
}

// Precomputed taps for trilinear interpolation on one axis.
struct LinTap {
    std::int64_t i0, i1;
    double w0, w1;
};

std::vector<LinTap> linear_taps(std::int64_t in, std::int64_t out, std::int64_t factor) {
    std::vector<LinTap> taps(static_cast<std::size_t>(out));
    for (std::int64_t o = 0; o < out; ++o) {
        const double c = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        const double f = std::floor(c);
        std::int64_t i0 = static_cast<std::int64_t>(f);
        std::int64_t i1 = i0 + 1;
        double w1 = c - f;
        i0 = std::clamp<std::int64_t>(i0, 0, in - 1);
        i1 = std::clamp<std::int64_t>(i1, 0, in - 1);
        taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - w1, w1};
    }
    return taps;
}

}  // namespace

namespace omp {

void conv3d_forward(const double* in, Dims4 in_d, const double* w, const double* bias,
                    std::int64_t co_n, const ConvSpec& sp, double* out) {
    const Dims4 out_d = conv_out_dims(in_d, co_n, sp);
    const std::int64_t kz = sp.kernel[0], ky = sp.kernel[1], kx = sp.kernel[2];
    const std::int64_t in_plane = in_d.y * in_d.x;
    const std::int64_t out_plane = out_d.y * out_d.x;

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t co = 0; co < co_n; ++co) {
        for (std::int64_t oz = 0; oz < out_d.z; ++oz) {
            double* out_slab = out + (co * out_d.z + oz) * out_plane;
            const double b = bias ? bias[co] : 0.0;
            for (std::int64_t i = 0; i < out_plane; ++i) out_slab[i] = b;
            for (std::int64_t ci = 0; ci < in_d.c; ++ci) {
                const double* in_ch = in + ci * in_d.z * in_plane;
                const double* w_ch = w + ((co * in_d.c + ci) * kz) * ky * kx;
                for (std::int64_t tz = 0; tz < kz; ++tz) {
                    const std::int64_t zi = oz * sp.stride[0] + tz * sp.dilation[0] - sp.pad[0];
                    if (zi < 0 || zi >= in_d.z) continue;
                    const double* in_slab = in_ch + zi * in_plane;
                    for (std::int64_t ty = 0; ty < ky; ++ty) {
                        const std::int64_t oy_off = ty * sp.dilation[1] - sp.pad[1];
                        std::int64_t ylo, yhi;
                        tap_range(in_d.y, out_d.y, sp.stride[1], oy_off, ylo, yhi);
                        for (std::int64_t tx = 0; tx < kx; ++tx) {
                            const double wv = w_ch[(tz * ky + ty) * kx + tx];
                            if (wv == 0.0) continue;
                            const std::int64_t ox_off = tx * sp.dilation[2] - sp.pad[2];
                            std::int64_t xlo, xhi;
                            tap_range(in_d.x, out_d.x, sp.stride[2], ox_off, xlo, xhi);
                            for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                                const std::int64_t yi = oy * sp.stride[1] + oy_off;
                                const double* in_row = in_slab + yi * in_d.x;
                                double* out_row = out_slab + oy * out_d.x;
                                if (sp.stride[2] == 1) {
                                    const double* src = in_row + ox_off;
                                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                                        out_row[ox] += wv * src[ox];
                                } else {
                                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                                        out_row[ox] += wv * in_row[ox * sp.stride[2] + ox_off];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv3d_backward_data(const double* grad_out, Dims4 out_d, const double* w, Dims4 in_d,
                          const ConvSpec& sp, double* grad_in) {
    const std::int64_t kz = sp.kernel[0], ky = sp.kernel[1], kx = sp.kernel[2];
    const std::int64_t in_plane = in_d.y * in_d.x;
    const std::int64_t out_plane = out_d.y * out_d.x;

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t ci = 0; ci < in_d.c; ++ci) {
        for (std::int64_t zi = 0; zi < in_d.z; ++zi) {
            double* gin_slab = grad_in + (ci * in_d.z + zi) * in_plane;
            for (std::int64_t co = 0; co < out_d.c; ++co) {
                const double* gout_ch = grad_out + co * out_d.z * out_plane;
                const double* w_ch = w + ((co * in_d.c + ci) * kz) * ky * kx;
                for (std::int64_t tz = 0; tz < kz; ++tz) {
                    const std::int64_t t = zi + sp.pad[0] - tz * sp.dilation[0];
                    if (t < 0 || t % sp.stride[0] != 0) continue;
                    const std::int64_t oz = t / sp.stride[0];
                    if (oz >= out_d.z) continue;
                    const double* gout_slab = gout_ch + oz * out_plane;
                    for (std::int64_t ty = 0; ty < ky; ++ty) {
                        const std::int64_t oy_off = ty * sp.dilation[1] - sp.pad[1];
                        std::int64_t ylo, yhi;
                        tap_range(in_d.y, out_d.y, sp.stride[1], oy_off, ylo, yhi);
                        for (std::int64_t tx = 0; tx < kx; ++tx) {
                            const double wv = w_ch[(tz * ky + ty) * kx + tx];
                            if (wv == 0.0) continue;
                            const std::int64_t ox_off = tx * sp.dilation[2] - sp.pad[2];
                            std::int64_t xlo, xhi;
                            tap_range(in_d.x, out_d.x, sp.stride[2], ox_off, xlo, xhi);
                            for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                                const std::int64_t yi = oy * sp.stride[1] + oy_off;
                                double* gin_row = gin_slab + yi * in_d.x;
                                const double* gout_row = gout_slab + oy * out_d.x;
                                if (sp.stride[2] == 1) {
                                    double* dst = gin_row + ox_off;
                                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                                        dst[ox] += wv * gout_row[ox];
                                } else {
                                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                                        gin_row[ox * sp.stride[2] + ox_off] += wv * gout_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv3d_backward_weights(const double* grad_out, Dims4 out_d, const double* in, Dims4 in_d,
                             const ConvSpec& sp, double* grad_w, double* grad_bias) {
    const std::int64_t kz = sp.kernel[0], ky = sp.kernel[1], kx = sp.kernel[2];
    const std::int64_t in_plane = in_d.y * in_d.x;
    const std::int64_t out_plane = out_d.y * out_d.x;

#pragma omp parallel for schedule(static)
    for (std::int64_t co = 0; co < out_d.c; ++co) {
        const double* gout_ch = grad_out + co * out_d.z * out_plane;
        if (grad_bias) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < out_d.z * out_plane; ++i) acc += gout_ch[i];
            grad_bias[co] += acc;
        }
        for (std::int64_t ci = 0; ci < in_d.c; ++ci) {
            const double* in_ch = in + ci * in_d.z * in_plane;
            double* gw_ch = grad_w + ((co * in_d.c + ci) * kz) * ky * kx;
            for (std::int64_t tz = 0; tz < kz; ++tz) {
                for (std::int64_t ty = 0; ty < ky; ++ty) {
                    const std::int64_t oy_off = ty * sp.dilation[1] - sp.pad[1];
                    std::int64_t ylo, yhi;
                    tap_range(in_d.y, out_d.y, sp.stride[1], oy_off, ylo, yhi);
                    for (std::int64_t tx = 0; tx < kx; ++tx) {
                        const std::int64_t ox_off = tx * sp.dilation[2] - sp.pad[2];
                        std::int64_t xlo, xhi;
                        tap_range(in_d.x, out_d.x, sp.stride[2], ox_off, xlo, xhi);
                        double acc = 0.0;
                        for (std::int64_t oz = 0; oz < out_d.z; ++oz) {
                            const std::int64_t zi = oz * sp.stride[0] + tz * sp.dilation[0] - sp.pad[0];
                            if (zi < 0 || zi >= in_d.z) continue;
                            const double* in_slab = in_ch + zi * in_plane;
                            const double* gout_slab = gout_ch + oz * out_plane;
                            for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                                const std::int64_t yi = oy * sp.stride[1] + oy_off;
                                const double* in_row = in_slab + yi * in_d.x;
                                const double* gout_row = gout_slab + oy * out_d.x;
                                if (sp.stride[2] == 1) {
                                    const double* src = in_row + ox_off;
                                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                                        acc += gout_row[ox] * src[ox];
                                } else {
                                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                                        acc += gout_row[ox] * in_row[ox * sp.stride[2] + ox_off];
                                }
                            }
                        }
                        gw_ch[(tz * ky + ty) * kx + tx] += acc;
                    }
                }
            }
        }
    }
}

void maxpool3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> k, double* out,
                       std::int64_t* argmax) {
    const std::int64_t oz_n = in_d.z / k[0], oy_n = in_d.y / k[1], ox_n = in_d.x / k[2];
    const std::int64_t in_plane = in_d.y * in_d.x;
    const std::int64_t out_plane = oy_n * ox_n;

#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < in_d.c; ++c) {
        const double* in_ch = in + c * in_d.z * in_plane;
        double* out_ch = out + c * oz_n * out_plane;
        std::int64_t* am_ch = argmax + c * oz_n * out_plane;
        for (std::int64_t oz = 0; oz < oz_n; ++oz)
            for (std::int64_t oy = 0; oy < oy_n; ++oy)
                for (std::int64_t ox = 0; ox < ox_n; ++ox) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (std::int64_t dz = 0; dz < k[0]; ++dz)
                        for (std::int64_t dy = 0; dy < k[1]; ++dy)
                            for (std::int64_t dx = 0; dx < k[2]; ++dx) {
                                const std::int64_t idx = (oz * k[0] + dz) * in_plane +
                                                         (oy * k[1] + dy) * in_d.x +
                                                         (ox * k[2] + dx);
                                if (in_ch[idx] > best) {
                                    best = in_ch[idx];
                                    best_idx = idx;
                                }
                            }
                    out_ch[(oz * oy_n + oy) * ox_n + ox] = best;
                    am_ch[(oz * oy_n + oy) * ox_n + ox] = best_idx;
                }
    }
}

void maxpool3d_backward(const double* grad_out, Dims4 out_d, const std::int64_t* argmax,
                        double* grad_in) {
    const std::int64_t out_sp = out_d.spatial();
    // in_d spatial stride is implicit in the recorded argmax indices
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < out_d.c; ++c) {
        const double* gout_ch = grad_out + c * out_sp;
        const std::int64_t* am_ch = argmax + c * out_sp;
        for (std::int64_t i = 0; i < out_sp; ++i) {
            // argmax is a spatial index within channel c of the input
            grad_in[am_ch[i]] += gout_ch[i];
        }
    }
}

void upsample3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> f, double* out) {
    const std::int64_t oz_n = in_d.z * f[0], oy_n = in_d.y * f[1], ox_n = in_d.x * f[2];
    const auto tz = linear_taps(in_d.z, oz_n, f[0]);
    const auto ty = linear_taps(in_d.y, oy_n, f[1]);
    const auto tx = linear_taps(in_d.x, ox_n, f[2]);
    const std::int64_t in_plane = in_d.y * in_d.x;
    const std::int64_t out_plane = oy_n * ox_n;

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t c = 0; c < in_d.c; ++c) {
        for (std::int64_t oz = 0; oz < oz_n; ++oz) {
            const double* in_ch = in + c * in_d.z * in_plane;
            double* out_row0 = out + (c * oz_n + oz) * out_plane;
            const LinTap& z = tz[static_cast<std::size_t>(oz)];
            for (std::int64_t oy = 0; oy < oy_n; ++oy) {
                const LinTap& y = ty[static_cast<std::size_t>(oy)];
                double* out_row = out_row0 + oy * ox_n;
                const double* r00 = in_ch + z.i0 * in_plane + y.i0 * in_d.x;
                const double* r01 = in_ch + z.i0 * in_plane + y.i1 * in_d.x;
                const double* r10 = in_ch + z.i1 * in_plane + y.i0 * in_d.x;
                const double* r11 = in_ch + z.i1 * in_plane + y.i1 * in_d.x;
                for (std::int64_t ox = 0; ox < ox_n; ++ox) {
                    const LinTap& x = tx[static_cast<std::size_t>(ox)];
                    const double v00 = x.w0 * r00[x.i0] + x.w1 * r00[x.i1];
                    const double v01 = x.w0 * r01[x.i0] + x.w1 * r01[x.i1];
                    const double v10 = x.w0 * r10[x.i0] + x.w1 * r10[x.i1];
                    const double v11 = x.w0 * r11[x.i0] + x.w1 * r11[x.i1];
                    out_row[ox] = z.w0 * (y.w0 * v00 + y.w1 * v01) +
                                  z.w1 * (y.w0 * v10 + y.w1 * v11);
                }
            }
        }
    }
}

void upsample3d_backward(const double* grad_out, Dims4 out_d, Dims4 in_d,
                         std::array<std::int64_t, 3> f, double* grad_in) {
    const auto tz = linear_taps(in_d.z, out_d.z, f[0]);
    const auto ty = linear_taps(in_d.y, out_d.y, f[1]);
    const auto tx = linear_taps(in_d.x, out_d.x, f[2]);
    const std::int64_t in_plane = in_d.y * in_d.x;
    const std::int64_t out_plane = out_d.y * out_d.x;

    // scatter is exclusive per channel
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < in_d.c; ++c) {
        double* gin_ch = grad_in + c * in_d.z * in_plane;
        const double* gout_ch = grad_out + c * out_d.z * out_plane;
        for (std::int64_t oz = 0; oz < out_d.z; ++oz) {
            const LinTap& z = tz[static_cast<std::size_t>(oz)];
            for (std::int64_t oy = 0; oy < out_d.y; ++oy) {
                const LinTap& y = ty[static_cast<std::size_t>(oy)];
                const double* gout_row = gout_ch + (oz * out_d.y + oy) * out_d.x;
                for (std::int64_t ox = 0; ox < out_d.x; ++ox) {
                    const LinTap& x = tx[static_cast<std::size_t>(ox)];
                    const double g = gout_row[ox];
                    gin_ch[z.i0 * in_plane + y.i0 * in_d.x + x.i0] += z.w0 * y.w0 * x.w0 * g;
                    gin_ch[z.i0 * in_plane + y.i0 * in_d.x + x.i1] += z.w0 * y.w0 * x.w1 * g;
                    gin_ch[z.i0 * in_plane + y.i1 * in_d.x + x.i0] += z.w0 * y.w1 * x.w0 * g;
                    gin_ch[z.i0 * in_plane + y.i1 * in_d.x + x.i1] += z.w0 * y.w1 * x.w1 * g;
                    gin_ch[z.i1 * in_plane + y.i0 * in_d.x + x.i0] += z.w1 * y.w0 * x.w0 * g;
                    gin_ch[z.i1 * in_plane + y.i0 * in_d.x + x.i1] += z.w1 * y.w0 * x.w1 * g;
                    gin_ch[z.i1 * in_plane + y.i1 * in_d.x + x.i0] += z.w1 * y.w1 * x.w0 * g;
                    gin_ch[z.i1 * in_plane + y.i1 * in_d.x + x.i1] += z.w1 * y.w1 * x.w1 * g;
                }
            }
        }
    }
}

}  // namespace omp

namespace ref {

void conv3d_forward(const double* in, Dims4 in_d, const double* w, const double* bias,
                    std::int64_t co_n, const ConvSpec& sp, double* out) {
    const Dims4 out_d = conv_out_dims(in_d, co_n, sp);
    const std::int64_t kz = sp.kernel[0], ky = sp.kernel[1], kx = sp.kernel[2];
    for (std::int64_t co = 0; co < co_n; ++co)
        for (std::int64_t oz = 0; oz < out_d.z; ++oz)
            for (std::int64_t oy = 0; oy < out_d.y; ++oy)
                for (std::int64_t ox = 0; ox < out_d.x; ++ox) {
                    double acc = bias ? bias[co] : 0.0;
                    for (std::int64_t ci = 0; ci < in_d.c; ++ci)
                        for (std::int64_t tz = 0; tz < kz; ++tz)
                            for (std::int64_t ty = 0; ty < ky; ++ty)
                                for (std::int64_t tx = 0; tx < kx; ++tx) {
                                    const std::int64_t zi =
                                        oz * sp.stride[0] + tz * sp.dilation[0] - sp.pad[0];
                                    const std::int64_t yi =
                                        oy * sp.stride[1] + ty * sp.dilation[1] - sp.pad[1];
                                    const std::int64_t xi =
                                        ox * sp.stride[2] + tx * sp.dilation[2] - sp.pad[2];
                                    if (zi < 0 || zi >= in_d.z || yi < 0 || yi >= in_d.y ||
                                        xi < 0 || xi >= in_d.x)
                                        continue;
                                    acc += w[(((co * in_d.c + ci) * kz + tz) * ky + ty) * kx + tx] *
                                           in[((ci * in_d.z + zi) * in_d.y + yi) * in_d.x + xi];
                                }
                    out[((co * out_d.z + oz) * out_d.y + oy) * out_d.x + ox] = acc;
                }
}

void conv3d_backward_data(const double* grad_out, Dims4 out_d, const double* w, Dims4 in_d,
                          const ConvSpec& sp, double* grad_in) {
    const std::int64_t kz = sp.kernel[0], ky = sp.kernel[1], kx = sp.kernel[2];
    for (std::int64_t co = 0; co < out_d.c; ++co)
        for (std::int64_t oz = 0; oz < out_d.z; ++oz)
            for (std::int64_t oy = 0; oy < out_d.y; ++oy)
                for (std::int64_t ox = 0; ox < out_d.x; ++ox) {
                    const double g =
                        grad_out[((co * out_d.z + oz) * out_d.y + oy) * out_d.x + ox];
                    for (std::int64_t ci = 0; ci < in_d.c; ++ci)
                        for (std::int64_t tz = 0; tz < kz; ++tz)
                            for (std::int64_t ty = 0; ty < ky; ++ty)
                                for (std::int64_t tx = 0; tx < kx; ++tx) {
                                    const std::int64_t zi =
                                        oz * sp.stride[0] + tz * sp.dilation[0] - sp.pad[0];
                                    const std::int64_t yi =
                                        oy * sp.stride[1] + ty * sp.dilation[1] - sp.pad[1];
                                    const std::int64_t xi =
                                        ox * sp.stride[2] + tx * sp.dilation[2] - sp.pad[2];
                                    if (zi < 0 || zi >= in_d.z || yi < 0 || yi >= in_d.y ||
                                        xi < 0 || xi >= in_d.x)
                                        continue;
                                    grad_in[((ci * in_d.z + zi) * in_d.y + yi) * in_d.x + xi] +=
                                        g *
                                        w[(((co * in_d.c + ci) * kz + tz) * ky + ty) * kx + tx];
                                }
                }
}

void conv3d_backward_weights(const double* grad_out, Dims4 out_d, const double* in, Dims4 in_d,
                             const ConvSpec& sp, double* grad_w, double* grad_bias) {
    const std::int64_t kz = sp.kernel[0], ky = sp.kernel[1], kx = sp.kernel[2];
    for (std::int64_t co = 0; co < out_d.c; ++co)
        for (std::int64_t oz = 0; oz < out_d.z; ++oz)
            for (std::int64_t oy = 0; oy < out_d.y; ++oy)
                for (std::int64_t ox = 0; ox < out_d.x; ++ox) {
                    const double g =
                        grad_out[((co * out_d.z + oz) * out_d.y + oy) * out_d.x + ox];
                    if (grad_bias) grad_bias[co] += g;
                    for (std::int64_t ci = 0; ci < in_d.c; ++ci)
                        for (std::int64_t tz = 0; tz < kz; ++tz)
                            for (std::int64_t ty = 0; ty < ky; ++ty)
                                for (std::int64_t tx = 0; tx < kx; ++tx) {
                                    const std::int64_t zi =
                                        oz * sp.stride[0] + tz * sp.dilation[0] - sp.pad[0];
                                    const std::int64_t yi =
                                        oy * sp.stride[1] + ty * sp.dilation[1] - sp.pad[1];
                                    const std::int64_t xi =
                                        ox * sp.stride[2] + tx * sp.dilation[2] - sp.pad[2];
                                    if (zi < 0 || zi >= in_d.z || yi < 0 || yi >= in_d.y ||
                                        xi < 0 || xi >= in_d.x)
                                        continue;
                                    grad_w[(((co * in_d.c + ci) * kz + tz) * ky + ty) * kx + tx] +=
                                        g *
                                        in[((ci * in_d.z + zi) * in_d.y + yi) * in_d.x + xi];
                                }
                }
}

void maxpool3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> k, double* out,
                       std::int64_t* argmax) {
    const std::int64_t oz_n = in_d.z / k[0], oy_n = in_d.y / k[1], ox_n = in_d.x / k[2];
    for (std::int64_t c = 0; c < in_d.c; ++c)
        for (std::int64_t oz = 0; oz < oz_n; ++oz)
            for (std::int64_t oy = 0; oy < oy_n; ++oy)
                for (std::int64_t ox = 0; ox < ox_n; ++ox) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (std::int64_t dz = 0; dz < k[0]; ++dz)
                        for (std::int64_t dy = 0; dy < k[1]; ++dy)
                            for (std::int64_t dx = 0; dx < k[2]; ++dx) {
                                const std::int64_t idx = (oz * k[0] + dz) * in_d.y * in_d.x +
                                                         (oy * k[1] + dy) * in_d.x +
                                                         (ox * k[2] + dx);
                                const double v = in[c * in_d.spatial() + idx];
                                if (v > best) {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                    const std::int64_t o = ((c * oz_n + oz) * oy_n + oy) * ox_n + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
}

void upsample3d_forward(const double* in, Dims4 in_d, std::array<std::int64_t, 3> f, double* out) {
    const std::int64_t oz_n = in_d.z * f[0], oy_n = in_d.y * f[1], ox_n = in_d.x * f[2];
    const auto sample = [&](std::int64_t c, double cz, double cy, double cx) {
        const auto fetch = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
            z = std::clamp<std::int64_t>(z, 0, in_d.z - 1);
            y = std::clamp<std::int64_t>(y, 0, in_d.y - 1);
            x = std::clamp<std::int64_t>(x, 0, in_d.x - 1);
            return in[((c * in_d.z + z) * in_d.y + y) * in_d.x + x];
        };
        const double fz = std::floor(cz), fy = std::floor(cy), fx = std::floor(cx);
        const double wz = cz - fz, wy = cy - fy, wx = cx - fx;
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    acc += (dz ? wz : 1 - wz) * (dy ? wy : 1 - wy) * (dx ? wx : 1 - wx) *
                           fetch(static_cast<std::int64_t>(fz) + dz,
                                 static_cast<std::int64_t>(fy) + dy,
                                 static_cast<std::int64_t>(fx) + dx);
        return acc;
    };
    for (std::int64_t c = 0; c < in_d.c; ++c)
        for (std::int64_t oz = 0; oz < oz_n; ++oz)
            for (std::int64_t oy = 0; oy < oy_n; ++oy)
                for (std::int64_t ox = 0; ox < ox_n; ++ox)
                    out[((c * oz_n + oz) * oy_n + oy) * ox_n + ox] =
                        sample(c, (oz + 0.5) / f[0] - 0.5, (oy + 0.5) / f[1] - 0.5,
                               (ox + 0.5) / f[2] - 0.5);
}

}  // namespace ref

}  // namespace organseg::kernels
