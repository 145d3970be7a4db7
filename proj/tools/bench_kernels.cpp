// Times the OpenMP kernels against the serial reference implementations on
// workload shapes taken from the segmentation backbone.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "organseg/kernels.hpp"
#include "organseg/rng.hpp"

using namespace organseg;
using kernels::ConvSpec;
using kernels::Dims4;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    // one warmup
    fn();
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<double> randn(std::int64_t n, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal();
    return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void bench_conv(const char* name, Dims4 in_d, std::int64_t co, const ConvSpec& spec, int reps) {
    Rng rng(42);
    const auto in = randn(in_d.numel(), rng);
    const auto w = randn(co * in_d.c * spec.kernel[0] * spec.kernel[1] * spec.kernel[2], rng);
    const auto b = randn(co, rng);
    const Dims4 out_d = kernels::conv_out_dims(in_d, co, spec);
    std::vector<double> out_omp(static_cast<std::size_t>(out_d.numel()));
    std::vector<double> out_ref(static_cast<std::size_t>(out_d.numel()));

    const double t_omp = time_ms(
        [&] {
            kernels::omp::conv3d_forward(in.data(), in_d, w.data(), b.data(), co, spec,
                                         out_omp.data());
        },
        reps);
    const double t_ref = time_ms(
        [&] {
            kernels::ref::conv3d_forward(in.data(), in_d, w.data(), b.data(), co, spec,
                                         out_ref.data());
        },
        1);
    const double gmacs = static_cast<double>(out_d.numel()) * in_d.c * spec.kernel[0] *
                         spec.kernel[1] * spec.kernel[2] / 1e9;
    std::printf("%-28s  omp %8.2f ms (%6.2f GMAC/s)   ref %8.2f ms   speedup %5.2fx   maxdiff %.2e\n",
                name, t_omp, gmacs / (t_omp / 1e3), t_ref, t_ref / t_omp,
                max_abs_diff(out_omp, out_ref));
}

}  // namespace

int main() {
    std::printf("conv3d forward, OpenMP vs serial reference\n\n");
    // backbone full-resolution block shape
    bench_conv("full-res 8ch 16x96x96", {8, 16, 96, 96}, 8,
               {{3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}}, 3);
    // encoder mid-scale
    bench_conv("mid 12ch 16x48x48", {12, 16, 48, 48}, 12,
               {{3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}}, 5);
    // bottom dilated block
    bench_conv("bottom 16ch dil2 8x24x24", {16, 8, 24, 24}, 16,
               {{3, 3, 3}, {1, 1, 1}, {1, 2, 2}, {1, 2, 2}}, 10);
    // autoencoder stride-2 encoder conv
    bench_conv("aae k5 s2 16ch 8x32x32", {1, 8, 32, 32}, 16,
               {{5, 5, 5}, {2, 2, 2}, {1, 1, 1}, {2, 2, 2}}, 10);

    Rng rng(7);
    const Dims4 pd{8, 16, 96, 96};
    const auto in = randn(pd.numel(), rng);
    std::vector<double> out(static_cast<std::size_t>(pd.numel() / 4));
    std::vector<std::int64_t> am(out.size());
    const double t_pool = time_ms(
        [&] { kernels::omp::maxpool3d_forward(in.data(), pd, {1, 2, 2}, out.data(), am.data()); },
        20);
    std::vector<double> up(static_cast<std::size_t>(pd.numel() * 4));
    const Dims4 ud{8, 16, 48, 48};
    const auto uin = randn(ud.numel(), rng);
    const double t_up = time_ms(
        [&] { kernels::omp::upsample3d_forward(uin.data(), ud, {1, 2, 2}, up.data()); }, 20);
    std::printf("\nmaxpool 1x2x2 8ch 16x96x96    %8.2f ms\n", t_pool);
    std::printf("upsample 1x2x2 8ch 16x48x48   %8.2f ms\n", t_up);
    return 0;
}
