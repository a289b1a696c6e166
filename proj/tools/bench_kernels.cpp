// Compares the OpenMP kernels against the serial reference implementations
// on denoiser-sized workloads. Thread count comes from OMP_NUM_THREADS.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>

#include "protodiff/kernels.hpp"
#include "protodiff/rng.hpp"

using namespace protodiff;
namespace K = kernels;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double ref_ms, double omp_ms) {
    std::printf("%-28s serial %8.3f ms   openmp %8.3f ms   speedup %5.2fx\n", name, ref_ms, omp_ms,
                ref_ms / omp_ms);
}

} // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    Rng rng(7);

    const int N = 16, C = 32, H = 16, W = 16, Co = 32;
    Tensor x({N, C, H, W}), w({Co, C, 3, 3}), b({Co});
    for (auto& v : x.data) v = rng.normal();
    for (auto& v : w.data) v = rng.normal() * 0.05;
    for (auto& v : b.data) v = rng.normal() * 0.05;
    const ConvSpec spec{1, 1};
    const int reps = 10;

    report("conv2d forward",
           time_ms([&] { ref::conv2d_forward(x, w, b, spec); }, reps),
           time_ms([&] { K::conv2d_forward(x, w, b, spec); }, reps));

    Tensor dy({N, Co, H, W});
    for (auto& v : dy.data) v = rng.normal();
    report("conv2d backward input",
           time_ms([&] { ref::conv2d_backward_input(dy, w, H, W, spec); }, reps),
           time_ms([&] { K::conv2d_backward_input(dy, w, H, W, spec); }, reps));

    Tensor dw(w.shape), db(b.shape);
    report("conv2d backward params",
           time_ms([&] { ref::conv2d_backward_params(dy, x, spec, dw, db); }, reps),
           time_ms([&] { K::conv2d_backward_params(dy, x, spec, dw, db); }, reps));

    Tensor gamma = Tensor::full({C}, 1.0), beta({C}), mean, var;
    report("group_norm forward",
           time_ms([&] { ref::group_norm_forward(x, gamma, beta, 8, 1e-5, mean, var); }, reps),
           time_ms([&] { K::group_norm_forward(x, gamma, beta, 8, 1e-5, mean, var); }, reps));

    Tensor dxn, dgamma, dbeta;
    K::group_norm_forward(x, gamma, beta, 8, 1e-5, mean, var);
    report("group_norm backward",
           time_ms([&] { ref::group_norm_backward(dy, x, gamma, mean, var, 8, 1e-5, dxn, dgamma, dbeta); }, reps),
           time_ms([&] { K::group_norm_backward(dy, x, gamma, mean, var, 8, 1e-5, dxn, dgamma, dbeta); }, reps));

    const int B = 256, I = 512, O = 512;
    Tensor lx({B, I}), lw({O, I}), lb({O});
    for (auto& v : lx.data) v = rng.normal();
    for (auto& v : lw.data) v = rng.normal() * 0.05;
    report("linear forward",
           time_ms([&] { ref::linear_forward(lx, lw, lb); }, reps),
           time_ms([&] { K::linear_forward(lx, lw, lb); }, reps));

    return 0;
}
