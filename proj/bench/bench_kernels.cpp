// Compares the OpenMP kernels against their serial references: throughput
// and bitwise agreement. Not a ctest target; run manually.

#include <chrono>
#include <cstdio>
#include <vector>

#include "argen/kernels.hpp"
#include "argen/rng.hpp"
#include "argen/tensor.hpp"

using namespace argen;

namespace {

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

using GemmFn = void (*)(float*, const float*, const float*, int, int, int, bool);

void bench_pair(const char* name, GemmFn par, GemmFn ser, int m, int k, int n, int reps) {
    Rng rng(1234);
    Tensor A = Tensor::randn({m, k}, rng);
    Tensor B = Tensor::randn({k, n}, rng);
    Tensor Cp({m, n}), Cs({m, n});

    par(Cp.data(), A.data(), B.data(), m, k, n, false);
    ser(Cs.data(), A.data(), B.data(), m, k, n, false);
    bool exact = true;
    for (int64_t i = 0; i < Cp.numel(); ++i)
        if (Cp[i] != Cs[i]) exact = false;

    double t0 = now_s();
    for (int r = 0; r < reps; ++r) par(Cp.data(), A.data(), B.data(), m, k, n, false);
    double tp = (now_s() - t0) / reps;
    t0 = now_s();
    for (int r = 0; r < reps; ++r) ser(Cs.data(), A.data(), B.data(), m, k, n, false);
    double ts = (now_s() - t0) / reps;

    double flops = 2.0 * m * k * n;
    std::printf("%-10s %4dx%4dx%4d  omp %7.2f GF/s  serial %7.2f GF/s  speedup %.2fx  bitwise %s\n",
                name, m, k, n, flops / tp / 1e9, flops / ts / 1e9, ts / tp,
                exact ? "equal" : "DIFFER");
}

}  // namespace

int main() {
    std::printf("threads: %d\n", kernels::thread_count());
    for (int s : {128, 256, 512}) {
        bench_pair("gemm_nn", kernels::gemm_nn, kernels::gemm_nn_serial, s, s, s, 5);
        bench_pair("gemm_tn", kernels::gemm_tn, kernels::gemm_tn_serial, s, s, s, 5);
        bench_pair("gemm_nt", kernels::gemm_nt, kernels::gemm_nt_serial, s, s, s, 5);
    }
    bench_pair("gemm_nn", kernels::gemm_nn, kernels::gemm_nn_serial, 5152, 128, 384, 3);
    return 0;
}
