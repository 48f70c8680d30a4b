#include "argen/kernels.hpp"

#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace argen::kernels {

namespace {

inline void clear_row(float* c, int n, bool acc) {
    if (!acc) std::memset(c, 0, size_t(n) * sizeof(float));
}

inline void row_nn(float* c, const float* A_row, const float* B, int k, int n, bool acc) {
    clear_row(c, n, acc);
    for (int t = 0; t < k; ++t) {
        float av = A_row[t];
        if (av == 0.0f) continue;
        const float* b = B + size_t(t) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

inline void row_tn(float* c, const float* A, const float* B, int i, int m, int k, int n, bool acc) {
    clear_row(c, n, acc);
    for (int t = 0; t < k; ++t) {
        float av = A[size_t(t) * m + i];
        if (av == 0.0f) continue;
        const float* b = B + size_t(t) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

inline void row_nt(float* c, const float* a, const float* B, int k, int n, bool acc) {
    for (int j = 0; j < n; ++j) {
        const float* b = B + size_t(j) * k;
        float s = 0.0f;
        for (int t = 0; t < k; ++t) s += a[t] * b[t];
        if (acc)
            c[j] += s;
        else
            c[j] = s;
    }
}

}  // namespace

void gemm_nn_serial(float* C, const float* A, const float* B, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) row_nn(C + size_t(i) * n, A + size_t(i) * k, B, k, n, acc);
}

void gemm_nn(float* C, const float* A, const float* B, int m, int k, int n, bool acc) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) row_nn(C + size_t(i) * n, A + size_t(i) * k, B, k, n, acc);
}

void gemm_tn_serial(float* C, const float* A, const float* B, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) row_tn(C + size_t(i) * n, A, B, i, m, k, n, acc);
}

void gemm_tn(float* C, const float* A, const float* B, int m, int k, int n, bool acc) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) row_tn(C + size_t(i) * n, A, B, i, m, k, n, acc);
}

void gemm_nt_serial(float* C, const float* A, const float* B, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) row_nt(C + size_t(i) * n, A + size_t(i) * k, B, k, n, acc);
}

void gemm_nt(float* C, const float* A, const float* B, int m, int k, int n, bool acc) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) row_nt(C + size_t(i) * n, A + size_t(i) * k, B, k, n, acc);
}

void axpy(float* y, const float* x, float a, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace argen::kernels
