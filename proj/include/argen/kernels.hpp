#pragma once

// Dense kernels used by the autograd ops. Every kernel has a serial
// reference implementation and an OpenMP variant. The OpenMP variants
// parallelize only over output indices and keep each output's accumulation
// order serial, so results are bitwise identical for any thread count.

namespace argen::kernels {

// C[m,n] = A[m,k] * B[k,n]   (+= when acc)
void gemm_nn(float* C, const float* A, const float* B, int m, int k, int n, bool acc);
void gemm_nn_serial(float* C, const float* A, const float* B, int m, int k, int n, bool acc);

// C[m,n] = A[k,m]^T * B[k,n] (+= when acc); weight-gradient shape.
void gemm_tn(float* C, const float* A, const float* B, int m, int k, int n, bool acc);
void gemm_tn_serial(float* C, const float* A, const float* B, int m, int k, int n, bool acc);

// C[m,n] = A[m,k] * B[n,k]^T (+= when acc); input-gradient shape.
void gemm_nt(float* C, const float* A, const float* B, int m, int k, int n, bool acc);
void gemm_nt_serial(float* C, const float* A, const float* B, int m, int k, int n, bool acc);

// y[i] += a * x[i]
void axpy(float* y, const float* x, float a, int n);

int thread_count();

}  // namespace argen::kernels
