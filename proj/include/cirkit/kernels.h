#pragma once

#include <cstddef>
#include <functional>

namespace cirkit::kernels {

// Runtime switch between the OpenMP kernels and the serial references.
// Every parallel kernel computes each output element on exactly one thread
// with the same serial inner loop as the reference, so both paths produce
// bitwise identical results; the switch exists for testing and benchmarking.
// Env var CIRKIT_SERIAL=1 disables parallelism at startup.
bool parallel_enabled();
void set_parallel_enabled(bool enabled);
int max_threads();

double dot(const double* a, const double* b, int n);

// y = W x, W row-major [rows x cols]
void matvec(const double* W, const double* x, double* y, int rows, int cols);

// y += W^T g, W row-major [rows x cols]; accumulates the column action.
void matvec_transposed_acc(const double* W, const double* g, double* y, int rows, int cols);

double norm2(const double* v, int n);

// out[q * ni + i] = dot(Q_q, X_i); rows are expected pre-normalized when the
// caller wants cosines.
void similarity_matrix_serial(const double* Q, int nq, const double* X, int ni, int d, double* out);
void similarity_matrix_omp(const double* Q, int nq, const double* X, int ni, int d, double* out);
void similarity_matrix(const double* Q, int nq, const double* X, int ni, int d, double* out);

// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread,
// so fn bodies with disjoint writes give results independent of scheduling.
void parallel_for_serial(size_t n, const std::function<void(size_t)>& fn);
void parallel_for_omp(size_t n, const std::function<void(size_t)>& fn);
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace cirkit::kernels
