#include "cirkit/kernels.h"

#include <cmath>
#include <cstdlib>
#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cirkit::kernels {

namespace {
bool g_parallel = [] {
    const char* env = std::getenv("CIRKIT_SERIAL");
    return !(env && env[0] == '1');
}();
}

bool parallel_enabled() { return g_parallel; }
void set_parallel_enabled(bool enabled) { g_parallel = enabled; }

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void matvec(const double* W, const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) y[r] = dot(W + static_cast<size_t>(r) * cols, x, cols);
}

void matvec_transposed_acc(const double* W, const double* g, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* row = W + static_cast<size_t>(r) * cols;
        double gr = g[r];
        for (int c = 0; c < cols; ++c) y[c] += row[c] * gr;
    }
}

double norm2(const double* v, int n) { return std::sqrt(dot(v, v, n)); }

void similarity_matrix_serial(const double* Q, int nq, const double* X, int ni, int d, double* out) {
    for (int q = 0; q < nq; ++q) {
        const double* qv = Q + static_cast<size_t>(q) * d;
        double* row = out + static_cast<size_t>(q) * ni;
        for (int i = 0; i < ni; ++i) row[i] = dot(qv, X + static_cast<size_t>(i) * d, d);
    }
}

void similarity_matrix_omp(const double* Q, int nq, const double* X, int ni, int d, double* out) {
#pragma omp parallel for schedule(static)
    for (int q = 0; q < nq; ++q) {
        const double* qv = Q + static_cast<size_t>(q) * d;
        double* row = out + static_cast<size_t>(q) * ni;
        for (int i = 0; i < ni; ++i) row[i] = dot(qv, X + static_cast<size_t>(i) * d, d);
    }
}

void similarity_matrix(const double* Q, int nq, const double* X, int ni, int d, double* out) {
    if (g_parallel) {
        similarity_matrix_omp(Q, nq, X, ni, d, out);
    } else {
        similarity_matrix_serial(Q, nq, X, ni, d, out);
    }
}

void parallel_for_serial(size_t n, const std::function<void(size_t)>& fn) {
    for (size_t i = 0; i < n; ++i) fn(i);
}

void parallel_for_omp(size_t n, const std::function<void(size_t)>& fn) {
    // exceptions may not escape an OpenMP region; trap the first and rethrow
    std::exception_ptr error;
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        try {
            fn(static_cast<size_t>(i));
        } catch (...) {
#pragma omp critical(cirkit_parallel_for_error)
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    if (g_parallel && n > 1) {
        parallel_for_omp(n, fn);
    } else {
        parallel_for_serial(n, fn);
    }
}

}  // namespace cirkit::kernels
