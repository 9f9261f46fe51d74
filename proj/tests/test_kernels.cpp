#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "cirkit/kernels.h"
#include "cirkit/util.h"

using namespace cirkit;

namespace {
std::vector<double> random_matrix(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> m(n);
    for (double& v : m) v = rng.normal();
    return m;
}
}  // namespace

TEST_CASE("similarity_matrix omp matches serial bitwise") {
    for (auto [nq, ni, d] : {std::tuple{3, 5, 8}, std::tuple{17, 31, 64}, std::tuple{1, 1, 1}}) {
        std::vector<double> Q = random_matrix(static_cast<size_t>(nq) * d, 11);
        std::vector<double> X = random_matrix(static_cast<size_t>(ni) * d, 22);
        std::vector<double> a(static_cast<size_t>(nq) * ni), b(static_cast<size_t>(nq) * ni);
        kernels::similarity_matrix_serial(Q.data(), nq, X.data(), ni, d, a.data());
        kernels::similarity_matrix_omp(Q.data(), nq, X.data(), ni, d, b.data());
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("parallel_for covers every index exactly once") {
    std::vector<int> hits(1000, 0);
    kernels::parallel_for_omp(hits.size(), [&](size_t i) { hits[i]++; });
    for (int h : hits) CHECK(h == 1);
}

TEST_CASE("parallel_for matches serial results with disjoint writes") {
    std::vector<double> a(512), b(512);
    auto body_into = [](std::vector<double>& out) {
        return [&out](size_t i) {
            double acc = 0.0;
            for (int k = 1; k <= 50; ++k) acc += 1.0 / (static_cast<double>(i) + k);
            out[i] = acc;
        };
    };
    kernels::parallel_for_serial(a.size(), body_into(a));
    kernels::parallel_for_omp(b.size(), body_into(b));
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("parallel_for rethrows exceptions from the loop body") {
    CHECK_THROWS(kernels::parallel_for_omp(8, [](size_t i) {
        if (i == 3) throw std::runtime_error("boom");
    }));
}

TEST_CASE("matvec and transposed accumulate agree with naive loops") {
    int rows = 7, cols = 13;
    std::vector<double> W = random_matrix(static_cast<size_t>(rows) * cols, 3);
    std::vector<double> x = random_matrix(cols, 4);
    std::vector<double> g = random_matrix(rows, 5);

    std::vector<double> y(rows);
    kernels::matvec(W.data(), x.data(), y.data(), rows, cols);
    for (int r = 0; r < rows; ++r) {
        double want = 0.0;
        for (int c = 0; c < cols; ++c) want += W[static_cast<size_t>(r) * cols + c] * x[c];
        CHECK(y[r] == doctest::Approx(want).epsilon(1e-12));
    }

    std::vector<double> back(cols, 0.0);
    kernels::matvec_transposed_acc(W.data(), g.data(), back.data(), rows, cols);
    for (int c = 0; c < cols; ++c) {
        double want = 0.0;
        for (int r = 0; r < rows; ++r) want += W[static_cast<size_t>(r) * cols + c] * g[r];
        CHECK(back[c] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("rng streams are platform-stable") {
    // mt19937_64 with seed 42 is pinned by the standard
    Rng rng(42);
    CHECK(rng.next_u64() == 13930160852258120406ull);

    Rng a = derive_rng(7, "group-a");
    Rng b = derive_rng(7, "group-a");
    Rng c = derive_rng(7, "group-b");
    double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    CHECK(va == vb);
    CHECK(va != vc);
}
