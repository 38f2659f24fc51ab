#include <random>
#include <vector>

#include "doctest.h"
#include "metatok/kernels.hpp"

using namespace metatok;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("parallel gemm variants agree with the serial loops") {
    std::mt19937_64 rng(3);
    for (auto [m, n, k] : {std::tuple{1ul, 1ul, 1ul}, {5ul, 7ul, 3ul}, {33ul, 70ul, 129ul}, {64ul, 128ul, 128ul}}) {
        auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
        std::vector<double> c1(m * n), c2(m * n);
        kernels::serial::gemm(m, n, k, a.data(), b.data(), c1.data());
        kernels::parallel::gemm(m, n, k, a.data(), b.data(), c2.data());
        CHECK(max_abs_diff(c1, c2) < 1e-10);

        auto at = random_vec(k * m, rng);
        kernels::serial::gemm_tn(m, n, k, at.data(), b.data(), c1.data());
        kernels::parallel::gemm_tn(m, n, k, at.data(), b.data(), c2.data());
        CHECK(max_abs_diff(c1, c2) < 1e-10);

        auto bt = random_vec(n * k, rng);
        auto base = random_vec(m * n, rng);
        c1 = base;
        c2 = base;
        kernels::serial::gemm_nt(m, n, k, a.data(), bt.data(), c1.data(), true);
        kernels::parallel::gemm_nt(m, n, k, a.data(), bt.data(), c2.data(), true);
        CHECK(max_abs_diff(c1, c2) < 1e-10);
    }
}

TEST_CASE("softmax and layer norm kernels agree across implementations") {
    std::mt19937_64 rng(5);
    const std::size_t r = 17, c = 40;
    auto x = random_vec(r * c, rng);
    x[3] = -std::numeric_limits<double>::infinity();
    std::vector<double> y1(r * c), y2(r * c);
    kernels::serial::softmax_rows(r, c, x.data(), y1.data());
    kernels::parallel::softmax_rows(r, c, x.data(), y2.data());
    CHECK(max_abs_diff(y1, y2) < 1e-14);
    CHECK(y1[3] == 0.0);

    std::vector<double> i1(r), s1(r), i2(r), s2(r);
    kernels::serial::layer_norm_rows(r, c, x.data() + 0, y1.data(), 1e-5, i1.data(), s1.data());
    kernels::parallel::layer_norm_rows(r, c, x.data() + 0, y2.data(), 1e-5, i2.data(), s2.data());
    // row 0 holds -inf, skip it
    for (std::size_t i = c; i < r * c; ++i) CHECK(std::abs(y1[i] - y2[i]) < 1e-12);
}

TEST_CASE("fully masked softmax row is zero") {
    const double ninf = -std::numeric_limits<double>::infinity();
    std::vector<double> x{ninf, ninf, 0.0, ninf}, y(4);
    kernels::softmax_rows(2, 2, x.data(), y.data());
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 0.0);
    CHECK(y[2] == 1.0);
    CHECK(y[3] == 0.0);
}
