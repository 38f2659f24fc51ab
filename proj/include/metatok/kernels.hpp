#pragma once

// Dense row-major compute kernels.
//
// Every kernel exists twice: a serial reference written as the plain loop nest,
// and a blocked OpenMP version that the autodiff ops call. Each output element
// is owned by exactly one thread and accumulated in a fixed order, so results
// do not depend on the thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace metatok::kernels {

namespace serial {

// C[m×n] = A[m×k]·B[k×n] (+ C when accumulate)
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate = false) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T sum = 0;
            for (std::size_t p = 0; p < k; ++p) {
                sum += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
        }
    }
}

// C[m×n] = A[k×m]ᵀ·B[k×n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate = false) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T sum = 0;
            for (std::size_t p = 0; p < k; ++p) {
                sum += a[p * m + i] * b[p * n + j];
            }
            c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
        }
    }
}

// C[m×n] = A[m×k]·B[n×k]ᵀ
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate = false) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T sum = 0;
            for (std::size_t p = 0; p < k; ++p) {
                sum += a[i * k + p] * b[j * k + p];
            }
            c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
        }
    }
}

// Row-wise softmax. Entries equal to -inf get weight exactly 0; a row with no
// finite entry becomes all-zero.
template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* x, T* y) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x + i * cols;
        T* yi = y + i * cols;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, xi[j]);
        if (mx == -std::numeric_limits<T>::infinity()) {
            std::fill(yi, yi + cols, T(0));
            continue;
        }
        T sum = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            yi[j] = xi[j] == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(xi[j] - mx);
            sum += yi[j];
        }
        for (std::size_t j = 0; j < cols; ++j) yi[j] /= sum;
    }
}

// (x - mean) / (std + eps) per row, population std. Writes the per-row
// 1/(std+eps) and std into inv and sd when non-null.
template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* x, T* y, T eps, T* inv = nullptr,
                     T* sd = nullptr) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x + i * cols;
        T mean = 0;
        for (std::size_t j = 0; j < cols; ++j) mean += xi[j];
        mean /= static_cast<T>(cols);
        T var = 0;
        for (std::size_t j = 0; j < cols; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<T>(cols);
        const T s = std::sqrt(var);
        const T r = T(1) / (s + eps);
        for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] = (xi[j] - mean) * r;
        if (inv) inv[i] = r;
        if (sd) sd[i] = s;
    }
}

}  // namespace serial

namespace parallel {

namespace detail {

inline constexpr std::size_t kRowBlock = 4;
inline constexpr std::size_t kColBlock = 64;
inline constexpr std::size_t kParallelWork = std::size_t{1} << 16;

template <typename T>
inline void micro_full(std::size_t n, std::size_t k, const T* a, const T* b, T* c, std::size_t i0,
                       std::size_t j0, bool accumulate) {
    T acc[kRowBlock][kColBlock] = {};
    for (std::size_t p = 0; p < k; ++p) {
        const T* bp = b + p * n + j0;
        for (std::size_t r = 0; r < kRowBlock; ++r) {
            const T av = a[(i0 + r) * k + p];
#pragma omp simd
            for (std::size_t jj = 0; jj < kColBlock; ++jj) acc[r][jj] += av * bp[jj];
        }
    }
    for (std::size_t r = 0; r < kRowBlock; ++r) {
        T* cr = c + (i0 + r) * n + j0;
        if (accumulate) {
#pragma omp simd
            for (std::size_t jj = 0; jj < kColBlock; ++jj) cr[jj] += acc[r][jj];
        } else {
#pragma omp simd
            for (std::size_t jj = 0; jj < kColBlock; ++jj) cr[jj] = acc[r][jj];
        }
    }
}

template <typename T>
inline void micro_edge(std::size_t n, std::size_t k, const T* a, const T* b, T* c, std::size_t i0,
                       std::size_t i1, std::size_t j0, std::size_t j1, bool accumulate) {
    T acc[kColBlock];
    const std::size_t w = j1 - j0;
    for (std::size_t i = i0; i < i1; ++i) {
        std::fill(acc, acc + w, T(0));
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* bp = b + p * n + j0;
#pragma omp simd
            for (std::size_t jj = 0; jj < w; ++jj) acc[jj] += av * bp[jj];
        }
        T* ci = c + i * n + j0;
        for (std::size_t jj = 0; jj < w; ++jj) ci[jj] = accumulate ? ci[jj] + acc[jj] : acc[jj];
    }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace detail

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate = false) {
    using namespace detail;
    const std::size_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
    const std::size_t col_blocks = (n + kColBlock - 1) / kColBlock;
    const long tiles = static_cast<long>(row_blocks * col_blocks);
    const bool par = m * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (long t = 0; t < tiles; ++t) {
        const std::size_t rb = static_cast<std::size_t>(t) / col_blocks;
        const std::size_t cb = static_cast<std::size_t>(t) % col_blocks;
        const std::size_t i0 = rb * kRowBlock, i1 = std::min(m, i0 + kRowBlock);
        const std::size_t j0 = cb * kColBlock, j1 = std::min(n, j0 + kColBlock);
        if (i1 - i0 == kRowBlock && j1 - j0 == kColBlock) {
            micro_full(n, k, a, b, c, i0, j0, accumulate);
        } else {
            micro_edge(n, k, a, b, c, i0, i1, j0, j1, accumulate);
        }
    }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate = false) {
    std::vector<T> at(m * k);
    detail::transpose(k, m, a, at.data());
    gemm(m, n, k, at.data(), b, c, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate = false) {
    std::vector<T> bt(k * n);
    detail::transpose(n, k, b, bt.data());
    gemm(m, n, k, a, bt.data(), c, accumulate);
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* x, T* y) {
    const bool par = rows * cols >= detail::kParallelWork / 8;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < static_cast<long>(rows); ++i) {
        serial::softmax_rows<T>(1, cols, x + i * cols, y + i * cols);
    }
}

template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* x, T* y, T eps, T* inv = nullptr,
                     T* sd = nullptr) {
    const bool par = rows * cols >= detail::kParallelWork / 8;
#pragma omp parallel for schedule(static) if (par)
    for (long i = 0; i < static_cast<long>(rows); ++i) {
        serial::layer_norm_rows<T>(1, cols, x + i * cols, y + i * cols, eps,
                                   inv ? inv + i : nullptr, sd ? sd + i : nullptr);
    }
}

}  // namespace parallel

using parallel::gemm;
using parallel::gemm_nt;
using parallel::gemm_tn;
using parallel::layer_norm_rows;
using parallel::softmax_rows;

}  // namespace metatok::kernels
