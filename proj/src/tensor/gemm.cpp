#include "gemm.hpp"

#include <vector>

namespace dcv::detail {

namespace {

void transpose(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& dst) {
    dst.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

} // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
    thread_local std::vector<double> at;
    thread_local std::vector<double> bt;
    if (trans_a) {
        transpose(a, k, m, at);
        a = at.data();
    }
    if (trans_b) {
        transpose(b, n, k, bt);
        b = bt.data();
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict crow = c + i * n;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
        }
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace dcv::detail
