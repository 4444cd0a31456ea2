#pragma once

#include <cstddef>

namespace dcv::detail {

/// C (M x N) = op(A) * op(B) (+ C when accumulate). op(A) is M x K, op(B) is
/// K x N, all row-major. Each output element is accumulated over k in
/// increasing order, so results are bitwise reproducible.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate);

} // namespace dcv::detail
