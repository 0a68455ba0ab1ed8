#pragma once

#include <vector>

#include "d3tom/matrix.hpp"

namespace d3tom::serial {

// Plain single-threaded reference kernels. Tests use these as independent
// oracles for the parallel implementations; kernel_bench compares against
// them. Keep them simple, do not share code with the main kernels.

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix row_softmax(const Matrix& m, float scale);

// softmax(q k^T / sqrt(d)) v with the full score matrix materialized
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v);

// column sums of the materialized attention matrix restricted to the given
// query rows and key-column range
std::vector<double> decider_scores(const Matrix& q, const Matrix& k,
                                   const std::vector<int>& query_rows,
                                   int col_begin, int col_end);

}  // namespace d3tom::serial
