#pragma once

#include <span>

#include "d3tom/matrix.hpp"

namespace d3tom {

// a (r×k) times b (k×c). Accumulates in double with ascending-k order per
// output element, so the result is bit-identical for any thread count.
// Throws std::invalid_argument on an inner-dimension mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

// Row-wise softmax of (m * scale) with max subtraction. Each output row is
// nonnegative and sums to 1.
Matrix row_softmax(const Matrix& m, float scale);

// Cosine similarity in [-1, 1]. Throws std::invalid_argument when either
// vector has zero norm.
double cosine_similarity(std::span<const float> u, std::span<const float> v);

}  // namespace d3tom
