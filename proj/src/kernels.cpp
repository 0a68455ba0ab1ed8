#include "d3tom/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace d3tom {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("matmul: inner dimensions disagree");
    }
    Matrix out(a.rows, b.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) {
        std::vector<double> acc(static_cast<std::size_t>(b.cols), 0.0);
        const float* arow = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = static_cast<double>(arow[k]);
            const float* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) {
                acc[j] += aik * static_cast<double>(brow[j]);
            }
        }
        float* orow = out.row(i);
        for (int j = 0; j < b.cols; ++j) orow[j] = static_cast<float>(acc[j]);
    }
    return out;
}

Matrix row_softmax(const Matrix& m, float scale) {
    Matrix out(m.rows, m.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m.rows; ++i) {
        const float* in = m.row(i);
        float* o = out.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < m.cols; ++j) {
            mx = std::max(mx, static_cast<double>(in[j]) * scale);
        }
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            const double e = std::exp(static_cast<double>(in[j]) * scale - mx);
            o[j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < m.cols; ++j) {
            o[j] = static_cast<float>(static_cast<double>(o[j]) * inv);
        }
    }
    return out;
}

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch");
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<double>(u[i]) * static_cast<double>(v[i]);
        nu += static_cast<double>(u[i]) * static_cast<double>(u[i]);
        nv += static_cast<double>(v[i]) * static_cast<double>(v[i]);
    }
    if (nu == 0.0 || nv == 0.0) {
        throw std::invalid_argument("cosine_similarity: zero-norm vector");
    }
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

}  // namespace d3tom
