#include "d3tom/serial.hpp"

#include <cmath>
#include <stdexcept>

#include "d3tom/dot.hpp"

namespace d3tom::serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("serial::matmul: shape mismatch");
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) {
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
            }
            out.at(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

Matrix row_softmax(const Matrix& m, float scale) {
    Matrix out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < m.cols; ++j) {
            mx = std::max(mx, static_cast<double>(m.at(i, j)) * scale);
        }
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            sum += std::exp(static_cast<double>(m.at(i, j)) * scale - mx);
        }
        for (int j = 0; j < m.cols; ++j) {
            out.at(i, j) = static_cast<float>(std::exp(static_cast<double>(m.at(i, j)) * scale - mx) / sum);
        }
    }
    return out;
}

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (q.cols != k.cols || k.rows != v.rows) throw std::invalid_argument("serial::attention: shape mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    Matrix out(q.rows, v.cols);
    std::vector<double> scores(static_cast<std::size_t>(k.rows));
    std::vector<double> acc(static_cast<std::size_t>(v.cols));
    for (int i = 0; i < q.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k.rows; ++j) {
            // same dot primitive as the tiled path, so a single-tile run can
            // be compared bit-for-bit
            scores[static_cast<std::size_t>(j)] = dot_f32(q.row(i), k.row(j), q.cols) * scale;
            mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        double denom = 0.0;
        for (int j = 0; j < k.rows; ++j) {
            const double e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
            denom += e;
            for (int t = 0; t < v.cols; ++t) {
                acc[static_cast<std::size_t>(t)] += e * static_cast<double>(v.at(j, t));
            }
        }
        const double inv = 1.0 / denom;
        for (int t = 0; t < v.cols; ++t) {
            out.at(i, t) = static_cast<float>(acc[static_cast<std::size_t>(t)] * inv);
        }
    }
    return out;
}

std::vector<double> decider_scores(const Matrix& q, const Matrix& k,
                                   const std::vector<int>& query_rows,
                                   int col_begin, int col_end) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    std::vector<double> scores(static_cast<std::size_t>(col_end - col_begin), 0.0);
    for (int qi : query_rows) {
        std::vector<double> row(static_cast<std::size_t>(k.rows));
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k.rows; ++j) {
            double acc = 0.0;
            for (int t = 0; t < q.cols; ++t) {
                acc += static_cast<double>(q.at(qi, t)) * static_cast<double>(k.at(j, t));
            }
            row[j] = acc * scale;
            mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < k.rows; ++j) sum += std::exp(row[j] - mx);
        for (int j = col_begin; j < col_end; ++j) {
            scores[static_cast<std::size_t>(j - col_begin)] += std::exp(row[j] - mx) / sum;
        }
    }
    return scores;
}

}  // namespace d3tom::serial
