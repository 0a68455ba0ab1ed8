#include "d3tom/streamscore.hpp"

#include "d3tom/dot.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace d3tom {

namespace {

int clamp_block(const BlockSpec& block, int n) {
    if (block.key_block < 1) throw std::invalid_argument("key_block must be >= 1");
    return std::min(block.key_block, n);
}

}  // namespace

Matrix stream_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const BlockSpec& block, StreamStats* stats) {
    if (q.cols != k.cols || k.rows != v.rows) {
        throw std::invalid_argument("stream_attention: shape mismatch");
    }
    const int n_keys = k.rows;
    const int d = q.cols;
    const int b = clamp_block(block, n_keys);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Matrix out(q.rows, v.cols);
    std::atomic<std::size_t> live_elems{0};
    std::atomic<std::size_t> peak_elems{0};

#pragma omp parallel for schedule(static)
    for (int i = 0; i < q.rows; ++i) {
        std::vector<double> tile(static_cast<std::size_t>(b));
        std::vector<double> acc(static_cast<std::size_t>(v.cols), 0.0);
        const std::size_t cur = live_elems.fetch_add(tile.size()) + tile.size();
        std::size_t seen = peak_elems.load();
        while (cur > seen && !peak_elems.compare_exchange_weak(seen, cur)) {
        }

        double m = -std::numeric_limits<double>::infinity();
        double l = 0.0;
        const float* qi = q.row(i);
        for (int start = 0; start < n_keys; start += b) {
            const int len = std::min(b, n_keys - start);
            double tile_max = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < len; ++j) {
                tile[static_cast<std::size_t>(j)] = dot_f32(qi, k.row(start + j), d) * scale;
                tile_max = std::max(tile_max, tile[static_cast<std::size_t>(j)]);
            }
            const double new_m = std::max(m, tile_max);
            if (l > 0.0) {
                const double rescale = std::exp(m - new_m);
                l *= rescale;
                for (double& a : acc) a *= rescale;
            }
            m = new_m;
            for (int j = 0; j < len; ++j) {
                const double e = std::exp(tile[static_cast<std::size_t>(j)] - m);
                l += e;
                const float* vj = v.row(start + j);
                for (int t = 0; t < v.cols; ++t) {
                    acc[static_cast<std::size_t>(t)] += e * static_cast<double>(vj[t]);
                }
            }
        }
        float* orow = out.row(i);
        const double inv = 1.0 / l;
        for (int t = 0; t < v.cols; ++t) orow[t] = static_cast<float>(acc[static_cast<std::size_t>(t)] * inv);
        live_elems.fetch_sub(tile.size());
    }

    if (stats) stats->peak_transient_elems = peak_elems.load();
    return out;
}

std::vector<double> stream_decider_scores(const Matrix& q_deciders, const Matrix& k,
                                          int visual_begin, int visual_end,
                                          const BlockSpec& block, StreamStats* stats) {
    if (q_deciders.rows == 0) {
        throw std::invalid_argument("stream_decider_scores: no decider rows");
    }
    if (q_deciders.cols != k.cols) {
        throw std::invalid_argument("stream_decider_scores: shape mismatch");
    }
    if (visual_begin < 0 || visual_end > k.rows || visual_begin > visual_end) {
        throw std::invalid_argument("stream_decider_scores: visual range out of bounds");
    }
    const int n_keys = k.rows;
    const int d = k.cols;
    const int b = clamp_block(block, n_keys);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> scores(static_cast<std::size_t>(visual_end - visual_begin), 0.0);
    std::vector<double> tile(static_cast<std::size_t>(b));
    if (stats) stats->peak_transient_elems = tile.size();

    for (int i = 0; i < q_deciders.rows; ++i) {
        const float* qi = q_deciders.row(i);
        // pass 1: online running max and denominator over key tiles
        double m = -std::numeric_limits<double>::infinity();
        double l = 0.0;
        for (int start = 0; start < n_keys; start += b) {
            const int len = std::min(b, n_keys - start);
            double tile_max = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < len; ++j) {
                tile[static_cast<std::size_t>(j)] = dot_f32(qi, k.row(start + j), d) * scale;
                tile_max = std::max(tile_max, tile[static_cast<std::size_t>(j)]);
            }
            const double new_m = std::max(m, tile_max);
            if (l > 0.0) l *= std::exp(m - new_m);
            m = new_m;
            for (int j = 0; j < len; ++j) {
                l += std::exp(tile[static_cast<std::size_t>(j)] - m);
            }
        }
        // pass 2: attention mass on the visual columns only
        const double inv = 1.0 / l;
        for (int start = visual_begin; start < visual_end; start += b) {
            const int len = std::min(b, visual_end - start);
            for (int j = 0; j < len; ++j) {
                tile[static_cast<std::size_t>(j)] = dot_f32(qi, k.row(start + j), d) * scale;
            }
            for (int j = 0; j < len; ++j) {
                scores[static_cast<std::size_t>(start - visual_begin + j)] +=
                    std::exp(tile[static_cast<std::size_t>(j)] - m) * inv;
            }
        }
    }
    return scores;
}

}  // namespace d3tom
