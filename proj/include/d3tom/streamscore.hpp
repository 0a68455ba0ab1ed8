#pragma once

#include <cstddef>
#include <vector>

#include "d3tom/matrix.hpp"

namespace d3tom {

struct BlockSpec {
    int key_block = 64;  // tile width over key positions, clamped to [1, n]
};

// Capacity accounting for the tiled paths: counts the per-tile score buffers,
// the quantity that would be O(N^2) if the attention matrix were
// materialized. Output/state accumulators (O(rows × d)) are not transient.
struct StreamStats {
    std::size_t peak_transient_elems = 0;
};

// softmax(q k^T / sqrt(d)) v computed tile-by-tile with an online
// max/denominator, never holding more than one key tile of scores per row.
// Matches the materializing path within 1e-5 relative.
Matrix stream_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const BlockSpec& block, StreamStats* stats = nullptr);

// Exact per-key-column attention mass received from the given query rows,
// restricted to columns [visual_begin, visual_end). Two streaming passes per
// query row: one for the row max and denominator, one to accumulate the
// masses; the full score matrix is never materialized.
// Throws std::invalid_argument when q_deciders has no rows.
std::vector<double> stream_decider_scores(const Matrix& q_deciders, const Matrix& k,
                                          int visual_begin, int visual_end,
                                          const BlockSpec& block, StreamStats* stats = nullptr);

}  // namespace d3tom
