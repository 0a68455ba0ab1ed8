#pragma once

#include <vector>

#include "d3tom/diffusion.hpp"
#include "d3tom/matrix.hpp"
#include "d3tom/model.hpp"

namespace d3tom {

// Frozen per-layer key/value rows for the visual+prompt prefix. Merging
// shrinks every layer in lockstep; live_positions tracks which original
// prefix positions remain.
struct PrefixCache {
    std::vector<Matrix> k;  // one per layer, kept_len rows each
    std::vector<Matrix> v;
    std::vector<int> live_positions;  // ascending original indices
    // per layer: how many original rows each live row has absorbed (1 at
    // build). Routing is per-layer, so the counts are too.
    std::vector<std::vector<int>> merge_counts;
    int kept_len = 0;
    int visual_len = 0;
    int prompt_len = 0;

    int live_visual_count() const;
};

// One forward pass over the fully masked sequence, recording each layer's
// prefix K/V projections.
PrefixCache build_prefix_cache(const ModelConfig& config, const Weights& weights);

enum class CacheMergeMode {
    sum,               // plain addition of merged rows
    weighted_average,  // running mean weighted by how many rows each entry absorbed
};

// Routes every merged position to its most key-cosine-similar kept position
// (ties toward the lower index), folds K and V in every layer, then drops the
// merged rows. `kept` and `merged` are disjoint sets of live visual
// positions; a non-live or non-visual merged position is rejected.
void merge_cache(PrefixCache& cache, const std::vector<int>& kept,
                 const std::vector<int>& merged, CacheMergeMode mode = CacheMergeMode::sum);

// Decode loop over a frozen prefix cache: after the first step only the
// output rows are recomputed and they attend to cached prefix K/V
// concatenated with fresh output K/V. Merging steps shorten the cache
// itself, cumulatively, using the current step's ratio against the
// currently live visual rows.
DecodeResult run_decode_cached(const ModelConfig& config, const Weights& weights,
                               const MergeStrategy& strategy,
                               CacheMergeMode mode = CacheMergeMode::sum);

}  // namespace d3tom
