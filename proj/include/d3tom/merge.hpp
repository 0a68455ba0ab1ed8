#pragma once

#include <cstdint>
#include <vector>

#include "d3tom/matrix.hpp"
#include "d3tom/model.hpp"
#include "d3tom/sequence.hpp"

namespace d3tom {

enum class ScheduleKind { constant, linear, linear_reversed };

// Merge-ratio schedule. `linear` ramps from alpha_min at the first decoding
// step up to alpha_max at the last; `linear_reversed` runs the same ramp
// backwards.
struct MergeSchedule {
    ScheduleKind kind = ScheduleKind::constant;
    double alpha = 0.0;      // constant kind
    double alpha_min = 0.0;  // linear kinds
    double alpha_max = 0.0;

    static MergeSchedule constant(double a);
    static MergeSchedule linear(double lo, double hi);
    static MergeSchedule linear_reversed(double lo, double hi);

    // throws std::invalid_argument unless 0 <= alpha_min <= alpha_max < 1
    // (and 0 <= alpha < 1 for the constant kind)
    void validate() const;
};

// Ratio at schedule point s of T: alpha_min + (alpha_max-alpha_min)(s-1)/(T-1),
// reversed kinds evaluate at T-s+1. T == 1 collapses to the ramp's own start.
double alpha_at(const MergeSchedule& schedule, int s, int T);

// Ratio applied at decoding step s (2 <= s <= T). The first decoding step
// never merges (the decider set is empty), so the ramp spans the T-1 merging
// steps: their mean is exactly (alpha_min+alpha_max)/2 and reversing the
// schedule permutes the same ratio multiset.
double merge_step_alpha(const MergeSchedule& schedule, int s, int T);

// floor(ratio*count), nudged so decimal ratios land on the intended integer
// (0.9*1000 is 899.99.. in binary).
std::int64_t ratio_floor(double ratio, std::int64_t count);

// Kept/merged split of one merging step. `target[i]` is the kept index that
// merged[i] folds into.
struct MergePlan {
    std::vector<int> kept;    // ascending visual indices
    std::vector<int> merged;  // ascending
    std::vector<int> target;
    std::vector<double> scores;
};

// Sums, per visual column j, the attention mass it receives from the decider
// rows of the head-averaged matrix. `decider_row_offset` maps an output
// position to its row in `attn` (visual+prompt length when all rows live).
// Throws std::invalid_argument when the decider set is empty.
std::vector<double> importance_scores(const Matrix& attn, const DeciderSet& deciders,
                                      int visual_len, int decider_row_offset);

// Keeps the top max(1, floor((1-alpha)*|V|)) tokens by score, ties broken
// toward the lower index; everything else is scheduled for merging.
MergePlan partition(const std::vector<double>& scores, double alpha);

struct MergeResult {
    Matrix hidden;
    std::vector<int> surviving_rows;  // ascending, into the input row space
};

// Folds each merged visual row into its most cosine-similar kept row (plain
// sum) and removes the merged rows, filling plan.target with the chosen
// assignments. Assignments are computed against the pre-merge states, so the
// outcome does not depend on merge order. Rows to the right of the visual
// block are untouched. A zero-norm merged row is routed to the lowest-index
// kept token.
MergeResult assign_and_merge(const Matrix& hidden, MergePlan& plan);

struct StepMergeResult {
    Matrix hidden;
    std::vector<int> surviving_rows;
    double alpha = 0.0;
    int kept_count = 0;
    int merged_count = 0;
    std::vector<double> scores;  // empty when the step passed through without deciders
};

// One merging step at the merge layer: importance scoring, partition, merge.
// Empty decider set or a zero ratio passes the hidden states through
// unchanged at full length.
StepMergeResult step_merge(Matrix hidden, const Matrix& attn, const DeciderSet& deciders,
                           const MergeSchedule& schedule, int step_ordinal,
                           const ModelConfig& config);

}  // namespace d3tom
