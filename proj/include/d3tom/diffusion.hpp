#pragma once

#include <vector>

#include "d3tom/matrix.hpp"
#include "d3tom/merge.hpp"
#include "d3tom/model.hpp"
#include "d3tom/sequence.hpp"

namespace d3tom {

// Fully masked output, empty decider set, step T.
SequenceState init_state(const ModelConfig& config);

struct GreedyResult {
    std::vector<int> tokens;
    std::vector<double> confidences;  // post-softmax probability of the argmax
};

// One row per currently masked output position; argmax ties break toward the
// smaller token id.
GreedyResult greedy_decode(const Matrix& logits);

// Rows of `logits` for the still-masked output positions, ascending, with the
// mask token's column suppressed (the mask is never a generable prediction).
Matrix gather_masked_logits(const SequenceState& state, const Matrix& logits);

// Reveals the ceil(remaining/t) highest-confidence masked positions (ties
// toward the lower position index) and stamps them with revealed_at = t.
// At t == 1 every remaining position is revealed.
SequenceState unmask_schedule(const SequenceState& state, const std::vector<int>& predictions,
                              const std::vector<double>& confidences, int t);

// Positions that were masked in `before` and revealed in `after`.
DeciderSet next_decider_set(const SequenceState& before, const SequenceState& after);

enum class MergeStrategyKind { none, d3tom_constant, d3tom_linear, d3tom_linear_reversed };

struct MergeStrategy {
    MergeStrategyKind kind = MergeStrategyKind::none;
    MergeSchedule schedule;

    static MergeStrategy none();
    static MergeStrategy constant(double alpha);
    static MergeStrategy linear(double alpha_min, double alpha_max);
    static MergeStrategy linear_reversed(double alpha_min, double alpha_max);
    bool merging() const { return kind != MergeStrategyKind::none; }
};

struct StepTrace {
    int step_ordinal = 0;  // s = T - t + 1
    int t = 0;
    double alpha = 0.0;
    int decider_count = 0;
    int kept_count = 0;
    int merged_count = 0;
    std::vector<double> scores;  // per-visual importance; empty when no deciders
    double wall_ms = 0.0;
};

struct DecodeResult {
    std::vector<int> tokens;
    std::vector<StepTrace> trace;
    double total_wall_ms = 0.0;
};

// The full denoising loop: embed, forward (merging at the merge layer when
// the decider set is nonempty), greedy decode, unmask, refresh deciders.
DecodeResult run_decode(const ModelConfig& config, const Weights& weights,
                        const MergeStrategy& strategy);

}  // namespace d3tom
