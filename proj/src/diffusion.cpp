#include "d3tom/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace d3tom {

SequenceState init_state(const ModelConfig& config) {
    config.validate();
    SequenceState s;
    s.visual_len = config.n_visual;
    s.prompt_len = config.n_prompt;
    s.output_len = config.n_output;
    s.mask_token = config.mask_token();
    s.output_tokens.assign(static_cast<std::size_t>(config.n_output), s.mask_token);
    s.revealed_at.assign(static_cast<std::size_t>(config.n_output), 0);
    s.positions.resize(static_cast<std::size_t>(s.total_len()));
    std::iota(s.positions.begin(), s.positions.end(), 0);
    s.step = config.n_steps;
    return s;
}

GreedyResult greedy_decode(const Matrix& logits) {
    GreedyResult out;
    out.tokens.resize(static_cast<std::size_t>(logits.rows));
    out.confidences.resize(static_cast<std::size_t>(logits.rows));
    for (int i = 0; i < logits.rows; ++i) {
        const float* row = logits.row(i);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j) {
            if (row[j] > row[best]) best = j;  // strict: ties keep the smaller id
        }
        const double mx = static_cast<double>(row[best]);
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) {
            sum += std::exp(static_cast<double>(row[j]) - mx);
        }
        out.tokens[static_cast<std::size_t>(i)] = best;
        out.confidences[static_cast<std::size_t>(i)] = 1.0 / sum;  // exp(0)/sum
    }
    return out;
}

Matrix gather_masked_logits(const SequenceState& state, const Matrix& logits) {
    if (logits.rows != state.output_len) {
        throw std::invalid_argument("gather_masked_logits: expected one row per output position");
    }
    std::vector<int> masked;
    for (int i = 0; i < state.output_len; ++i) {
        if (state.is_masked(i)) masked.push_back(i);
    }
    Matrix out(static_cast<int>(masked.size()), logits.cols);
    for (std::size_t i = 0; i < masked.size(); ++i) {
        const float* src = logits.row(masked[i]);
        float* dst = out.row(static_cast<int>(i));
        std::copy(src, src + logits.cols, dst);
        if (state.mask_token >= 0 && state.mask_token < logits.cols) {
            dst[state.mask_token] = -std::numeric_limits<float>::infinity();
        }
    }
    return out;
}

SequenceState unmask_schedule(const SequenceState& state, const std::vector<int>& predictions,
                              const std::vector<double>& confidences, int t) {
    if (t < 1) throw std::invalid_argument("unmask_schedule: t must be >= 1");
    std::vector<int> masked;
    for (int i = 0; i < state.output_len; ++i) {
        if (state.is_masked(i)) masked.push_back(i);
    }
    if (predictions.size() != masked.size() || confidences.size() != masked.size()) {
        throw std::invalid_argument("unmask_schedule: prediction count does not match masked count");
    }

    SequenceState next = state;
    next.step = t - 1;
    if (masked.empty()) return next;

    const int remaining = static_cast<int>(masked.size());
    const int k = (t == 1) ? remaining : (remaining + t - 1) / t;  // ceil(remaining/t)

    std::vector<int> order(masked.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (confidences[static_cast<std::size_t>(a)] != confidences[static_cast<std::size_t>(b)]) {
            return confidences[static_cast<std::size_t>(a)] > confidences[static_cast<std::size_t>(b)];
        }
        return masked[static_cast<std::size_t>(a)] < masked[static_cast<std::size_t>(b)];
    });

    for (int r = 0; r < k; ++r) {
        const int mi = order[static_cast<std::size_t>(r)];
        const int pos = masked[static_cast<std::size_t>(mi)];
        next.output_tokens[static_cast<std::size_t>(pos)] = predictions[static_cast<std::size_t>(mi)];
        next.revealed_at[static_cast<std::size_t>(pos)] = t;
    }
    return next;
}

DeciderSet next_decider_set(const SequenceState& before, const SequenceState& after) {
    if (before.output_len != after.output_len) {
        throw std::invalid_argument("next_decider_set: states disagree on output length");
    }
    DeciderSet d;
    for (int i = 0; i < before.output_len; ++i) {
        if (before.is_masked(i) && !after.is_masked(i)) d.positions.push_back(i);
    }
    return d;
}

MergeStrategy MergeStrategy::none() { return MergeStrategy{}; }

MergeStrategy MergeStrategy::constant(double alpha) {
    MergeStrategy s;
    s.kind = MergeStrategyKind::d3tom_constant;
    s.schedule = MergeSchedule::constant(alpha);
    return s;
}

MergeStrategy MergeStrategy::linear(double alpha_min, double alpha_max) {
    MergeStrategy s;
    s.kind = MergeStrategyKind::d3tom_linear;
    s.schedule = MergeSchedule::linear(alpha_min, alpha_max);
    return s;
}

MergeStrategy MergeStrategy::linear_reversed(double alpha_min, double alpha_max) {
    MergeStrategy s;
    s.kind = MergeStrategyKind::d3tom_linear_reversed;
    s.schedule = MergeSchedule::linear_reversed(alpha_min, alpha_max);
    return s;
}

DecodeResult run_decode(const ModelConfig& config, const Weights& weights,
                        const MergeStrategy& strategy) {
    config.validate();
    using clock = std::chrono::steady_clock;
    const auto run_start = clock::now();

    SequenceState state = init_state(config);
    DeciderSet deciders;
    DecodeResult result;
    const int T = config.n_steps;
    result.trace.reserve(static_cast<std::size_t>(T));

    for (int t = T; t >= 1; --t) {
        const auto step_start = clock::now();
        const int s = T - t + 1;
        StepTrace row;
        row.step_ordinal = s;
        row.t = t;
        row.decider_count = static_cast<int>(deciders.size());
        row.kept_count = config.n_visual;

        Matrix logits;
        if (strategy.merging() && !deciders.empty()) {
            MergeHook hook = [&](Matrix hidden, const Matrix& attn) {
                StepMergeResult m =
                    step_merge(std::move(hidden), attn, deciders, strategy.schedule, s, config);
                row.alpha = m.alpha;
                row.kept_count = m.kept_count;
                row.merged_count = m.merged_count;
                row.scores = std::move(m.scores);
                return std::make_pair(std::move(m.hidden), std::move(m.surviving_rows));
            };
            logits = forward_full(state, weights, &hook);
        } else {
            logits = forward_full(state, weights);
        }

        const GreedyResult greedy = greedy_decode(gather_masked_logits(state, logits));
        SequenceState next = unmask_schedule(state, greedy.tokens, greedy.confidences, t);
        deciders = next_decider_set(state, next);
        state = std::move(next);

        row.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - step_start).count();
        result.trace.push_back(std::move(row));
    }

    result.tokens = state.output_tokens;
    result.total_wall_ms =
        std::chrono::duration<double, std::milli>(clock::now() - run_start).count();
    return result;
}

}  // namespace d3tom
