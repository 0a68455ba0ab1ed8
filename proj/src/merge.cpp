#include "d3tom/merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "d3tom/dot.hpp"

namespace d3tom {

MergeSchedule MergeSchedule::constant(double a) {
    MergeSchedule s;
    s.kind = ScheduleKind::constant;
    s.alpha = a;
    s.validate();
    return s;
}

MergeSchedule MergeSchedule::linear(double lo, double hi) {
    MergeSchedule s;
    s.kind = ScheduleKind::linear;
    s.alpha_min = lo;
    s.alpha_max = hi;
    s.validate();
    return s;
}

MergeSchedule MergeSchedule::linear_reversed(double lo, double hi) {
    MergeSchedule s = linear(lo, hi);
    s.kind = ScheduleKind::linear_reversed;
    return s;
}

void MergeSchedule::validate() const {
    if (kind == ScheduleKind::constant) {
        if (!(alpha >= 0.0 && alpha < 1.0)) {
            throw std::invalid_argument("schedule: alpha must lie in [0, 1)");
        }
        return;
    }
    if (!(alpha_min >= 0.0 && alpha_min <= alpha_max && alpha_max < 1.0)) {
        throw std::invalid_argument("schedule: need 0 <= alpha_min <= alpha_max < 1");
    }
}

double alpha_at(const MergeSchedule& schedule, int s, int T) {
    if (T < 1 || s < 1 || s > T) throw std::invalid_argument("alpha_at: step out of range");
    switch (schedule.kind) {
        case ScheduleKind::constant:
            return schedule.alpha;
        case ScheduleKind::linear:
            if (T == 1) return schedule.alpha_min;
            return schedule.alpha_min +
                   (schedule.alpha_max - schedule.alpha_min) * static_cast<double>(s - 1) /
                       static_cast<double>(T - 1);
        case ScheduleKind::linear_reversed: {
            if (T == 1) return schedule.alpha_max;
            const int mirrored = T - s + 1;
            return schedule.alpha_min +
                   (schedule.alpha_max - schedule.alpha_min) * static_cast<double>(mirrored - 1) /
                       static_cast<double>(T - 1);
        }
    }
    return 0.0;
}

double merge_step_alpha(const MergeSchedule& schedule, int s, int T) {
    if (s < 2 || s > T) throw std::invalid_argument("merge_step_alpha: merging starts at step 2");
    return alpha_at(schedule, s - 1, T - 1);
}

std::int64_t ratio_floor(double ratio, std::int64_t count) {
    return static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(count) + 1e-9));
}

std::vector<double> importance_scores(const Matrix& attn, const DeciderSet& deciders,
                                      int visual_len, int decider_row_offset) {
    if (deciders.empty()) {
        throw std::invalid_argument("importance_scores: decider set is empty");
    }
    if (visual_len > attn.cols) {
        throw std::invalid_argument("importance_scores: visual range exceeds matrix");
    }
    std::vector<double> scores(static_cast<std::size_t>(visual_len), 0.0);
    for (int pos : deciders.positions) {
        const int row = decider_row_offset + pos;
        if (row < 0 || row >= attn.rows) {
            throw std::invalid_argument("importance_scores: decider row out of range");
        }
        const float* arow = attn.row(row);
        for (int j = 0; j < visual_len; ++j) scores[static_cast<std::size_t>(j)] += arow[j];
    }
    return scores;
}

MergePlan partition(const std::vector<double>& scores, double alpha) {
    const int v = static_cast<int>(scores.size());
    if (v < 1) throw std::invalid_argument("partition: no visual tokens");
    const std::int64_t kept_count =
        std::max<std::int64_t>(1, ratio_floor(1.0 - alpha, v));

    std::vector<int> order(static_cast<std::size_t>(v));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = scores[static_cast<std::size_t>(a)];
        const double sb = scores[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;  // rank ties keep the lower index
    });

    MergePlan plan;
    plan.scores = scores;
    plan.kept.assign(order.begin(), order.begin() + kept_count);
    plan.merged.assign(order.begin() + kept_count, order.end());
    std::sort(plan.kept.begin(), plan.kept.end());
    std::sort(plan.merged.begin(), plan.merged.end());
    plan.target.assign(plan.merged.size(), -1);
    return plan;
}

MergeResult assign_and_merge(const Matrix& hidden, MergePlan& plan) {
    const int n = hidden.rows;
    const int d = hidden.cols;
    const int v = static_cast<int>(plan.kept.size() + plan.merged.size());
    if (v > n) throw std::invalid_argument("assign_and_merge: plan larger than matrix");
    if (plan.kept.empty()) throw std::invalid_argument("assign_and_merge: kept set is empty");

    MergeResult result;
    result.hidden = hidden;
    plan.target.assign(plan.merged.size(), -1);
    if (plan.merged.empty()) {
        result.surviving_rows.resize(static_cast<std::size_t>(n));
        std::iota(result.surviving_rows.begin(), result.surviving_rows.end(), 0);
        return result;
    }

    // norms over the pre-merge states; assignments must not see partial sums
    std::vector<double> norm(static_cast<std::size_t>(v), 0.0);
    for (int i = 0; i < v; ++i) {
        norm[static_cast<std::size_t>(i)] = std::sqrt(dot_f32(hidden.row(i), hidden.row(i), d));
    }

    int zero_norm_rows = 0;
    std::vector<int>& targets = plan.target;
#pragma omp parallel for schedule(static) reduction(+ : zero_norm_rows)
    for (std::size_t mi = 0; mi < plan.merged.size(); ++mi) {
        const int m = plan.merged[mi];
        const float* hm = hidden.row(m);
        double best = -std::numeric_limits<double>::infinity();
        int best_k = plan.kept.front();
        if (norm[static_cast<std::size_t>(m)] == 0.0) {
            ++zero_norm_rows;  // similarity -inf everywhere: lowest kept index
        } else {
            for (int kidx : plan.kept) {
                if (norm[static_cast<std::size_t>(kidx)] == 0.0) continue;
                const double dot = dot_f32(hm, hidden.row(kidx), d);
                const double sim =
                    dot / (norm[static_cast<std::size_t>(m)] * norm[static_cast<std::size_t>(kidx)]);
                if (sim > best) {  // ties keep the earlier (lower) kept index
                    best = sim;
                    best_k = kidx;
                }
            }
        }
        targets[mi] = best_k;
    }
    if (zero_norm_rows > 0) {
        std::fprintf(stderr, "assign_and_merge: %d zero-norm row(s) routed to the first kept token\n",
                     zero_norm_rows);
    }

    for (std::size_t mi = 0; mi < plan.merged.size(); ++mi) {
        const float* src = result.hidden.row(plan.merged[mi]);
        float* dst = result.hidden.row(targets[mi]);
        for (int t = 0; t < d; ++t) dst[t] += src[t];
    }

    std::vector<char> drop(static_cast<std::size_t>(n), 0);
    for (int m : plan.merged) drop[static_cast<std::size_t>(m)] = 1;
    Matrix shortened(n - static_cast<int>(plan.merged.size()), d);
    int out_row = 0;
    for (int i = 0; i < n; ++i) {
        if (drop[static_cast<std::size_t>(i)]) continue;
        std::copy(result.hidden.row(i), result.hidden.row(i) + d, shortened.row(out_row++));
        result.surviving_rows.push_back(i);
    }
    result.hidden = std::move(shortened);
    return result;
}

StepMergeResult step_merge(Matrix hidden, const Matrix& attn, const DeciderSet& deciders,
                           const MergeSchedule& schedule, int step_ordinal,
                           const ModelConfig& config) {
    StepMergeResult out;
    const int n = hidden.rows;
    if (deciders.empty() || step_ordinal == 1) {
        out.hidden = std::move(hidden);
        out.surviving_rows.resize(static_cast<std::size_t>(n));
        std::iota(out.surviving_rows.begin(), out.surviving_rows.end(), 0);
        out.kept_count = config.n_visual;
        return out;
    }

    out.alpha = merge_step_alpha(schedule, step_ordinal, config.n_steps);
    out.scores = importance_scores(attn, deciders, config.n_visual,
                                   config.n_visual + config.n_prompt);
    MergePlan plan = partition(out.scores, out.alpha);
    out.kept_count = static_cast<int>(plan.kept.size());
    out.merged_count = static_cast<int>(plan.merged.size());
    MergeResult merged = assign_and_merge(hidden, plan);
    out.hidden = std::move(merged.hidden);
    out.surviving_rows = std::move(merged.surviving_rows);
    return out;
}

}  // namespace d3tom
