#include "d3tom/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace d3tom {

namespace {

using i128 = __int128;

std::uint64_t to_u64(i128 v) {
    if (v < 0 || v > static_cast<i128>(UINT64_MAX)) {
        throw std::overflow_error("cost model: count does not fit 64 bits");
    }
    return static_cast<std::uint64_t>(v);
}

i128 attn_i128(i128 n, i128 d) { return 4 * n * d * d + 2 * n * n * d; }
i128 ffn_i128(i128 n, i128 d, i128 m) { return 3 * n * d * m; }

void check_positive(const CostParams& p) {
    if (p.d < 1 || p.m < 1 || p.layers < 1 || p.steps < 0 || p.visual < 1 || p.prompt < 0 ||
        p.output < 0) {
        throw std::invalid_argument("cost model: parameters out of range");
    }
}

}  // namespace

CostParams CostParams::from_model(const ModelConfig& config) {
    CostParams p;
    p.d = config.d_model;
    p.m = config.d_ff;
    p.layers = config.n_layers;
    p.steps = config.n_steps;
    p.visual = config.n_visual;
    p.prompt = config.n_prompt;
    p.output = config.n_output;
    p.merge_layer = config.merge_layer;
    return p;
}

std::uint64_t layer_flops(std::int64_t n, std::int64_t d, std::int64_t m) {
    if (n < 0 || d < 1 || m < 1) throw std::invalid_argument("layer_flops: bad arguments");
    return to_u64(attn_i128(n, d) + ffn_i128(n, d, m));
}

std::uint64_t attn_flops(std::int64_t n, std::int64_t d) { return to_u64(attn_i128(n, d)); }

std::uint64_t ffn_flops(std::int64_t n, std::int64_t d, std::int64_t m) {
    return to_u64(ffn_i128(n, d, m));
}

double layer_flops_real(double n, std::int64_t d, std::int64_t m) {
    const long double dn = static_cast<long double>(n);
    const long double dd = static_cast<long double>(d);
    const long double dm = static_cast<long double>(m);
    return static_cast<double>(4.0L * dn * dd * dd + 2.0L * dn * dn * dd + 3.0L * dn * dd * dm);
}

std::uint64_t baseline_flops(const CostParams& p) {
    check_positive(p);
    return to_u64(static_cast<i128>(p.steps) * p.layers *
                  static_cast<i128>(layer_flops(p.total_len(), p.d, p.m)));
}

std::uint64_t merge_overhead(double alpha, std::int64_t visual, std::int64_t d) {
    if (alpha < 0.0 || alpha >= 1.0) throw std::invalid_argument("merge_overhead: alpha out of range");
    const double v = static_cast<double>(visual);
    const double dd = static_cast<double>(d);
    return static_cast<std::uint64_t>(
        std::llround(2.0 * alpha * (1.0 - alpha) * v * v * dd + alpha * v * dd));
}

std::vector<D3tomStepCost> d3tom_step_costs(const CostParams& p, const MergeSchedule& schedule) {
    check_positive(p);
    schedule.validate();
    if (p.merge_layer < 0 || p.merge_layer >= p.layers) {
        throw std::invalid_argument("d3tom: merge layer out of range");
    }
    const std::int64_t n = p.total_len();
    const std::int64_t lstar = p.merge_layer;
    const int T = static_cast<int>(p.steps);
    std::vector<D3tomStepCost> steps;
    steps.reserve(static_cast<std::size_t>(T));
    for (int s = 1; s <= T; ++s) {
        D3tomStepCost sc;
        sc.step_ordinal = s;
        if (s == 1) {
            // no deciders yet: the whole pass runs at full length
            sc.alpha = 0.0;
            sc.n_m = n;
            sc.kept_visual = p.visual;
            sc.flops = to_u64(static_cast<i128>(p.layers) *
                              static_cast<i128>(layer_flops(n, p.d, p.m)));
        } else {
            sc.alpha = merge_step_alpha(schedule, s, T);
            const std::int64_t removed = ratio_floor(sc.alpha, p.visual);
            sc.n_m = n - removed;
            sc.kept_visual = p.visual - removed;
            i128 cost = static_cast<i128>(lstar) * static_cast<i128>(layer_flops(n, p.d, p.m));
            cost += attn_i128(n, p.d) + ffn_i128(sc.n_m, p.d, p.m);
            cost += static_cast<i128>(p.layers - lstar - 1) *
                    static_cast<i128>(layer_flops(sc.n_m, p.d, p.m));
            cost += merge_overhead(sc.alpha, p.visual, p.d);
            sc.flops = to_u64(cost);
        }
        steps.push_back(sc);
    }
    return steps;
}

std::uint64_t d3tom_flops(const CostParams& p, const MergeSchedule& schedule) {
    i128 total = 0;
    for (const D3tomStepCost& sc : d3tom_step_costs(p, schedule)) {
        total += static_cast<i128>(sc.flops);
    }
    return to_u64(total);
}

double schedule_delta(const CostParams& p, const MergeSchedule& schedule) {
    check_positive(p);
    schedule.validate();
    const int T = static_cast<int>(p.steps);
    if (T < 1) return 0.0;
    std::vector<double> a(static_cast<std::size_t>(T));
    double mean = 0.0;
    for (int t = 1; t <= T; ++t) {
        a[static_cast<std::size_t>(t - 1)] = alpha_at(schedule, t, T);
        mean += a[static_cast<std::size_t>(t - 1)];
    }
    mean /= static_cast<double>(T);
    double var = 0.0;
    for (double x : a) var += (x - mean) * (x - mean);
    var /= static_cast<double>(T);
    const double v = static_cast<double>(p.visual);
    return 4.0 * static_cast<double>(p.d) * v * v * (static_cast<double>(T - 1) * var);
}

double schedule_delta_ratio(const CostParams& p, const MergeSchedule& schedule) {
    const double n = static_cast<double>(p.total_len());
    const double denom = 4.0 * static_cast<double>(p.d) * n * n *
                         static_cast<double>(p.steps) * static_cast<double>(p.layers);
    return schedule_delta(p, schedule) / denom;
}

std::uint64_t fastv_flops(const CostParams& p, double ratio, std::int64_t layer_k,
                          bool equal_budget) {
    check_positive(p);
    if (ratio < 0.0 || ratio >= 1.0) throw std::invalid_argument("fastv: ratio out of range");
    if (layer_k < 0 || layer_k >= p.layers) throw std::invalid_argument("fastv: layer out of range");
    const std::int64_t n = p.total_len();
    const i128 ranking = 2 * static_cast<i128>(p.d) * p.visual;
    if (equal_budget) {
        const double eff = (p.steps > 0)
                               ? ratio * static_cast<double>(p.steps - 1) / static_cast<double>(p.steps)
                               : ratio;
        const double n_p = static_cast<double>(n) - eff * static_cast<double>(p.visual);
        const long double per_step =
            static_cast<long double>(layer_k) * static_cast<long double>(layer_flops(n, p.d, p.m)) +
            static_cast<long double>(p.layers - layer_k) *
                static_cast<long double>(layer_flops_real(n_p, p.d, p.m)) +
            static_cast<long double>(ranking);
        return static_cast<std::uint64_t>(
            llroundl(static_cast<long double>(p.steps) * per_step));
    }
    const std::int64_t n_p = n - ratio_floor(ratio, p.visual);
    i128 per_step = static_cast<i128>(layer_k) * static_cast<i128>(layer_flops(n, p.d, p.m));
    per_step += static_cast<i128>(p.layers - layer_k) *
                static_cast<i128>(layer_flops(n_p, p.d, p.m));
    per_step += ranking;
    return to_u64(static_cast<i128>(p.steps) * per_step);
}

std::uint64_t pdrop_flops(const CostParams& p, double mean_ratio) {
    check_positive(p);
    if (mean_ratio < 0.0 || mean_ratio >= 1.0) {
        throw std::invalid_argument("pdrop: ratio out of range");
    }
    if (p.layers % 4 != 0) {
        throw std::invalid_argument("pdrop: layer count must be divisible by 4");
    }
    const double beta = 1.5 * (1.0 - mean_ratio);
    const double vmax = static_cast<double>(p.visual);
    double stages[4];
    stages[0] = vmax;
    for (int i = 1; i < 4; ++i) stages[i] = std::min(beta * stages[i - 1], vmax);
    long double total = 0.0L;
    for (double vi : stages) {
        const double ni = static_cast<double>(p.prompt + p.output) + vi;
        total += static_cast<long double>(p.layers / 4) *
                 static_cast<long double>(layer_flops_real(ni, p.d, p.m));
    }
    total += 2.0L * static_cast<long double>(p.d) *
             static_cast<long double>(stages[0] + stages[1] + stages[2]);
    return static_cast<std::uint64_t>(llroundl(static_cast<long double>(p.steps) * total));
}

std::uint64_t visionzip_flops(const CostParams& p, double ratio) {
    check_positive(p);
    if (ratio < 0.0 || ratio >= 1.0) throw std::invalid_argument("visionzip: ratio out of range");
    const std::int64_t kept = ratio_floor(1.0 - ratio, p.visual);
    const std::int64_t n_z = p.prompt + p.output + kept;
    return to_u64(static_cast<i128>(p.steps) * p.layers *
                  static_cast<i128>(layer_flops(n_z, p.d, p.m)));
}

MergeSchedule default_linear_schedule(double mean_alpha, bool reversed) {
    if (mean_alpha < 0.0 || mean_alpha >= 1.0) {
        throw std::invalid_argument("schedule mean out of range");
    }
    double hi = std::min(mean_alpha + 0.1, 0.99);
    double lo = 2.0 * mean_alpha - hi;
    if (lo < 0.0) {  // narrow means: pivot the ramp at zero instead
        lo = 0.0;
        hi = 2.0 * mean_alpha;
    }
    return reversed ? MergeSchedule::linear_reversed(lo, hi) : MergeSchedule::linear(lo, hi);
}

CostReport cost_report(const CostParams& p, const std::string& method, double retain_ratio) {
    if (retain_ratio <= 0.0 || retain_ratio > 1.0) {
        throw std::invalid_argument("cost_report: retain ratio out of range");
    }
    const double alpha = 1.0 - retain_ratio;
    CostReport r;
    r.method = method;
    r.retain_ratio = retain_ratio;
    r.ratio_param = alpha;
    r.layer_param = p.merge_layer;
    const std::uint64_t base = baseline_flops(p);
    if (method == "baseline") {
        r.ratio_param = 0.0;
        r.layer_param = -1;
        r.flops_abs = base;
    } else if (method == "d3tom") {
        r.flops_abs = d3tom_flops(p, MergeSchedule::constant(alpha));
    } else if (method == "d3tom-t") {
        r.flops_abs = d3tom_flops(p, default_linear_schedule(alpha, false));
    } else if (method == "d3tom-t-rev") {
        r.flops_abs = d3tom_flops(p, default_linear_schedule(alpha, true));
    } else if (method == "fastv") {
        r.flops_abs = fastv_flops(p, alpha, p.merge_layer);
    } else if (method == "pdrop") {
        r.layer_param = -1;  // stage boundaries are fixed, no tunable layer
        r.flops_abs = pdrop_flops(p, alpha);
    } else if (method == "visionzip") {
        r.layer_param = -1;  // prunes before the decoder
        r.flops_abs = visionzip_flops(p, alpha);
    } else {
        throw std::invalid_argument("cost_report: unknown method '" + method + "'");
    }
    r.flops_rel = static_cast<double>(r.flops_abs) / static_cast<double>(base);
    return r;
}

}  // namespace d3tom
