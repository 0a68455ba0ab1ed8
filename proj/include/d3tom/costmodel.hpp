#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "d3tom/merge.hpp"
#include "d3tom/model.hpp"

namespace d3tom {

// Architecture and sequence parameters for the analytical cost model. Counts
// are multiply-accumulates throughout (one MAC per reported unit).
struct CostParams {
    std::int64_t d = 4096;
    std::int64_t m = 12288;
    std::int64_t layers = 32;
    std::int64_t steps = 32;
    std::int64_t visual = 1000;
    std::int64_t prompt = 64;
    std::int64_t output = 64;
    std::int64_t merge_layer = 3;  // l*, doubles as FastV's prune layer K

    std::int64_t total_len() const { return visual + prompt + output; }

    static CostParams from_model(const ModelConfig& config);
};

// 4nd^2 + 2n^2d + 3ndm, exact (128-bit accumulation internally).
std::uint64_t layer_flops(std::int64_t n, std::int64_t d, std::int64_t m);
std::uint64_t attn_flops(std::int64_t n, std::int64_t d);
std::uint64_t ffn_flops(std::int64_t n, std::int64_t d, std::int64_t m);

// Same polynomial over a fractional sequence length (stage widths that are
// products of real retention factors); rounded once at the end.
double layer_flops_real(double n, std::int64_t d, std::int64_t m);

// steps × layers × layer_flops(N)
std::uint64_t baseline_flops(const CostParams& p);

// Per-merging-step bookkeeping cost: 2a(1-a)|V|^2 d + a|V| d.
std::uint64_t merge_overhead(double alpha, std::int64_t visual, std::int64_t d);

// Full-trajectory cost. The first decoding step has no deciders and runs
// unmerged at full length; each later step pays the pre-merge layers at N,
// the split layer (attention at N, FFN at the shortened length), the
// remaining layers at the shortened length, and the merge overhead.
std::uint64_t d3tom_flops(const CostParams& p, const MergeSchedule& schedule);

struct D3tomStepCost {
    int step_ordinal = 0;       // s = 1..T
    double alpha = 0.0;         // 0 for the first step
    std::int64_t n_m = 0;       // sequence length after the merge layer
    std::int64_t kept_visual = 0;
    std::uint64_t flops = 0;
};
std::vector<D3tomStepCost> d3tom_step_costs(const CostParams& p, const MergeSchedule& schedule);

// Cost gap between a constant ratio and a same-mean linear schedule, from
// the quadratic attention term: 4 d |V|^2 (T-1) Var(alpha_t), variance taken
// over the full T-point ramp. The companion ratio normalizes by the
// trajectory-scale attention weight 4 d N^2 T L.
double schedule_delta(const CostParams& p, const MergeSchedule& schedule);
double schedule_delta_ratio(const CostParams& p, const MergeSchedule& schedule);

// One-shot prune of fraction R at layer K, plus a 2d|V| ranking charge per
// step. With equal_budget (the default, used for cross-method reporting) the
// per-step fraction is R(T-1)/T so the average visual-token count per layer
// matches a merge run whose first step is exempt; the raw mode applies R
// directly with integer token counts.
std::uint64_t fastv_flops(const CostParams& p, double ratio, std::int64_t layer_k,
                          bool equal_budget = true);

// Four equal decoder stages; stage widths follow the constant retention
// factor 1.5(1-alpha), capped at |V|. Requires layers % 4 == 0.
std::uint64_t pdrop_flops(const CostParams& p, double mean_ratio);

// Single pre-decoder prune of fraction R.
std::uint64_t visionzip_flops(const CostParams& p, double ratio);

// Endpoint rule when only a mean ratio is requested:
// alpha_max = min(mean+0.1, 0.99), alpha_min = 2·mean − alpha_max.
MergeSchedule default_linear_schedule(double mean_alpha, bool reversed = false);

struct CostReport {
    std::string method;
    double retain_ratio = 1.0;     // 1 - reduction
    double ratio_param = 0.0;      // alpha or R handed to the method
    std::int64_t layer_param = 0;  // l* or K (-1 when not applicable)
    std::uint64_t flops_abs = 0;
    double flops_rel = 1.0;
};

// One report row per (method, retention). Methods: baseline, d3tom, d3tom-t,
// d3tom-t-rev, fastv, pdrop, visionzip. Throws std::invalid_argument for an
// unknown method name.
CostReport cost_report(const CostParams& p, const std::string& method, double retain_ratio);

}  // namespace d3tom
