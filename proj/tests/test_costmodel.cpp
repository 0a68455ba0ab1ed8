#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "d3tom/costmodel.hpp"
#include "test_helpers.hpp"

using namespace d3tom;

namespace {

CostParams paper_params() {
    CostParams p;  // defaults are the big-model reporting configuration
    return p;
}

bool within_pct(std::uint64_t got, double target_tf, double pct) {
    const double got_tf = static_cast<double>(got) / 1e12;
    return std::abs(got_tf - target_tf) / target_tf * 100.0 <= pct;
}

}  // namespace

TEST_CASE("layer flops closed form") {
    CHECK(layer_flops(1, 1, 1) == 9);  // 4 + 2 + 3
    CHECK(layer_flops(1128, 4096, 12288) == 256444465152ull);
    CHECK(attn_flops(1128, 4096) == 86122168320ull);
    CHECK(ffn_flops(1128, 4096, 12288) == 256444465152ull - 86122168320ull);
    CHECK_THROWS_AS(layer_flops(-1, 4, 4), std::invalid_argument);
}

TEST_CASE("layer flops over a fractional length follows the same polynomial") {
    const double real = layer_flops_real(256.0, 4096, 12288);
    CHECK(real == doctest::Approx(static_cast<double>(layer_flops(256, 4096, 12288))));
    // interior point sits between its integer neighbors
    const double mid = layer_flops_real(256.5, 4096, 12288);
    CHECK(mid > static_cast<double>(layer_flops(256, 4096, 12288)));
    CHECK(mid < static_cast<double>(layer_flops(257, 4096, 12288)));
}

TEST_CASE("baseline flops") {
    CostParams p = paper_params();
    CHECK(baseline_flops(p) == 262599132315648ull);
    p.steps = 0;
    CHECK(baseline_flops(p) == 0);
    p.steps = 1;
    p.layers = 1;
    CHECK(baseline_flops(p) == layer_flops(p.total_len(), p.d, p.m));
}

TEST_CASE("merge overhead formula") {
    CHECK(merge_overhead(0.0, 1000, 4096) == 0);
    CHECK(merge_overhead(0.9, 1000, 4096) == 737280000ull + 3686400ull);
    // the quadratic part peaks at alpha = 0.5
    const std::uint64_t half = merge_overhead(0.5, 1000, 4096);
    for (double a : {0.1, 0.3, 0.7, 0.9}) {
        const double quadratic = 2.0 * a * (1 - a) * 1e6 * 4096;
        CHECK(quadratic < 2.0 * 0.5 * 0.5 * 1e6 * 4096);
        CHECK(merge_overhead(a, 1000, 4096) < half + 4096ull * 1000ull);
    }
    CHECK_THROWS_AS(merge_overhead(1.0, 1000, 4096), std::invalid_argument);
}

TEST_CASE("zero merging ratio reproduces the baseline exactly") {
    const CostParams p = paper_params();
    CHECK(d3tom_flops(p, MergeSchedule::constant(0.0)) == baseline_flops(p));
}

TEST_CASE("trajectory cost at the reported operating points") {
    const CostParams p = paper_params();
    CHECK(d3tom_flops(p, MergeSchedule::constant(0.9)) == 79348803944448ull);
    CHECK(d3tom_flops(p, MergeSchedule::constant(0.75)) == 109119146139648ull);
    CHECK(within_pct(d3tom_flops(p, MergeSchedule::constant(0.9)), 79.35, 0.5));
    CHECK(within_pct(d3tom_flops(p, MergeSchedule::constant(0.75)), 109.12, 0.5));
    CHECK(within_pct(d3tom_flops(p, MergeSchedule::constant(0.5)), 159.42, 0.5));
}

TEST_CASE("per-step breakdown exempts the first step") {
    const CostParams p = paper_params();
    const auto steps = d3tom_step_costs(p, MergeSchedule::constant(0.9));
    REQUIRE(static_cast<int>(steps.size()) == p.steps);
    CHECK(steps[0].alpha == 0.0);
    CHECK(steps[0].n_m == p.total_len());
    CHECK(steps[0].flops == static_cast<std::uint64_t>(p.layers) * layer_flops(p.total_len(), p.d, p.m));
    for (std::size_t s = 1; s < steps.size(); ++s) {
        CHECK(steps[s].n_m == p.total_len() - 900);
        CHECK(steps[s].kept_visual == 100);
    }
}

TEST_CASE("schedule delta: constant is zero, two-point case by hand") {
    CostParams p = paper_params();
    CHECK(schedule_delta(p, MergeSchedule::constant(0.7)) == doctest::Approx(0.0));
    CostParams tiny;
    tiny.d = 1;
    tiny.m = 1;
    tiny.layers = 4;
    tiny.steps = 2;
    tiny.visual = 1;
    tiny.prompt = 0;
    tiny.output = 1;
    // schedule {0, 0.5}: population variance 0.0625, (T-1) = 1
    CHECK(schedule_delta(tiny, MergeSchedule::linear(0.0, 0.5)) == doctest::Approx(0.25));
}

TEST_CASE("normalized schedule delta stays below 1% over wide endpoints") {
    const CostParams p = paper_params();
    for (double lo = 0.0; lo <= 0.99; lo += 0.11) {
        for (double hi = lo; hi <= 0.99; hi += 0.11) {
            const double ratio = schedule_delta_ratio(p, MergeSchedule::linear(lo, hi));
            CHECK(ratio < 0.01);
            CHECK(ratio >= 0.0);
        }
    }
}

TEST_CASE("one-shot prune cost at the reported operating points") {
    const CostParams p = paper_params();
    CHECK(within_pct(fastv_flops(p, 0.9, 3), 77.14, 0.5));
    CHECK(within_pct(fastv_flops(p, 0.5, 3), 158.10, 0.5));
    // zero ratio still pays the per-step ranking charge
    CHECK(fastv_flops(p, 0.0, 3) == baseline_flops(p) +
                                        static_cast<std::uint64_t>(p.steps) * 2 * 4096 * 1000);
    CHECK_THROWS_AS(fastv_flops(p, 0.9, 99), std::invalid_argument);
}

TEST_CASE("raw prune mode reconciles against the merge trajectory exactly") {
    const CostParams p = paper_params();
    for (double alpha : {0.5, 0.667, 0.9}) {
        const std::uint64_t d3 = d3tom_flops(p, MergeSchedule::constant(alpha));
        const std::uint64_t fv = fastv_flops(p, alpha, p.merge_layer, /*equal_budget=*/false);
        const std::int64_t removed = ratio_floor(alpha, p.visual);
        const std::int64_t n_m = p.total_len() - removed;
        // signed decomposition: first-step exemption + split-layer attention
        // + merge overhead - ranking charge
        const __int128 first_step =
            static_cast<__int128>(p.layers - p.merge_layer) *
            (static_cast<__int128>(layer_flops(p.total_len(), p.d, p.m)) -
             static_cast<__int128>(layer_flops(n_m, p.d, p.m)));
        const __int128 split =
            static_cast<__int128>(p.steps - 1) *
            (static_cast<__int128>(attn_flops(p.total_len(), p.d)) -
             static_cast<__int128>(attn_flops(n_m, p.d)));
        const __int128 overhead = static_cast<__int128>(p.steps - 1) *
                                  static_cast<__int128>(merge_overhead(alpha, p.visual, p.d));
        const __int128 ranking =
            static_cast<__int128>(p.steps) * 2 * p.d * p.visual;
        const __int128 expected = first_step + split + overhead - ranking;
        const __int128 actual = static_cast<__int128>(d3) - static_cast<__int128>(fv);
        CHECK(static_cast<long long>(actual - expected) == 0);
    }
}

TEST_CASE("staged drop cost, cap rule, and stage-count requirement") {
    const CostParams p = paper_params();
    CHECK(within_pct(pdrop_flops(p, 0.9), 97.16, 0.5));
    CHECK(within_pct(pdrop_flops(p, 0.75), 119.57, 0.5));
    // mean ratio <= 1/3 makes the retention factor >= 1: widths cap at |V|
    const std::uint64_t capped = pdrop_flops(p, 0.2);
    CHECK(capped == baseline_flops(p) + static_cast<std::uint64_t>(p.steps) * 2 * 4096 * 3000);
    CostParams odd = p;
    odd.layers = 30;
    CHECK_THROWS_AS(pdrop_flops(odd, 0.5), std::invalid_argument);
}

TEST_CASE("pre-decoder prune cost") {
    const CostParams p = paper_params();
    CHECK(within_pct(visionzip_flops(p, 0.9), 51.36, 0.5));
    CHECK(within_pct(visionzip_flops(p, 0.75), 85.62, 0.5));
    CHECK(visionzip_flops(p, 0.0) == baseline_flops(p));
}

TEST_CASE("every method is non-increasing in its reduction ratio") {
    const CostParams p = paper_params();
    std::uint64_t prev_d3 = UINT64_MAX, prev_fv = UINT64_MAX, prev_pd = UINT64_MAX,
                  prev_vz = UINT64_MAX;
    for (double a = 0.0; a < 0.99; a += 0.07) {
        const std::uint64_t d3 = d3tom_flops(p, MergeSchedule::constant(a));
        const std::uint64_t fv = fastv_flops(p, a, 3);
        const std::uint64_t pd = pdrop_flops(p, a);
        const std::uint64_t vz = visionzip_flops(p, a);
        CHECK(d3 <= prev_d3);
        CHECK(fv <= prev_fv);
        CHECK(pd <= prev_pd);
        CHECK(vz <= prev_vz);
        prev_d3 = d3;
        prev_fv = fv;
        prev_pd = pd;
        prev_vz = vz;
    }
}

TEST_CASE("constant vs same-mean linear totals differ by the variance term only") {
    const CostParams p = paper_params();
    const double lo = 0.6, hi = 0.9;
    const double mean = 0.75;
    const MergeSchedule lin = MergeSchedule::linear(lo, hi);
    const std::uint64_t linear_total = d3tom_flops(p, lin);
    const std::uint64_t const_total = d3tom_flops(p, MergeSchedule::constant(mean));

    // independent step-by-step reassembly of the expected difference
    __int128 expected = 0;
    const int T = static_cast<int>(p.steps);
    for (int s = 2; s <= T; ++s) {
        const double a = merge_step_alpha(lin, s, T);
        const std::int64_t nm_lin = p.total_len() - ratio_floor(a, p.visual);
        const std::int64_t nm_const = p.total_len() - ratio_floor(mean, p.visual);
        expected += static_cast<__int128>(ffn_flops(nm_lin, p.d, p.m)) -
                    static_cast<__int128>(ffn_flops(nm_const, p.d, p.m));
        expected += static_cast<__int128>(p.layers - p.merge_layer - 1) *
                    (static_cast<__int128>(layer_flops(nm_lin, p.d, p.m)) -
                     static_cast<__int128>(layer_flops(nm_const, p.d, p.m)));
        expected += static_cast<__int128>(merge_overhead(a, p.visual, p.d)) -
                    static_cast<__int128>(merge_overhead(mean, p.visual, p.d));
    }
    const __int128 actual =
        static_cast<__int128>(linear_total) - static_cast<__int128>(const_total);
    CHECK(static_cast<long long>(actual - expected) == 0);
}

TEST_CASE("schedule direction does not change the total cost") {
    const CostParams p = paper_params();
    for (auto [lo, hi] : {std::pair{0.3, 0.8}, std::pair{0.0, 0.99}, std::pair{0.81, 0.99}}) {
        const std::uint64_t fwd = d3tom_flops(p, MergeSchedule::linear(lo, hi));
        const std::uint64_t rev = d3tom_flops(p, MergeSchedule::linear_reversed(lo, hi));
        CHECK(fwd == rev);

        const auto sf = d3tom_step_costs(p, MergeSchedule::linear(lo, hi));
        const auto sr = d3tom_step_costs(p, MergeSchedule::linear_reversed(lo, hi));
        // the forward ramp merges least at the first merging step, the
        // reversed ramp most: kept counts differ by the full ramp width
        const std::int64_t gap = sf[1].kept_visual - sr[1].kept_visual;
        const std::int64_t ramp = ratio_floor(hi - lo, p.visual);
        CHECK(std::abs(static_cast<long long>(gap - ramp)) <= 1);
    }
}

TEST_CASE("cost report wiring") {
    const CostParams p = paper_params();
    const CostReport base = cost_report(p, "baseline", 1.0);
    CHECK(base.flops_abs == 262599132315648ull);
    CHECK(base.flops_rel == doctest::Approx(1.0));
    const CostReport d3 = cost_report(p, "d3tom", 0.10);
    CHECK(d3.flops_abs == 79348803944448ull);
    CHECK(d3.flops_rel == doctest::Approx(0.30216704));
    CHECK_THROWS_AS(cost_report(p, "nope", 0.5), std::invalid_argument);
    const CostReport t = cost_report(p, "d3tom-t", 0.10);
    const CostReport tr = cost_report(p, "d3tom-t-rev", 0.10);
    CHECK(t.flops_abs == tr.flops_abs);
}

TEST_CASE("default endpoint rule pivots cleanly at small means") {
    const MergeSchedule wide = default_linear_schedule(0.9);
    CHECK(wide.alpha_min == doctest::Approx(0.81));
    CHECK(wide.alpha_max == doctest::Approx(0.99));
    const MergeSchedule narrow = default_linear_schedule(0.03);
    CHECK(narrow.alpha_min == doctest::Approx(0.0));
    CHECK(narrow.alpha_max == doctest::Approx(0.06));
}
