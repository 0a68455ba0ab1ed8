// Command-line front end: decode runs, cost-model reports and sweeps,
// benchmarks, and trace exports.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "d3tom/costmodel.hpp"
#include "d3tom/diffusion.hpp"
#include "d3tom/kvcache.hpp"
#include "d3tom/merge.hpp"
#include "d3tom/model.hpp"
#include "d3tom/textio.hpp"

namespace {

using namespace d3tom;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = item.find_last_not_of(" \t");
        out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw UsageError("cannot parse " + what + " value '" + s + "'");
    }
}

long long parse_int(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw UsageError("cannot parse " + what + " value '" + s + "'");
    }
}

// ---------------------------------------------------------------------
// configuration assembly: defaults <- preset <- config file <- flags
// ---------------------------------------------------------------------

struct ConfigFlags {
    CLI::Option* opt = nullptr;
    long long value = 0;
};

struct CommonOptions {
    std::string preset = "toy";
    std::string config_file;
    std::string out_path;
    bool force = false;

    std::map<std::string, ConfigFlags> ints;  // keyed by config-file key
    std::uint64_t seed = 42;
    CLI::Option* seed_opt = nullptr;

    void attach(CLI::App* cmd) {
        cmd->add_option("--preset", preset, "Parameter preset: toy or lavida-8b");
        cmd->add_option("--config", config_file, "key = value config file");
        cmd->add_option("--out", out_path, "Write CSV output here instead of stdout");
        cmd->add_flag("--force", force, "Allow large configs on engine subcommands");
        auto add = [&](const std::string& flag, const std::string& key, const std::string& help) {
            ints[key] = ConfigFlags{};
            ints[key].opt = cmd->add_option(flag, ints[key].value, help);
        };
        add("--vocab", "vocab_size", "vocabulary size");
        add("--d-model", "d_model", "hidden width d");
        add("--d-ff", "d_ff", "FFN width m");
        add("--layers", "n_layers", "layer count L");
        add("--heads", "n_heads", "attention heads");
        add("--max-positions", "max_positions", "position table size");
        add("--visual", "n_visual", "visual token count |V|");
        add("--prompt", "n_prompt", "prompt token count |P|");
        add("--outlen", "n_output", "output token count |O|");
        add("--steps", "n_steps", "denoising steps T");
        add("--merge-layer", "merge_layer", "merge layer l* (0-based)");
        seed_opt = cmd->add_option("--seed", seed, "weight/input seed");
    }

    ModelConfig build() const {
        ModelConfig cfg;  // toy defaults live in ModelConfig itself
        if (preset == "toy") {
        } else if (preset == "lavida-8b") {
            cfg.d_model = 4096;
            cfg.d_ff = 12288;
            cfg.n_layers = 32;
            cfg.n_heads = 32;
            cfg.n_visual = 1000;
            cfg.n_prompt = 64;
            cfg.n_output = 64;
            cfg.n_steps = 32;
            cfg.merge_layer = 3;
            cfg.max_positions = 2048;
        } else {
            throw UsageError("unknown preset '" + preset + "'");
        }
        auto apply = [&](const std::string& key, long long value) {
            if (key == "vocab_size") cfg.vocab_size = static_cast<int>(value);
            else if (key == "d_model") cfg.d_model = static_cast<int>(value);
            else if (key == "d_ff") cfg.d_ff = static_cast<int>(value);
            else if (key == "n_layers") cfg.n_layers = static_cast<int>(value);
            else if (key == "n_heads") cfg.n_heads = static_cast<int>(value);
            else if (key == "max_positions") cfg.max_positions = static_cast<int>(value);
            else if (key == "n_visual") cfg.n_visual = static_cast<int>(value);
            else if (key == "n_prompt") cfg.n_prompt = static_cast<int>(value);
            else if (key == "n_output") cfg.n_output = static_cast<int>(value);
            else if (key == "n_steps") cfg.n_steps = static_cast<int>(value);
            else if (key == "merge_layer") cfg.merge_layer = static_cast<int>(value);
            else throw UsageError("unknown config key '" + key + "'");
        };
        std::uint64_t seed_value = cfg.seed;
        if (!config_file.empty()) {
            for (const auto& [key, value] : read_config_file(config_file)) {
                if (key == "seed") {
                    seed_value = static_cast<std::uint64_t>(parse_int(value, "seed"));
                } else {
                    apply(key, parse_int(value, key));
                }
            }
        }
        for (const auto& [key, flag] : ints) {
            if (flag.opt->count() > 0) apply(key, flag.value);
        }
        if (seed_opt != nullptr && seed_opt->count() > 0) seed_value = seed;
        cfg.seed = seed_value;
        if (cfg.max_positions < cfg.total_len()) cfg.max_positions = cfg.total_len();
        cfg.validate();
        return cfg;
    }
};

std::unique_ptr<std::ofstream> file_sink;
std::ostream& output_stream(const CommonOptions& common) {
    if (common.out_path.empty()) return std::cout;
    file_sink = std::make_unique<std::ofstream>(common.out_path);
    if (!*file_sink) throw std::runtime_error("cannot open output file: " + common.out_path);
    return *file_sink;
}

void guard_engine_scale(const ModelConfig& cfg, bool force) {
    if (cfg.d_model > 1024 && !force) {
        throw UsageError("d_model > 1024 runs for a very long time on the toy engine; "
                         "pass --force to insist");
    }
}

// ---------------------------------------------------------------------
// method/schedule plumbing
// ---------------------------------------------------------------------

struct MethodOptions {
    std::string method = "baseline";
    double alpha = 0.9;
    double alpha_min = -1.0;
    double alpha_max = -1.0;
    CLI::Option* alpha_opt = nullptr;
    CLI::Option* alpha_min_opt = nullptr;
    CLI::Option* alpha_max_opt = nullptr;

    void attach(CLI::App* cmd, const std::string& default_method) {
        method = default_method;
        cmd->add_option("--method", method,
                        "baseline, d3tom, d3tom-t, or d3tom-t-rev");
        alpha_opt = cmd->add_option("--alpha", alpha, "constant merge ratio (or mean for -t kinds)");
        alpha_min_opt = cmd->add_option("--alpha-min", alpha_min, "linear schedule start");
        alpha_max_opt = cmd->add_option("--alpha-max", alpha_max, "linear schedule end");
    }

    MergeStrategy build() const {
        try {
            if (method == "baseline") return MergeStrategy::none();
            if (method == "d3tom") return MergeStrategy::constant(alpha);
            const bool reversed = (method == "d3tom-t-rev");
            if (method != "d3tom-t" && !reversed) {
                throw UsageError("unknown method '" + method + "'");
            }
            if (alpha_min_opt->count() > 0 || alpha_max_opt->count() > 0) {
                if (alpha_min_opt->count() == 0 || alpha_max_opt->count() == 0) {
                    throw UsageError("--alpha-min and --alpha-max must be given together");
                }
                return reversed ? MergeStrategy::linear_reversed(alpha_min, alpha_max)
                                : MergeStrategy::linear(alpha_min, alpha_max);
            }
            const MergeSchedule sched = default_linear_schedule(alpha, reversed);
            MergeStrategy s;
            s.kind = reversed ? MergeStrategyKind::d3tom_linear_reversed
                              : MergeStrategyKind::d3tom_linear;
            s.schedule = sched;
            return s;
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());  // bad schedule bounds are a usage problem
        }
    }
};

// ---------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------

int cmd_flops(const CommonOptions& common, const std::string& methods_csv,
              const std::string& retain_csv) {
    const ModelConfig cfg = common.build();
    const CostParams params = CostParams::from_model(cfg);
    const std::vector<std::string> methods = split_list(methods_csv);
    const std::vector<std::string> retains = split_list(retain_csv);
    std::ostream& os = output_stream(common);
    write_csv_row(os, {"method", "retain_pct", "alpha_or_R", "l_star_or_K", "flops_mac", "flops_rel"});
    for (const std::string& method : methods) {
        std::vector<double> levels;
        if (method == "baseline") {
            levels = {100.0};
        } else {
            for (const std::string& r : retains) levels.push_back(parse_double(r, "retain"));
        }
        for (double retain_pct : levels) {
            if (retain_pct <= 0.0 || retain_pct > 100.0) {
                throw UsageError("retention percent out of range");
            }
            CostReport rep;
            try {
                rep = cost_report(params, method, retain_pct / 100.0);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            write_csv_row(os, {rep.method, format_sig9(retain_pct), format_sig9(rep.ratio_param),
                               rep.layer_param < 0 ? "" : std::to_string(rep.layer_param),
                               std::to_string(rep.flops_abs), format_sig9(rep.flops_rel * 100.0)});
        }
    }
    return 0;
}

void write_trace_csv(std::ostream& os, const DecodeResult& result, const MergeStrategy& strategy,
                     const ModelConfig& cfg) {
    write_csv_row(os, {"step", "visual_index", "score", "kept_flag", "step_argmax"});
    for (const StepTrace& row : result.trace) {
        if (row.scores.empty()) continue;  // no deciders at this step
        MergePlan plan = partition(row.scores, row.alpha);
        std::vector<char> kept(row.scores.size(), 0);
        for (int idx : plan.kept) kept[static_cast<std::size_t>(idx)] = 1;
        int argmax = 0;
        for (std::size_t j = 1; j < row.scores.size(); ++j) {
            if (row.scores[j] > row.scores[static_cast<std::size_t>(argmax)]) {
                argmax = static_cast<int>(j);
            }
        }
        for (std::size_t j = 0; j < row.scores.size(); ++j) {
            write_csv_row(os, {std::to_string(row.step_ordinal), std::to_string(j),
                               format_sig9(row.scores[j]),
                               kept[j] ? "1" : "0", std::to_string(argmax)});
        }
    }
    (void)strategy;
    (void)cfg;
}

int cmd_decode(const CommonOptions& common, const MethodOptions& mopts, bool use_cache,
               const std::string& cache_mode, const std::string& trace_out) {
    const ModelConfig cfg = common.build();
    guard_engine_scale(cfg, common.force);
    const MergeStrategy strategy = mopts.build();

    const Weights weights = init_weights(cfg);
    DecodeResult result;
    if (use_cache) {
        CacheMergeMode mode;
        if (cache_mode == "sum") mode = CacheMergeMode::sum;
        else if (cache_mode == "avg") mode = CacheMergeMode::weighted_average;
        else throw UsageError("unknown cache mode '" + cache_mode + "'");
        result = run_decode_cached(cfg, weights, strategy, mode);
    } else {
        result = run_decode(cfg, weights, strategy);
    }

    for (const StepTrace& row : result.trace) {
        std::cout << "step s=" << row.step_ordinal << " t=" << row.t
                  << " alpha=" << format_sig9(row.alpha) << " deciders=" << row.decider_count
                  << " kept=" << row.kept_count << " merged=" << row.merged_count << "\n";
    }
    std::cout << "final tokens:";
    for (int tok : result.tokens) std::cout << ' ' << tok;
    std::cout << "\n";
    // timing stays off stdout so repeated runs compare byte-identical
    std::cerr << "total wall-clock: " << format_sig9(result.total_wall_ms) << " ms\n";

    if (!trace_out.empty()) {
        std::ofstream os(trace_out);
        if (!os) throw std::runtime_error("cannot open trace file: " + trace_out);
        write_trace_csv(os, result, strategy, cfg);
    }
    return 0;
}

int cmd_trace(const CommonOptions& common, const MethodOptions& mopts) {
    if (mopts.method == "baseline") {
        throw UsageError("trace needs a d3tom-family method; baseline has no importance scores");
    }
    const ModelConfig cfg = common.build();
    guard_engine_scale(cfg, common.force);
    const MergeStrategy strategy = mopts.build();
    const Weights weights = init_weights(cfg);
    const DecodeResult result = run_decode(cfg, weights, strategy);
    write_trace_csv(output_stream(common), result, strategy, cfg);
    return 0;
}

int cmd_sweep(const CommonOptions& common, const std::string& lstar_csv,
              const std::string& alpha_csv, bool measure) {
    const ModelConfig cfg = common.build();
    CostParams params = CostParams::from_model(cfg);
    std::vector<std::int64_t> lstars;
    for (const std::string& s : split_list(lstar_csv)) lstars.push_back(parse_int(s, "l*"));
    std::vector<double> alphas;
    for (const std::string& s : split_list(alpha_csv)) alphas.push_back(parse_double(s, "alpha"));
    if (lstars.empty() || alphas.empty()) throw UsageError("sweep grid is empty");
    if (measure) guard_engine_scale(cfg, common.force);

    const std::uint64_t base = baseline_flops(params);
    std::ostream& os = output_stream(common);
    std::vector<std::string> header = {"alpha", "l_star", "flops_mac", "flops_rel"};
    if (measure) header.push_back("time_ms");
    write_csv_row(os, header);
    // row order is the grid order: alpha outer, l* inner
    for (double alpha : alphas) {
        for (std::int64_t lstar : lstars) {
            if (lstar < 0 || lstar >= params.layers) throw UsageError("l* out of range");
            if (alpha < 0.0 || alpha >= 1.0) throw UsageError("alpha out of range");
            params.merge_layer = lstar;
            const std::uint64_t flops = d3tom_flops(params, MergeSchedule::constant(alpha));
            std::vector<std::string> row = {format_sig9(alpha), std::to_string(lstar),
                                            std::to_string(flops),
                                            format_sig9(100.0 * static_cast<double>(flops) /
                                                        static_cast<double>(base))};
            if (measure) {
                ModelConfig cell = cfg;
                cell.merge_layer = static_cast<int>(lstar);
                const Weights weights = init_weights(cell);
                const MergeStrategy strategy =
                    alpha == 0.0 ? MergeStrategy::none() : MergeStrategy::constant(alpha);
                row.push_back(format_sig9(run_decode(cell, weights, strategy).total_wall_ms));
            }
            write_csv_row(os, row);
        }
    }
    return 0;
}

int cmd_bench(const CommonOptions& common, const std::string& methods_csv,
              const std::string& retain_csv, int repeat, int warmup) {
    if (repeat < 3) throw UsageError("bench needs at least 3 repeats");
    const ModelConfig cfg = common.build();
    guard_engine_scale(cfg, common.force);
    const std::vector<std::string> methods = split_list(methods_csv);
    std::vector<double> retains;
    for (const std::string& r : split_list(retain_csv)) retains.push_back(parse_double(r, "retain"));
    if (methods.empty() || retains.empty()) throw UsageError("bench grid is empty");

    const Weights weights = init_weights(cfg);
    auto time_strategy = [&](const MergeStrategy& strategy) {
        std::vector<double> ms;
        for (int r = 0; r < warmup; ++r) run_decode(cfg, weights, strategy);
        for (int r = 0; r < repeat; ++r) {
            ms.push_back(run_decode(cfg, weights, strategy).total_wall_ms);
        }
        std::sort(ms.begin(), ms.end());
        const double median = (ms.size() % 2 == 1)
                                  ? ms[ms.size() / 2]
                                  : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
        return std::make_pair(median, ms.front());
    };

    const auto [base_median, base_min] = time_strategy(MergeStrategy::none());
    std::ostream& os = output_stream(common);
    write_csv_row(os, {"method", "retain_pct", "time_ms_median", "time_ms_min", "time_rel"});
    for (const std::string& method : methods) {
        if (method == "baseline") {
            write_csv_row(os, {"baseline", "100", format_sig9(base_median), format_sig9(base_min),
                               format_sig9(100.0)});
            continue;
        }
        for (double retain_pct : retains) {
            if (retain_pct <= 0.0 || retain_pct > 100.0) throw UsageError("retention out of range");
            const double alpha = 1.0 - retain_pct / 100.0;
            MergeStrategy strategy;
            if (method == "d3tom") {
                strategy = MergeStrategy::constant(alpha);
            } else if (method == "d3tom-t" || method == "d3tom-t-rev") {
                strategy.kind = method == "d3tom-t" ? MergeStrategyKind::d3tom_linear
                                                    : MergeStrategyKind::d3tom_linear_reversed;
                strategy.schedule = default_linear_schedule(alpha, method == "d3tom-t-rev");
            } else {
                throw UsageError("unknown bench method '" + method + "'");
            }
            const auto [median, minimum] = time_strategy(strategy);
            write_csv_row(os, {method, format_sig9(retain_pct), format_sig9(median),
                               format_sig9(minimum), format_sig9(100.0 * median / base_median)});
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy masked-diffusion engine with decider-guided token merging"};
    app.require_subcommand(1);

    CommonOptions flops_common, decode_common, sweep_common, bench_common, trace_common;
    MethodOptions decode_method, trace_method;

    auto* flops = app.add_subcommand("flops", "analytical cost-model report");
    flops_common.attach(flops);
    std::string flops_methods = "baseline,d3tom,d3tom-t,d3tom-t-rev,fastv,pdrop,visionzip";
    std::string flops_retain = "50,33.3,25,16.7,10";
    flops->add_option("--methods", flops_methods, "comma list of methods (empty for header only)");
    flops->add_option("--retain", flops_retain, "comma list of retention percentages");

    auto* decode = app.add_subcommand("decode", "run one denoising trajectory");
    decode_common.attach(decode);
    decode_method.attach(decode, "baseline");
    bool decode_cache = false;
    std::string decode_cache_mode = "sum";
    std::string decode_trace_out;
    decode->add_flag("--cache", decode_cache, "decode against a frozen prefix K/V cache");
    decode->add_option("--cache-mode", decode_cache_mode, "cache merge mode: sum or avg");
    decode->add_option("--trace-out", decode_trace_out, "also write the importance trace CSV here");

    auto* sweep = app.add_subcommand("sweep", "cost grid over merge layer and ratio");
    sweep_common.attach(sweep);
    std::string sweep_lstar = "0,3,7,11,15";
    std::string sweep_alpha = "0.75,0.9";
    bool sweep_measure = false;
    sweep->add_option("--lstar-list", sweep_lstar, "comma list of merge layers");
    sweep->add_option("--alpha-list", sweep_alpha, "comma list of merge ratios");
    sweep->add_flag("--measure", sweep_measure, "also time a toy-engine decode per cell");

    auto* bench = app.add_subcommand("bench", "wall-clock decode benchmark");
    bench_common.attach(bench);
    std::string bench_methods = "baseline,d3tom";
    std::string bench_retain = "10";
    int bench_repeat = 5;
    int bench_warmup = 1;
    bench->add_option("--methods", bench_methods, "comma list of methods");
    bench->add_option("--retain", bench_retain, "comma list of retention percentages");
    bench->add_option("--repeat", bench_repeat, "timed repeats per cell (>= 3)");
    bench->add_option("--warmup", bench_warmup, "untimed warmup runs per cell");

    auto* trace = app.add_subcommand("trace", "per-step importance score export");
    trace_common.attach(trace);
    trace_method.attach(trace, "d3tom");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (flops->parsed()) return cmd_flops(flops_common, flops_methods, flops_retain);
        if (decode->parsed()) {
            return cmd_decode(decode_common, decode_method, decode_cache, decode_cache_mode,
                              decode_trace_out);
        }
        if (sweep->parsed()) return cmd_sweep(sweep_common, sweep_lstar, sweep_alpha, sweep_measure);
        if (bench->parsed()) {
            return cmd_bench(bench_common, bench_methods, bench_retain, bench_repeat, bench_warmup);
        }
        if (trace->parsed()) return cmd_trace(trace_common, trace_method);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
