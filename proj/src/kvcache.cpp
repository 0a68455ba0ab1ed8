#include "d3tom/kvcache.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "d3tom/dot.hpp"
#include "d3tom/kernels.hpp"

namespace d3tom {

int PrefixCache::live_visual_count() const {
    int n = 0;
    for (int p : live_positions) n += (p < visual_len) ? 1 : 0;
    return n;
}

namespace {

PrefixCache cache_from_capture(const KvCapture& capture, const ModelConfig& config) {
    PrefixCache cache;
    cache.visual_len = config.n_visual;
    cache.prompt_len = config.n_prompt;
    cache.kept_len = config.n_visual + config.n_prompt;
    cache.live_positions.resize(static_cast<std::size_t>(cache.kept_len));
    std::iota(cache.live_positions.begin(), cache.live_positions.end(), 0);
    cache.merge_counts.assign(capture.k.size(),
                              std::vector<int>(static_cast<std::size_t>(cache.kept_len), 1));
    cache.k.reserve(capture.k.size());
    cache.v.reserve(capture.v.size());
    for (std::size_t l = 0; l < capture.k.size(); ++l) {
        Matrix kk(cache.kept_len, capture.k[l].cols);
        Matrix vv(cache.kept_len, capture.v[l].cols);
        for (int r = 0; r < cache.kept_len; ++r) {
            std::copy(capture.k[l].row(r), capture.k[l].row(r) + kk.cols, kk.row(r));
            std::copy(capture.v[l].row(r), capture.v[l].row(r) + vv.cols, vv.row(r));
        }
        cache.k.push_back(std::move(kk));
        cache.v.push_back(std::move(vv));
    }
    return cache;
}

int row_of_position(const PrefixCache& cache, int position) {
    const auto it = std::lower_bound(cache.live_positions.begin(), cache.live_positions.end(), position);
    if (it == cache.live_positions.end() || *it != position) {
        throw std::invalid_argument("merge_cache: position is not live");
    }
    return static_cast<int>(it - cache.live_positions.begin());
}

}  // namespace

PrefixCache build_prefix_cache(const ModelConfig& config, const Weights& weights) {
    config.validate();
    SequenceState state = init_state(config);
    KvCapture capture;
    forward_full(state, weights, nullptr, &capture);
    return cache_from_capture(capture, config);
}

void merge_cache(PrefixCache& cache, const std::vector<int>& kept,
                 const std::vector<int>& merged, CacheMergeMode mode) {
    if (merged.empty()) return;
    if (kept.empty()) throw std::invalid_argument("merge_cache: kept set is empty");

    std::vector<int> kept_rows, merged_rows;
    kept_rows.reserve(kept.size());
    merged_rows.reserve(merged.size());
    for (int p : kept) {
        if (p < 0 || p >= cache.visual_len) throw std::invalid_argument("merge_cache: kept position not visual");
        kept_rows.push_back(row_of_position(cache, p));
    }
    for (int p : merged) {
        if (p < 0 || p >= cache.visual_len) throw std::invalid_argument("merge_cache: merged position not visual");
        merged_rows.push_back(row_of_position(cache, p));
    }
    std::sort(kept_rows.begin(), kept_rows.end());
    std::sort(merged_rows.begin(), merged_rows.end());
    for (int r : merged_rows) {
        if (std::binary_search(kept_rows.begin(), kept_rows.end(), r)) {
            throw std::invalid_argument("merge_cache: kept and merged overlap");
        }
    }

    const int n_layers = static_cast<int>(cache.k.size());
    std::vector<char> drop(static_cast<std::size_t>(cache.kept_len), 0);
    for (int r : merged_rows) drop[static_cast<std::size_t>(r)] = 1;

    for (int l = 0; l < n_layers; ++l) {
        Matrix& klayer = cache.k[l];
        Matrix& vlayer = cache.v[l];
        const int d = klayer.cols;

        std::vector<double> norm(static_cast<std::size_t>(cache.kept_len), 0.0);
        auto row_norm = [&](int r) { return std::sqrt(dot_f32(klayer.row(r), klayer.row(r), d)); };
        for (int r : kept_rows) norm[static_cast<std::size_t>(r)] = row_norm(r);

        // routing per layer against this layer's pristine keys
        std::vector<int> targets(merged_rows.size());
        for (std::size_t mi = 0; mi < merged_rows.size(); ++mi) {
            const int mrow = merged_rows[mi];
            const double mnorm = row_norm(mrow);
            double best = -std::numeric_limits<double>::infinity();
            int best_row = kept_rows.front();
            if (mnorm > 0.0) {
                const float* mk = klayer.row(mrow);
                for (int krow : kept_rows) {
                    if (norm[static_cast<std::size_t>(krow)] == 0.0) continue;
                    const double dot = dot_f32(mk, klayer.row(krow), d);
                    const double sim = dot / (mnorm * norm[static_cast<std::size_t>(krow)]);
                    if (sim > best) {
                        best = sim;
                        best_row = krow;
                    }
                }
            }
            targets[mi] = best_row;
        }

        std::vector<int>& counts = cache.merge_counts[static_cast<std::size_t>(l)];
        for (std::size_t mi = 0; mi < merged_rows.size(); ++mi) {
            const int mrow = merged_rows[mi];
            const int krow = targets[mi];
            float* kdst = klayer.row(krow);
            float* vdst = vlayer.row(krow);
            const float* ksrc = klayer.row(mrow);
            const float* vsrc = vlayer.row(mrow);
            if (mode == CacheMergeMode::sum) {
                for (int t = 0; t < d; ++t) kdst[t] += ksrc[t];
                for (int t = 0; t < d; ++t) vdst[t] += vsrc[t];
            } else {
                const double ck = counts[static_cast<std::size_t>(krow)];
                const double cm = counts[static_cast<std::size_t>(mrow)];
                const double inv = 1.0 / (ck + cm);
                for (int t = 0; t < d; ++t) {
                    kdst[t] = static_cast<float>((ck * kdst[t] + cm * ksrc[t]) * inv);
                }
                for (int t = 0; t < d; ++t) {
                    vdst[t] = static_cast<float>((ck * vdst[t] + cm * vsrc[t]) * inv);
                }
            }
            counts[static_cast<std::size_t>(krow)] += counts[static_cast<std::size_t>(mrow)];
        }

        Matrix knew(cache.kept_len - static_cast<int>(merged_rows.size()), d);
        Matrix vnew(knew.rows, d);
        std::vector<int> counts_new;
        counts_new.reserve(static_cast<std::size_t>(knew.rows));
        int out = 0;
        for (int r = 0; r < cache.kept_len; ++r) {
            if (drop[static_cast<std::size_t>(r)]) continue;
            std::copy(klayer.row(r), klayer.row(r) + d, knew.row(out));
            std::copy(vlayer.row(r), vlayer.row(r) + d, vnew.row(out));
            counts_new.push_back(counts[static_cast<std::size_t>(r)]);
            ++out;
        }
        klayer = std::move(knew);
        vlayer = std::move(vnew);
        counts = std::move(counts_new);
    }

    std::vector<int> new_positions;
    for (int r = 0; r < cache.kept_len; ++r) {
        if (drop[static_cast<std::size_t>(r)]) continue;
        new_positions.push_back(cache.live_positions[static_cast<std::size_t>(r)]);
    }
    cache.live_positions = std::move(new_positions);
    cache.kept_len -= static_cast<int>(merged_rows.size());
}

namespace {

Matrix embed_output_rows(const SequenceState& state, const Weights& w) {
    const ModelConfig& cfg = w.config;
    Matrix out(cfg.n_output, cfg.d_model);
    std::vector<int> positions(static_cast<std::size_t>(cfg.n_output));
    for (int i = 0; i < cfg.n_output; ++i) {
        const int id = state.output_tokens[static_cast<std::size_t>(i)];
        std::copy(w.embedding.row(id), w.embedding.row(id) + cfg.d_model, out.row(i));
        positions[static_cast<std::size_t>(i)] = cfg.n_visual + cfg.n_prompt + i;
    }
    Matrix pe = sinusoidal_positions(positions, cfg.d_model);
    for (std::size_t idx = 0; idx < out.data.size(); ++idx) out.data[idx] += pe.data[idx];
    return out;
}

Matrix vstack(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows + b.rows, a.cols);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
    return out;
}

// forward over output rows only, attending to cached prefix K/V
Matrix cached_forward(const SequenceState& state, const Weights& w, const PrefixCache& cache,
                      bool want_attn, Matrix* attn_out) {
    const ModelConfig& cfg = w.config;
    Matrix h = embed_output_rows(state, w);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
        Matrix normed = rms_norm(h);
        Matrix q = matmul(normed, lw.wq);
        Matrix k = matmul(normed, lw.wk);
        Matrix v = matmul(normed, lw.wv);
        Matrix k_all = vstack(cache.k[static_cast<std::size_t>(l)], k);
        Matrix v_all = vstack(cache.v[static_cast<std::size_t>(l)], v);
        const bool capture_here = want_attn && l == cfg.merge_layer;
        Matrix avg;
        Matrix context = multihead_attention(q, k_all, v_all, cfg.n_heads,
                                             capture_here ? &avg : nullptr);
        if (capture_here && attn_out) *attn_out = std::move(avg);
        Matrix proj = matmul(context, lw.wo);
        for (std::size_t idx = 0; idx < h.data.size(); ++idx) h.data[idx] += proj.data[idx];
        h = ffn_block(h, l, w);
    }
    Matrix normed = rms_norm(h);
    return matmul(normed, w.head);
}

}  // namespace

DecodeResult run_decode_cached(const ModelConfig& config, const Weights& weights,
                               const MergeStrategy& strategy, CacheMergeMode mode) {
    config.validate();
    using clock = std::chrono::steady_clock;
    const auto run_start = clock::now();

    SequenceState state = init_state(config);
    DeciderSet deciders;
    DecodeResult result;
    const int T = config.n_steps;
    PrefixCache cache;

    for (int t = T; t >= 1; --t) {
        const auto step_start = clock::now();
        const int s = T - t + 1;
        StepTrace row;
        row.step_ordinal = s;
        row.t = t;
        row.decider_count = static_cast<int>(deciders.size());

        Matrix logits;
        Matrix attn;
        const bool merging_step = strategy.merging() && !deciders.empty() && t < T;
        if (t == T) {
            KvCapture capture;
            logits = forward_full(state, weights, nullptr, &capture);
            cache = cache_from_capture(capture, config);
        } else {
            logits = cached_forward(state, weights, cache, merging_step, &attn);
        }
        row.kept_count = cache.live_visual_count();

        if (merging_step) {
            const double alpha = merge_step_alpha(strategy.schedule, s, config.n_steps);
            const int live_visual = cache.live_visual_count();
            // decider row i is output position i; visual columns lead the cache
            std::vector<double> scores(static_cast<std::size_t>(live_visual), 0.0);
            for (int pos : deciders.positions) {
                const float* arow = attn.row(pos);
                for (int j = 0; j < live_visual; ++j) scores[static_cast<std::size_t>(j)] += arow[j];
            }
            MergePlan plan = partition(scores, alpha);
            std::vector<int> kept_positions, merged_positions;
            for (int idx : plan.kept) {
                kept_positions.push_back(cache.live_positions[static_cast<std::size_t>(idx)]);
            }
            for (int idx : plan.merged) {
                merged_positions.push_back(cache.live_positions[static_cast<std::size_t>(idx)]);
            }
            merge_cache(cache, kept_positions, merged_positions, mode);
            row.alpha = alpha;
            row.kept_count = static_cast<int>(plan.kept.size());
            row.merged_count = static_cast<int>(plan.merged.size());
            row.scores = std::move(scores);
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
