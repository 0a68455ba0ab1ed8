#include "d3tom/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "d3tom/dot.hpp"
#include "d3tom/kernels.hpp"
#include "d3tom/rng.hpp"

namespace d3tom {

namespace {

constexpr int kTensorsPerLayer = 7;
// input streams live far above any tensor ordinal
constexpr std::uint64_t kVisualStreamOrdinal = 0x100000000ull;
constexpr std::uint64_t kPromptStreamOrdinal = 0x100000001ull;

constexpr double kNormEps = 1e-5;

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("config: vocab_size must be >= 2");
    if (d_model < 1 || d_ff < 1) throw std::invalid_argument("config: model widths must be positive");
    if (n_heads < 1 || d_model % n_heads != 0) {
        throw std::invalid_argument("config: n_heads must divide d_model");
    }
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be positive");
    if (merge_layer < 0 || merge_layer >= n_layers) {
        throw std::invalid_argument("config: merge_layer out of range");
    }
    if (n_visual < 1 || n_prompt < 0 || n_output < 1) {
        throw std::invalid_argument("config: sequence segments out of range");
    }
    if (n_steps < 1) throw std::invalid_argument("config: n_steps must be >= 1");
    if (max_positions < total_len()) {
        throw std::invalid_argument("config: max_positions smaller than sequence length");
    }
}

Weights init_weights(const ModelConfig& config) {
    config.validate();
    Weights w;
    w.config = config;
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    std::uint64_t ordinal = 0;
    auto fill = [&](int r, int c) {
        Matrix m(r, c);
        SplitMix64 rng(stream_key(config.seed, ordinal++));
        for (float& x : m.data) x = rng.next_symmetric(bound);
        return m;
    };
    const int d = config.d_model;
    const int m = config.d_ff;
    w.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (LayerWeights& lw : w.layers) {
        lw.wq = fill(d, d);
        lw.wk = fill(d, d);
        lw.wv = fill(d, d);
        lw.wo = fill(d, d);
        lw.w_up = fill(d, m);
        lw.w_gate = fill(d, m);
        lw.w_down = fill(m, d);
    }
    w.embedding = fill(config.vocab_size, d);
    w.projector = fill(d, d);
    w.head = fill(d, config.vocab_size);
    return w;
}

// ---------------------------------------------------------------------
// weight file io (little-endian regardless of host)
// ---------------------------------------------------------------------

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    write_u32(os, static_cast<std::uint32_t>(v));
    write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

void write_matrix(std::ostream& os, const Matrix& m) {
    for (float x : m.data) write_u32(os, std::bit_cast<std::uint32_t>(x));
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("weight file: truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t read_u64(std::istream& is) {
    const std::uint64_t lo = read_u32(is);
    const std::uint64_t hi = read_u32(is);
    return lo | (hi << 32);
}

Matrix read_matrix(std::istream& is, int rows, int cols) {
    Matrix m(rows, cols);
    for (float& x : m.data) x = std::bit_cast<float>(read_u32(is));
    return m;
}

}  // namespace

void save_weights(const Weights& w, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open weight file for writing: " + path);
    os.write("D3TM", 4);
    write_u32(os, 1u);  // version
    const ModelConfig& c = w.config;
    for (int v : {c.vocab_size, c.d_model, c.d_ff, c.n_layers, c.n_heads, c.max_positions,
                  c.n_visual, c.n_prompt, c.n_output, c.n_steps, c.merge_layer}) {
        write_u32(os, static_cast<std::uint32_t>(v));
    }
    write_u64(os, c.seed);
    for (const LayerWeights& lw : w.layers) {
        write_matrix(os, lw.wq);
        write_matrix(os, lw.wk);
        write_matrix(os, lw.wv);
        write_matrix(os, lw.wo);
        write_matrix(os, lw.w_up);
        write_matrix(os, lw.w_gate);
        write_matrix(os, lw.w_down);
    }
    write_matrix(os, w.embedding);
    write_matrix(os, w.projector);
    write_matrix(os, w.head);
    if (!os) throw std::runtime_error("weight file write failed: " + path);
}

Weights load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open weight file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "D3TM", 4) != 0) {
        throw std::runtime_error("weight file: bad magic");
    }
    if (read_u32(is) != 1u) throw std::runtime_error("weight file: unsupported version");
    ModelConfig c;
    c.vocab_size = static_cast<int>(read_u32(is));
    c.d_model = static_cast<int>(read_u32(is));
    c.d_ff = static_cast<int>(read_u32(is));
    c.n_layers = static_cast<int>(read_u32(is));
    c.n_heads = static_cast<int>(read_u32(is));
    c.max_positions = static_cast<int>(read_u32(is));
    c.n_visual = static_cast<int>(read_u32(is));
    c.n_prompt = static_cast<int>(read_u32(is));
    c.n_output = static_cast<int>(read_u32(is));
    c.n_steps = static_cast<int>(read_u32(is));
    c.merge_layer = static_cast<int>(read_u32(is));
    c.seed = read_u64(is);
    c.validate();
    Weights w;
    w.config = c;
    w.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (LayerWeights& lw : w.layers) {
        lw.wq = read_matrix(is, c.d_model, c.d_model);
        lw.wk = read_matrix(is, c.d_model, c.d_model);
        lw.wv = read_matrix(is, c.d_model, c.d_model);
        lw.wo = read_matrix(is, c.d_model, c.d_model);
        lw.w_up = read_matrix(is, c.d_model, c.d_ff);
        lw.w_gate = read_matrix(is, c.d_model, c.d_ff);
        lw.w_down = read_matrix(is, c.d_ff, c.d_model);
    }
    w.embedding = read_matrix(is, c.vocab_size, c.d_model);
    w.projector = read_matrix(is, c.d_model, c.d_model);
    w.head = read_matrix(is, c.d_model, c.vocab_size);
    return w;
}

// ---------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------

Matrix rms_norm(const Matrix& h) {
    Matrix out(h.rows, h.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < h.rows; ++i) {
        const float* in = h.row(i);
        double ms = 0.0;
        for (int j = 0; j < h.cols; ++j) {
            ms += static_cast<double>(in[j]) * static_cast<double>(in[j]);
        }
        ms /= static_cast<double>(h.cols);
        const double s = 1.0 / std::sqrt(ms + kNormEps);
        float* o = out.row(i);
        for (int j = 0; j < h.cols; ++j) o[j] = static_cast<float>(in[j] * s);
    }
    return out;
}

Matrix sinusoidal_positions(const std::vector<int>& positions, int d_model) {
    std::vector<double> freq(static_cast<std::size_t>(d_model));
    for (int j = 0; j < d_model; ++j) {
        const int pair = (j / 2) * 2;
        freq[static_cast<std::size_t>(j)] =
            std::pow(10000.0, -static_cast<double>(pair) / static_cast<double>(d_model));
    }
    Matrix pe(static_cast<int>(positions.size()), d_model);
    for (int i = 0; i < pe.rows; ++i) {
        const double pos = static_cast<double>(positions[static_cast<std::size_t>(i)]);
        float* row = pe.row(i);
        for (int j = 0; j < d_model; ++j) {
            const double angle = pos * freq[static_cast<std::size_t>(j)];
            row[j] = static_cast<float>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
    return pe;
}

Matrix visual_features(const ModelConfig& config) {
    Matrix f(config.n_visual, config.d_model);
    SplitMix64 rng(stream_key(config.seed, kVisualStreamOrdinal));
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    for (float& x : f.data) x = rng.next_symmetric(bound);
    return f;
}

std::vector<int> prompt_tokens(const ModelConfig& config) {
    std::vector<int> ids(static_cast<std::size_t>(config.n_prompt));
    SplitMix64 rng(stream_key(config.seed, kPromptStreamOrdinal));
    // mask id (vocab_size - 1) is reserved for output positions
    for (int& id : ids) {
        id = static_cast<int>(rng.next() % static_cast<std::uint64_t>(config.vocab_size - 1));
    }
    return ids;
}

Matrix multihead_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                           int n_heads, Matrix* attn_avg) {
    if (q.cols != k.cols || !k.same_shape(v)) {
        throw std::invalid_argument("multihead_attention: shape mismatch");
    }
    if (n_heads < 1 || q.cols % n_heads != 0) {
        throw std::invalid_argument("multihead_attention: heads must divide width");
    }
    const int n_q = q.rows;
    const int n_k = k.rows;
    const int d = q.cols;
    const int hd = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const float inv_heads = 1.0f / static_cast<float>(n_heads);

    Matrix context(n_q, d);
    if (attn_avg) *attn_avg = Matrix(n_q, n_k);

#pragma omp parallel for schedule(static)
    for (int i = 0; i < n_q; ++i) {
        // one pass over K for all heads, then per-head softmax in place,
        // then one pass over V; K and V rows are touched once each
        std::vector<double> scores(static_cast<std::size_t>(n_heads) * n_k);
        std::vector<double> ctx(static_cast<std::size_t>(d), 0.0);
        const float* qi = q.row(i);
        for (int j = 0; j < n_k; ++j) {
            const float* kj = k.row(j);
            for (int h = 0; h < n_heads; ++h) {
                scores[static_cast<std::size_t>(h) * n_k + j] =
                    dot_f32(qi + h * hd, kj + h * hd, hd) * scale;
            }
        }
        for (int h = 0; h < n_heads; ++h) {
            double* row = scores.data() + static_cast<std::size_t>(h) * n_k;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < n_k; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < n_k; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            const double inv = 1.0 / sum;
            for (int j = 0; j < n_k; ++j) row[j] *= inv;
        }
        if (attn_avg) {
            float* arow = attn_avg->row(i);
            for (int j = 0; j < n_k; ++j) {
                double acc = 0.0;
                for (int h = 0; h < n_heads; ++h) {
                    acc += scores[static_cast<std::size_t>(h) * n_k + j];
                }
                arow[j] = static_cast<float>(acc) * inv_heads;
            }
        }
        for (int j = 0; j < n_k; ++j) {
            const float* vj = v.row(j);
            for (int h = 0; h < n_heads; ++h) {
                const double p = scores[static_cast<std::size_t>(h) * n_k + j];
                double* cbase = ctx.data() + static_cast<std::size_t>(h) * hd;
                const float* vbase = vj + h * hd;
                for (int t = 0; t < hd; ++t) cbase[t] += p * static_cast<double>(vbase[t]);
            }
        }
        float* crow = context.row(i);
        for (int t = 0; t < d; ++t) crow[t] = static_cast<float>(ctx[static_cast<std::size_t>(t)]);
    }
    return context;
}

AttentionResult attention_block(const Matrix& h, int layer, const Weights& w,
                                bool want_attn, KvCapture* capture) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(layer)];
    const int n = h.rows;
    const int d = h.cols;

    Matrix normed = rms_norm(h);
    Matrix q = matmul(normed, lw.wq);
    Matrix k = matmul(normed, lw.wk);
    Matrix v = matmul(normed, lw.wv);
    if (capture) {
        capture->k.push_back(k);
        capture->v.push_back(v);
    }

    AttentionResult result;
    Matrix avg;
    Matrix context = multihead_attention(q, k, v, w.config.n_heads, want_attn ? &avg : nullptr);
    if (want_attn) result.attn = std::move(avg);

    Matrix attn_out = matmul(context, lw.wo);
    result.hidden = Matrix(n, d);
    for (std::size_t idx = 0; idx < result.hidden.data.size(); ++idx) {
        result.hidden.data[idx] = h.data[idx] + attn_out.data[idx];
    }
    return result;
}

Matrix ffn_block(const Matrix& h, int layer, const Weights& w) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(layer)];
    Matrix normed = rms_norm(h);
    Matrix up = matmul(normed, lw.w_up);
    Matrix gate = matmul(normed, lw.w_gate);
    Matrix act(up.rows, up.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < up.rows; ++i) {
        const float* urow = up.row(i);
        const float* grow = gate.row(i);
        float* arow = act.row(i);
        for (int j = 0; j < up.cols; ++j) {
            const double g = static_cast<double>(grow[j]);
            arow[j] = static_cast<float>(g / (1.0 + std::exp(-g)) * static_cast<double>(urow[j]));
        }
    }
    Matrix down = matmul(act, lw.w_down);
    Matrix out(h.rows, h.cols);
    for (std::size_t idx = 0; idx < out.data.size(); ++idx) {
        out.data[idx] = h.data[idx] + down.data[idx];
    }
    return out;
}

namespace {

void validate_positions(const std::vector<int>& positions, int n_rows, int max_positions) {
    if (static_cast<int>(positions.size()) != n_rows) {
        throw std::invalid_argument("positions length does not match row count");
    }
    for (int p : positions) {
        if (p < 0 || p >= max_positions) throw std::invalid_argument("position out of range");
    }
}

}  // namespace

std::pair<Matrix, std::optional<Matrix>> forward_layer(const Matrix& h, int layer,
                                                       const Weights& w,
                                                       const std::vector<int>& positions,
                                                       bool want_attn) {
    if (layer < 0 || layer >= w.config.n_layers) throw std::invalid_argument("layer index out of range");
    validate_positions(positions, h.rows, w.config.max_positions);
    AttentionResult ar = attention_block(h, layer, w, want_attn);
    Matrix out = ffn_block(ar.hidden, layer, w);
    return {std::move(out), std::move(ar.attn)};
}

Matrix embed_sequence(const SequenceState& state, const Weights& w) {
    const ModelConfig& cfg = w.config;
    if (state.visual_len != cfg.n_visual || state.prompt_len != cfg.n_prompt ||
        state.output_len != cfg.n_output) {
        throw std::invalid_argument("embed_sequence: state does not match config");
    }
    const int n = state.total_len();
    validate_positions(state.positions, n, cfg.max_positions);

    Matrix out(n, cfg.d_model);
    Matrix vis = matmul(visual_features(cfg), w.projector);
    for (int i = 0; i < cfg.n_visual; ++i) {
        std::copy(vis.row(i), vis.row(i) + cfg.d_model, out.row(i));
    }
    const std::vector<int> prompt = prompt_tokens(cfg);
    for (int i = 0; i < cfg.n_prompt; ++i) {
        const int id = prompt[static_cast<std::size_t>(i)];
        std::copy(w.embedding.row(id), w.embedding.row(id) + cfg.d_model, out.row(cfg.n_visual + i));
    }
    for (int i = 0; i < cfg.n_output; ++i) {
        const int id = state.output_tokens[static_cast<std::size_t>(i)];
        if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("embed_sequence: token id out of range");
        std::copy(w.embedding.row(id), w.embedding.row(id) + cfg.d_model,
                  out.row(cfg.n_visual + cfg.n_prompt + i));
    }
    Matrix pe = sinusoidal_positions(state.positions, cfg.d_model);
    for (std::size_t idx = 0; idx < out.data.size(); ++idx) out.data[idx] += pe.data[idx];
    return out;
}

Matrix forward_full(const SequenceState& state, const Weights& w,
                    const MergeHook* merge_hook, KvCapture* capture) {
    const ModelConfig& cfg = w.config;
    Matrix h = embed_sequence(state, w);
    std::vector<int> positions = state.positions;

    for (int l = 0; l < cfg.n_layers; ++l) {
        const bool want_attn = merge_hook != nullptr && l == cfg.merge_layer;
        AttentionResult ar = attention_block(h, l, w, want_attn, capture);
        h = std::move(ar.hidden);
        if (want_attn) {
            auto [shortened, surviving] = (*merge_hook)(std::move(h), *ar.attn);
            if (shortened.rows != static_cast<int>(surviving.size())) {
                throw std::logic_error("forward_full: merge hook row count inconsistent");
            }
            std::vector<int> next_positions;
            next_positions.reserve(surviving.size());
            int prev = -1;
            for (int r : surviving) {
                if (r <= prev || r >= static_cast<int>(positions.size())) {
                    throw std::logic_error("forward_full: merge hook surviving rows invalid");
                }
                next_positions.push_back(positions[static_cast<std::size_t>(r)]);
                prev = r;
            }
            h = std::move(shortened);
            positions = std::move(next_positions);
        }
        h = ffn_block(h, l, w);
    }

    Matrix normed = rms_norm(h);
    Matrix tail(cfg.n_output, cfg.d_model);
    for (int i = 0; i < cfg.n_output; ++i) {
        const float* src = normed.row(normed.rows - cfg.n_output + i);
        std::copy(src, src + cfg.d_model, tail.row(i));
    }
    return matmul(tail, w.head);
}

}  // namespace d3tom
