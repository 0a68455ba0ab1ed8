#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "d3tom/diffusion.hpp"
#include "d3tom/kernels.hpp"
#include "d3tom/model.hpp"
#include "d3tom/serial.hpp"
#include "test_helpers.hpp"

using namespace d3tom;

namespace {

bool bytes_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] != b.data[i]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = test::tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.n_heads = 3;  // does not divide 32
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = test::tiny_config();
    cfg.merge_layer = cfg.n_layers;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("weight init is deterministic and seed-sensitive") {
    const ModelConfig cfg = test::tiny_config();
    const Weights a = init_weights(cfg);
    const Weights b = init_weights(cfg);
    CHECK(bytes_equal(a.layers[0].wq, b.layers[0].wq));
    CHECK(bytes_equal(a.embedding, b.embedding));
    CHECK(bytes_equal(a.head, b.head));

    ModelConfig cfg2 = cfg;
    cfg2.seed = cfg.seed + 1;
    const Weights c = init_weights(cfg2);
    CHECK(a.layers[0].wq.at(0, 0) != c.layers[0].wq.at(0, 0));
}

TEST_CASE("weight values stay inside the init bound") {
    const ModelConfig cfg = test::tiny_config();
    const Weights w = init_weights(cfg);
    const float bound = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
    for (float x : w.layers[1].w_gate.data) {
        CHECK(x >= -bound);
        CHECK(x < bound);
    }
}

TEST_CASE("weight file round-trips bit-exactly with the documented header") {
    const ModelConfig cfg = test::tiny_config();
    const Weights w = init_weights(cfg);
    const std::string path = "weights_roundtrip.d3tm";
    save_weights(w, path);

    std::ifstream is(path, std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    CHECK(std::string(magic, 4) == "D3TM");
    unsigned char ver[4];
    is.read(reinterpret_cast<char*>(ver), 4);
    CHECK(ver[0] == 1);  // little-endian u32 version 1
    CHECK(ver[1] == 0);
    unsigned char first_int[4];
    is.read(reinterpret_cast<char*>(first_int), 4);
    CHECK(static_cast<int>(first_int[0]) == cfg.vocab_size);
    is.close();

    const Weights r = load_weights(path);
    CHECK(r.config.d_model == cfg.d_model);
    CHECK(r.config.seed == cfg.seed);
    CHECK(bytes_equal(r.layers[2].w_down, w.layers[2].w_down));
    CHECK(bytes_equal(r.projector, w.projector));
    std::remove(path.c_str());
}

TEST_CASE("load rejects a corrupt header") {
    const std::string path = "weights_bad.d3tm";
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
    os.close();
    CHECK_THROWS_AS(load_weights(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("single-token attention matrix is [[1]]") {
    ModelConfig cfg = test::tiny_config();
    const Weights w = init_weights(cfg);
    const Matrix h = test::random_matrix(1, cfg.d_model, 5);
    auto [out, attn] = forward_layer(h, 0, w, {0}, true);
    REQUIRE(attn.has_value());
    CHECK(attn->rows == 1);
    CHECK(attn->at(0, 0) == doctest::Approx(1.0));
    CHECK(out.rows == 1);
}

TEST_CASE("zero-weight model attends uniformly") {
    ModelConfig cfg = test::tiny_config();
    const Weights w = test::zero_weights(cfg);
    const int n = 5;
    const Matrix h = test::random_matrix(n, cfg.d_model, 6);
    std::vector<int> positions = {0, 1, 2, 3, 4};
    auto [out, attn] = forward_layer(h, 0, w, positions, true);
    REQUIRE(attn.has_value());
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) CHECK(attn->at(i, j) == doctest::Approx(1.0 / n));
    }
}

TEST_CASE("head-averaged attention matches a per-head oracle") {
    ModelConfig cfg = test::tiny_config();
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    const Weights w = init_weights(cfg);
    const int n = 6;
    const Matrix h = test::random_matrix(n, 8, 77);
    auto [out, attn] = forward_layer(h, 0, w, {0, 1, 2, 3, 4, 5}, true);
    REQUIRE(attn.has_value());

    // oracle: per-head scores through the serial softmax, then averaged
    const Matrix normed = rms_norm(h);
    const Matrix q = serial::matmul(normed, w.layers[0].wq);
    const Matrix k = serial::matmul(normed, w.layers[0].wk);
    const int hd = 4;
    Matrix expected(n, n);
    for (int head = 0; head < 2; ++head) {
        Matrix scores(n, n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int t = 0; t < hd; ++t) {
                    acc += static_cast<double>(q.at(i, head * hd + t)) *
                           static_cast<double>(k.at(j, head * hd + t));
                }
                scores.at(i, j) = static_cast<float>(acc);
            }
        }
        const Matrix p = serial::row_softmax(scores, 1.0f / std::sqrt(4.0f));
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) expected.at(i, j) += 0.5f * p.at(i, j);
        }
    }
    for (int i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            CHECK(std::abs(attn->at(i, j) - expected.at(i, j)) < 1e-6);
            sum += attn->at(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("forward_layer rejects out-of-range positions") {
    const ModelConfig cfg = test::tiny_config();
    const Weights w = init_weights(cfg);
    const Matrix h = test::random_matrix(2, cfg.d_model, 9);
    CHECK_THROWS_AS(forward_layer(h, 0, w, {0, cfg.max_positions}, false), std::invalid_argument);
    CHECK_THROWS_AS(forward_layer(h, 0, w, {0}, false), std::invalid_argument);
}

TEST_CASE("forward_full row accounting with and without a hook") {
    const ModelConfig cfg = test::tiny_config();
    const Weights w = init_weights(cfg);
    const SequenceState state = init_state(cfg);

    const Matrix plain = forward_full(state, w);
    CHECK(plain.rows == cfg.n_output);
    CHECK(plain.cols == cfg.vocab_size);

    // identity hook: bit-identical logits
    int hook_calls = 0;
    MergeHook identity = [&](Matrix h, const Matrix& attn) {
        ++hook_calls;
        CHECK(attn.rows == cfg.total_len());
        std::vector<int> all(static_cast<std::size_t>(h.rows));
        for (int i = 0; i < h.rows; ++i) all[static_cast<std::size_t>(i)] = i;
        return std::make_pair(std::move(h), all);
    };
    const Matrix hooked = forward_full(state, w, &identity);
    CHECK(hook_calls == 1);
    CHECK(bytes_equal(plain, hooked));

    // dropping k visual rows shortens every later layer
    const int k = 7;
    MergeHook dropper = [&](Matrix h, const Matrix&) {
        std::vector<int> keep;
        for (int i = k; i < h.rows; ++i) keep.push_back(i);
        Matrix shortened(h.rows - k, h.cols);
        for (int i = 0; i < shortened.rows; ++i) {
            std::copy(h.row(i + k), h.row(i + k) + h.cols, shortened.row(i));
        }
        return std::make_pair(std::move(shortened), keep);
    };
    const Matrix dropped = forward_full(state, w, &dropper);
    CHECK(dropped.rows == cfg.n_output);  // output rows never disappear

    // inconsistent hook output is a contract violation
    MergeHook broken = [&](Matrix h, const Matrix&) {
        std::vector<int> rows = {0, 1};
        return std::make_pair(std::move(h), rows);
    };
    CHECK_THROWS_AS(forward_full(state, w, &broken), std::logic_error);
}

TEST_CASE("row removal mid-pass equals a fresh run over the shortened rows") {
    // drive the tail layers directly: a forward over states with rows removed
    // must match running the same layers on the pre-shortened matrix
    const ModelConfig cfg = test::tiny_config();
    const Weights w = init_weights(cfg);
    const SequenceState state = init_state(cfg);

    Matrix captured;
    std::vector<int> kept_rows;
    MergeHook capture_and_drop = [&](Matrix h, const Matrix&) {
        for (int i = 0; i < h.rows; ++i) {
            if (i % 3 != 0 || i >= cfg.n_visual) kept_rows.push_back(i);
        }
        Matrix shortened(static_cast<int>(kept_rows.size()), h.cols);
        for (std::size_t i = 0; i < kept_rows.size(); ++i) {
            std::copy(h.row(kept_rows[i]), h.row(kept_rows[i]) + h.cols,
                      shortened.row(static_cast<int>(i)));
        }
        captured = shortened;
        return std::make_pair(std::move(shortened), kept_rows);
    };
    const Matrix full_logits = forward_full(state, w, &capture_and_drop);

    // replay the remainder of the network by hand from the captured states
    Matrix h = ffn_block(captured, cfg.merge_layer, w);
    for (int l = cfg.merge_layer + 1; l < cfg.n_layers; ++l) {
        AttentionResult ar = attention_block(h, l, w, false);
        h = ffn_block(ar.hidden, l, w);
    }
    const Matrix normed = rms_norm(h);
    Matrix tail(cfg.n_output, cfg.d_model);
    for (int i = 0; i < cfg.n_output; ++i) {
        const float* src = normed.row(normed.rows - cfg.n_output + i);
        std::copy(src, src + cfg.d_model, tail.row(i));
    }
    const Matrix replay_logits = matmul(tail, w.head);
    CHECK(bytes_equal(full_logits, replay_logits));
}
