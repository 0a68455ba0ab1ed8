#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "d3tom/matrix.hpp"
#include "d3tom/sequence.hpp"

namespace d3tom {

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 256;
    int d_ff = 768;
    int n_layers = 8;
    int n_heads = 4;
    int max_positions = 2048;
    int n_visual = 1024;
    int n_prompt = 64;
    int n_output = 64;
    int n_steps = 32;
    int merge_layer = 3;  // 0-based
    std::uint64_t seed = 42;

    int total_len() const { return n_visual + n_prompt + n_output; }
    int mask_token() const { return vocab_size - 1; }

    // throws std::invalid_argument on an inconsistent configuration
    void validate() const;
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;   // d×d
    Matrix w_up, w_gate;     // d×m
    Matrix w_down;           // m×d
};

// Every tensor is regenerable bit-exactly from (seed, tensor ordinal); the
// sinusoidal position table is computed on demand and never stored.
struct Weights {
    ModelConfig config;
    std::vector<LayerWeights> layers;
    Matrix embedding;  // vocab×d
    Matrix projector;  // d×d, maps raw visual features into the token space
    Matrix head;       // d×vocab
};

Weights init_weights(const ModelConfig& config);

// Binary weight export: "D3TM" magic, u32 version, the config integers,
// then all tensors in declaration order as little-endian f32, row-major.
void save_weights(const Weights& w, const std::string& path);
Weights load_weights(const std::string& path);

// parameter-free RMSNorm (eps 1e-5)
Matrix rms_norm(const Matrix& h);

// one row of absolute sinusoidal encoding per requested position
Matrix sinusoidal_positions(const std::vector<int>& positions, int d_model);

// seeded visual feature grid (n_visual×d) and prompt token ids; these are
// the fixed "inputs" of a trajectory, keyed off the config seed
Matrix visual_features(const ModelConfig& config);
std::vector<int> prompt_tokens(const ModelConfig& config);

struct AttentionResult {
    Matrix hidden;               // h + attention output
    std::optional<Matrix> attn;  // head-averaged post-softmax matrix (n×n)
};

// Per-layer key/value projections recorded during a forward pass.
struct KvCapture {
    std::vector<Matrix> k;
    std::vector<Matrix> v;
};

// Multi-head scaled-dot-product attention over already-projected q/k/v.
// `attn_avg`, when non-null, receives the head-averaged post-softmax matrix
// (q.rows × k.rows).
Matrix multihead_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                           int n_heads, Matrix* attn_avg = nullptr);

// Pre-norm attention sub-block. `capture`, when set, receives this layer's
// full K and V projections.
AttentionResult attention_block(const Matrix& h, int layer, const Weights& w,
                                bool want_attn, KvCapture* capture = nullptr);

// Pre-norm gated FFN sub-block.
Matrix ffn_block(const Matrix& h, int layer, const Weights& w);

// Full transformer layer. `positions` carries the original index of each
// row and is validated against max_positions.
std::pair<Matrix, std::optional<Matrix>> forward_layer(const Matrix& h, int layer,
                                                       const Weights& w,
                                                       const std::vector<int>& positions,
                                                       bool want_attn);

// Called once after the attention sub-block of the merge layer. Receives
// the post-attention hidden states and the head-averaged attention matrix;
// returns possibly-shortened hidden states plus the surviving row indices
// (ascending, into the pre-hook row space).
using MergeHook = std::function<std::pair<Matrix, std::vector<int>>(Matrix, const Matrix&)>;

// Embeds the live sequence: projected visual features, then prompt and
// output token embeddings, plus sinusoidal encodings at original positions.
Matrix embed_sequence(const SequenceState& state, const Weights& w);

// Runs all layers and returns logits for the output positions (they are
// never merge candidates, so there is one row per output token).
Matrix forward_full(const SequenceState& state, const Weights& w,
                    const MergeHook* merge_hook = nullptr,
                    KvCapture* capture = nullptr);

}  // namespace d3tom
