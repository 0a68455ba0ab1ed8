#pragma once

#include <vector>

namespace d3tom {

// One decode trajectory's token sequence at denoising step `step`.
// Position indices are the original sequence offsets; they never change,
// which is what lets rows be dropped mid-pass without re-encoding.
struct SequenceState {
    int visual_len = 0;
    int prompt_len = 0;
    int output_len = 0;
    std::vector<int> output_tokens;  // mask_token while masked
    std::vector<int> revealed_at;    // step t in [1, T] once revealed, 0 before
    std::vector<int> positions;      // original index per live row, ascending
    int step = 0;                    // current t
    int mask_token = 0;

    int total_len() const { return visual_len + prompt_len + output_len; }
    bool is_masked(int i) const { return output_tokens[static_cast<std::size_t>(i)] == mask_token; }
    int masked_count() const {
        int n = 0;
        for (int tok : output_tokens) n += (tok == mask_token) ? 1 : 0;
        return n;
    }
};

// Output-token positions revealed exactly at the previous denoising step.
struct DeciderSet {
    std::vector<int> positions;  // ascending output indices

    bool empty() const { return positions.empty(); }
    std::size_t size() const { return positions.size(); }
};

}  // namespace d3tom
