#pragma once

#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

#include "edlm/errors.hpp"

namespace edlm::layout {

// The planned generation context split into fixed blocks. Blocks are
// 1-indexed; absolute token coordinates are 0-indexed, with the prompt
// occupying [0, prompt_len) and block j covering
// [prompt_len + (j-1)*block_size, prompt_len + j*block_size).
struct BlockPartition {
    int64_t prompt_len = 0;
    int64_t gen_len = 0;
    int64_t block_size = 0;
    int num_blocks = 0;

    int64_t block_start(int j) const { return prompt_len + int64_t(j - 1) * block_size; }
    int64_t block_end(int j) const { return block_start(j) + block_size; }  // exclusive
    int64_t total_len() const { return prompt_len + gen_len; }
    // the final planned coordinate; the terminal anchor is pinned here
    int64_t terminal_coordinate() const { return prompt_len + gen_len - 1; }
    int block_of(int64_t pos) const;  // generation-span position -> block index
};

BlockPartition partition_blocks(int64_t prompt_len, int64_t gen_len, int64_t block_size);

enum class Role : uint8_t {
    prompt,
    decoded_dense,
    decoded_folded,
    current,
    mask_sample,
    terminal,
    anchor,
};

const char* role_name(Role role);

enum class PositionMode : uint8_t { preserved, compact_rank };

enum class AnchorContent : uint8_t { mask_token, eos_token };
enum class AnchorAttention : uint8_t { main_only_sees, bidirectional };

// Default is (mask_token, main_only_sees); the other values are ablations.
struct AnchorConfig {
    AnchorContent content = AnchorContent::mask_token;
    AnchorAttention attention = AnchorAttention::main_only_sees;
};

struct RetentionConfig {
    int64_t r = 8;   // positions retained per middle mask block
    int k_recent = 4;  // decoded blocks kept dense before folding starts
    int64_t f = 8;   // representatives per folded decoded block
    bool fold_enabled = false;
    PositionMode position_mode = PositionMode::preserved;
    std::optional<AnchorConfig> anchor;

    void validate() const;  // r >= 1, f >= 2, k_recent >= 0
};

struct LayoutEntry {
    int64_t position = 0;  // absolute coordinate in the planned context
    Role role = Role::prompt;
};

// Ordered set of retained positions. Positions are strictly increasing and
// duplicate-free, except the anchor entry which is always last in entry
// order and carries the terminal coordinate regardless of adjacency.
struct LayoutSelection {
    std::vector<LayoutEntry> entries;

    size_t size() const { return entries.size(); }
    bool has_anchor() const {
        return !entries.empty() && entries.back().role == Role::anchor;
    }
    int anchor_index() const { return has_anchor() ? int(entries.size()) - 1 : -1; }
    std::vector<int64_t> positions() const;
};

// r evenly spaced positions from a block, first slot at block_start.
// Deterministic; r >= block_len returns the whole block.
std::vector<int64_t> uniform_sample(int64_t block_start, int64_t block_len, int64_t r);

// f evenly spaced positions always containing both block endpoints.
// Deterministic; f >= block_len returns the whole block.
std::vector<int64_t> select_f(int64_t block_start, int64_t block_len, int64_t f);

// Active context for full-sequence decoding at block c: prompt, decoded
// history and the current and terminal blocks dense, middle mask blocks
// thinned to r samples each. Overlaps collapse by set union.
LayoutSelection build_retention_set(const BlockPartition& partition, int current_block,
                                    const RetentionConfig& config);

// Same as build_retention_set but decoded history older than the k_recent
// most recent blocks is folded to f representatives per block.
LayoutSelection build_fold_set(const BlockPartition& partition, int current_block,
                               const RetentionConfig& config);

// Block-mode active context: dense prefix [0, history_len), the current
// block, and one anchor entry at the terminal coordinate. The anchor is
// omitted when the layout already covers the terminal coordinate.
LayoutSelection build_block_augmented_set(int64_t history_len, int current_block,
                                          const BlockPartition& partition,
                                          const AnchorConfig& anchor);

// position -> 0,1,2,... in entry order; feeds compact_rank position mode
std::unordered_map<int64_t, int64_t> compact_ranks(const LayoutSelection& selection);

}  // namespace edlm::layout
