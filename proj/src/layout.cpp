#include "edlm/layout.hpp"

#include <algorithm>
#include <map>
#include <string>

namespace edlm::layout {

const char* role_name(Role role) {
    switch (role) {
        case Role::prompt: return "prompt";
        case Role::decoded_dense: return "decoded_dense";
        case Role::decoded_folded: return "decoded_folded";
        case Role::current: return "current";
        case Role::mask_sample: return "mask_sample";
        case Role::terminal: return "terminal";
        case Role::anchor: return "anchor";
    }
    return "unknown";
}

int BlockPartition::block_of(int64_t pos) const {
    if (pos < prompt_len || pos >= total_len()) {
        throw IndexOutOfRangeError("position " + std::to_string(pos) +
                                   " outside the generation span");
    }
    return int((pos - prompt_len) / block_size) + 1;
}

BlockPartition partition_blocks(int64_t prompt_len, int64_t gen_len, int64_t block_size) {
    if (prompt_len < 0 || gen_len < 1 || block_size < 1) {
        throw BadConfigError("partition requires prompt_len >= 0, gen_len >= 1, block_size >= 1");
    }
    if (gen_len % block_size != 0) {
        throw NonDivisibleError("block_size " + std::to_string(block_size) +
                                " does not divide gen_len " + std::to_string(gen_len));
    }
    BlockPartition p;
    p.prompt_len = prompt_len;
    p.gen_len = gen_len;
    p.block_size = block_size;
    p.num_blocks = int(gen_len / block_size);
    return p;
}

void RetentionConfig::validate() const {
    if (r < 1) throw BadConfigError("retention r must be >= 1");
    if (f < 2) throw BadConfigError("fold f must be >= 2");
    if (k_recent < 0) throw BadConfigError("k_recent must be >= 0");
}

std::vector<int64_t> LayoutSelection::positions() const {
    std::vector<int64_t> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.position);
    return out;
}

std::vector<int64_t> uniform_sample(int64_t block_start, int64_t block_len, int64_t r) {
    if (block_len < 1 || r < 1) {
        throw BadConfigError("uniform_sample requires block_len >= 1 and r >= 1");
    }
    std::vector<int64_t> out;
    if (r >= block_len) {
        out.reserve(size_t(block_len));
        for (int64_t i = 0; i < block_len; ++i) out.push_back(block_start + i);
        return out;
    }
    out.reserve(size_t(r));
    for (int64_t k = 0; k < r; ++k) {
        out.push_back(block_start + (k * block_len) / r);
    }
    return out;
}

std::vector<int64_t> select_f(int64_t block_start, int64_t block_len, int64_t f) {
    if (block_len < 1 || f < 2) {
        throw BadConfigError("select_f requires block_len >= 1 and f >= 2");
    }
    std::vector<int64_t> out;
    if (f >= block_len) {
        out.reserve(size_t(block_len));
        for (int64_t i = 0; i < block_len; ++i) out.push_back(block_start + i);
        return out;
    }
    // endpoints plus evenly spaced interior slots
    out.reserve(size_t(f));
    for (int64_t k = 0; k < f; ++k) {
        out.push_back(block_start + (k * (block_len - 1)) / (f - 1));
    }
    return out;
}

namespace {

// Ordered position -> role accumulator. First insertion wins, so callers
// add higher-priority roles first and overlaps collapse by set union.
class SelectionBuilder {
  public:
    void add(int64_t pos, Role role) { slots_.emplace(pos, role); }

    void add_range(int64_t begin, int64_t end, Role role) {
        for (int64_t p = begin; p < end; ++p) slots_.emplace(p, role);
    }

    void add_all(const std::vector<int64_t>& positions, Role role) {
        for (int64_t p : positions) slots_.emplace(p, role);
    }

    bool contains(int64_t pos) const { return slots_.count(pos) != 0; }

    LayoutSelection finish() && {
        LayoutSelection sel;
        sel.entries.reserve(slots_.size());
        for (const auto& [pos, role] : slots_) sel.entries.push_back({pos, role});
        return sel;
    }

  private:
    std::map<int64_t, Role> slots_;
};

void check_block_index(const BlockPartition& partition, int c) {
    if (c < 1 || c > partition.num_blocks) {
        throw IndexOutOfRangeError("block index " + std::to_string(c) + " outside 1.." +
                                   std::to_string(partition.num_blocks));
    }
}

void add_middle_samples(SelectionBuilder& b, const BlockPartition& p, int c, int64_t r) {
    for (int j = c + 1; j <= p.num_blocks - 1; ++j) {
        b.add_all(uniform_sample(p.block_start(j), p.block_size, r), Role::mask_sample);
    }
}

}  // namespace

LayoutSelection build_retention_set(const BlockPartition& partition, int current_block,
                                    const RetentionConfig& config) {
    config.validate();
    check_block_index(partition, current_block);
    const int c = current_block;
    const int M = partition.num_blocks;

    SelectionBuilder b;
    b.add_range(0, partition.prompt_len, Role::prompt);
    b.add_range(partition.block_start(c), partition.block_end(c), Role::current);
    b.add_range(partition.block_start(M), partition.block_end(M), Role::terminal);
    b.add_range(partition.block_start(1), partition.block_start(c), Role::decoded_dense);
    add_middle_samples(b, partition, c, config.r);
    return std::move(b).finish();
}

LayoutSelection build_fold_set(const BlockPartition& partition, int current_block,
                               const RetentionConfig& config) {
    config.validate();
    check_block_index(partition, current_block);
    const int c = current_block;
    const int M = partition.num_blocks;
    const int recent_lo = std::max(1, c - config.k_recent);

    SelectionBuilder b;
    b.add_range(0, partition.prompt_len, Role::prompt);
    b.add_range(partition.block_start(c), partition.block_end(c), Role::current);
    b.add_range(partition.block_start(M), partition.block_end(M), Role::terminal);
    // recent decoded blocks stay dense, older ones keep f representatives
    b.add_range(partition.block_start(recent_lo), partition.block_start(c), Role::decoded_dense);
    for (int j = 1; j < recent_lo; ++j) {
        b.add_all(select_f(partition.block_start(j), partition.block_size, config.f),
                  Role::decoded_folded);
    }
    add_middle_samples(b, partition, c, config.r);
    return std::move(b).finish();
}

LayoutSelection build_block_augmented_set(int64_t history_len, int current_block,
                                          const BlockPartition& partition,
                                          const AnchorConfig& /*anchor*/) {
    check_block_index(partition, current_block);
    if (history_len < 0 || history_len > partition.total_len()) {
        throw BadConfigError("history_len " + std::to_string(history_len) +
                             " outside [0, total_len]");
    }
    const int c = current_block;

    SelectionBuilder b;
    b.add_range(partition.block_start(c), partition.block_end(c), Role::current);
    for (int64_t p = 0; p < history_len; ++p) {
        if (!b.contains(p)) b.add(p, p < partition.prompt_len ? Role::prompt : Role::decoded_dense);
    }
    LayoutSelection sel = std::move(b).finish();

    // The anchor points at the final planned coordinate. When the layout
    // already covers that coordinate (last block, or history spanning it)
    // the anchor is dropped rather than shifted.
    const int64_t terminal = partition.terminal_coordinate();
    const bool collision = partition.block_end(c) > terminal || history_len > terminal;
    if (!collision) {
        sel.entries.push_back({terminal, Role::anchor});
    }
    return sel;
}

std::unordered_map<int64_t, int64_t> compact_ranks(const LayoutSelection& selection) {
    std::unordered_map<int64_t, int64_t> ranks;
    ranks.reserve(selection.entries.size());
    for (size_t i = 0; i < selection.entries.size(); ++i) {
        ranks.emplace(selection.entries[i].position, int64_t(i));
    }
    return ranks;
}

}  // namespace edlm::layout
