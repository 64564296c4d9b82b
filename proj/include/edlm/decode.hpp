#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "edlm/layout.hpp"
#include "edlm/model.hpp"

namespace edlm::decode {

enum class Mode : uint8_t { baseline, elastic, elastic_fold, block_anchor };

const char* mode_name(Mode mode);
Mode mode_from_name(const std::string& name);

struct DecodeConfig {
    Mode mode = Mode::baseline;
    layout::RetentionConfig retention;
    int64_t gen_len = 128;
    int64_t block_size = 32;
    int steps_per_block = 32;
    double temperature = 0.0;  // committed tokens are argmax; nonzero is rejected
    bool eos_early_stop = false;
    uint64_t seed = 0;  // echoed into traces; greedy decoding draws nothing

    void validate() const;
};

struct DenoiseState {
    std::vector<int32_t> tokens;  // one id per absolute position
    std::vector<uint8_t> masked;
    int64_t prompt_len = 0;
    int current_block = 1;  // maxed out past the block count when finished
    int64_t step = 0;

    int64_t total_len() const { return int64_t(tokens.size()); }
    bool finished(const DecodeConfig& config) const {
        return current_block > int(config.gen_len / config.block_size);
    }
};

struct StepRecord {
    int64_t step = 0;
    int current_block = 1;
    int64_t active_token_count = 0;
    bool anchor_present = false;
    std::vector<int64_t> committed_positions;
    std::vector<int32_t> committed_tokens;
    double max_confidence = 0.0;  // highest commit confidence this step
};

struct DecodeTrace {
    Mode mode = Mode::baseline;
    int64_t prompt_len = 0;
    int64_t gen_len = 0;
    int64_t block_size = 0;
    uint64_t seed = 0;
    std::vector<StepRecord> records;
    std::vector<int32_t> final_ids;  // generated region, truncated on early stop
    bool early_stopped = false;
    int64_t eos_position = -1;  // absolute coordinate of the stopping [EOS]
};

// Handed to the observer after each forward pass, before any commit.
struct StepView {
    const DenoiseState& state;
    const layout::LayoutSelection& selection;
    const std::vector<int32_t>& entry_tokens;
    const std::vector<int64_t>& coords;  // coordinates fed to the model
    const model::Mat<float>& logits;
};
using StepObserver = std::function<void(const StepView&)>;

DenoiseState make_initial_state(const std::vector<int32_t>& prompt,
                                const model::ModelConfig& model_config,
                                const DecodeConfig& config);

// One forward pass plus the ceil-spread confidence commit for the current
// block. Advances the block index once its last position commits.
StepRecord denoise_step(DenoiseState& state, const model::Weights& weights,
                        const DecodeConfig& config, const StepObserver& observer = nullptr);

DecodeTrace decode(const std::vector<int32_t>& prompt, const model::Weights& weights,
                   const DecodeConfig& config, const StepObserver& observer = nullptr);

// block index -> source block whose coordinates it borrows
using BlockRemap = std::unordered_map<int, int>;

DecodeTrace decode_with_remap(const std::vector<int32_t>& prompt, const model::Weights& weights,
                              const DecodeConfig& config, const BlockRemap& remap,
                              const StepObserver& observer = nullptr);

// One JSON object per step record, then one summary object.
void write_trace_jsonl(const DecodeTrace& trace, std::ostream& out);

}  // namespace edlm::decode
