#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "edlm/decode.hpp"
#include "edlm/model.hpp"
#include "json.hpp"

namespace edlm::diagnostics {

struct CostStep {
    int64_t step = 0;
    int64_t active_tokens = 0;
    int64_t attention_pairs = 0;  // active_tokens squared
    double estimated_attention_flops = 0.0;
    double token_ratio = 0.0;  // active_tokens over the full sequence length
};

struct CostReport {
    decode::Mode mode = decode::Mode::baseline;
    std::vector<CostStep> steps;
    int64_t total_pairs_baseline = 0;
    int64_t total_pairs_mode = 0;
    double pair_ratio = 0.0;
    double token_ratio = 0.0;
};

// Recomputes every step's active-token count from the layout module alone
// and cross-checks the trace's recorded counts; any disagreement means
// decode and layout diverged, which TraceMismatch reports.
CostReport cost_report(const layout::BlockPartition& partition,
                       const decode::DecodeConfig& config,
                       const model::ModelConfig& model_config,
                       const decode::DecodeTrace& trace);

nlohmann::json cost_report_to_json(const CostReport& report);
void write_cost_csv(const CostReport& report, std::ostream& out);

struct EosTraceRecord {
    int64_t step = 0;
    int64_t argmax_eos_position = -1;  // masked position most expecting [EOS]
};

struct EosTrace {
    std::vector<EosTraceRecord> records;  // one per denoising step
    int64_t final_eos_position = -1;      // first [EOS] in the output, -1 when absent
    double early_terminal_fraction = 0.0; // first-quarter records landing in the last block
    decode::DecodeTrace decode_trace;
};

// Runs a full-sequence (baseline) decode and records, after each forward
// pass, which still-masked position assigns [EOS] the highest probability.
EosTrace eos_trace(const std::vector<int32_t>& prompt, const model::Weights& weights,
                   const decode::DecodeConfig& config);

nlohmann::json eos_trace_to_json(const EosTrace& trace);

// Everything the model saw at one decode step, for offline inspection.
struct ForwardInputs {
    layout::LayoutSelection selection;
    std::vector<int32_t> tokens;
    std::vector<int64_t> coords;
    model::VisibilitySpec vis;
};

ForwardInputs capture_step_inputs(const std::vector<int32_t>& prompt,
                                  const model::Weights& weights,
                                  const decode::DecodeConfig& config, int64_t step_index);

struct QuadrantMeans {
    double mask_to_mask = 0.0;
    double mask_to_other = 0.0;
    double other_to_mask = 0.0;
    double other_to_other = 0.0;
};

// Mean attention within and across the [MASK]-token / non-mask partition
// of the entries. Empty quadrants report 0.
QuadrantMeans quadrant_means(const model::Mat<float>& probs,
                             const std::vector<int32_t>& tokens, int32_t mask_id);

// Writes <prefix>.bin holding the requested attention matrices (row-major
// f32, back to back, one per layer x head combination) plus a <prefix>.json
// sidecar with the entry roles, coordinates, tokens, per-matrix offsets,
// and in-process quadrant means. Returns the sidecar document.
nlohmann::json attention_dump(const model::Weights& weights, const ForwardInputs& inputs,
                              const std::vector<int>& layers, const std::vector<int>& heads,
                              const std::string& path_prefix);

// CSV of the residual stream after `layer` blocks: entry_index, role,
// coordinate, then the d_model values.
void hidden_dump(const model::Weights& weights, const ForwardInputs& inputs, int layer,
                 const std::string& path);

}  // namespace edlm::diagnostics
