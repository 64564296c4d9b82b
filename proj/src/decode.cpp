#include "edlm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "json.hpp"

namespace edlm::decode {

const char* mode_name(Mode mode) {
    switch (mode) {
        case Mode::baseline: return "baseline";
        case Mode::elastic: return "elastic";
        case Mode::elastic_fold: return "elastic_fold";
        case Mode::block_anchor: return "block_anchor";
    }
    return "unknown";
}

Mode mode_from_name(const std::string& name) {
    if (name == "baseline") return Mode::baseline;
    if (name == "elastic") return Mode::elastic;
    if (name == "elastic_fold") return Mode::elastic_fold;
    if (name == "block_anchor") return Mode::block_anchor;
    throw BadConfigError("unknown decode mode: " + name);
}

void DecodeConfig::validate() const {
    retention.validate();
    if (gen_len < 1 || block_size < 1) {
        throw BadConfigError("gen_len and block_size must be positive");
    }
    if (gen_len % block_size != 0) {
        throw NonDivisibleError("block_size must divide gen_len");
    }
    if (steps_per_block < 1 || int64_t(steps_per_block) > block_size) {
        throw BadConfigError("steps_per_block must lie in [1, block_size]");
    }
    if (temperature != 0.0) {
        throw BadConfigError("only greedy decoding (temperature 0) is supported");
    }
    if (eos_early_stop && mode != Mode::block_anchor) {
        throw BadConfigError("eos_early_stop applies to block_anchor mode only");
    }
    if (mode == Mode::block_anchor && !retention.anchor.has_value()) {
        throw BadConfigError("block_anchor mode needs an anchor config");
    }
    if (mode == Mode::elastic_fold && !retention.fold_enabled) {
        throw BadConfigError("elastic_fold mode needs fold_enabled");
    }
}

namespace {

// Baseline keeps every planned position. Built with a plain loop on purpose:
// the elastic path must reproduce this without sharing its construction.
layout::LayoutSelection dense_selection(const layout::BlockPartition& part, int c) {
    layout::LayoutSelection sel;
    sel.entries.reserve(size_t(part.total_len()));
    for (int64_t pos = 0; pos < part.total_len(); ++pos) {
        layout::Role role;
        if (pos < part.prompt_len) {
            role = layout::Role::prompt;
        } else {
            const int j = part.block_of(pos);
            if (j == c) role = layout::Role::current;
            else if (j < c) role = layout::Role::decoded_dense;
            else if (j == part.num_blocks) role = layout::Role::terminal;
            else role = layout::Role::mask_sample;
        }
        sel.entries.push_back({pos, role});
    }
    return sel;
}

struct StepPlan {
    layout::LayoutSelection selection;
    std::vector<int32_t> tokens;
    std::vector<int64_t> coords;
    model::VisibilitySpec vis;
};

StepPlan plan_step(const DenoiseState& state, const model::ModelConfig& mc,
                   const DecodeConfig& config, const layout::BlockPartition& part,
                   const BlockRemap* remap) {
    const int c = state.current_block;
    StepPlan plan;
    switch (config.mode) {
        case Mode::baseline:
            plan.selection = dense_selection(part, c);
            break;
        case Mode::elastic:
            plan.selection = layout::build_retention_set(part, c, config.retention);
            break;
        case Mode::elastic_fold:
            plan.selection = layout::build_fold_set(part, c, config.retention);
            break;
        case Mode::block_anchor: {
            const int64_t history = part.prompt_len + int64_t(c - 1) * part.block_size;
            plan.selection =
                layout::build_block_augmented_set(history, c, part, *config.retention.anchor);
            break;
        }
    }

    const auto& sel = plan.selection;
    std::unordered_map<int64_t, int64_t> ranks;
    if (config.retention.position_mode == layout::PositionMode::compact_rank) {
        ranks = layout::compact_ranks(sel);
    }
    plan.tokens.reserve(sel.size());
    plan.coords.reserve(sel.size());
    for (const auto& e : sel.entries) {
        if (e.role == layout::Role::anchor) {
            const bool eos_content =
                config.retention.anchor->content == layout::AnchorContent::eos_token;
            plan.tokens.push_back(eos_content ? mc.specials.eos : mc.specials.mask);
        } else {
            plan.tokens.push_back(state.masked[size_t(e.position)] ? mc.specials.mask
                                                                   : state.tokens[size_t(e.position)]);
        }

        int64_t coord = rope::position_for_entry(e, config.retention.position_mode, ranks);
        if (remap != nullptr && e.role != layout::Role::anchor && e.position >= part.prompt_len) {
            const int j = part.block_of(e.position);
            const auto it = remap->find(j);
            if (it != remap->end()) {
                coord = e.position - part.block_start(j) + part.block_start(it->second);
            }
        }
        plan.coords.push_back(coord);
    }

    const auto anchor_attention = config.retention.anchor
                                      ? config.retention.anchor->attention
                                      : layout::AnchorAttention::main_only_sees;
    plan.vis = model::VisibilitySpec::for_selection(sel, anchor_attention);
    return plan;
}

StepRecord step_impl(DenoiseState& state, const model::Weights& weights,
                     const DecodeConfig& config, const layout::BlockPartition& part,
                     const BlockRemap* remap, const StepObserver& observer) {
    const int c = state.current_block;
    const auto plan = plan_step(state, weights.config, config, part, remap);
    const auto logits = model::forward(weights, plan.tokens, plan.coords, plan.vis);

    if (observer) {
        observer(StepView{state, plan.selection, plan.tokens, plan.coords, logits});
    }

    // confidence of a masked slot = its highest softmax probability
    struct Candidate {
        int64_t pos;
        double confidence;
        int32_t token;
    };
    std::vector<Candidate> candidates;
    const int vocab = weights.config.vocab_size;
    for (size_t i = 0; i < plan.selection.entries.size(); ++i) {
        const auto& e = plan.selection.entries[i];
        if (e.role != layout::Role::current || !state.masked[size_t(e.position)]) continue;
        double best = double(logits(Eigen::Index(i), 0));
        int32_t arg = 0;
        for (int t = 1; t < vocab; ++t) {
            const double v = double(logits(Eigen::Index(i), t));
            if (v > best) {
                best = v;
                arg = int32_t(t);
            }
        }
        double denom = 0.0;
        for (int t = 0; t < vocab; ++t) {
            denom += std::exp(double(logits(Eigen::Index(i), t)) - best);
        }
        candidates.push_back({e.position, 1.0 / denom, arg});
    }
    if (candidates.empty()) {
        throw TraceMismatchError("current block has no masked positions to commit");
    }

    // ceil-spread schedule: finish the block in exactly steps_per_block steps
    const int64_t step_in_block = state.step - int64_t(c - 1) * config.steps_per_block;
    const int64_t remaining_steps = config.steps_per_block - step_in_block;
    if (remaining_steps < 1) {
        throw TraceMismatchError("commit schedule overran the block budget");
    }
    const int64_t quota =
        (int64_t(candidates.size()) + remaining_steps - 1) / remaining_steps;
    if (quota > int64_t(candidates.size())) {
        throw TraceMismatchError("commit quota exceeds the masked positions left");
    }

    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.pos < b.pos;  // ties commit the lowest position first
    });

    StepRecord rec;
    rec.step = state.step;
    rec.current_block = c;
    rec.active_token_count = int64_t(plan.selection.size());
    rec.anchor_present = plan.selection.has_anchor();
    rec.max_confidence = candidates.front().confidence;
    for (int64_t i = 0; i < quota; ++i) {
        const auto& cand = candidates[size_t(i)];
        state.tokens[size_t(cand.pos)] = cand.token;
        state.masked[size_t(cand.pos)] = 0;
        rec.committed_positions.push_back(cand.pos);
        rec.committed_tokens.push_back(cand.token);
    }
    state.step += 1;

    bool block_done = true;
    for (int64_t pos = part.block_start(c); pos < part.block_end(c) && block_done; ++pos) {
        block_done = state.masked[size_t(pos)] == 0;
    }
    if (block_done) state.current_block += 1;
    return rec;
}

DecodeTrace run_decode(const std::vector<int32_t>& prompt, const model::Weights& weights,
                       const DecodeConfig& config, const BlockRemap* remap,
                       const StepObserver& observer) {
    config.validate();
    auto state = make_initial_state(prompt, weights.config, config);
    const auto part =
        layout::partition_blocks(state.prompt_len, config.gen_len, config.block_size);

    DecodeTrace trace;
    trace.mode = config.mode;
    trace.prompt_len = part.prompt_len;
    trace.gen_len = part.gen_len;
    trace.block_size = part.block_size;
    trace.seed = config.seed;

    while (!state.finished(config)) {
        const int before = state.current_block;
        trace.records.push_back(step_impl(state, weights, config, part, remap, observer));
        if (config.eos_early_stop && state.current_block != before) {
            for (int64_t pos = part.prompt_len; pos < part.block_end(before); ++pos) {
                if (state.tokens[size_t(pos)] == weights.config.specials.eos) {
                    trace.early_stopped = true;
                    trace.eos_position = pos;
                    break;
                }
            }
            if (trace.early_stopped) break;
        }
    }

    const int64_t end = trace.early_stopped ? trace.eos_position + 1 : part.total_len();
    trace.final_ids.assign(state.tokens.begin() + part.prompt_len, state.tokens.begin() + end);
    return trace;
}

}  // namespace

DenoiseState make_initial_state(const std::vector<int32_t>& prompt,
                                const model::ModelConfig& model_config,
                                const DecodeConfig& config) {
    config.validate();
    model_config.validate();
    for (int32_t id : prompt) {
        if (id < 0 || id >= model_config.vocab_size) {
            throw IndexOutOfRangeError("prompt token " + std::to_string(id) + " outside the vocab");
        }
    }
    DenoiseState state;
    state.prompt_len = int64_t(prompt.size());
    const size_t total = prompt.size() + size_t(config.gen_len);
    state.tokens.assign(total, model_config.specials.mask);
    std::copy(prompt.begin(), prompt.end(), state.tokens.begin());
    state.masked.assign(total, 1);
    std::fill(state.masked.begin(), state.masked.begin() + std::ptrdiff_t(prompt.size()), 0);
    return state;
}

StepRecord denoise_step(DenoiseState& state, const model::Weights& weights,
                        const DecodeConfig& config, const StepObserver& observer) {
    config.validate();
    if (state.finished(config)) {
        throw IndexOutOfRangeError("all blocks are already committed");
    }
    const auto part =
        layout::partition_blocks(state.prompt_len, config.gen_len, config.block_size);
    if (state.total_len() != part.total_len()) {
        throw DimensionMismatchError("state length does not match the configured span");
    }
    return step_impl(state, weights, config, part, nullptr, observer);
}

DecodeTrace decode(const std::vector<int32_t>& prompt, const model::Weights& weights,
                   const DecodeConfig& config, const StepObserver& observer) {
    return run_decode(prompt, weights, config, nullptr, observer);
}

DecodeTrace decode_with_remap(const std::vector<int32_t>& prompt, const model::Weights& weights,
                              const DecodeConfig& config, const BlockRemap& remap,
                              const StepObserver& observer) {
    config.validate();
    if (config.retention.position_mode != layout::PositionMode::preserved) {
        throw BadConfigError("coordinate remapping requires preserved positions");
    }
    const int num_blocks = int(config.gen_len / config.block_size);
    for (const auto& [block, source] : remap) {
        if (block < 1 || block > num_blocks || source < 1 || source > num_blocks) {
            throw IndexOutOfRangeError("remap entry outside blocks 1.." +
                                       std::to_string(num_blocks));
        }
    }
    return run_decode(prompt, weights, config, &remap, observer);
}

void write_trace_jsonl(const DecodeTrace& trace, std::ostream& out) {
    using nlohmann::json;
    for (const auto& r : trace.records) {
        const json line{{"step", r.step},
                        {"current_block", r.current_block},
                        {"active_token_count", r.active_token_count},
                        {"anchor_present", r.anchor_present},
                        {"committed_positions", r.committed_positions},
                        {"committed_tokens", r.committed_tokens},
                        {"max_confidence", r.max_confidence}};
        out << line.dump() << "\n";
    }
    const json summary{{"summary", true},
                       {"mode", mode_name(trace.mode)},
                       {"prompt_len", trace.prompt_len},
                       {"gen_len", trace.gen_len},
                       {"block_size", trace.block_size},
                       {"seed", trace.seed},
                       {"steps", trace.records.size()},
                       {"early_stopped", trace.early_stopped},
                       {"eos_position", trace.eos_position},
                       {"final_ids", trace.final_ids}};
    out << summary.dump() << "\n";
}

}  // namespace edlm::decode
