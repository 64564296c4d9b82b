#include "edlm/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>

namespace edlm::diagnostics {

namespace {

// Layout-module recomputation of what decode should have kept at block c.
int64_t expected_active_tokens(const layout::BlockPartition& part,
                               const decode::DecodeConfig& config, int c) {
    switch (config.mode) {
        case decode::Mode::baseline:
            return part.total_len();
        case decode::Mode::elastic:
            return int64_t(layout::build_retention_set(part, c, config.retention).size());
        case decode::Mode::elastic_fold:
            return int64_t(layout::build_fold_set(part, c, config.retention).size());
        case decode::Mode::block_anchor: {
            const int64_t history = part.prompt_len + int64_t(c - 1) * part.block_size;
            return int64_t(
                layout::build_block_augmented_set(history, c, part, *config.retention.anchor)
                    .size());
        }
    }
    throw BadConfigError("unknown decode mode");
}

std::ofstream open_binary(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    return out;
}

std::ofstream open_text(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    return out;
}

}  // namespace

CostReport cost_report(const layout::BlockPartition& partition,
                       const decode::DecodeConfig& config,
                       const model::ModelConfig& model_config,
                       const decode::DecodeTrace& trace) {
    config.validate();
    model_config.validate();
    if (trace.records.empty()) throw BadConfigError("trace holds no steps");
    if (trace.mode != config.mode) {
        throw TraceMismatchError("trace was produced under a different mode");
    }

    const double flops_per_pair =
        2.0 * model_config.head_dim() * model_config.num_heads * model_config.num_layers;
    const auto total_len = partition.total_len();

    CostReport report;
    report.mode = config.mode;
    report.steps.reserve(trace.records.size());
    int64_t active_sum = 0;
    for (const auto& rec : trace.records) {
        const int64_t expected = expected_active_tokens(partition, config, rec.current_block);
        if (expected != rec.active_token_count) {
            throw TraceMismatchError(
                "step " + std::to_string(rec.step) + " recorded " +
                std::to_string(rec.active_token_count) + " active tokens, layout says " +
                std::to_string(expected));
        }
        CostStep step;
        step.step = rec.step;
        step.active_tokens = expected;
        step.attention_pairs = expected * expected;
        step.estimated_attention_flops = double(step.attention_pairs) * flops_per_pair;
        step.token_ratio = double(expected) / double(total_len);
        active_sum += expected;
        report.total_pairs_mode += step.attention_pairs;
        report.total_pairs_baseline += total_len * total_len;
        report.steps.push_back(step);
    }
    report.pair_ratio = double(report.total_pairs_mode) / double(report.total_pairs_baseline);
    report.token_ratio =
        double(active_sum) / double(int64_t(trace.records.size()) * total_len);
    return report;
}

nlohmann::json cost_report_to_json(const CostReport& report) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : report.steps) {
        steps.push_back({{"step", s.step},
                         {"active_tokens", s.active_tokens},
                         {"attention_pairs", s.attention_pairs},
                         {"estimated_attention_flops", s.estimated_attention_flops},
                         {"token_ratio", s.token_ratio}});
    }
    return nlohmann::json{{"mode", decode::mode_name(report.mode)},
                          {"steps", std::move(steps)},
                          {"total_pairs_baseline", report.total_pairs_baseline},
                          {"total_pairs_mode", report.total_pairs_mode},
                          {"pair_ratio", report.pair_ratio},
                          {"token_ratio", report.token_ratio}};
}

void write_cost_csv(const CostReport& report, std::ostream& out) {
    out << "step,active_tokens,attention_pairs,estimated_attention_flops,token_ratio\n";
    char line[160];
    for (const auto& s : report.steps) {
        std::snprintf(line, sizeof(line), "%lld,%lld,%lld,%.17g,%.17g\n",
                      static_cast<long long>(s.step), static_cast<long long>(s.active_tokens),
                      static_cast<long long>(s.attention_pairs), s.estimated_attention_flops,
                      s.token_ratio);
        out << line;
    }
}

EosTrace eos_trace(const std::vector<int32_t>& prompt, const model::Weights& weights,
                   const decode::DecodeConfig& config) {
    if (config.mode != decode::Mode::baseline) {
        throw BadConfigError("eos trace needs the full-sequence baseline mode");
    }
    config.validate();

    const auto part = layout::partition_blocks(int64_t(prompt.size()), config.gen_len,
                                               config.block_size);
    const int32_t eos = weights.config.specials.eos;
    const int vocab = weights.config.vocab_size;

    EosTrace trace;
    const auto observer = [&](const decode::StepView& view) {
        double best_prob = -1.0;
        int64_t best_pos = -1;
        for (size_t i = 0; i < view.selection.entries.size(); ++i) {
            const auto& e = view.selection.entries[i];
            if (e.role == layout::Role::anchor || !view.state.masked[size_t(e.position)]) {
                continue;
            }
            double max_logit = double(view.logits(Eigen::Index(i), 0));
            for (int t = 1; t < vocab; ++t) {
                max_logit = std::max(max_logit, double(view.logits(Eigen::Index(i), t)));
            }
            double denom = 0.0;
            for (int t = 0; t < vocab; ++t) {
                denom += std::exp(double(view.logits(Eigen::Index(i), t)) - max_logit);
            }
            const double prob =
                std::exp(double(view.logits(Eigen::Index(i), eos)) - max_logit) / denom;
            if (prob > best_prob) {  // ties keep the lowest position
                best_prob = prob;
                best_pos = e.position;
            }
        }
        trace.records.push_back({view.state.step, best_pos});
    };

    trace.decode_trace = decode::decode(prompt, weights, config, observer);
    for (size_t i = 0; i < trace.decode_trace.final_ids.size(); ++i) {
        if (trace.decode_trace.final_ids[i] == eos) {
            trace.final_eos_position = part.prompt_len + int64_t(i);
            break;
        }
    }

    const auto early = std::max<size_t>(1, trace.records.size() / 4);
    const int64_t last_block_start = part.block_start(part.num_blocks);
    size_t hits = 0;
    for (size_t i = 0; i < early; ++i) {
        const int64_t pos = trace.records[i].argmax_eos_position;
        if (pos >= last_block_start && pos < part.block_end(part.num_blocks)) ++hits;
    }
    trace.early_terminal_fraction = double(hits) / double(early);
    return trace;
}

nlohmann::json eos_trace_to_json(const EosTrace& trace) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : trace.records) {
        records.push_back({{"step", r.step}, {"argmax_eos_position", r.argmax_eos_position}});
    }
    return nlohmann::json{{"records", std::move(records)},
                          {"final_eos_position", trace.final_eos_position},
                          {"early_terminal_fraction", trace.early_terminal_fraction}};
}

ForwardInputs capture_step_inputs(const std::vector<int32_t>& prompt,
                                  const model::Weights& weights,
                                  const decode::DecodeConfig& config, int64_t step_index) {
    config.validate();
    const int64_t total_steps =
        (config.gen_len / config.block_size) * int64_t(config.steps_per_block);
    if (step_index < 0 || step_index >= total_steps) {
        throw IndexOutOfRangeError("step " + std::to_string(step_index) + " outside 0.." +
                                   std::to_string(total_steps - 1));
    }

    ForwardInputs captured;
    bool found = false;
    const auto observer = [&](const decode::StepView& view) {
        if (view.state.step != step_index) return;
        captured.selection = view.selection;
        captured.tokens = view.entry_tokens;
        captured.coords = view.coords;
        const auto anchor_attention = config.retention.anchor
                                          ? config.retention.anchor->attention
                                          : layout::AnchorAttention::main_only_sees;
        captured.vis = model::VisibilitySpec::for_selection(view.selection, anchor_attention);
        found = true;
    };
    decode::decode(prompt, weights, config, observer);
    if (!found) {
        throw IndexOutOfRangeError("decode stopped before step " + std::to_string(step_index));
    }
    return captured;
}

QuadrantMeans quadrant_means(const model::Mat<float>& probs,
                             const std::vector<int32_t>& tokens, int32_t mask_id) {
    const auto n = probs.rows();
    if (n != probs.cols() || size_t(n) != tokens.size()) {
        throw DimensionMismatchError("attention matrix and token list disagree");
    }
    double sums[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
    int64_t counts[2][2] = {{0, 0}, {0, 0}};
    for (Eigen::Index q = 0; q < n; ++q) {
        const int qm = tokens[size_t(q)] == mask_id ? 0 : 1;
        for (Eigen::Index k = 0; k < n; ++k) {
            const int km = tokens[size_t(k)] == mask_id ? 0 : 1;
            sums[qm][km] += double(probs(q, k));
            counts[qm][km] += 1;
        }
    }
    const auto mean = [&](int a, int b) {
        return counts[a][b] == 0 ? 0.0 : sums[a][b] / double(counts[a][b]);
    };
    return QuadrantMeans{mean(0, 0), mean(0, 1), mean(1, 0), mean(1, 1)};
}

nlohmann::json attention_dump(const model::Weights& weights, const ForwardInputs& inputs,
                              const std::vector<int>& layers, const std::vector<int>& heads,
                              const std::string& path_prefix) {
    if (layers.empty() || heads.empty()) {
        throw BadConfigError("need at least one layer and one head");
    }
    const auto n = int64_t(inputs.selection.size());
    const std::string bin_path = path_prefix + ".bin";
    const std::string json_path = path_prefix + ".json";
    auto bin = open_binary(bin_path);

    nlohmann::json matrices = nlohmann::json::array();
    int64_t offset = 0;  // in floats
    for (int layer : layers) {
        for (int head : heads) {
            const auto probs = model::capture_attention(weights, inputs.tokens, inputs.coords,
                                                        inputs.vis, layer, head);
            bin.write(reinterpret_cast<const char*>(probs.data()),
                      std::streamsize(sizeof(float)) * probs.size());
            const auto quads =
                quadrant_means(probs, inputs.tokens, weights.config.specials.mask);
            matrices.push_back({{"layer", layer},
                                {"head", head},
                                {"offset", offset},
                                {"rows", n},
                                {"cols", n},
                                {"quadrant_means",
                                 {{"mask_to_mask", quads.mask_to_mask},
                                  {"mask_to_other", quads.mask_to_other},
                                  {"other_to_mask", quads.other_to_mask},
                                  {"other_to_other", quads.other_to_other}}}});
            offset += int64_t(probs.size());
        }
    }
    bin.close();
    if (!bin) throw std::runtime_error("failed writing " + bin_path);

    nlohmann::json roles = nlohmann::json::array();
    nlohmann::json positions = nlohmann::json::array();
    for (const auto& e : inputs.selection.entries) {
        roles.push_back(layout::role_name(e.role));
        positions.push_back(e.position);
    }
    nlohmann::json sidecar{{"n", n},
                           {"bin_file", bin_path},
                           {"dtype", "f32"},
                           {"mask_token_id", weights.config.specials.mask},
                           {"tokens", inputs.tokens},
                           {"roles", std::move(roles)},
                           {"positions", std::move(positions)},
                           {"coordinates", inputs.coords},
                           {"matrices", std::move(matrices)}};
    auto side = open_text(json_path);
    side << sidecar.dump(2) << "\n";
    side.close();
    if (!side) throw std::runtime_error("failed writing " + json_path);
    return sidecar;
}

void hidden_dump(const model::Weights& weights, const ForwardInputs& inputs, int layer,
                 const std::string& path) {
    const auto hidden =
        model::capture_hidden(weights, inputs.tokens, inputs.coords, inputs.vis, layer);
    auto out = open_text(path);
    out << "entry_index,role,coordinate";
    for (Eigen::Index j = 0; j < hidden.cols(); ++j) out << ",h" << j;
    out << "\n";
    char cell[48];
    for (Eigen::Index i = 0; i < hidden.rows(); ++i) {
        const auto& e = inputs.selection.entries[size_t(i)];
        out << i << "," << layout::role_name(e.role) << "," << inputs.coords[size_t(i)];
        for (Eigen::Index j = 0; j < hidden.cols(); ++j) {
            std::snprintf(cell, sizeof(cell), ",%.9g", double(hidden(i, j)));
            out << cell;
        }
        out << "\n";
    }
    out.close();
    if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace edlm::diagnostics
