#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "edlm/decode.hpp"
#include "edlm/diagnostics.hpp"
#include "edlm/model.hpp"
#include "edlm/prng.hpp"
#include "edlm/reference.hpp"
#include "edlm/rope.hpp"
#include "edlm/runconfig.hpp"
#include "edlm/train.hpp"
#include "json.hpp"

namespace {

using namespace edlm;

// ---- config plumbing -------------------------------------------------

struct ConfigFlags {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
    cmd->add_option("--config", flags.config_path,
                    "key=value config file (default: $EDLM_CONFIG if set)");
    for (const auto& key : runconfig::key_names()) {
        auto& slot = flags.values[key];
        flags.options[key] =
            cmd->add_option(runconfig::flag_name(key), slot, "override config key " + key);
    }
}

runconfig::RunConfig resolve_config(const ConfigFlags& flags) {
    runconfig::RunConfig rc;
    std::string path = flags.config_path;
    if (path.empty()) {
        if (const char* env = std::getenv("EDLM_CONFIG"); env != nullptr && *env != '\0') {
            path = env;
        }
    }
    if (!path.empty()) rc = runconfig::load_file(path);
    for (const auto& key : runconfig::key_names()) {
        const auto it = flags.options.find(key);
        if (it != flags.options.end() && it->second->count() > 0) {
            runconfig::apply(rc, key, flags.values.at(key));
        }
    }
    rc.normalize();
    return rc;
}

nlohmann::json config_json(const runconfig::RunConfig& rc) {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& [key, value] : runconfig::to_map(rc)) doc[key] = value;
    return doc;
}

void write_resolved_file(const runconfig::RunConfig& rc, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    runconfig::write_file(rc, out);
}

void echo_config(const runconfig::RunConfig& rc) { runconfig::write_file(rc, std::cout); }

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_json_file(const nlohmann::json& doc, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << doc.dump(2) << "\n";
}

// ---- train ------------------------------------------------------------

int cmd_train(runconfig::RunConfig rc, const std::string& out_prefix) {
    rc.model.validate();
    const auto corpus = train::generate_corpus(rc.corpus);
    auto weights = model::init_weights(rc.model);
    const auto curve = train::train(weights, corpus, rc.train);

    model::save_weights(weights, out_prefix + ".weights");
    std::ofstream csv(out_prefix + ".loss.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open " + out_prefix + ".loss.csv for writing");
    train::write_loss_csv(curve, csv);
    write_resolved_file(rc, out_prefix + ".resolved.cfg");

    echo_config(rc);
    std::cout << "steps=" << curve.size() << "\n"
              << "first_loss=" << fmt_double(curve.front()) << "\n"
              << "last_loss=" << fmt_double(curve.back()) << "\n"
              << "wrote=" << out_prefix << ".weights," << out_prefix << ".loss.csv\n";
    return 0;
}

// ---- decode / cost ----------------------------------------------------

int cmd_decode(runconfig::RunConfig rc, const std::string& weights_path,
               const std::string& out_prefix, bool with_trace) {
    const auto weights = model::load_weights(weights_path);
    rc.model = weights.config;
    rc.normalize();

    const auto trace = decode::decode(rc.prompt, weights, rc.decode);
    const auto part = layout::partition_blocks(int64_t(rc.prompt.size()), rc.decode.gen_len,
                                               rc.decode.block_size);
    const auto report = diagnostics::cost_report(part, rc.decode, weights.config, trace);

    if (with_trace) {
        std::ofstream jsonl(out_prefix + ".trace.jsonl", std::ios::trunc);
        if (!jsonl) {
            throw std::runtime_error("cannot open " + out_prefix + ".trace.jsonl for writing");
        }
        decode::write_trace_jsonl(trace, jsonl);
        jsonl << nlohmann::json{{"resolved_config", config_json(rc)}}.dump() << "\n";
    }

    auto cost_doc = diagnostics::cost_report_to_json(report);
    cost_doc["resolved_config"] = config_json(rc);
    write_json_file(cost_doc, out_prefix + ".cost.json");
    std::ofstream cost_csv(out_prefix + ".cost.csv", std::ios::trunc);
    if (!cost_csv) {
        throw std::runtime_error("cannot open " + out_prefix + ".cost.csv for writing");
    }
    diagnostics::write_cost_csv(report, cost_csv);
    write_resolved_file(rc, out_prefix + ".resolved.cfg");

    echo_config(rc);
    std::cout << "steps=" << trace.records.size() << "\n"
              << "early_stopped=" << (trace.early_stopped ? "true" : "false") << "\n"
              << "final_ids=" << runconfig::format_prompt(trace.final_ids) << "\n"
              << "pair_ratio=" << fmt_double(report.pair_ratio) << "\n"
              << "token_ratio=" << fmt_double(report.token_ratio) << "\n";
    return 0;
}

// ---- verify -----------------------------------------------------------

// Independent rebuild of the retention union out of std::set arithmetic.
std::set<int64_t> brute_retention(const layout::BlockPartition& part, int c,
                                  const layout::RetentionConfig& ret) {
    std::set<int64_t> keep;
    for (int64_t p = 0; p < part.prompt_len; ++p) keep.insert(p);
    const auto whole_block = [&](int j) {
        for (int64_t p = part.block_start(j); p < part.block_end(j); ++p) keep.insert(p);
    };
    const auto spaced = [&](int64_t start, int64_t len, int64_t n, bool endpoints) {
        if (n >= len) {
            for (int64_t p = start; p < start + len; ++p) keep.insert(p);
        } else if (endpoints) {
            for (int64_t k = 0; k < n; ++k) keep.insert(start + (k * (len - 1)) / (n - 1));
        } else {
            for (int64_t k = 0; k < n; ++k) keep.insert(start + (k * len) / n);
        }
    };
    if (ret.fold_enabled) {
        const int64_t dense_from = std::max<int64_t>(1, int64_t(c) - ret.k_recent);
        for (int j = int(dense_from); j < c; ++j) whole_block(j);
        for (int j = 1; j < int(dense_from); ++j) {
            spaced(part.block_start(j), part.block_size, ret.f, true);
        }
    } else {
        for (int j = 1; j < c; ++j) whole_block(j);
    }
    whole_block(c);
    whole_block(part.num_blocks);
    for (int j = c + 1; j < part.num_blocks; ++j) {
        spaced(part.block_start(j), part.block_size, ret.r, false);
    }
    return keep;
}

struct CheckOutcome {
    bool pass = true;
    std::string detail;
};

CheckOutcome check_layout_battery() {
    Prng rng(7);
    for (int it = 0; it < 200; ++it) {
        const int64_t prompt = rng.range(0, 40);
        const int64_t bs = rng.range(1, 16);
        const int blocks = int(rng.range(1, 8));
        const auto part = layout::partition_blocks(prompt, bs * blocks, bs);
        layout::RetentionConfig ret;
        ret.r = rng.range(1, bs + 4);
        ret.k_recent = rng.range(0, 5);
        ret.f = rng.range(2, bs + 2);
        ret.fold_enabled = rng.below(2) == 1;
        const int c = int(rng.range(1, blocks));

        const auto sel = ret.fold_enabled ? layout::build_fold_set(part, c, ret)
                                          : layout::build_retention_set(part, c, ret);
        const auto expect = brute_retention(part, c, ret);
        std::set<int64_t> got;
        int64_t prev = -1;
        bool has_current = false;
        for (const auto& e : sel.entries) {
            if (e.position <= prev) return {false, "positions not strictly increasing"};
            prev = e.position;
            got.insert(e.position);
            has_current = has_current || e.role == layout::Role::current;
        }
        if (got != expect) {
            return {false, "selection disagrees with the set-arithmetic rebuild at c=" +
                               std::to_string(c)};
        }
        if (!has_current) return {false, "current block missing"};
        if (!ret.fold_enabled && ret.r >= bs && int64_t(sel.size()) != part.total_len()) {
            return {false, "r >= block_size should keep everything"};
        }
    }
    return {};
}

CheckOutcome check_dense_equivalence(const model::Weights& weights) {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        Prng rng(seed);
        std::vector<int32_t> prompt(8);
        for (auto& id : prompt) id = int32_t(rng.below(uint64_t(weights.config.vocab_size)));

        decode::DecodeConfig dense;
        dense.mode = decode::Mode::baseline;
        dense.gen_len = 32;
        dense.block_size = 8;
        dense.steps_per_block = 8;
        auto elastic = dense;
        elastic.mode = decode::Mode::elastic;
        elastic.retention.r = 8;

        const auto a = decode::decode(prompt, weights, dense);
        const auto b = decode::decode(prompt, weights, elastic);
        if (a.final_ids != b.final_ids) {
            return {false, "elastic r=block_size diverged from baseline at seed " +
                               std::to_string(seed)};
        }
    }
    return {};
}

CheckOutcome check_attention_oracle(const model::Weights& weights) {
    Prng rng(99);
    double worst = 0.0;
    for (int it = 0; it < 5; ++it) {
        const auto part = layout::partition_blocks(8, 32, 8);
        layout::RetentionConfig ret;
        ret.r = rng.range(1, 3);
        const int c = int(rng.range(1, 4));
        const auto sel = layout::build_retention_set(part, c, ret);

        std::vector<int32_t> tokens(sel.size());
        std::vector<int64_t> coords(sel.size());
        for (size_t i = 0; i < sel.size(); ++i) {
            tokens[i] = int32_t(rng.below(uint64_t(weights.config.vocab_size)));
            coords[i] = sel.entries[i].position;
        }
        const auto vis = model::VisibilitySpec::full(int(sel.size()));
        const auto fast = model::forward(weights, tokens, coords, vis);
        const auto slow = reference::forward_logits(weights, tokens, coords, vis);

        double scale = 1.0;
        for (const auto& row : slow) {
            for (double v : row) scale = std::max(scale, std::abs(v));
        }
        for (size_t i = 0; i < sel.size(); ++i) {
            if (sel.entries[i].role != layout::Role::current) continue;
            for (int t = 0; t < weights.config.vocab_size; ++t) {
                worst = std::max(worst, std::abs(double(fast(Eigen::Index(i), t)) -
                                                 slow[i][size_t(t)]) /
                                            scale);
            }
        }
    }
    if (worst > 1e-5) {
        return {false, "engine vs reference scaled diff " + fmt_double(worst)};
    }
    return {true, "max scaled diff " + fmt_double(worst)};
}

CheckOutcome check_anchor_visibility(const model::Weights& weights) {
    const auto part = layout::partition_blocks(8, 32, 8);
    const layout::AnchorConfig anchor{};
    const auto sel = layout::build_block_augmented_set(16, 2, part, anchor);
    if (!sel.has_anchor()) return {false, "anchor missing from the augmented set"};
    const int n = int(sel.size());
    const int a = int(sel.anchor_index());

    const auto vis = model::VisibilitySpec::for_selection(
        sel, layout::AnchorAttention::main_only_sees);
    for (int k = 0; k < n; ++k) {
        if (vis.visible(a, k) != (k == a)) return {false, "anchor query row is not self-only"};
    }
    for (int q = 0; q < n; ++q) {
        if (!vis.visible(q, a)) return {false, "anchor key is hidden from a main query"};
    }

    Prng rng(5);
    std::vector<int32_t> tokens(sel.size());
    std::vector<int64_t> coords(sel.size());
    for (size_t i = 0; i < sel.size(); ++i) {
        tokens[i] = int32_t(rng.below(uint64_t(weights.config.vocab_size)));
        coords[i] = sel.entries[i].position;
    }
    const auto probs = model::capture_attention(weights, tokens, coords, vis, 0, 0);
    for (int k = 0; k < n; ++k) {
        const float expect = k == a ? 1.0f : 0.0f;
        if (probs(a, k) != expect) return {false, "anchor attention row is not one-hot"};
    }
    return {};
}

CheckOutcome check_rope_shift(const model::Weights& weights) {
    const auto params = weights.config.rope_params();
    Prng rng(11);
    std::vector<double> q(size_t(params.head_dim));
    std::vector<double> k(size_t(params.head_dim));
    for (auto& v : q) v = rng.normal();
    for (auto& v : k) v = rng.normal();

    const auto dot = [&](const std::vector<double>& x, const std::vector<double>& y) {
        double s = 0.0;
        for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
        return s;
    };
    const double near = dot(rope::rotate(params, 3, q), rope::rotate(params, 131, k));
    const double far = dot(rope::rotate(params, 4003, q), rope::rotate(params, 4131, k));
    const double diff = std::abs(near - far);
    if (diff > 1e-9) return {false, "offset-shifted dot products differ by " + fmt_double(diff)};
    return {true, "shift residual " + fmt_double(diff)};
}

CheckOutcome check_rope_composition(const model::Weights& weights) {
    const auto params = weights.config.rope_params();
    Prng rng(13);
    std::vector<double> v(size_t(params.head_dim));
    for (auto& x : v) x = rng.normal();
    const auto two_step = rope::rotate(params, 170, rope::rotate(params, 42, v));
    const auto direct = rope::rotate(params, 212, v);
    double diff = 0.0;
    for (size_t i = 0; i < v.size(); ++i) diff = std::max(diff, std::abs(two_step[i] - direct[i]));
    if (diff > 1e-9) return {false, "rotation composition residual " + fmt_double(diff)};
    return {true, "composition residual " + fmt_double(diff)};
}

CheckOutcome check_weights_roundtrip(const model::Weights& weights) {
    const auto path =
        (std::filesystem::temp_directory_path() / "edlm_verify_roundtrip.weights").string();
    model::save_weights(weights, path);
    const auto reloaded = model::load_weights(path);
    std::filesystem::remove(path);

    bool same = true;
    std::vector<std::pair<const float*, size_t>> a, b;
    model::for_each_tensor(weights, [&](const float* d, size_t n, const char*) {
        a.emplace_back(d, n);
    });
    model::for_each_tensor(reloaded, [&](const float* d, size_t n, const char*) {
        b.emplace_back(d, n);
    });
    if (a.size() != b.size()) same = false;
    for (size_t i = 0; same && i < a.size(); ++i) {
        same = a[i].second == b[i].second &&
               std::memcmp(a[i].first, b[i].first, a[i].second * sizeof(float)) == 0;
    }
    if (!same) return {false, "reloaded tensors differ"};
    return {};
}

CheckOutcome check_forward_determinism(const model::Weights& weights) {
    Prng rng(17);
    std::vector<int32_t> tokens(24);
    std::vector<int64_t> coords(24);
    for (size_t i = 0; i < tokens.size(); ++i) {
        tokens[i] = int32_t(rng.below(uint64_t(weights.config.vocab_size)));
        coords[i] = int64_t(i * 3);
    }
    const auto vis = model::VisibilitySpec::full(24);
    const auto a = model::forward(weights, tokens, coords, vis);
    const auto b = model::forward(weights, tokens, coords, vis);
    if (std::memcmp(a.data(), b.data(), sizeof(float) * size_t(a.size())) != 0) {
        return {false, "identical forwards returned different bits"};
    }
    return {};
}

int cmd_verify(runconfig::RunConfig rc, const std::string& weights_path) {
    const auto weights = model::load_weights(weights_path);
    rc.model = weights.config;
    rc.normalize();
    echo_config(rc);

    using Check = CheckOutcome (*)(const model::Weights&);
    const std::vector<std::pair<std::string, Check>> checks{
        {"layout-property-battery", [](const model::Weights&) { return check_layout_battery(); }},
        {"dense-path-equivalence", check_dense_equivalence},
        {"subsequence-attention-oracle", check_attention_oracle},
        {"anchor-visibility", check_anchor_visibility},
        {"rope-shift-invariance", check_rope_shift},
        {"rope-composition", check_rope_composition},
        {"weights-roundtrip", check_weights_roundtrip},
        {"forward-determinism", check_forward_determinism},
    };

    int passed = 0;
    for (const auto& [name, fn] : checks) {
        CheckOutcome outcome;
        try {
            outcome = fn(weights);
        } catch (const std::exception& e) {
            outcome = {false, e.what()};
        }
        if (outcome.pass) {
            ++passed;
            std::cout << "[PASS] " << name;
        } else {
            std::cout << "[FAIL] " << name;
        }
        if (!outcome.detail.empty()) std::cout << " (" << outcome.detail << ")";
        std::cout << "\n";
    }
    std::cout << "verify: " << passed << "/" << checks.size() << " checks passed\n";
    return passed == int(checks.size()) ? 0 : 1;
}

// ---- diagnostics commands ----------------------------------------------

int cmd_trace_eos(runconfig::RunConfig rc, const std::string& weights_path,
                  const std::string& out_prefix) {
    const auto weights = model::load_weights(weights_path);
    rc.model = weights.config;
    rc.normalize();

    const auto trace = diagnostics::eos_trace(rc.prompt, weights, rc.decode);
    auto doc = diagnostics::eos_trace_to_json(trace);
    doc["resolved_config"] = config_json(rc);
    write_json_file(doc, out_prefix + ".eos.json");

    std::ofstream csv(out_prefix + ".eos.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open " + out_prefix + ".eos.csv for writing");
    csv << "step,argmax_eos_position\n";
    for (const auto& rec : trace.records) {
        csv << rec.step << "," << rec.argmax_eos_position << "\n";
    }
    write_resolved_file(rc, out_prefix + ".resolved.cfg");

    echo_config(rc);
    std::cout << "records=" << trace.records.size() << "\n"
              << "final_eos_position=" << trace.final_eos_position << "\n"
              << "early_terminal_fraction=" << fmt_double(trace.early_terminal_fraction) << "\n";
    return 0;
}

int cmd_dump_attn(runconfig::RunConfig rc, const std::string& weights_path,
                  const std::string& out_prefix, const std::vector<int>& layers,
                  const std::vector<int>& heads, int64_t step) {
    const auto weights = model::load_weights(weights_path);
    rc.model = weights.config;
    rc.normalize();

    const auto inputs = diagnostics::capture_step_inputs(rc.prompt, weights, rc.decode, step);
    auto sidecar = diagnostics::attention_dump(weights, inputs, layers, heads, out_prefix);
    sidecar["resolved_config"] = config_json(rc);
    write_json_file(sidecar, out_prefix + ".json");
    write_resolved_file(rc, out_prefix + ".resolved.cfg");

    echo_config(rc);
    std::cout << "entries=" << sidecar["n"] << "\n"
              << "matrices=" << sidecar["matrices"].size() << "\n"
              << "wrote=" << out_prefix << ".bin," << out_prefix << ".json\n";
    return 0;
}

int cmd_dump_hidden(runconfig::RunConfig rc, const std::string& weights_path,
                    const std::string& out_path, int layer, int64_t step) {
    const auto weights = model::load_weights(weights_path);
    rc.model = weights.config;
    rc.normalize();
    if (layer < 0) layer = weights.config.num_layers;  // default: final stream

    const auto inputs = diagnostics::capture_step_inputs(rc.prompt, weights, rc.decode, step);
    diagnostics::hidden_dump(weights, inputs, layer, out_path);
    write_resolved_file(rc, out_path + ".resolved.cfg");

    echo_config(rc);
    std::cout << "entries=" << inputs.selection.size() << "\n"
              << "layer=" << layer << "\n"
              << "wrote=" << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked-diffusion decoding with elastic context retention"};
    app.require_subcommand(1);

    ConfigFlags train_flags, decode_flags, verify_flags, eos_flags, attn_flags, hidden_flags,
        cost_flags;
    std::string train_out;
    std::string decode_weights, decode_out;
    std::string verify_weights;
    std::string eos_weights, eos_out;
    std::string attn_weights, attn_out;
    std::string hidden_weights, hidden_out;
    std::string cost_weights, cost_out;
    std::vector<int> attn_layers{0};
    std::vector<int> attn_heads{0};
    int64_t attn_step = 0;
    int hidden_layer = -1;
    int64_t hidden_step = 0;

    auto* train_cmd = app.add_subcommand("train", "train a toy model on a synthetic corpus");
    add_config_flags(train_cmd, train_flags);
    train_cmd->add_option("--out", train_out, "output prefix")->required();

    auto* decode_cmd = app.add_subcommand("decode", "run a denoising decode");
    add_config_flags(decode_cmd, decode_flags);
    decode_cmd->add_option("--weights", decode_weights, "weights file")->required();
    decode_cmd->add_option("--out", decode_out, "output prefix")->required();

    auto* verify_cmd = app.add_subcommand("verify", "run the structural oracle suite");
    add_config_flags(verify_cmd, verify_flags);
    verify_cmd->add_option("--weights", verify_weights, "weights file")->required();

    auto* eos_cmd = app.add_subcommand("trace-eos", "trace [EOS] expectations per step");
    add_config_flags(eos_cmd, eos_flags);
    eos_cmd->add_option("--weights", eos_weights, "weights file")->required();
    eos_cmd->add_option("--out", eos_out, "output prefix")->required();

    auto* attn_cmd = app.add_subcommand("dump-attn", "dump attention matrices at one step");
    add_config_flags(attn_cmd, attn_flags);
    attn_cmd->add_option("--weights", attn_weights, "weights file")->required();
    attn_cmd->add_option("--out", attn_out, "output prefix")->required();
    attn_cmd->add_option("--layers", attn_layers, "layer indices")->delimiter(',');
    attn_cmd->add_option("--heads", attn_heads, "head indices")->delimiter(',');
    attn_cmd->add_option("--step", attn_step, "decode step to capture");

    auto* hidden_cmd = app.add_subcommand("dump-hidden", "dump the residual stream at one step");
    add_config_flags(hidden_cmd, hidden_flags);
    hidden_cmd->add_option("--weights", hidden_weights, "weights file")->required();
    hidden_cmd->add_option("--out", hidden_out, "output CSV path")->required();
    hidden_cmd->add_option("--layer", hidden_layer, "block count to run (default: all)");
    hidden_cmd->add_option("--step", hidden_step, "decode step to capture");

    auto* cost_cmd = app.add_subcommand("cost", "decode and report analytic attention cost");
    add_config_flags(cost_cmd, cost_flags);
    cost_cmd->add_option("--weights", cost_weights, "weights file")->required();
    cost_cmd->add_option("--out", cost_out, "output prefix")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help and friends
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(resolve_config(train_flags), train_out);
        if (decode_cmd->parsed()) {
            return cmd_decode(resolve_config(decode_flags), decode_weights, decode_out, true);
        }
        if (verify_cmd->parsed()) return cmd_verify(resolve_config(verify_flags), verify_weights);
        if (eos_cmd->parsed()) return cmd_trace_eos(resolve_config(eos_flags), eos_weights, eos_out);
        if (attn_cmd->parsed()) {
            return cmd_dump_attn(resolve_config(attn_flags), attn_weights, attn_out, attn_layers,
                                 attn_heads, attn_step);
        }
        if (hidden_cmd->parsed()) {
            return cmd_dump_hidden(resolve_config(hidden_flags), hidden_weights, hidden_out,
                                   hidden_layer, hidden_step);
        }
        if (cost_cmd->parsed()) {
            return cmd_decode(resolve_config(cost_flags), cost_weights, cost_out, false);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no command selected\n";
    return 2;
}
