#include "edlm/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace edlm::runconfig {

namespace {

int64_t parse_i64(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw BadConfigError(key + " needs an integer, got '" + value + "'");
    }
}

int32_t parse_i32(const std::string& key, const std::string& value) {
    return int32_t(parse_i64(key, value));
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw BadConfigError(key + " needs a non-negative integer, got '" + value + "'");
    }
}

double parse_f64(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw BadConfigError(key + " needs a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw BadConfigError(key + " needs true/false, got '" + value + "'");
}

std::string format_f64(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const char* position_mode_name(layout::PositionMode mode) {
    return mode == layout::PositionMode::preserved ? "preserved" : "compact_rank";
}

layout::PositionMode position_mode_from_name(const std::string& name) {
    if (name == "preserved") return layout::PositionMode::preserved;
    if (name == "compact_rank") return layout::PositionMode::compact_rank;
    throw BadConfigError("unknown position_mode: " + name);
}

const char* anchor_content_name(layout::AnchorContent content) {
    return content == layout::AnchorContent::mask_token ? "mask_token" : "eos_token";
}

layout::AnchorContent anchor_content_from_name(const std::string& name) {
    if (name == "mask_token") return layout::AnchorContent::mask_token;
    if (name == "eos_token") return layout::AnchorContent::eos_token;
    throw BadConfigError("unknown anchor_content: " + name);
}

const char* anchor_attention_name(layout::AnchorAttention attention) {
    return attention == layout::AnchorAttention::main_only_sees ? "main_only_sees"
                                                                : "bidirectional";
}

layout::AnchorAttention anchor_attention_from_name(const std::string& name) {
    if (name == "main_only_sees") return layout::AnchorAttention::main_only_sees;
    if (name == "bidirectional") return layout::AnchorAttention::bidirectional;
    throw BadConfigError("unknown anchor_attention: " + name);
}

std::string trim(const std::string& text) {
    const auto first = text.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = text.find_last_not_of(" \t\r");
    return text.substr(first, last - first + 1);
}

}  // namespace

void RunConfig::normalize() {
    corpus.vocab_size = model.vocab_size;
    if (decode.mode == decode::Mode::elastic_fold) {
        decode.retention.fold_enabled = true;
    }
    if (decode.mode == decode::Mode::block_anchor) {
        decode.retention.anchor = layout::AnchorConfig{anchor_content, anchor_attention};
    } else {
        decode.retention.anchor.reset();
    }
}

const std::vector<std::string>& key_names() {
    static const std::vector<std::string> keys{
        "vocab_size",     "d_model",        "num_heads",      "num_layers",
        "theta_base",     "init_seed",      "mode",           "gen_len",
        "block_size",     "steps_per_block", "temperature",   "eos_early_stop",
        "decode_seed",    "prompt",         "r",              "k_recent",
        "f",              "fold_enabled",   "position_mode",  "anchor_content",
        "anchor_attention", "task",         "seq_len",        "corpus_size",
        "corpus_seed",    "steps",          "batch_size",     "learning_rate",
        "train_seed"};
    return keys;
}

std::string flag_name(const std::string& key) {
    std::string flag = "--";
    for (char c : key) flag.push_back(c == '_' ? '-' : c);
    return flag;
}

void apply(RunConfig& c, const std::string& key, const std::string& value) {
    if (key == "vocab_size") c.model.vocab_size = parse_i32(key, value);
    else if (key == "d_model") c.model.d_model = parse_i32(key, value);
    else if (key == "num_heads") c.model.num_heads = parse_i32(key, value);
    else if (key == "num_layers") c.model.num_layers = parse_i32(key, value);
    else if (key == "theta_base") c.model.theta_base = parse_f64(key, value);
    else if (key == "init_seed") c.model.init_seed = parse_u64(key, value);
    else if (key == "mode") c.decode.mode = decode::mode_from_name(value);
    else if (key == "gen_len") c.decode.gen_len = parse_i64(key, value);
    else if (key == "block_size") c.decode.block_size = parse_i64(key, value);
    else if (key == "steps_per_block") c.decode.steps_per_block = int(parse_i64(key, value));
    else if (key == "temperature") c.decode.temperature = parse_f64(key, value);
    else if (key == "eos_early_stop") c.decode.eos_early_stop = parse_bool(key, value);
    else if (key == "decode_seed") c.decode.seed = parse_u64(key, value);
    else if (key == "prompt") c.prompt = parse_prompt(value);
    else if (key == "r") c.decode.retention.r = parse_i64(key, value);
    else if (key == "k_recent") c.decode.retention.k_recent = parse_i64(key, value);
    else if (key == "f") c.decode.retention.f = parse_i64(key, value);
    else if (key == "fold_enabled") c.decode.retention.fold_enabled = parse_bool(key, value);
    else if (key == "position_mode")
        c.decode.retention.position_mode = position_mode_from_name(value);
    else if (key == "anchor_content") c.anchor_content = anchor_content_from_name(value);
    else if (key == "anchor_attention") c.anchor_attention = anchor_attention_from_name(value);
    else if (key == "task") c.corpus.task = train::task_from_name(value);
    else if (key == "seq_len") c.corpus.seq_len = parse_i64(key, value);
    else if (key == "corpus_size") c.corpus.size = parse_i64(key, value);
    else if (key == "corpus_seed") c.corpus.seed = parse_u64(key, value);
    else if (key == "steps") c.train.steps = parse_i64(key, value);
    else if (key == "batch_size") c.train.batch_size = parse_i64(key, value);
    else if (key == "learning_rate") c.train.learning_rate = parse_f64(key, value);
    else if (key == "train_seed") c.train.seed = parse_u64(key, value);
    else throw BadConfigError("unknown config key: " + key);
}

std::map<std::string, std::string> to_map(const RunConfig& c) {
    std::map<std::string, std::string> m;
    m["vocab_size"] = std::to_string(c.model.vocab_size);
    m["d_model"] = std::to_string(c.model.d_model);
    m["num_heads"] = std::to_string(c.model.num_heads);
    m["num_layers"] = std::to_string(c.model.num_layers);
    m["theta_base"] = format_f64(c.model.theta_base);
    m["init_seed"] = std::to_string(c.model.init_seed);
    m["mode"] = decode::mode_name(c.decode.mode);
    m["gen_len"] = std::to_string(c.decode.gen_len);
    m["block_size"] = std::to_string(c.decode.block_size);
    m["steps_per_block"] = std::to_string(c.decode.steps_per_block);
    m["temperature"] = format_f64(c.decode.temperature);
    m["eos_early_stop"] = c.decode.eos_early_stop ? "true" : "false";
    m["decode_seed"] = std::to_string(c.decode.seed);
    m["prompt"] = format_prompt(c.prompt);
    m["r"] = std::to_string(c.decode.retention.r);
    m["k_recent"] = std::to_string(c.decode.retention.k_recent);
    m["f"] = std::to_string(c.decode.retention.f);
    m["fold_enabled"] = c.decode.retention.fold_enabled ? "true" : "false";
    m["position_mode"] = position_mode_name(c.decode.retention.position_mode);
    m["anchor_content"] = anchor_content_name(c.anchor_content);
    m["anchor_attention"] = anchor_attention_name(c.anchor_attention);
    m["task"] = train::task_name(c.corpus.task);
    m["seq_len"] = std::to_string(c.corpus.seq_len);
    m["corpus_size"] = std::to_string(c.corpus.size);
    m["corpus_seed"] = std::to_string(c.corpus.seed);
    m["steps"] = std::to_string(c.train.steps);
    m["batch_size"] = std::to_string(c.train.batch_size);
    m["learning_rate"] = format_f64(c.train.learning_rate);
    m["train_seed"] = std::to_string(c.train.seed);
    return m;
}

RunConfig from_map(const std::map<std::string, std::string>& entries) {
    RunConfig c;
    for (const auto& [key, value] : entries) apply(c, key, value);
    return c;
}

RunConfig load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw BadConfigError("cannot open config file " + path);
    RunConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw BadConfigError(path + ":" + std::to_string(lineno) +
                                 ": expected key=value, got '" + line + "'");
        }
        apply(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
}

void write_file(const RunConfig& config, std::ostream& out) {
    out << "# resolved config\n";
    for (const auto& [key, value] : to_map(config)) {
        out << key << "=" << value << "\n";
    }
}

std::vector<int32_t> parse_prompt(const std::string& text) {
    std::vector<int32_t> ids;
    std::string token;
    std::istringstream in(text);
    while (std::getline(in, token, ',')) {
        token = trim(token);
        if (token.empty()) continue;
        ids.push_back(parse_i32("prompt", token));
    }
    return ids;
}

std::string format_prompt(const std::vector<int32_t>& prompt) {
    std::string text;
    for (size_t i = 0; i < prompt.size(); ++i) {
        if (i > 0) text.push_back(',');
        text += std::to_string(prompt[i]);
    }
    return text;
}

}  // namespace edlm::runconfig
