#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "edlm/decode.hpp"
#include "edlm/model.hpp"
#include "edlm/train.hpp"

namespace edlm::runconfig {

// Every tunable for every command, loadable from a flat key=value file.
// Flags mirror the keys in --kebab-case and override file values; the
// fully-resolved map is echoed into each command's outputs so any run can
// be replayed from its own artifacts.
struct RunConfig {
    model::ModelConfig model;
    decode::DecodeConfig decode;  // retention.anchor is derived in normalize()
    layout::AnchorContent anchor_content = layout::AnchorContent::mask_token;
    layout::AnchorAttention anchor_attention = layout::AnchorAttention::main_only_sees;
    train::SyntheticCorpusSpec corpus;
    train::TrainConfig train;
    std::vector<int32_t> prompt{1, 9};

    // Derives the coupled fields: corpus vocab follows the model vocab,
    // elastic_fold implies fold_enabled, block_anchor materializes the
    // anchor config from anchor_content / anchor_attention.
    void normalize();
};

// All recognized keys, in serialization order.
const std::vector<std::string>& key_names();

// snake_case key -> --kebab-case flag
std::string flag_name(const std::string& key);

// Sets one key; BadConfigError on unknown keys or unparsable values.
void apply(RunConfig& config, const std::string& key, const std::string& value);

// Canonical text form; from_map(to_map(c)) reproduces c exactly.
std::map<std::string, std::string> to_map(const RunConfig& config);
RunConfig from_map(const std::map<std::string, std::string>& entries);

// key=value lines, # comments, blank lines ignored.
RunConfig load_file(const std::string& path);
void write_file(const RunConfig& config, std::ostream& out);

std::vector<int32_t> parse_prompt(const std::string& text);
std::string format_prompt(const std::vector<int32_t>& prompt);

}  // namespace edlm::runconfig
