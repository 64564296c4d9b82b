#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "edlm/decode.hpp"
#include "edlm/diagnostics.hpp"
#include "edlm/layout.hpp"
#include "edlm/model.hpp"
#include "edlm/train.hpp"

namespace py = pybind11;
using namespace edlm;

namespace {

layout::AnchorContent anchor_content_from(const std::string& name) {
    if (name == "mask_token") return layout::AnchorContent::mask_token;
    if (name == "eos_token") return layout::AnchorContent::eos_token;
    throw BadConfigError("unknown anchor content '" + name + "'");
}

layout::AnchorAttention anchor_attention_from(const std::string& name) {
    if (name == "main_only_sees") return layout::AnchorAttention::main_only_sees;
    if (name == "bidirectional") return layout::AnchorAttention::bidirectional;
    throw BadConfigError("unknown anchor attention '" + name + "'");
}

layout::PositionMode position_mode_from(const std::string& name) {
    if (name == "preserved") return layout::PositionMode::preserved;
    if (name == "compact_rank") return layout::PositionMode::compact_rank;
    throw BadConfigError("unknown position mode '" + name + "'");
}

std::string position_mode_name(layout::PositionMode mode) {
    return mode == layout::PositionMode::preserved ? "preserved" : "compact_rank";
}

py::array_t<uint8_t> vis_matrix(const model::VisibilitySpec& vis) {
    py::array_t<uint8_t> out({vis.n, vis.n});
    auto view = out.mutable_unchecked<2>();
    for (int q = 0; q < vis.n; ++q) {
        for (int k = 0; k < vis.n; ++k) view(q, k) = vis.visible(q, k) ? 1 : 0;
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_edlm, m) {
    m.doc() = "masked-diffusion decoding with elastic context retention";

    py::register_exception<BadConfigError>(m, "BadConfigError", PyExc_ValueError);
    py::register_exception<NonDivisibleError>(m, "NonDivisibleError", PyExc_ValueError);
    py::register_exception<IndexOutOfRangeError>(m, "IndexOutOfRangeError", PyExc_IndexError);
    py::register_exception<DimensionMismatchError>(m, "DimensionMismatchError", PyExc_ValueError);
    py::register_exception<VocabOverflowError>(m, "VocabOverflowError", PyExc_ValueError);
    py::register_exception<EmptyVisibilityError>(m, "EmptyVisibilityError", PyExc_ValueError);
    py::register_exception<BadWeightsError>(m, "BadWeightsError", PyExc_RuntimeError);
    py::register_exception<TraceMismatchError>(m, "TraceMismatchError", PyExc_RuntimeError);

    // ---- layout ---------------------------------------------------------

    py::class_<layout::BlockPartition>(m, "BlockPartition")
        .def_readonly("prompt_len", &layout::BlockPartition::prompt_len)
        .def_readonly("gen_len", &layout::BlockPartition::gen_len)
        .def_readonly("block_size", &layout::BlockPartition::block_size)
        .def_readonly("num_blocks", &layout::BlockPartition::num_blocks)
        .def("block_start", &layout::BlockPartition::block_start, py::arg("j"))
        .def("block_end", &layout::BlockPartition::block_end, py::arg("j"))
        .def("total_len", &layout::BlockPartition::total_len)
        .def("terminal_coordinate", &layout::BlockPartition::terminal_coordinate)
        .def("block_of", &layout::BlockPartition::block_of, py::arg("pos"));

    m.def("partition_blocks", &layout::partition_blocks, py::arg("prompt_len"),
          py::arg("gen_len"), py::arg("block_size"));

    py::class_<layout::LayoutEntry>(m, "LayoutEntry")
        .def_readonly("position", &layout::LayoutEntry::position)
        .def_property_readonly(
            "role", [](const layout::LayoutEntry& e) { return std::string(role_name(e.role)); })
        .def("__repr__", [](const layout::LayoutEntry& e) {
            return "LayoutEntry(position=" + std::to_string(e.position) + ", role='" +
                   role_name(e.role) + "')";
        });

    py::class_<layout::LayoutSelection>(m, "LayoutSelection")
        .def_readonly("entries", &layout::LayoutSelection::entries)
        .def("positions", &layout::LayoutSelection::positions)
        .def("has_anchor", &layout::LayoutSelection::has_anchor)
        .def("anchor_index", &layout::LayoutSelection::anchor_index)
        .def("__len__", [](const layout::LayoutSelection& s) { return s.size(); });

    py::class_<layout::RetentionConfig>(m, "RetentionConfig")
        .def(py::init<>())
        .def_readwrite("r", &layout::RetentionConfig::r)
        .def_readwrite("k_recent", &layout::RetentionConfig::k_recent)
        .def_readwrite("f", &layout::RetentionConfig::f)
        .def_readwrite("fold_enabled", &layout::RetentionConfig::fold_enabled)
        .def_property(
            "position_mode",
            [](const layout::RetentionConfig& c) { return position_mode_name(c.position_mode); },
            [](layout::RetentionConfig& c, const std::string& name) {
                c.position_mode = position_mode_from(name);
            })
        .def("set_anchor",
             [](layout::RetentionConfig& c, const std::string& content,
                const std::string& attention) {
                 c.anchor = layout::AnchorConfig{anchor_content_from(content),
                                                 anchor_attention_from(attention)};
             },
             py::arg("content") = "mask_token", py::arg("attention") = "main_only_sees")
        .def("clear_anchor", [](layout::RetentionConfig& c) { c.anchor.reset(); });

    m.def("uniform_sample", &layout::uniform_sample, py::arg("block_start"),
          py::arg("block_len"), py::arg("r"));
    m.def("select_f", &layout::select_f, py::arg("block_start"), py::arg("block_len"),
          py::arg("f"));
    m.def("build_retention_set", &layout::build_retention_set, py::arg("partition"),
          py::arg("current_block"), py::arg("config"));
    m.def("build_fold_set", &layout::build_fold_set, py::arg("partition"),
          py::arg("current_block"), py::arg("config"));
    m.def(
        "build_block_augmented_set",
        [](int64_t history_len, int current_block, const layout::BlockPartition& partition,
           const std::string& content, const std::string& attention) {
            const layout::AnchorConfig anchor{anchor_content_from(content),
                                              anchor_attention_from(attention)};
            return layout::build_block_augmented_set(history_len, current_block, partition,
                                                     anchor);
        },
        py::arg("history_len"), py::arg("current_block"), py::arg("partition"),
        py::arg("content") = "mask_token", py::arg("attention") = "main_only_sees");
    m.def("compact_ranks", &layout::compact_ranks, py::arg("selection"));

    // ---- model ----------------------------------------------------------

    py::class_<model::SpecialTokens>(m, "SpecialTokens")
        .def_readwrite("pad", &model::SpecialTokens::pad)
        .def_readwrite("bos", &model::SpecialTokens::bos)
        .def_readwrite("eos", &model::SpecialTokens::eos)
        .def_readwrite("mask", &model::SpecialTokens::mask);

    py::class_<model::ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("vocab_size", &model::ModelConfig::vocab_size)
        .def_readwrite("d_model", &model::ModelConfig::d_model)
        .def_readwrite("num_heads", &model::ModelConfig::num_heads)
        .def_readwrite("num_layers", &model::ModelConfig::num_layers)
        .def_readwrite("specials", &model::ModelConfig::specials)
        .def_readwrite("theta_base", &model::ModelConfig::theta_base)
        .def_readwrite("init_seed", &model::ModelConfig::init_seed)
        .def("head_dim", &model::ModelConfig::head_dim)
        .def("validate", &model::ModelConfig::validate);

    py::class_<model::Weights>(m, "Weights")
        .def_readonly("config", &model::Weights::config)
        .def("parameter_count",
             [](const model::Weights& w) { return model::parameter_count(w); });

    m.def("init_weights", &model::init_weights, py::arg("config"));
    m.def("save_weights", &model::save_weights, py::arg("weights"), py::arg("path"));
    m.def("load_weights", &model::load_weights, py::arg("path"));

    py::class_<model::VisibilitySpec>(m, "VisibilitySpec")
        .def_readonly("n", &model::VisibilitySpec::n)
        .def_static("full", &model::VisibilitySpec::full, py::arg("n"))
        .def_static(
            "for_selection",
            [](const layout::LayoutSelection& sel, const std::string& attention) {
                return model::VisibilitySpec::for_selection(sel, anchor_attention_from(attention));
            },
            py::arg("selection"), py::arg("anchor_attention") = "main_only_sees")
        .def("visible", &model::VisibilitySpec::visible, py::arg("q"), py::arg("k"))
        .def("matrix", &vis_matrix);

    m.def(
        "forward",
        [](const model::Weights& w, const std::vector<int32_t>& tokens,
           const std::vector<int64_t>& coords, const model::VisibilitySpec& vis) {
            return model::forward(w, tokens, coords, vis);
        },
        py::arg("weights"), py::arg("tokens"), py::arg("coords"), py::arg("vis"),
        "logits, one row per entry");
    m.def(
        "capture_attention",
        [](const model::Weights& w, const std::vector<int32_t>& tokens,
           const std::vector<int64_t>& coords, const model::VisibilitySpec& vis, int layer,
           int head) { return model::capture_attention(w, tokens, coords, vis, layer, head); },
        py::arg("weights"), py::arg("tokens"), py::arg("coords"), py::arg("vis"),
        py::arg("layer"), py::arg("head"), "row-stochastic attention matrix for one head");
    m.def(
        "capture_hidden",
        [](const model::Weights& w, const std::vector<int32_t>& tokens,
           const std::vector<int64_t>& coords, const model::VisibilitySpec& vis, int layer) {
            return model::capture_hidden(w, tokens, coords, vis, layer);
        },
        py::arg("weights"), py::arg("tokens"), py::arg("coords"), py::arg("vis"),
        py::arg("layer"), "residual stream after `layer` blocks (0 = embeddings)");

    m.def(
        "quadrant_means",
        [](const model::Mat<float>& probs, const std::vector<int32_t>& tokens, int32_t mask_id) {
            const auto q = diagnostics::quadrant_means(probs, tokens, mask_id);
            py::dict out;
            out["mask_to_mask"] = q.mask_to_mask;
            out["mask_to_other"] = q.mask_to_other;
            out["other_to_mask"] = q.other_to_mask;
            out["other_to_other"] = q.other_to_other;
            return out;
        },
        py::arg("probs"), py::arg("tokens"), py::arg("mask_id"),
        "mean attention within/across the [MASK] vs non-mask entry split");

    // ---- decode ---------------------------------------------------------

    py::class_<decode::DecodeConfig>(m, "DecodeConfig")
        .def(py::init<>())
        .def_property(
            "mode",
            [](const decode::DecodeConfig& c) { return std::string(decode::mode_name(c.mode)); },
            [](decode::DecodeConfig& c, const std::string& name) {
                c.mode = decode::mode_from_name(name);
            })
        .def_readwrite("retention", &decode::DecodeConfig::retention)
        .def_readwrite("gen_len", &decode::DecodeConfig::gen_len)
        .def_readwrite("block_size", &decode::DecodeConfig::block_size)
        .def_readwrite("steps_per_block", &decode::DecodeConfig::steps_per_block)
        .def_readwrite("eos_early_stop", &decode::DecodeConfig::eos_early_stop)
        .def_readwrite("seed", &decode::DecodeConfig::seed)
        .def("validate", &decode::DecodeConfig::validate);

    py::class_<decode::StepRecord>(m, "StepRecord")
        .def_readonly("step", &decode::StepRecord::step)
        .def_readonly("current_block", &decode::StepRecord::current_block)
        .def_readonly("active_token_count", &decode::StepRecord::active_token_count)
        .def_readonly("anchor_present", &decode::StepRecord::anchor_present)
        .def_readonly("committed_positions", &decode::StepRecord::committed_positions)
        .def_readonly("committed_tokens", &decode::StepRecord::committed_tokens)
        .def_readonly("max_confidence", &decode::StepRecord::max_confidence);

    py::class_<decode::DecodeTrace>(m, "DecodeTrace")
        .def_property_readonly(
            "mode",
            [](const decode::DecodeTrace& t) { return std::string(decode::mode_name(t.mode)); })
        .def_readonly("prompt_len", &decode::DecodeTrace::prompt_len)
        .def_readonly("gen_len", &decode::DecodeTrace::gen_len)
        .def_readonly("block_size", &decode::DecodeTrace::block_size)
        .def_readonly("seed", &decode::DecodeTrace::seed)
        .def_readonly("records", &decode::DecodeTrace::records)
        .def_readonly("final_ids", &decode::DecodeTrace::final_ids)
        .def_readonly("early_stopped", &decode::DecodeTrace::early_stopped)
        .def_readonly("eos_position", &decode::DecodeTrace::eos_position);

    m.def(
        "decode",
        [](const std::vector<int32_t>& prompt, const model::Weights& weights,
           const decode::DecodeConfig& config) { return decode::decode(prompt, weights, config); },
        py::arg("prompt"), py::arg("weights"), py::arg("config"));
    m.def(
        "decode_with_remap",
        [](const std::vector<int32_t>& prompt, const model::Weights& weights,
           const decode::DecodeConfig& config, const decode::BlockRemap& remap) {
            return decode::decode_with_remap(prompt, weights, config, remap);
        },
        py::arg("prompt"), py::arg("weights"), py::arg("config"), py::arg("remap"));

    // ---- train ----------------------------------------------------------

    py::class_<train::TrainExample>(m, "TrainExample")
        .def_readonly("tokens", &train::TrainExample::tokens)
        .def_readonly("prompt_len", &train::TrainExample::prompt_len);

    m.def(
        "generate_corpus",
        [](const std::string& task, int64_t seq_len, int32_t vocab_size, int64_t size,
           uint64_t seed) {
            train::SyntheticCorpusSpec spec;
            spec.task = train::task_from_name(task);
            spec.seq_len = seq_len;
            spec.vocab_size = vocab_size;
            spec.size = size;
            spec.seed = seed;
            return train::generate_corpus(spec);
        },
        py::arg("task") = "count_sequence", py::arg("seq_len") = 32, py::arg("vocab_size") = 64,
        py::arg("size") = 256, py::arg("seed") = 0);

    m.def(
        "train",
        [](model::Weights& weights, const std::vector<train::TrainExample>& corpus, int64_t steps,
           int64_t batch_size, double learning_rate, uint64_t seed) {
            train::TrainConfig config;
            config.steps = steps;
            config.batch_size = batch_size;
            config.learning_rate = learning_rate;
            config.seed = seed;
            return train::train(weights, corpus, config);
        },
        py::arg("weights"), py::arg("corpus"), py::arg("steps") = 2000,
        py::arg("batch_size") = 16, py::arg("learning_rate") = 0.05, py::arg("seed") = 0,
        "SGD in place; returns the per-step loss curve");
}
