#include "edlm/model.hpp"

#include <cstring>
#include <fstream>

#include "edlm/prng.hpp"

namespace edlm::model {

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || num_heads < 1 || num_layers < 1) {
        throw BadConfigError("model dimensions must be positive");
    }
    if (d_model % num_heads != 0) {
        throw DimensionMismatchError("d_model " + std::to_string(d_model) +
                                     " not divisible by num_heads " + std::to_string(num_heads));
    }
    rope_params().validate();
    const int32_t ids[4] = {specials.pad, specials.bos, specials.eos, specials.mask};
    for (int i = 0; i < 4; ++i) {
        if (ids[i] < 0 || ids[i] >= vocab_size) {
            throw BadConfigError("special token id outside the vocab");
        }
        for (int j = i + 1; j < 4; ++j) {
            if (ids[i] == ids[j]) throw BadConfigError("special token ids must be distinct");
        }
    }
}

VisibilitySpec VisibilitySpec::full(int n) {
    VisibilitySpec vis;
    vis.n = n;
    vis.allowed.assign(size_t(n) * size_t(n), 1);
    return vis;
}

VisibilitySpec VisibilitySpec::for_selection(const layout::LayoutSelection& sel,
                                             layout::AnchorAttention anchor_attention) {
    auto vis = full(int(sel.size()));
    if (sel.has_anchor() && anchor_attention == layout::AnchorAttention::main_only_sees) {
        const int a = sel.anchor_index();
        for (int k = 0; k < vis.n; ++k) vis.set(a, k, k == a);
    }
    return vis;
}

void VisibilitySpec::validate() const {
    if (n < 0 || allowed.size() != size_t(n) * size_t(n)) {
        throw DimensionMismatchError("visibility bitmap size does not match n");
    }
    for (int q = 0; q < n; ++q) {
        bool any = false;
        for (int k = 0; k < n && !any; ++k) any = visible(q, k);
        if (!any) {
            throw EmptyVisibilityError("entry " + std::to_string(q) + " may attend nothing");
        }
    }
}

Weights init_weights(const ModelConfig& config) {
    auto w = zero_weights<float>(config);
    Prng rng(config.init_seed);
    for_each_tensor(w, [&](float* data, size_t count, const char* name) {
        const bool is_gain = std::strstr(name, "norm") != nullptr;
        for (size_t i = 0; i < count; ++i) {
            data[i] = is_gain ? 1.0f : float(rng.normal() * 0.02);
        }
    });
    return w;
}

WeightsT<double> widen(const Weights& w) {
    WeightsT<double> out = zero_weights<double>(w.config);
    out.embedding = w.embedding.cast<double>();
    for (size_t l = 0; l < w.layers.size(); ++l) {
        out.layers[l].attn_norm = w.layers[l].attn_norm.cast<double>();
        out.layers[l].wq = w.layers[l].wq.cast<double>();
        out.layers[l].wk = w.layers[l].wk.cast<double>();
        out.layers[l].wv = w.layers[l].wv.cast<double>();
        out.layers[l].wo = w.layers[l].wo.cast<double>();
        out.layers[l].mlp_norm = w.layers[l].mlp_norm.cast<double>();
        out.layers[l].w1 = w.layers[l].w1.cast<double>();
        out.layers[l].w2 = w.layers[l].w2.cast<double>();
    }
    out.final_norm = w.final_norm.cast<double>();
    return out;
}

namespace {

constexpr char kMagic[4] = {'E', 'D', 'L', 'M'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw BadWeightsError("weights file truncated");
    return value;
}

}  // namespace

void save_weights(const Weights& w, const std::string& path) {
    w.config.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw BadWeightsError("cannot open " + path + " for writing");
    out.write(kMagic, 4);
    write_pod(out, kVersion);
    write_pod(out, w.config.vocab_size);
    write_pod(out, w.config.d_model);
    write_pod(out, w.config.num_heads);
    write_pod(out, w.config.num_layers);
    write_pod(out, w.config.specials.pad);
    write_pod(out, w.config.specials.bos);
    write_pod(out, w.config.specials.eos);
    write_pod(out, w.config.specials.mask);
    write_pod(out, w.config.theta_base);
    write_pod(out, w.config.init_seed);
    for_each_tensor(w, [&](const float* data, size_t count, const char*) {
        out.write(reinterpret_cast<const char*>(data), std::streamsize(count * sizeof(float)));
    });
    if (!out) throw BadWeightsError("failed writing " + path);
}

Weights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw BadWeightsError("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw BadWeightsError(path + " is not a weights file (bad magic)");
    }
    const auto version = read_pod<uint32_t>(in);
    if (version != kVersion) {
        throw BadWeightsError("unsupported weights version " + std::to_string(version));
    }
    ModelConfig config;
    config.vocab_size = read_pod<int32_t>(in);
    config.d_model = read_pod<int32_t>(in);
    config.num_heads = read_pod<int32_t>(in);
    config.num_layers = read_pod<int32_t>(in);
    config.specials.pad = read_pod<int32_t>(in);
    config.specials.bos = read_pod<int32_t>(in);
    config.specials.eos = read_pod<int32_t>(in);
    config.specials.mask = read_pod<int32_t>(in);
    config.theta_base = read_pod<double>(in);
    config.init_seed = read_pod<uint64_t>(in);
    try {
        config.validate();
    } catch (const std::exception& e) {
        throw BadWeightsError(std::string("weights header invalid: ") + e.what());
    }

    auto w = zero_weights<float>(config);
    for_each_tensor(w, [&](float* data, size_t count, const char* name) {
        in.read(reinterpret_cast<char*>(data), std::streamsize(count * sizeof(float)));
        if (!in) throw BadWeightsError(std::string("weights file truncated in ") + name);
    });
    in.peek();
    if (!in.eof()) throw BadWeightsError("trailing bytes after the last tensor");
    return w;
}

}  // namespace edlm::model
