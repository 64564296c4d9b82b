#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "edlm/errors.hpp"
#include "edlm/layout.hpp"
#include "edlm/rope.hpp"

namespace edlm::model {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct SpecialTokens {
    int32_t pad = 0;
    int32_t bos = 1;
    int32_t eos = 2;
    int32_t mask = 3;
};

struct ModelConfig {
    int32_t vocab_size = 64;
    int32_t d_model = 64;
    int32_t num_heads = 4;
    int32_t num_layers = 2;
    SpecialTokens specials;
    double theta_base = 10000.0;
    uint64_t init_seed = 1;

    int32_t head_dim() const { return d_model / num_heads; }
    int32_t mlp_hidden() const { return 4 * d_model; }
    rope::RopeParams rope_params() const { return rope::RopeParams{head_dim(), theta_base}; }
    void validate() const;
};

// Projection matrices are stored [input_dim, output_dim] so rows of
// activations multiply from the left with no transposes.
template <typename T>
struct LayerWeightsT {
    Vec<T> attn_norm;
    Mat<T> wq, wk, wv, wo;  // d x d
    Vec<T> mlp_norm;
    Mat<T> w1;  // d x 4d
    Mat<T> w2;  // 4d x d
};

template <typename T>
struct WeightsT {
    ModelConfig config;
    Mat<T> embedding;  // vocab x d, tied with the output head
    std::vector<LayerWeightsT<T>> layers;
    Vec<T> final_norm;
};

using Weights = WeightsT<float>;

// Visits every parameter tensor in the serialization order. All code that
// walks weights (init, save, load, SGD, flattening) goes through this one
// function so the order can never diverge between them.
template <typename T, typename F>
void for_each_tensor(WeightsT<T>& w, F&& f) {
    f(w.embedding.data(), size_t(w.embedding.size()), "embedding");
    for (auto& layer : w.layers) {
        f(layer.attn_norm.data(), size_t(layer.attn_norm.size()), "attn_norm");
        f(layer.wq.data(), size_t(layer.wq.size()), "wq");
        f(layer.wk.data(), size_t(layer.wk.size()), "wk");
        f(layer.wv.data(), size_t(layer.wv.size()), "wv");
        f(layer.wo.data(), size_t(layer.wo.size()), "wo");
        f(layer.mlp_norm.data(), size_t(layer.mlp_norm.size()), "mlp_norm");
        f(layer.w1.data(), size_t(layer.w1.size()), "w1");
        f(layer.w2.data(), size_t(layer.w2.size()), "w2");
    }
    f(w.final_norm.data(), size_t(w.final_norm.size()), "final_norm");
}

template <typename T, typename F>
void for_each_tensor(const WeightsT<T>& w, F&& f) {
    for_each_tensor(const_cast<WeightsT<T>&>(w),
                    [&](T* data, size_t n, const char* name) { f(const_cast<const T*>(data), n, name); });
}

template <typename T>
size_t parameter_count(const WeightsT<T>& w) {
    size_t total = 0;
    for_each_tensor(w, [&](const T*, size_t n, const char*) { total += n; });
    return total;
}

// Allocates the tensors for a config with everything zeroed.
template <typename T>
WeightsT<T> zero_weights(const ModelConfig& config);

Weights init_weights(const ModelConfig& config);
WeightsT<double> widen(const Weights& w);

void save_weights(const Weights& w, const std::string& path);
Weights load_weights(const std::string& path);

// Who may attend whom, by layout entry index. Dense bitmap; row q lists
// the keys entry q's query may use.
struct VisibilitySpec {
    int n = 0;
    std::vector<uint8_t> allowed;  // n*n, row-major

    static VisibilitySpec full(int n);
    // Full bidirectional visibility among non-anchor entries. An anchor
    // entry is visible to everyone; its own query sees only itself under
    // main_only_sees, or everything under the bidirectional ablation.
    static VisibilitySpec for_selection(const layout::LayoutSelection& sel,
                                        layout::AnchorAttention anchor_attention);

    bool visible(int q, int k) const { return allowed[size_t(q) * size_t(n) + size_t(k)] != 0; }
    void set(int q, int k, bool v) { allowed[size_t(q) * size_t(n) + size_t(k)] = v ? 1 : 0; }
    void validate() const;  // EmptyVisibility if some row is all zero
};

constexpr double kRmsEps = 1e-5;

// Everything the forward pass computes, retained so the backward pass and
// the capture operations can reuse a single code path.
template <typename T>
struct Activations {
    struct Layer {
        Mat<T> xhat_attn;              // rms-normalized block input, pre-gain
        Vec<T> inv_rms_attn;
        Mat<T> q, k, v;                // post-rope q and k, n x d
        std::vector<Mat<T>> probs;     // per head, n x n row-stochastic
        Mat<T> attn_concat;            // heads' (P v) side by side, n x d
        Mat<T> xhat_mlp;               // rms-normalized mid stream, pre-gain
        Vec<T> inv_rms_mlp;
        Mat<T> u;                      // pre-GELU, n x 4d
        Mat<T> gu;                     // post-GELU
        Mat<T> x_out;                  // residual stream leaving the block
    };
    Mat<T> x0;                         // embedding rows
    std::vector<Layer> layers;
    Mat<T> xhat_final;
    Vec<T> inv_rms_final;
    Mat<T> logits;               // n x vocab
};

template <typename T>
Activations<T> run_forward(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                           const std::vector<int64_t>& coords, const VisibilitySpec& vis);

template <typename T>
Mat<T> forward(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
               const std::vector<int64_t>& coords, const VisibilitySpec& vis);

template <typename T>
Mat<T> capture_attention(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                         const std::vector<int64_t>& coords, const VisibilitySpec& vis,
                         int layer, int head);

// layer 0 returns the embedding rows; layer L the stream after block L
template <typename T>
Mat<T> capture_hidden(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                      const std::vector<int64_t>& coords, const VisibilitySpec& vis, int layer);

// Mean cross-entropy over the entries flagged in loss_mask, with analytic
// gradients for every parameter. Gradient shapes mirror the weights.
template <typename T>
struct LossAndGrad {
    double loss = 0.0;
    int64_t masked_count = 0;
    WeightsT<T> grads;
};

template <typename T>
LossAndGrad<T> masked_loss_and_grad(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                                    const std::vector<int64_t>& coords, const VisibilitySpec& vis,
                                    const std::vector<int32_t>& targets,
                                    const std::vector<uint8_t>& loss_mask);

template <typename T>
double masked_loss(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                   const std::vector<int64_t>& coords, const VisibilitySpec& vis,
                   const std::vector<int32_t>& targets, const std::vector<uint8_t>& loss_mask);

}  // namespace edlm::model

#include "edlm/model_impl.hpp"
