#pragma once

// Template bodies for the typed forward/backward core. Included at the end
// of model.hpp; not a standalone header.

#include <cmath>
#include <string>

namespace edlm::model {

namespace detail {

// y_hat = x / rms(x) per row; the gain multiply happens at the call site
template <typename T>
void rmsnorm_rows(const Mat<T>& x, Mat<T>& xhat, Vec<T>& inv_rms) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    xhat.resize(n, d);
    inv_rms.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double ms = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) ms += double(x(i, j)) * double(x(i, j));
        const T r = T(1.0 / std::sqrt(ms / double(d) + kRmsEps));
        inv_rms(i) = r;
        xhat.row(i) = x.row(i) * r;
    }
}

// dL/dx for y_hat = x / rms(x), given dL/dy_hat
template <typename T>
Mat<T> rmsnorm_backward(const Mat<T>& xhat, const Vec<T>& inv_rms, const Mat<T>& dxhat) {
    const Eigen::Index n = xhat.rows();
    const Eigen::Index d = xhat.cols();
    Mat<T> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) acc += double(dxhat(i, j)) * double(xhat(i, j));
        const T mean_proj = T(acc / double(d));
        dx.row(i) = inv_rms(i) * (dxhat.row(i) - mean_proj * xhat.row(i));
    }
    return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
T gelu_tanh(T x) {
    const double xd = double(x);
    const double t = std::tanh(kGeluC * (xd + 0.044715 * xd * xd * xd));
    return T(0.5 * xd * (1.0 + t));
}

template <typename T>
T gelu_tanh_grad(T x) {
    const double xd = double(x);
    const double t = std::tanh(kGeluC * (xd + 0.044715 * xd * xd * xd));
    const double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * xd * xd);
    return T(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner);
}

// Multiply each column j by gain(j).
template <typename T>
Mat<T> apply_gain(const Mat<T>& xhat, const Vec<T>& gain) {
    return xhat.array().rowwise() * gain.transpose().array();
}

template <typename T>
void rope_rows(const std::vector<double>& freqs, const std::vector<int64_t>& coords, Mat<T>& m,
               int num_heads, int head_dim, bool invert) {
    const Eigen::Index n = m.rows();
    const Eigen::Index d = m.cols();
    for (Eigen::Index i = 0; i < n; ++i) {
        const int64_t pos = invert ? -coords[size_t(i)] : coords[size_t(i)];
        T* row = m.data() + i * d;
        for (int h = 0; h < num_heads; ++h) {
            rope::rotate_span(freqs.data(), head_dim / 2, pos, row + h * head_dim);
        }
    }
}

// Row-wise softmax over the visible keys only; invisible cells come out
// exactly zero. Max-subtraction keeps the exponentials in range.
template <typename T>
void masked_softmax_rows(const Mat<T>& scores, const VisibilitySpec& vis, Mat<T>& probs) {
    const Eigen::Index n = scores.rows();
    probs.resize(n, n);
    for (Eigen::Index q = 0; q < n; ++q) {
        double best = 0.0;
        bool seen = false;
        for (Eigen::Index k = 0; k < n; ++k) {
            if (!vis.visible(int(q), int(k))) continue;
            const double s = double(scores(q, k));
            if (!seen || s > best) best = s;
            seen = true;
        }
        double denom = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
            if (vis.visible(int(q), int(k))) {
                const double e = std::exp(double(scores(q, k)) - best);
                probs(q, k) = T(e);
                denom += e;
            } else {
                probs(q, k) = T(0);
            }
        }
        const T inv = T(1.0 / denom);
        probs.row(q) *= inv;
    }
}

}  // namespace detail

template <typename T>
WeightsT<T> zero_weights(const ModelConfig& config) {
    config.validate();
    const auto d = config.d_model;
    WeightsT<T> w;
    w.config = config;
    w.embedding = Mat<T>::Zero(config.vocab_size, d);
    w.layers.resize(size_t(config.num_layers));
    for (auto& layer : w.layers) {
        layer.attn_norm = Vec<T>::Zero(d);
        layer.wq = Mat<T>::Zero(d, d);
        layer.wk = Mat<T>::Zero(d, d);
        layer.wv = Mat<T>::Zero(d, d);
        layer.wo = Mat<T>::Zero(d, d);
        layer.mlp_norm = Vec<T>::Zero(d);
        layer.w1 = Mat<T>::Zero(d, config.mlp_hidden());
        layer.w2 = Mat<T>::Zero(config.mlp_hidden(), d);
    }
    w.final_norm = Vec<T>::Zero(d);
    return w;
}

template <typename T>
Activations<T> run_forward(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                           const std::vector<int64_t>& coords, const VisibilitySpec& vis) {
    const auto& cfg = w.config;
    cfg.validate();
    const int n = int(tokens.size());
    if (n == 0) throw DimensionMismatchError("forward needs at least one entry");
    if (coords.size() != tokens.size()) {
        throw DimensionMismatchError("tokens and coordinates must pair up");
    }
    if (vis.n != n) throw DimensionMismatchError("visibility size does not match entry count");
    vis.validate();
    for (int32_t t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw IndexOutOfRangeError("token id " + std::to_string(t) + " outside the vocab");
        }
    }

    const int d = cfg.d_model;
    const int H = cfg.num_heads;
    const int hd = cfg.head_dim();
    const T scale = T(1.0 / std::sqrt(double(hd)));
    const auto freqs = rope::pair_frequencies(cfg.rope_params());

    Activations<T> acts;
    acts.x0.resize(n, d);
    for (int i = 0; i < n; ++i) acts.x0.row(i) = w.embedding.row(tokens[size_t(i)]);

    Mat<T> x = acts.x0;
    acts.layers.resize(size_t(cfg.num_layers));
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto& al = acts.layers[size_t(l)];
        const auto& lw = w.layers[size_t(l)];

        detail::rmsnorm_rows(x, al.xhat_attn, al.inv_rms_attn);
        const Mat<T> a = detail::apply_gain(al.xhat_attn, lw.attn_norm);
        al.q = a * lw.wq;
        al.k = a * lw.wk;
        al.v = a * lw.wv;
        detail::rope_rows(freqs, coords, al.q, H, hd, false);
        detail::rope_rows(freqs, coords, al.k, H, hd, false);

        al.probs.resize(size_t(H));
        al.attn_concat.resize(n, d);
        for (int h = 0; h < H; ++h) {
            const auto qh = al.q.middleCols(h * hd, hd);
            const auto kh = al.k.middleCols(h * hd, hd);
            const auto vh = al.v.middleCols(h * hd, hd);
            const Mat<T> scores = (qh * kh.transpose()) * scale;
            detail::masked_softmax_rows(scores, vis, al.probs[size_t(h)]);
            al.attn_concat.middleCols(h * hd, hd) = al.probs[size_t(h)] * vh;
        }
        const Mat<T> x_mid = x + al.attn_concat * lw.wo;

        detail::rmsnorm_rows(x_mid, al.xhat_mlp, al.inv_rms_mlp);
        const Mat<T> b = detail::apply_gain(al.xhat_mlp, lw.mlp_norm);
        al.u = b * lw.w1;
        al.gu = al.u.unaryExpr([](T v) { return detail::gelu_tanh(v); });
        al.x_out = x_mid + al.gu * lw.w2;
        x = al.x_out;
    }

    detail::rmsnorm_rows(x, acts.xhat_final, acts.inv_rms_final);
    const Mat<T> f = detail::apply_gain(acts.xhat_final, w.final_norm);
    acts.logits = f * w.embedding.transpose();
    return acts;
}

template <typename T>
Mat<T> forward(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
               const std::vector<int64_t>& coords, const VisibilitySpec& vis) {
    return run_forward(w, tokens, coords, vis).logits;
}

template <typename T>
Mat<T> capture_attention(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                         const std::vector<int64_t>& coords, const VisibilitySpec& vis,
                         int layer, int head) {
    if (layer < 0 || layer >= w.config.num_layers) {
        throw IndexOutOfRangeError("layer " + std::to_string(layer) + " outside the model");
    }
    if (head < 0 || head >= w.config.num_heads) {
        throw IndexOutOfRangeError("head " + std::to_string(head) + " outside the model");
    }
    auto acts = run_forward(w, tokens, coords, vis);
    return acts.layers[size_t(layer)].probs[size_t(head)];
}

template <typename T>
Mat<T> capture_hidden(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                      const std::vector<int64_t>& coords, const VisibilitySpec& vis, int layer) {
    if (layer < 0 || layer > w.config.num_layers) {
        throw IndexOutOfRangeError("hidden capture layer " + std::to_string(layer) +
                                   " outside 0..num_layers");
    }
    auto acts = run_forward(w, tokens, coords, vis);
    if (layer == 0) return acts.x0;
    return acts.layers[size_t(layer - 1)].x_out;
}

template <typename T>
LossAndGrad<T> masked_loss_and_grad(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                                    const std::vector<int64_t>& coords, const VisibilitySpec& vis,
                                    const std::vector<int32_t>& targets,
                                    const std::vector<uint8_t>& loss_mask) {
    if (targets.size() != tokens.size() || loss_mask.size() != tokens.size()) {
        throw DimensionMismatchError("targets and loss mask must match the entry count");
    }
    auto acts = run_forward(w, tokens, coords, vis);
    const auto& cfg = w.config;
    const int n = int(tokens.size());
    const int d = cfg.d_model;
    const int H = cfg.num_heads;
    const int hd = cfg.head_dim();
    const int V = cfg.vocab_size;
    const T scale = T(1.0 / std::sqrt(double(hd)));
    const auto freqs = rope::pair_frequencies(cfg.rope_params());

    LossAndGrad<T> out;
    out.grads = zero_weights<T>(cfg);
    auto& g = out.grads;

    int64_t m = 0;
    for (uint8_t flag : loss_mask) m += flag ? 1 : 0;
    out.masked_count = m;
    if (m == 0) return out;  // nothing to learn from; zero loss, zero grads

    // cross-entropy over masked rows, mean-weighted
    Mat<T> dlogits = Mat<T>::Zero(n, V);
    double loss = 0.0;
    const double inv_m = 1.0 / double(m);
    for (int i = 0; i < n; ++i) {
        if (!loss_mask[size_t(i)]) continue;
        const int32_t target = targets[size_t(i)];
        if (target < 0 || target >= V) {
            throw IndexOutOfRangeError("target id " + std::to_string(target) + " outside the vocab");
        }
        double best = double(acts.logits(i, 0));
        for (int t = 1; t < V; ++t) best = std::max(best, double(acts.logits(i, t)));
        double denom = 0.0;
        for (int t = 0; t < V; ++t) denom += std::exp(double(acts.logits(i, t)) - best);
        const double log_denom = std::log(denom) + best;
        loss += (log_denom - double(acts.logits(i, target))) * inv_m;
        for (int t = 0; t < V; ++t) {
            const double p = std::exp(double(acts.logits(i, t)) - log_denom);
            dlogits(i, t) = T((p - (t == target ? 1.0 : 0.0)) * inv_m);
        }
    }
    out.loss = loss;

    // tied output head: logits = (xhat_final . final_norm) E^T
    const Mat<T> f = detail::apply_gain(acts.xhat_final, w.final_norm);
    g.embedding = dlogits.transpose() * f;
    const Mat<T> df = dlogits * w.embedding;
    g.final_norm = (df.array() * acts.xhat_final.array()).colwise().sum().transpose();
    const Mat<T> dxhat_final = detail::apply_gain(df, w.final_norm);
    Mat<T> dx = detail::rmsnorm_backward(acts.xhat_final, acts.inv_rms_final, dxhat_final);

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const auto& al = acts.layers[size_t(l)];
        const auto& lw = w.layers[size_t(l)];
        auto& gl = g.layers[size_t(l)];

        // MLP sublayer: x_out = x_mid + gelu((xhat_mlp . mlp_norm) w1) w2
        const Mat<T> b = detail::apply_gain(al.xhat_mlp, lw.mlp_norm);
        gl.w2 = al.gu.transpose() * dx;
        const Mat<T> dgu = dx * lw.w2.transpose();
        const Mat<T> du =
            dgu.array() * al.u.unaryExpr([](T v) { return detail::gelu_tanh_grad(v); }).array();
        gl.w1 = b.transpose() * du;
        const Mat<T> db = du * lw.w1.transpose();
        gl.mlp_norm = (db.array() * al.xhat_mlp.array()).colwise().sum().transpose();
        const Mat<T> dxhat_mlp = detail::apply_gain(db, lw.mlp_norm);
        Mat<T> dx_mid = dx + detail::rmsnorm_backward(al.xhat_mlp, al.inv_rms_mlp, dxhat_mlp);

        // attention sublayer: x_mid = x_in + concat_h(P_h v_h) wo
        gl.wo = al.attn_concat.transpose() * dx_mid;
        const Mat<T> dconcat = dx_mid * lw.wo.transpose();
        Mat<T> dq(n, d), dk(n, d), dv(n, d);
        for (int h = 0; h < H; ++h) {
            const auto qh = al.q.middleCols(h * hd, hd);
            const auto kh = al.k.middleCols(h * hd, hd);
            const auto vh = al.v.middleCols(h * hd, hd);
            const auto& P = al.probs[size_t(h)];
            const auto dOh = dconcat.middleCols(h * hd, hd);

            dv.middleCols(h * hd, hd) = P.transpose() * dOh;
            const Mat<T> dP = dOh * vh.transpose();
            // softmax backward; zero-probability (invisible) cells stay zero
            Mat<T> dS(n, n);
            for (int q = 0; q < n; ++q) {
                double inner = 0.0;
                for (int kk = 0; kk < n; ++kk) inner += double(dP(q, kk)) * double(P(q, kk));
                dS.row(q) = (P.row(q).array() * (dP.row(q).array() - T(inner))).matrix();
            }
            dq.middleCols(h * hd, hd) = (dS * kh) * scale;
            dk.middleCols(h * hd, hd) = (dS.transpose() * qh) * scale;
        }
        // undo the rotation: the transpose of a rotation turns by -angle
        detail::rope_rows(freqs, coords, dq, H, hd, true);
        detail::rope_rows(freqs, coords, dk, H, hd, true);

        const Mat<T> a = detail::apply_gain(al.xhat_attn, lw.attn_norm);
        gl.wq = a.transpose() * dq;
        gl.wk = a.transpose() * dk;
        gl.wv = a.transpose() * dv;
        const Mat<T> da = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
        gl.attn_norm = (da.array() * al.xhat_attn.array()).colwise().sum().transpose();
        const Mat<T> dxhat_attn = detail::apply_gain(da, lw.attn_norm);
        dx = dx_mid + detail::rmsnorm_backward(al.xhat_attn, al.inv_rms_attn, dxhat_attn);
    }

    for (int i = 0; i < n; ++i) g.embedding.row(tokens[size_t(i)]) += dx.row(i);
    return out;
}

template <typename T>
double masked_loss(const WeightsT<T>& w, const std::vector<int32_t>& tokens,
                   const std::vector<int64_t>& coords, const VisibilitySpec& vis,
                   const std::vector<int32_t>& targets, const std::vector<uint8_t>& loss_mask) {
    if (targets.size() != tokens.size() || loss_mask.size() != tokens.size()) {
        throw DimensionMismatchError("targets and loss mask must match the entry count");
    }
    auto acts = run_forward(w, tokens, coords, vis);
    const int n = int(tokens.size());
    const int V = w.config.vocab_size;
    int64_t m = 0;
    for (uint8_t flag : loss_mask) m += flag ? 1 : 0;
    if (m == 0) return 0.0;
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (!loss_mask[size_t(i)]) continue;
        double best = double(acts.logits(i, 0));
        for (int t = 1; t < V; ++t) best = std::max(best, double(acts.logits(i, t)));
        double denom = 0.0;
        for (int t = 0; t < V; ++t) denom += std::exp(double(acts.logits(i, t)) - best);
        loss += (std::log(denom) + best - double(acts.logits(i, targets[size_t(i)]))) / double(m);
    }
    return loss;
}

}  // namespace edlm::model
