#include "edlm/reference.hpp"

#include <cmath>

namespace edlm::reference {

namespace {

using Row = std::vector<double>;
using Grid = std::vector<Row>;

Row normalize_row(const Row& x) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    const double r = 1.0 / std::sqrt(ms / double(x.size()) + 1e-5);
    Row out(x.size());
    for (size_t j = 0; j < x.size(); ++j) out[j] = x[j] * r;
    return out;
}

Row gained_row(const Row& x, const model::Vec<float>& gain) {
    Row out(x.size());
    for (size_t j = 0; j < x.size(); ++j) out[j] = x[j] * double(gain(Eigen::Index(j)));
    return out;
}

// y_j = sum_i x_i W(i, j)
Row project_row(const Row& x, const model::Mat<float>& weight) {
    Row y(size_t(weight.cols()), 0.0);
    for (size_t i = 0; i < x.size(); ++i) {
        for (size_t j = 0; j < y.size(); ++j) {
            y[j] += x[i] * double(weight(Eigen::Index(i), Eigen::Index(j)));
        }
    }
    return y;
}

double gelu(double x) {
    const double inner = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(inner));
}

void rotate_pairs(Row& v, size_t lo, int head_dim, int64_t pos, double theta_base) {
    for (int p = 0; p < head_dim / 2; ++p) {
        const double angle = double(pos) * std::pow(theta_base, -2.0 * p / head_dim);
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = v[lo + size_t(2 * p)];
        const double y = v[lo + size_t(2 * p + 1)];
        v[lo + size_t(2 * p)] = x * c - y * s;
        v[lo + size_t(2 * p + 1)] = x * s + y * c;
    }
}

}  // namespace

std::vector<std::vector<double>> forward_logits(const model::Weights& w,
                                                const std::vector<int32_t>& tokens,
                                                const std::vector<int64_t>& coords,
                                                const model::VisibilitySpec& vis) {
    const auto& cfg = w.config;
    const size_t n = tokens.size();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();

    Grid x(n, Row(size_t(d)));
    for (size_t i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            x[i][size_t(j)] = double(w.embedding(tokens[i], j));
        }
    }

    for (const auto& lw : w.layers) {
        Grid q(n), k(n), v(n);
        for (size_t i = 0; i < n; ++i) {
            const Row a = gained_row(normalize_row(x[i]), lw.attn_norm);
            q[i] = project_row(a, lw.wq);
            k[i] = project_row(a, lw.wk);
            v[i] = project_row(a, lw.wv);
            for (int h = 0; h < cfg.num_heads; ++h) {
                rotate_pairs(q[i], size_t(h * hd), hd, coords[i], cfg.theta_base);
                rotate_pairs(k[i], size_t(h * hd), hd, coords[i], cfg.theta_base);
            }
        }

        Grid attn_out(n, Row(size_t(d), 0.0));
        for (int h = 0; h < cfg.num_heads; ++h) {
            const size_t lo = size_t(h * hd);
            for (size_t qi = 0; qi < n; ++qi) {
                Row scores(n, 0.0);
                double best = -1e300;
                for (size_t ki = 0; ki < n; ++ki) {
                    if (!vis.visible(int(qi), int(ki))) continue;
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += q[qi][lo + size_t(c)] * k[ki][lo + size_t(c)];
                    scores[ki] = s / std::sqrt(double(hd));
                    best = std::max(best, scores[ki]);
                }
                double denom = 0.0;
                for (size_t ki = 0; ki < n; ++ki) {
                    if (vis.visible(int(qi), int(ki))) denom += std::exp(scores[ki] - best);
                }
                for (size_t ki = 0; ki < n; ++ki) {
                    if (!vis.visible(int(qi), int(ki))) continue;
                    const double p = std::exp(scores[ki] - best) / denom;
                    for (int c = 0; c < hd; ++c) {
                        attn_out[qi][lo + size_t(c)] += p * v[ki][lo + size_t(c)];
                    }
                }
            }
        }
        for (size_t i = 0; i < n; ++i) {
            const Row o = project_row(attn_out[i], lw.wo);
            for (int j = 0; j < d; ++j) x[i][size_t(j)] += o[size_t(j)];
        }

        for (size_t i = 0; i < n; ++i) {
            const Row b = gained_row(normalize_row(x[i]), lw.mlp_norm);
            Row u = project_row(b, lw.w1);
            for (double& val : u) val = gelu(val);
            const Row m = project_row(u, lw.w2);
            for (int j = 0; j < d; ++j) x[i][size_t(j)] += m[size_t(j)];
        }
    }

    Grid logits(n, Row(size_t(cfg.vocab_size), 0.0));
    for (size_t i = 0; i < n; ++i) {
        const Row f = gained_row(normalize_row(x[i]), w.final_norm);
        for (int t = 0; t < cfg.vocab_size; ++t) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) acc += f[size_t(j)] * double(w.embedding(t, j));
            logits[i][size_t(t)] = acc;
        }
    }
    return logits;
}

}  // namespace edlm::reference
