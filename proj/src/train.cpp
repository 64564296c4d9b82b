#include "edlm/train.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <utility>

namespace edlm::train {

const char* task_name(Task task) {
    switch (task) {
        case Task::count_sequence: return "count_sequence";
        case Task::copy_reverse: return "copy_reverse";
    }
    return "unknown";
}

Task task_from_name(const std::string& name) {
    if (name == "count_sequence") return Task::count_sequence;
    if (name == "copy_reverse") return Task::copy_reverse;
    throw BadConfigError("unknown corpus task: " + name);
}

namespace {

// largest sequence value the vocab can hold
int64_t max_value(int32_t vocab_size) { return int64_t(vocab_size) - 1 - kValueOffset; }

std::vector<std::pair<float*, size_t>> tensor_spans(model::Weights& w) {
    std::vector<std::pair<float*, size_t>> spans;
    model::for_each_tensor(w, [&](float* data, size_t n, const char*) {
        spans.emplace_back(data, n);
    });
    return spans;
}

}  // namespace

void SyntheticCorpusSpec::validate() const {
    if (seq_len < 3 || seq_len > 64) {
        throw BadConfigError("seq_len must lie in [3, 64]");
    }
    if (size < 0) throw BadConfigError("corpus size must be non-negative");
    if (vocab_size < 1) throw BadConfigError("vocab_size must be positive");
}

TrainExample make_count_example(int64_t a, int64_t b, int64_t seq_len, int32_t vocab_size) {
    if (a < 0 || b < a) throw BadConfigError("need 0 <= a <= b");
    if (b > max_value(vocab_size)) {
        throw VocabOverflowError("value " + std::to_string(b) + " does not fit the vocab");
    }
    const int64_t count = b - a + 1;
    if (count + 2 > seq_len) throw BadConfigError("sequence does not fit seq_len");

    const model::SpecialTokens specials;
    TrainExample ex;
    ex.tokens.assign(size_t(seq_len), specials.pad);
    ex.tokens[0] = specials.bos;
    for (int64_t v = a; v <= b; ++v) {
        ex.tokens[size_t(1 + v - a)] = int32_t(kValueOffset + v);
    }
    ex.tokens[size_t(1 + count)] = specials.eos;
    ex.prompt_len = 2;  // [BOS] and the starting value condition the rest
    return ex;
}

std::vector<TrainExample> generate_corpus(const SyntheticCorpusSpec& spec) {
    spec.validate();
    const int64_t top = max_value(spec.vocab_size);
    if (top < 0) throw VocabOverflowError("vocab has no room for sequence values");

    const model::SpecialTokens specials;
    Prng rng(spec.seed);
    std::vector<TrainExample> corpus;
    corpus.reserve(size_t(spec.size));
    for (int64_t i = 0; i < spec.size; ++i) {
        if (spec.task == Task::count_sequence) {
            const int64_t max_run = std::min<int64_t>(spec.seq_len - 2, top + 1);
            const int64_t run = rng.range(1, max_run);
            const int64_t a = rng.range(0, top - (run - 1));
            corpus.push_back(make_count_example(a, a + run - 1, spec.seq_len, spec.vocab_size));
        } else {
            const int64_t max_payload = (spec.seq_len - 2) / 2;
            if (max_payload < 1) {
                throw BadConfigError("seq_len too small for copy_reverse");
            }
            const int64_t payload = rng.range(1, max_payload);
            TrainExample ex;
            ex.tokens.assign(size_t(spec.seq_len), specials.pad);
            ex.tokens[0] = specials.bos;
            for (int64_t k = 0; k < payload; ++k) {
                const auto id = int32_t(kValueOffset + rng.range(0, top));
                ex.tokens[size_t(1 + k)] = id;
                ex.tokens[size_t(payload + (payload - k))] = id;  // mirrored copy
            }
            ex.tokens[size_t(1 + 2 * payload)] = specials.eos;
            ex.prompt_len = 1 + payload;
            corpus.push_back(std::move(ex));
        }
    }
    return corpus;
}

void TrainConfig::validate() const {
    if (steps < 1) throw BadConfigError("steps must be at least 1");
    if (batch_size < 1) throw BadConfigError("batch_size must be at least 1");
    if (!(learning_rate > 0.0)) throw BadConfigError("learning_rate must be positive");
}

double train_step(model::Weights& weights, const std::vector<TrainExample>& batch,
                  const TrainConfig& config, Prng& rng) {
    if (batch.empty()) throw BadConfigError("train_step needs a non-empty batch");
    const auto& mc = weights.config;

    auto grad_sum = model::zero_weights<float>(mc);
    auto sum_spans = tensor_spans(grad_sum);
    double loss_sum = 0.0;
    int64_t total_masked = 0;

    std::vector<int32_t> input;
    std::vector<uint8_t> mask;
    for (const auto& ex : batch) {
        const auto n = int64_t(ex.tokens.size());
        if (ex.prompt_len < 0 || ex.prompt_len >= n) {
            throw BadConfigError("example has no maskable span");
        }
        // resample t until at least one position masks
        int64_t masked = 0;
        while (masked == 0) {
            const double t = rng.uniform01();
            input = ex.tokens;
            mask.assign(size_t(n), 0);
            for (int64_t i = ex.prompt_len; i < n; ++i) {
                if (rng.uniform01() < t) {
                    mask[size_t(i)] = 1;
                    input[size_t(i)] = mc.specials.mask;
                    ++masked;
                }
            }
        }

        std::vector<int64_t> coords(static_cast<size_t>(n));
        std::iota(coords.begin(), coords.end(), 0);
        const auto vis = model::VisibilitySpec::full(int(n));
        auto lg = model::masked_loss_and_grad(weights, input, coords, vis, ex.tokens, mask);

        loss_sum += lg.loss * double(lg.masked_count);
        total_masked += lg.masked_count;
        const auto w_masked = float(lg.masked_count);
        const auto grad_spans = tensor_spans(lg.grads);
        for (size_t s = 0; s < sum_spans.size(); ++s) {
            float* acc = sum_spans[s].first;
            const float* g = grad_spans[s].first;
            for (size_t j = 0; j < sum_spans[s].second; ++j) acc[j] += w_masked * g[j];
        }
    }

    const double scale = 1.0 / double(total_masked);
    const auto step_size = float(config.learning_rate * scale);
    auto weight_spans = tensor_spans(weights);
    for (size_t s = 0; s < weight_spans.size(); ++s) {
        float* w = weight_spans[s].first;
        const float* acc = sum_spans[s].first;
        for (size_t j = 0; j < weight_spans[s].second; ++j) w[j] -= step_size * acc[j];
    }
    return loss_sum * scale;
}

std::vector<double> train(model::Weights& weights, const std::vector<TrainExample>& corpus,
                          const TrainConfig& config) {
    config.validate();
    if (corpus.empty()) throw BadConfigError("train needs a non-empty corpus");

    Prng rng(config.seed);
    std::vector<double> curve;
    curve.reserve(size_t(config.steps));
    std::vector<TrainExample> batch;
    for (int64_t step = 0; step < config.steps; ++step) {
        batch.clear();
        for (int64_t b = 0; b < config.batch_size; ++b) {
            batch.push_back(corpus[size_t(rng.below(uint64_t(corpus.size())))]);
        }
        curve.push_back(train_step(weights, batch, config, rng));
    }
    return curve;
}

void write_loss_csv(const std::vector<double>& curve, std::ostream& out) {
    out << "step,loss\n";
    char line[64];
    for (size_t i = 0; i < curve.size(); ++i) {
        std::snprintf(line, sizeof(line), "%zu,%.17g\n", i, curve[i]);
        out << line;
    }
}

}  // namespace edlm::train
