#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "edlm/model.hpp"
#include "edlm/prng.hpp"

namespace edlm::train {

enum class Task : uint8_t { count_sequence, copy_reverse };

const char* task_name(Task task);
Task task_from_name(const std::string& name);

// sequence values live at ids kValueOffset + v, after the special tokens
constexpr int32_t kValueOffset = 4;

struct TrainExample {
    std::vector<int32_t> tokens;  // exactly seq_len ids: payload, [EOS], [PAD] tail
    int64_t prompt_len = 0;       // leading conditioning span, never masked
};

struct SyntheticCorpusSpec {
    Task task = Task::count_sequence;
    int64_t seq_len = 32;  // full padded length, at most 64
    int32_t vocab_size = 64;
    int64_t size = 256;
    uint64_t seed = 0;

    void validate() const;
};

// [BOS] a a+1 ... b [EOS] [PAD]...; the prompt is [BOS] plus the first value.
TrainExample make_count_example(int64_t a, int64_t b, int64_t seq_len, int32_t vocab_size);

std::vector<TrainExample> generate_corpus(const SyntheticCorpusSpec& spec);

struct TrainConfig {
    int64_t steps = 2000;
    int64_t batch_size = 16;
    double learning_rate = 0.05;
    uint64_t seed = 0;

    void validate() const;  // steps >= 1, batch_size >= 1, learning_rate > 0
};

// One SGD update. Per example: draw t ~ U(0,1), mask each non-prompt token
// with probability t (redrawing if nothing masks), then take the flat mean
// cross-entropy over every masked position in the batch. Returns that loss.
// The learning rate is applied as given, so 0 is a measured no-op.
double train_step(model::Weights& weights, const std::vector<TrainExample>& batch,
                  const TrainConfig& config, Prng& rng);

// Runs config.steps updates with batches sampled from the corpus by the
// seeded stream. Returns the per-step loss curve.
std::vector<double> train(model::Weights& weights, const std::vector<TrainExample>& corpus,
                          const TrainConfig& config);

void write_loss_csv(const std::vector<double>& curve, std::ostream& out);

}  // namespace edlm::train
