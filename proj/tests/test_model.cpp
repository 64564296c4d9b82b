#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <numeric>
#include <vector>

#include "edlm/model.hpp"
#include "edlm/prng.hpp"
#include "edlm/reference.hpp"

using namespace edlm;
using namespace edlm::model;

namespace {

ModelConfig tiny_config(uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 16;
    cfg.num_heads = 2;
    cfg.num_layers = 2;
    cfg.init_seed = seed;
    return cfg;
}

std::vector<int32_t> random_tokens(Prng& rng, const ModelConfig& cfg, size_t n) {
    std::vector<int32_t> out(n);
    for (auto& t : out) t = int32_t(rng.range(0, cfg.vocab_size - 1));
    return out;
}

std::vector<int64_t> iota_coords(size_t n) {
    std::vector<int64_t> out(n);
    std::iota(out.begin(), out.end(), 0);
    return out;
}

double engine_vs_reference(const Weights& w, const std::vector<int32_t>& tokens,
                           const std::vector<int64_t>& coords, const VisibilitySpec& vis) {
    const auto logits = forward(w, tokens, coords, vis);
    const auto oracle = reference::forward_logits(w, tokens, coords, vis);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            worst = std::max(worst, std::abs(double(logits(i, j)) - oracle[size_t(i)][size_t(j)]));
        }
    }
    return worst;
}

uint64_t weight_checksum(const Weights& w) {
    uint64_t acc = 1469598103934665603ull;
    for_each_tensor(w, [&](const float* data, size_t count, const char*) {
        for (size_t i = 0; i < count; ++i) {
            uint32_t bits;
            std::memcpy(&bits, &data[i], sizeof(bits));
            acc = (acc ^ bits) * 1099511628211ull;
        }
    });
    return acc;
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig bad;
    bad.d_model = 65;
    bad.num_heads = 4;
    CHECK_THROWS_AS(bad.validate(), DimensionMismatchError);

    ModelConfig dup;
    dup.specials.eos = dup.specials.mask;
    CHECK_THROWS_AS(dup.validate(), BadConfigError);

    ModelConfig big_special;
    big_special.specials.mask = 64;
    CHECK_THROWS_AS(big_special.validate(), BadConfigError);

    CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("weight init is seed-deterministic and seed-sensitive") {
    ModelConfig cfg;
    cfg.init_seed = 7;
    const auto a = init_weights(cfg);
    const auto b = init_weights(cfg);
    CHECK(weight_checksum(a) == weight_checksum(b));

    cfg.init_seed = 8;
    const auto c = init_weights(cfg);
    CHECK(weight_checksum(a) != weight_checksum(c));

    // gains start at one, projections at small scale
    CHECK(a.final_norm(0) == 1.0f);
    CHECK(a.layers[0].attn_norm(5) == 1.0f);
    CHECK(std::abs(a.layers[0].wq(3, 3)) < 0.2f);
}

TEST_CASE("weights file round trip") {
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "edlm_model_roundtrip.bin").string();
    ModelConfig cfg;
    cfg.init_seed = 99;
    const auto w = init_weights(cfg);
    save_weights(w, path);
    const auto back = load_weights(path);
    CHECK(back.config.vocab_size == cfg.vocab_size);
    CHECK(back.config.init_seed == cfg.init_seed);
    CHECK(back.config.theta_base == cfg.theta_base);
    CHECK(weight_checksum(back) == weight_checksum(w));

    // corrupt the magic
    {
        std::FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f != nullptr);
        std::fputc('X', f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_weights(path), BadWeightsError);

    // truncate mid-tensor
    save_weights(w, path);
    fs::resize_file(path, fs::file_size(path) / 2);
    CHECK_THROWS_AS(load_weights(path), BadWeightsError);
    fs::remove(path);
    CHECK_THROWS_AS(load_weights(path), BadWeightsError);
}

TEST_CASE("dense forward matches the scalar reference") {
    ModelConfig cfg;
    cfg.init_seed = 11;
    const auto w = init_weights(cfg);
    Prng rng(100);
    for (int it = 0; it < 5; ++it) {
        const size_t n = size_t(rng.range(1, 48));
        const auto tokens = random_tokens(rng, cfg, n);
        const auto vis = VisibilitySpec::full(int(n));
        CHECK(engine_vs_reference(w, tokens, iota_coords(n), vis) <= 1e-5);
    }
}

TEST_CASE("compressed layouts match the scalar reference") {
    ModelConfig cfg;
    cfg.init_seed = 12;
    const auto w = init_weights(cfg);
    Prng rng(101);
    for (int it = 0; it < 10; ++it) {
        const int64_t bs = rng.range(4, 16);
        const int M = int(rng.range(3, 8));
        const int64_t prompt = rng.range(0, 24);
        const auto part = layout::partition_blocks(prompt, M * bs, bs);
        const int c = int(rng.range(1, M));
        layout::RetentionConfig rc;
        rc.r = rng.range(1, 3);
        rc.fold_enabled = rng.below(2) == 1;
        rc.k_recent = 1;
        rc.f = 2;
        const auto sel = rc.fold_enabled ? layout::build_fold_set(part, c, rc)
                                         : layout::build_retention_set(part, c, rc);
        const auto coords = sel.positions();
        const auto tokens = random_tokens(rng, cfg, sel.size());
        const auto vis = VisibilitySpec::full(int(sel.size()));
        CHECK(engine_vs_reference(w, tokens, coords, vis) <= 1e-5);
    }
}

TEST_CASE("attention capture is row-stochastic and honors masking") {
    ModelConfig cfg = tiny_config(13);
    const auto w = init_weights(cfg);
    Prng rng(102);
    const size_t n = 12;
    const auto tokens = random_tokens(rng, cfg, n);
    const auto coords = iota_coords(n);

    auto vis = VisibilitySpec::full(int(n));
    vis.set(3, 7, false);
    vis.set(3, 8, false);
    vis.set(9, 0, false);

    for (int l = 0; l < cfg.num_layers; ++l) {
        for (int h = 0; h < cfg.num_heads; ++h) {
            const auto P = capture_attention(w, tokens, coords, vis, l, h);
            REQUIRE(P.rows() == Eigen::Index(n));
            REQUIRE(P.cols() == Eigen::Index(n));
            for (Eigen::Index q = 0; q < P.rows(); ++q) {
                CHECK(std::abs(P.row(q).sum() - 1.0f) <= 1e-5f);
            }
            CHECK(P(3, 7) == 0.0f);
            CHECK(P(3, 8) == 0.0f);
            CHECK(P(9, 0) == 0.0f);
        }
    }

    CHECK_THROWS_AS(capture_attention(w, tokens, coords, vis, cfg.num_layers, 0),
                    IndexOutOfRangeError);
    CHECK_THROWS_AS(capture_attention(w, tokens, coords, vis, 0, cfg.num_heads),
                    IndexOutOfRangeError);

    // single entry: the only softmax cell is exactly one
    const std::vector<int32_t> one_token{5};
    const std::vector<int64_t> one_coord{0};
    const auto P1 = capture_attention(w, one_token, one_coord, VisibilitySpec::full(1), 0, 0);
    CHECK(P1.rows() == 1);
    CHECK(P1(0, 0) == 1.0f);
}

TEST_CASE("restricted softmax equals the renormalized full softmax") {
    // layer-0 scores do not depend on visibility, so restricting visibility
    // must equal masking and renormalizing the full attention row
    ModelConfig cfg = tiny_config(14);
    const auto w = init_weights(cfg);
    Prng rng(103);
    const size_t n = 10;
    const auto tokens = random_tokens(rng, cfg, n);
    const auto coords = iota_coords(n);

    auto vis = VisibilitySpec::full(int(n));
    for (int q = 0; q < int(n); ++q) {
        for (int k = 0; k < int(n); ++k) {
            if (k != q && rng.below(3) == 0) vis.set(q, k, false);
        }
    }

    const auto full = capture_attention(w, tokens, coords, VisibilitySpec::full(int(n)), 0, 1);
    const auto masked = capture_attention(w, tokens, coords, vis, 0, 1);
    for (int q = 0; q < int(n); ++q) {
        double denom = 0.0;
        for (int k = 0; k < int(n); ++k) {
            if (vis.visible(q, k)) denom += double(full(q, k));
        }
        for (int k = 0; k < int(n); ++k) {
            const double want = vis.visible(q, k) ? double(full(q, k)) / denom : 0.0;
            CHECK(std::abs(double(masked(q, k)) - want) <= 1e-6);
        }
    }
}

TEST_CASE("anchor visibility: main sees the anchor, the anchor sees itself") {
    ModelConfig cfg = tiny_config(15);
    const auto w = init_weights(cfg);
    const auto part = layout::partition_blocks(4, 64, 8);
    const auto sel = layout::build_block_augmented_set(4, 1, part, layout::AnchorConfig{});
    REQUIRE(sel.has_anchor());
    const int n = int(sel.size());
    const int a = sel.anchor_index();

    Prng rng(104);
    std::vector<int32_t> tokens(size_t(n), cfg.specials.mask);
    for (int i = 0; i < 4; ++i) tokens[size_t(i)] = int32_t(rng.range(4, cfg.vocab_size - 1));

    const auto vis = VisibilitySpec::for_selection(sel, layout::AnchorAttention::main_only_sees);
    for (int k = 0; k < n; ++k) CHECK(vis.visible(a, k) == (k == a));
    for (int q = 0; q < n; ++q) CHECK(vis.visible(q, a));

    const auto P = capture_attention(w, tokens, sel.positions(), vis, 1, 0);
    for (int k = 0; k < n; ++k) {
        CHECK(P(a, k) == (k == a ? 1.0f : 0.0f));  // exactly one-hot
    }

    const auto both = VisibilitySpec::for_selection(sel, layout::AnchorAttention::bidirectional);
    const auto P2 = capture_attention(w, tokens, sel.positions(), both, 1, 0);
    CHECK(P2(a, 0) > 0.0f);
}

TEST_CASE("permuting entries permutes logits") {
    ModelConfig cfg = tiny_config(16);
    const auto w = init_weights(cfg);
    Prng rng(105);
    const size_t n = 14;
    const auto tokens = random_tokens(rng, cfg, n);
    std::vector<int64_t> coords(n);
    for (auto& c : coords) c = rng.range(0, 200);

    std::vector<size_t> perm(n);
    std::iota(perm.begin(), perm.end(), size_t(0));
    for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[size_t(rng.below(i))]);

    std::vector<int32_t> ptokens(n);
    std::vector<int64_t> pcoords(n);
    for (size_t i = 0; i < n; ++i) {
        ptokens[i] = tokens[perm[i]];
        pcoords[i] = coords[perm[i]];
    }

    const auto vis = VisibilitySpec::full(int(n));
    const auto base = forward(w, tokens, coords, vis);
    const auto shuffled = forward(w, ptokens, pcoords, vis);
    for (size_t i = 0; i < n; ++i) {
        const double diff = (shuffled.row(Eigen::Index(i)) - base.row(Eigen::Index(perm[i])))
                                .cwiseAbs()
                                .maxCoeff();
        CHECK(diff <= 1e-5);
    }
}

TEST_CASE("compact re-indexing changes compressed logits but not dense ones") {
    ModelConfig cfg;
    cfg.init_seed = 17;
    const auto w = init_weights(cfg);
    Prng rng(106);

    const auto part = layout::partition_blocks(16, 128, 16);
    layout::RetentionConfig rc;
    rc.r = 4;
    const auto sel = layout::build_retention_set(part, 3, rc);
    const auto ranks = layout::compact_ranks(sel);
    const auto tokens = random_tokens(rng, cfg, sel.size());
    const auto vis = VisibilitySpec::full(int(sel.size()));

    std::vector<int64_t> preserved, compact;
    for (const auto& e : sel.entries) {
        preserved.push_back(rope::position_for_entry(e, layout::PositionMode::preserved, ranks));
        compact.push_back(rope::position_for_entry(e, layout::PositionMode::compact_rank, ranks));
    }
    const auto lp = forward(w, tokens, preserved, vis);
    const auto lc = forward(w, tokens, compact, vis);
    CHECK((lp - lc).cwiseAbs().maxCoeff() > 1e-3f);

    // dense from zero: the two modes assign identical coordinates
    const auto dense_part = layout::partition_blocks(0, 48, 16);
    layout::RetentionConfig dense_rc;
    dense_rc.r = 16;
    const auto dense = layout::build_retention_set(dense_part, 1, dense_rc);
    const auto dense_ranks = layout::compact_ranks(dense);
    const auto dtokens = random_tokens(rng, cfg, dense.size());
    const auto dvis = VisibilitySpec::full(int(dense.size()));
    std::vector<int64_t> dp, dc;
    for (const auto& e : dense.entries) {
        dp.push_back(rope::position_for_entry(e, layout::PositionMode::preserved, dense_ranks));
        dc.push_back(rope::position_for_entry(e, layout::PositionMode::compact_rank, dense_ranks));
    }
    const auto ldp = forward(w, dtokens, dp, dvis);
    const auto ldc = forward(w, dtokens, dc, dvis);
    CHECK((ldp - ldc).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("hidden state capture") {
    ModelConfig cfg = tiny_config(18);
    const auto w = init_weights(cfg);
    Prng rng(107);
    const size_t n = 9;
    const auto tokens = random_tokens(rng, cfg, n);
    const auto coords = iota_coords(n);
    const auto vis = VisibilitySpec::full(int(n));

    const auto h0 = capture_hidden(w, tokens, coords, vis, 0);
    REQUIRE(h0.rows() == Eigen::Index(n));
    REQUIRE(h0.cols() == cfg.d_model);
    for (size_t i = 0; i < n; ++i) {
        CHECK((h0.row(Eigen::Index(i)) - w.embedding.row(tokens[i])).cwiseAbs().maxCoeff() ==
              0.0f);
    }

    const auto h2 = capture_hidden(w, tokens, coords, vis, cfg.num_layers);
    const auto h2_again = capture_hidden(w, tokens, coords, vis, cfg.num_layers);
    CHECK((h2 - h2_again).cwiseAbs().maxCoeff() == 0.0f);
    CHECK_THROWS_AS(capture_hidden(w, tokens, coords, vis, cfg.num_layers + 1),
                    IndexOutOfRangeError);
}

TEST_CASE("forward rejects malformed inputs") {
    ModelConfig cfg = tiny_config(19);
    const auto w = init_weights(cfg);
    const std::vector<int32_t> tokens{1, 2, 3};
    const std::vector<int64_t> coords{0, 1, 2};

    CHECK_THROWS_AS(forward(w, tokens, {0, 1}, VisibilitySpec::full(3)), DimensionMismatchError);
    CHECK_THROWS_AS(forward(w, tokens, coords, VisibilitySpec::full(2)), DimensionMismatchError);
    CHECK_THROWS_AS(forward(w, {1, 2, 99}, coords, VisibilitySpec::full(3)),
                    IndexOutOfRangeError);

    auto vis = VisibilitySpec::full(3);
    for (int k = 0; k < 3; ++k) vis.set(1, k, false);
    CHECK_THROWS_AS(forward(w, tokens, coords, vis), EmptyVisibilityError);
}

TEST_CASE("analytic gradients match central finite differences") {
    ModelConfig cfg = tiny_config(20);
    const auto wd = widen(init_weights(cfg));
    Prng rng(108);
    const size_t n = 6;
    std::vector<int32_t> tokens(n, cfg.specials.mask);
    std::vector<int32_t> targets(n);
    std::vector<uint8_t> mask(n, 0);
    for (size_t i = 0; i < n; ++i) {
        targets[i] = int32_t(rng.range(4, cfg.vocab_size - 1));
        if (i >= 2) mask[i] = 1;  // first two entries play the prompt
    }
    tokens[0] = 5;
    tokens[1] = 6;
    const auto coords = iota_coords(n);
    const auto vis = VisibilitySpec::full(int(n));

    const auto lg = masked_loss_and_grad(wd, tokens, coords, vis, targets, mask);
    CHECK(lg.masked_count == 4);
    CHECK(lg.loss > 0.0);
    CHECK(lg.loss == doctest::Approx(masked_loss(wd, tokens, coords, vis, targets, mask)));

    auto param_ptr = [](WeightsT<double>& w, size_t idx) {
        double* found = nullptr;
        size_t off = 0;
        for_each_tensor(w, [&](double* data, size_t count, const char*) {
            if (!found && idx < off + count) found = data + (idx - off);
            off += count;
        });
        return found;
    };
    auto grad_at = [&](const WeightsT<double>& g, size_t idx) {
        return *param_ptr(const_cast<WeightsT<double>&>(g), idx);
    };

    auto probe = wd;
    const size_t total = parameter_count(wd);
    const double h = 1e-6;
    for (int trial = 0; trial < 12; ++trial) {
        const size_t idx = size_t(rng.below(total));
        double* p = param_ptr(probe, idx);
        const double saved = *p;
        *p = saved + h;
        const double up = masked_loss(probe, tokens, coords, vis, targets, mask);
        *p = saved - h;
        const double down = masked_loss(probe, tokens, coords, vis, targets, mask);
        *p = saved;
        const double fd = (up - down) / (2.0 * h);
        const double an = grad_at(lg.grads, idx);
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        CHECK(rel <= 1e-3);
    }
}
