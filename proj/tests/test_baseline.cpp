#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "msd/baseline.hpp"
#include "msd/rng.hpp"
#include "msd/synthgen.hpp"

using namespace msd;

namespace {

raster::MultispectralTile random_tile(int size, int channels, std::uint64_t seed) {
    synth::TextureParams tp;
    tp.correlation_length = 1.5;
    tp.dynamic_range = 9000;
    tp.seed = seed;
    return synth::gen_pristine_tile(tp, size, channels);
}

}  // namespace

TEST_CASE("augment: zero probabilities are the identity") {
    baseline::AugmentationConfig cfg;
    cfg.blur_prob = cfg.shift_prob = cfg.rotation_prob = cfg.flip_prob = 0.0;
    const auto tile = random_tile(32, 3, 1);
    const auto out = baseline::augment(tile, cfg, 42);
    CHECK(out.samples == tile.samples);
    CHECK(out.label == tile.label);
}

TEST_CASE("augment primitives: involutions and group identity") {
    const auto tile = random_tile(32, 2, 2);
    CHECK(baseline::flip_h(baseline::flip_h(tile)).samples == tile.samples);
    CHECK(baseline::flip_v(baseline::flip_v(tile)).samples == tile.samples);
    auto r = tile;
    for (int i = 0; i < 4; ++i) r = baseline::rot90(r, 1);
    CHECK(r.samples == tile.samples);
    CHECK(baseline::rot90(tile, 4).samples == tile.samples);
    CHECK(baseline::rot90(baseline::rot90(tile, 3), 1).samples == tile.samples);
}

TEST_CASE("augment preserves shape, label and sample range; deterministic under seed") {
    baseline::AugmentationConfig cfg;  // all transforms at default probability
    rng::Generator gen(5);
    for (int rep = 0; rep < 12; ++rep) {
        auto tile = random_tile(32, 2, 100 + rep);
        tile.label = rep % 2 ? raster::Label::generated : raster::Label::pristine;
        const std::uint64_t seed = gen.next_u64();
        const auto a = baseline::augment(tile, cfg, seed);
        const auto b = baseline::augment(tile, cfg, seed);
        REQUIRE(a.samples == b.samples);
        REQUIRE(a.height == tile.height);
        REQUIRE(a.width == tile.width);
        REQUIRE(a.channels() == tile.channels());
        REQUIRE(a.label == tile.label);
    }
}

TEST_CASE("shift pads by edge replication") {
    auto tile = random_tile(16, 1, 7);
    const auto shifted = baseline::shift_tile(tile, 3, 0);
    // the left 3 columns replicate the original left edge
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 3; ++x) REQUIRE(shifted.at(0, y, x) == tile.at(0, y, 0));
    for (int y = 0; y < 16; ++y)
        for (int x = 3; x < 16; ++x) REQUIRE(shifted.at(0, y, x) == tile.at(0, y, x - 3));
}

TEST_CASE("classifier: stem downsampling toggle changes only the stem stride") {
    baseline::CnnConfig down;
    down.input_channels = 2;
    down.bands = {0, 1};
    down.width = 8;
    down.depth = 2;
    down.stem_downsample = true;
    down.seed = 5;
    baseline::CnnConfig nodown = down;
    nodown.stem_downsample = false;

    baseline::BinaryCnn a(down), b(nodown);
    CHECK(a.first_feature_map(64, 64) == std::array<int, 2>{32, 32});
    CHECK(b.first_feature_map(64, 64) == std::array<int, 2>{64, 64});
    CHECK(a.parameter_count() == b.parameter_count());

    // Identical seeds give identical initial parameters.
    baseline::BinaryCnn a2(down);
    auto pa = a.parameters();
    auto pa2 = a2.parameters();
    REQUIRE(pa.size() == pa2.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->value.shape == pa2[i]->value.shape);
        for (std::int64_t j = 0; j < pa[i]->value.size(); ++j)
            REQUIRE(pa[i]->value[j] == pa2[i]->value[j]);
    }
}

TEST_CASE("classifier rejects tiles missing its bands") {
    baseline::CnnConfig cfg;
    cfg.input_channels = 13;
    cfg.width = 4;
    cfg.depth = 1;
    baseline::BinaryCnn model(cfg);
    const auto three_band = random_tile(32, 3, 9);  // bands 0,1,2 only
    CHECK_THROWS_AS(model.score(three_band), nn::NnError);
}

TEST_CASE("score is a logistic: range (0,1), 0.5 for a zeroed head") {
    baseline::CnnConfig cfg;
    cfg.input_channels = 1;
    cfg.bands = {0};
    cfg.width = 6;
    cfg.depth = 2;
    baseline::BinaryCnn model(cfg);
    const auto tile = random_tile(32, 1, 11);

    const double s = model.score(tile);
    CHECK(s > 0.0);
    CHECK(s < 1.0);
    CHECK(model.score(tile) == s);  // deterministic

    for (auto* p : model.parameters())
        if (p->name == "head.w" || p->name == "head.b")
            std::fill(p->value.data.begin(), p->value.data.end(), 0.0f);
    CHECK(model.score(tile) == doctest::Approx(0.5));
}

TEST_CASE("gradient check passes through the classifier composition end-to-end") {
    // Same composition as BinaryCnn (conv stride 2 + bias + relu, stacked,
    // GAP, linear, BCE), in 64-bit mode.
    rng::Generator gen(13);
    auto rnd = [&](std::vector<int> shape, double scale) {
        nn::Tensor<double> t(std::move(shape));
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = scale * gen.normal();
        return t;
    };
    nn::Parameter<double> stem_w("stem.w", rnd({4, 2, 3, 3}, 0.4));
    nn::Parameter<double> stem_b("stem.b", rnd({4}, 0.2));
    nn::Parameter<double> s0_w("s0.w", rnd({4, 4, 3, 3}, 0.4));
    nn::Parameter<double> s0_b("s0.b", rnd({4}, 0.2));
    nn::Parameter<double> head_w("head.w", rnd({4, 1}, 0.5));
    nn::Parameter<double> head_b("head.b", rnd({1}, 0.2));
    auto x = rnd({2, 2, 8, 8}, 1.0);
    nn::Tensor<double> targets({2}, {1.0, 0.0});

    auto build = [&](nn::TapeD& t) {
        auto h = t.relu(t.bias_add(t.conv2d(t.input(x), t.param(stem_w), 2, 1), t.param(stem_b)));
        h = t.relu(t.bias_add(t.conv2d(h, t.param(s0_w), 2, 1), t.param(s0_b)));
        auto z = t.bias_add(t.linear(t.global_avg_pool(h), t.param(head_w)), t.param(head_b));
        return t.bce_with_logits(z, targets);
    };

    std::vector<nn::Parameter<double>*> params = {&stem_w, &stem_b, &s0_w,
                                                  &s0_b,   &head_w, &head_b};
    nn::TapeD tape;
    auto loss = build(tape);
    nn::zero_grads(params);
    tape.backward(loss);
    const double step = 1e-5;
    for (auto* p : params) {
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            const double an = p->grad[i];
            p->value[i] = orig + step;
            nn::TapeD tp;
            const double lp = tp.value(build(tp))[0];
            p->value[i] = orig - step;
            nn::TapeD tm;
            const double lm = tm.value(build(tm))[0];
            p->value[i] = orig;
            const double fd = (lp - lm) / (2 * step);
            REQUIRE(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3}) < 1e-4);
        }
    }
}

TEST_CASE("binary training separates checkerboard from pristine at desk scale") {
    const auto root = std::filesystem::temp_directory_path() / "msd_bintrain";
    std::filesystem::remove_all(root);
    raster::TileStore store(root);

    synth::PseudoDatasetSpec spec;
    spec.name = "d";
    spec.n_pristine = 100;
    spec.n_generated = 100;
    spec.tile_size = 32;
    spec.channels = 2;
    spec.texture.correlation_length = 2.0;
    spec.texture.dynamic_range = 7000;
    spec.perturbation.family = synth::Family::checkerboard;
    spec.perturbation.strength = 0.6;
    spec.seed = 99;
    spec.plan.add(raster::Split::train_detector, raster::Label::pristine, 100);
    spec.plan.add(raster::Split::train_detector, raster::Label::generated, 100);
    const auto manifest = synth::build_pseudo_dataset(spec, store);

    baseline::CnnConfig cfg;
    cfg.input_channels = 2;
    cfg.bands = {0, 1};
    cfg.width = 8;
    cfg.depth = 2;
    cfg.stem_downsample = false;
    cfg.seed = 3;

    baseline::AugmentationConfig aug;
    aug.blur_prob = 0.2;  // keep blur rare so the cue survives augmentation
    baseline::BinaryTrainRun run;
    run.epochs = 30;
    run.batch_size = 16;
    run.patience = 30;
    run.lr = 2e-3;
    run.seed = 7;

    baseline::BinaryCnn model(cfg);
    const auto log = baseline::train_binary(model, manifest, store, aug, run);
    REQUIRE(!log.epochs.empty());
    const double best_acc = 1.0 - log.best_val;
    CHECK(best_acc > 0.9);
    CHECK(log.epochs.size() <= 30);

    // Frozen seeds give identical loss curves.
    baseline::BinaryCnn model2(cfg);
    const auto log2 = baseline::train_binary(model2, manifest, store, aug, run);
    REQUIRE(log.epochs.size() == log2.epochs.size());
    for (std::size_t i = 0; i < log.epochs.size(); ++i) {
        REQUIRE(log.epochs[i].train_loss == log2.epochs[i].train_loss);
        REQUIRE(log.epochs[i].val_loss == log2.epochs[i].val_loss);
    }

    // Single-label split rejected.
    raster::DatasetManifest single;
    single.name = "single";
    for (const auto& e : manifest.entries)
        if (e.label == raster::Label::pristine) single.entries.push_back(e);
    baseline::BinaryCnn model3(cfg);
    CHECK_THROWS_AS(baseline::train_binary(model3, single, store, aug, run),
                    baseline::BaselineError);

    // Checkpoint round-trip.
    const auto ckpt = root / "bin.ckpt";
    model.save(ckpt);
    auto loaded = baseline::BinaryCnn::load(ckpt);
    const auto tile = store.load(manifest.entries.front().locator);
    CHECK(loaded.score(tile) == model.score(tile));
}
