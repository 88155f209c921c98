#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "msd/manifest.hpp"
#include "msd/nn/checkpoint.hpp"
#include "msd/rng.hpp"
#include "msd/synthgen.hpp"
#include "msd/vqvae2.hpp"

using namespace msd;
using nn::Tensor;

namespace {

vqvae::Codebook make_codebook(int codes, int dim, std::uint64_t seed) {
    vqvae::Codebook cb;
    cb.entries = Tensor<float>({codes, dim});
    rng::Generator gen(seed);
    for (std::int64_t i = 0; i < cb.entries.size(); ++i)
        cb.entries[i] = static_cast<float>(gen.normal());
    cb.usage = Tensor<float>({codes});
    cb.ema_sums = Tensor<float>({codes, dim});
    cb.stale.assign(static_cast<std::size_t>(codes), 0);
    return cb;
}

vqvae::VqVae2Config small_config(int channels, std::uint64_t seed) {
    vqvae::VqVae2Config cfg;
    cfg.input_channels = channels;
    cfg.width = 8;
    cfg.code_dim = 8;
    cfg.codebook_sizes = {32, 16, 8};
    cfg.res_blocks = 1;
    cfg.seed = seed;
    if (channels == 2) cfg.bands = {0, 1};
    return cfg;
}

struct TestDataset {
    std::filesystem::path root;
    raster::TileStore store{""};
    raster::DatasetManifest manifest;
};

TestDataset make_dataset(const char* tag, std::size_t n_pristine, std::size_t n_generated,
                         int tile_size, int channels) {
    TestDataset ds;
    ds.root = std::filesystem::temp_directory_path() / (std::string("msd_vqtest_") + tag);
    std::filesystem::remove_all(ds.root);
    ds.store = raster::TileStore(ds.root);

    synth::PseudoDatasetSpec spec;
    spec.name = "d";
    spec.n_pristine = n_pristine;
    spec.n_generated = n_generated;
    spec.tile_size = tile_size;
    spec.channels = channels;
    spec.texture.correlation_length = 2.0;
    spec.texture.dynamic_range = 6000;
    spec.perturbation.family = synth::Family::checkerboard;
    spec.perturbation.strength = 0.6;
    spec.seed = 77;
    spec.plan.add(raster::Split::train_oneclass, raster::Label::pristine, n_pristine);
    if (n_generated)
        spec.plan.add(raster::Split::test, raster::Label::generated, n_generated);
    ds.manifest = synth::build_pseudo_dataset(spec, ds.store);
    return ds;
}

}  // namespace

TEST_CASE("quantize: exact entry, nearest entry, tie rule") {
    auto cb = make_codebook(4, 2, 5);
    cb.entries = Tensor<float>({4, 2}, {0, 0, 1, 1, 2, 2, 5, 5});

    Tensor<float> exact({1, 2}, {2, 2});
    auto r = vqvae::quantize(exact, cb);
    CHECK(r.indices == std::vector<int>{2});
    CHECK(r.error == doctest::Approx(0.0));
    CHECK(r.quantized[0] == 2.0f);

    Tensor<float> near_zero({1, 2}, {0.2f, 0.1f});
    auto r2 = vqvae::quantize(near_zero, cb);
    CHECK(r2.indices == std::vector<int>{0});

    // Equidistant from entries 0 and 1 -> lowest index wins.
    Tensor<float> mid({1, 2}, {0.5f, 0.5f});
    auto r3 = vqvae::quantize(mid, cb);
    CHECK(r3.indices == std::vector<int>{0});
}

TEST_CASE("quantize matches the exhaustive scan oracle on random instances") {
    const int codes = 64, dim = 8, rows = 1000;
    auto cb = make_codebook(codes, dim, 11);
    rng::Generator gen(13);
    Tensor<float> latents({rows, dim});
    for (std::int64_t i = 0; i < latents.size(); ++i)
        latents[i] = static_cast<float>(gen.normal());

    auto result = vqvae::quantize(latents, cb);

    for (int m = 0; m < rows; ++m) {
        int best = -1;
        float best_d = 0;
        for (int k = 0; k < codes; ++k) {
            float d = 0;
            for (int j = 0; j < dim; ++j) {
                const float diff = latents[m * dim + j] - cb.entries[k * dim + j];
                d += diff * diff;
            }
            if (best < 0 || d < best_d) {
                best = k;
                best_d = d;
            }
        }
        REQUIRE(result.indices[static_cast<std::size_t>(m)] == best);
        for (int j = 0; j < dim; ++j)
            REQUIRE(result.quantized[m * dim + j] == cb.entries[best * dim + j]);
    }
}

TEST_CASE("quantize rejects empty codebooks and dimension mismatches") {
    vqvae::Codebook empty;
    empty.entries = Tensor<float>({0, 4});
    empty.usage = Tensor<float>({0});
    empty.ema_sums = Tensor<float>({0, 4});
    Tensor<float> z({1, 4});
    CHECK_THROWS_AS(vqvae::quantize(z, empty), vqvae::VqVaeError);

    auto cb = make_codebook(4, 3, 1);
    CHECK_THROWS_AS(vqvae::quantize(z, cb), vqvae::VqVaeError);
}

TEST_CASE("ema update: unassigned entries unchanged, decay 0 jumps to the mean") {
    auto cb = make_codebook(3, 2, 21);
    const auto before = cb.entries;

    Tensor<float> latents({2, 2}, {2, 2, 4, 4});
    std::vector<int> idx = {1, 1};
    vqvae::codebook_update_ema(cb, latents, idx, 0.0f);

    CHECK(cb.entries[0 * 2 + 0] == before[0]);  // entry 0 untouched
    CHECK(cb.entries[2 * 2 + 0] == before[4]);  // entry 2 untouched
    CHECK(cb.entries[1 * 2 + 0] == doctest::Approx(3.0f));
    CHECK(cb.entries[1 * 2 + 1] == doctest::Approx(3.0f));
    CHECK(cb.usage[1] == doctest::Approx(2.0f));
    CHECK(cb.stale[0] == 1);
    CHECK(cb.stale[1] == 0);
}

TEST_CASE("ema update converges toward cluster means under stationary assignments") {
    auto cb = make_codebook(2, 2, 23);
    Tensor<float> latents({4, 2}, {1, 1, 3, 3, -1, -1, -3, -3});
    std::vector<int> idx = {0, 0, 1, 1};
    // cluster means: (2,2) and (-2,-2)
    double prev0 = 1e9, prev1 = 1e9;
    for (int step = 0; step < 10; ++step) {
        vqvae::codebook_update_ema(cb, latents, idx, 0.6f);
        const double d0 = std::hypot(cb.entries[0] - 2.0, cb.entries[1] - 2.0);
        const double d1 = std::hypot(cb.entries[2] + 2.0, cb.entries[3] + 2.0);
        REQUIRE(d0 <= prev0 + 1e-7);
        REQUIRE(d1 <= prev1 + 1e-7);
        prev0 = d0;
        prev1 = d1;
    }
    CHECK(prev0 < 0.05);
    CHECK(prev1 < 0.05);
}

TEST_CASE("forward: untrained model has positive loss, finite values, right shapes") {
    vqvae::VqVae2Model model(small_config(2, 3));
    rng::Generator gen(9);
    Tensor<float> batch({2, 2, 32, 32});
    for (std::int64_t i = 0; i < batch.size(); ++i)
        batch[i] = static_cast<float>(0.5 + 0.1 * gen.normal());

    const auto fwd = model.forward(batch);
    CHECK(fwd.total_loss > 0.0);
    CHECK(fwd.reconstruction.shape == batch.shape);
    for (std::int64_t i = 0; i < fwd.reconstruction.size(); ++i)
        REQUIRE(std::isfinite(fwd.reconstruction[i]));

    // Identical tiles in a batch give identical per-tile scores.
    Tensor<float> pair({2, 2, 32, 32});
    for (std::int64_t i = 0; i < pair.size() / 2; ++i)
        pair[i] = pair[i + pair.size() / 2] = batch[i];
    const auto fwd2 = model.forward(pair);
    const auto scores = vqvae::per_band_scores(pair, fwd2.reconstruction, {0, 1});
    // per-tile equality: band scores computed per half must agree
    Tensor<float> half_in({1, 2, 32, 32}), half_out({1, 2, 32, 32});
    for (std::int64_t i = 0; i < half_in.size(); ++i) {
        half_in[i] = pair[i];
        half_out[i] = fwd2.reconstruction[i];
    }
    const auto s1 = vqvae::per_band_scores(half_in, half_out, {0, 1});
    for (std::int64_t i = 0; i < half_in.size(); ++i) {
        half_in[i] = pair[i + pair.size() / 2];
        half_out[i] = fwd2.reconstruction[i + pair.size() / 2];
    }
    const auto s2 = vqvae::per_band_scores(half_in, half_out, {0, 1});
    CHECK(s1.get(0) == doctest::Approx(s2.get(0)));
    CHECK(s1.get(1) == doctest::Approx(s2.get(1)));
}

TEST_CASE("forward on zero input: reconstruction MSE equals mean squared reconstruction") {
    vqvae::VqVae2Model model(small_config(1, 5));
    Tensor<float> zeros({1, 1, 16, 16});
    const auto fwd = model.forward(zeros);
    double acc = 0.0;
    for (std::int64_t i = 0; i < fwd.reconstruction.size(); ++i)
        acc += static_cast<double>(fwd.reconstruction[i]) * fwd.reconstruction[i];
    CHECK(fwd.recon_mse ==
          doctest::Approx(acc / static_cast<double>(fwd.reconstruction.size())).epsilon(1e-5));
}

TEST_CASE("forward rejects channel mismatch and non-divisible sizes") {
    vqvae::VqVae2Model model(small_config(2, 7));
    CHECK_THROWS_AS(model.forward(Tensor<float>({1, 3, 32, 32})), vqvae::VqVaeError);
    CHECK_THROWS_AS(model.forward(Tensor<float>({1, 2, 24, 24})), vqvae::VqVaeError);
}

TEST_CASE("per-band score schema: present bands filled, total is their mean") {
    rng::Generator gen(31);
    Tensor<float> in({1, 2, 16, 16}), out({1, 2, 16, 16});
    for (std::int64_t i = 0; i < in.size(); ++i) in[i] = static_cast<float>(gen.uniform());
    out = in;
    // band at slot 4 differs by +0.25 everywhere, band 7 exact
    for (std::int64_t i = 0; i < 16 * 16; ++i) out[i] += 0.25f;
    const auto s = vqvae::per_band_scores(in, out, {4, 7});
    CHECK(s.has(4));
    CHECK(s.has(7));
    CHECK(!s.has(0));
    CHECK(s.get(4) == doctest::Approx(0.0625).epsilon(1e-4));
    CHECK(s.get(7) == doctest::Approx(0.0));
    CHECK(s.total_score == doctest::Approx(0.03125).epsilon(1e-4));
    CHECK(s.present_count() == 2);
}

TEST_CASE("training improves validation loss and enforces one-class purity") {
    auto ds = make_dataset("train", 60, 4, 32, 1);

    vqvae::TrainRun run;
    run.epochs = 5;
    run.batch_size = 8;
    run.patience = 10;
    run.lr = 1e-3;
    run.seed = 3;

    vqvae::VqVae2Model model(small_config(1, 3));
    const auto log = vqvae::train(model, ds.manifest, ds.store, run);
    REQUIRE(log.epochs.size() >= 2);
    CHECK(log.best_val <= log.epochs.front().val_loss);
    CHECK(log.epochs.back().val_loss < log.epochs.front().val_loss);

    // A generated tile in train_oneclass aborts.
    auto poisoned = ds.manifest;
    poisoned.entries.push_back({poisoned.select(raster::Split::test)[0].locator,
                                raster::Label::generated, raster::Split::train_oneclass});
    vqvae::VqVae2Model fresh(small_config(1, 3));
    CHECK_THROWS_AS(vqvae::train(fresh, poisoned, ds.store, run), vqvae::VqVaeError);
}

TEST_CASE("early stopping: patience 1 with unreachable min_delta stops after epoch 2") {
    auto ds = make_dataset("earlystop", 24, 0, 16, 1);
    vqvae::TrainRun run;
    run.epochs = 10;
    run.batch_size = 8;
    run.patience = 1;
    run.min_delta = 1e18;  // nothing can improve by this much
    run.seed = 5;
    vqvae::VqVae2Model model(small_config(1, 9));
    const auto log = vqvae::train(model, ds.manifest, ds.store, run);
    REQUIRE(log.epochs.size() == 2);
    CHECK(log.epochs.back().stopped);
}

TEST_CASE("checkpoint round-trip reproduces forward losses bit-exactly") {
    auto dir = std::filesystem::temp_directory_path() / "msd_vq_ckpt";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    vqvae::VqVae2Model model(small_config(2, 13));
    // a couple of steps so codebooks/ema state are nontrivial
    rng::Generator gen(17);
    Tensor<float> batch({2, 2, 16, 16});
    for (std::int64_t i = 0; i < batch.size(); ++i)
        batch[i] = static_cast<float>(0.5 + 0.1 * gen.normal());
    nn::Adam<float> adam({1e-3f});
    model.train_step(batch, adam);
    model.train_step(batch, adam);

    model.save(dir / "m.ckpt");
    auto loaded = vqvae::VqVae2Model::load(dir / "m.ckpt");
    const auto a = model.forward(batch);
    const auto b = loaded.forward(batch);
    CHECK(a.total_loss == b.total_loss);
    CHECK(a.recon_mse == b.recon_mse);
    for (std::int64_t i = 0; i < a.reconstruction.size(); ++i)
        REQUIRE(a.reconstruction[i] == b.reconstruction[i]);

    // Architecture mismatch rejected when an expected config is supplied.
    CHECK_THROWS_AS(nn::load_checkpoint_checked(
                        dir / "m.ckpt", {{"config", small_config(1, 13).echo()}}),
                    nn::CheckpointError);
    // Config echo round-trips through the header.
    auto echoed = vqvae::VqVae2Config::from_echo(model.config().echo());
    CHECK(echoed.echo() == model.config().echo());
}

TEST_CASE("interrupted training resumes to the same result") {
    auto ds = make_dataset("resume", 32, 0, 16, 1);
    auto dir = std::filesystem::temp_directory_path() / "msd_vq_resume";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    vqvae::TrainRun run;
    run.epochs = 4;
    run.batch_size = 8;
    run.patience = 10;
    run.lr = 1e-3;
    run.seed = 7;

    // Uninterrupted reference.
    vqvae::VqVae2Model ref(small_config(1, 19));
    const auto ref_log = vqvae::train(ref, ds.manifest, ds.store, run, dir / "ref.state");

    // Interrupt after epoch 2, then resume.
    vqvae::VqVae2Model resumed(small_config(1, 19));
    vqvae::TrainRun interrupted = run;
    interrupted.interrupt_after = 2;
    const auto partial = vqvae::train(resumed, ds.manifest, ds.store, interrupted,
                                      dir / "res.state");
    CHECK(partial.epochs.size() == 2);
    REQUIRE(std::filesystem::exists(dir / "res.state"));
    const auto final_log = vqvae::train(resumed, ds.manifest, ds.store, run, dir / "res.state");
    CHECK(!std::filesystem::exists(dir / "res.state"));

    REQUIRE(final_log.epochs.size() == ref_log.epochs.size());
    for (std::size_t i = 0; i < ref_log.epochs.size(); ++i) {
        REQUIRE(final_log.epochs[i].train_loss == ref_log.epochs[i].train_loss);
        REQUIRE(final_log.epochs[i].val_loss == ref_log.epochs[i].val_loss);
    }

    // Bit-identical parameters after resume.
    rng::Generator gen(23);
    Tensor<float> batch({1, 1, 16, 16});
    for (std::int64_t i = 0; i < batch.size(); ++i)
        batch[i] = static_cast<float>(0.5 + 0.1 * gen.normal());
    const auto a = ref.forward(batch);
    const auto b = resumed.forward(batch);
    for (std::int64_t i = 0; i < a.reconstruction.size(); ++i)
        REQUIRE(a.reconstruction[i] == b.reconstruction[i]);
}

TEST_CASE("per-band model set scores only its bands and validates requests") {
    vqvae::PerBandModelSet set;
    auto c0 = small_config(1, 41);
    c0.bands = {1};
    set.add(1, vqvae::VqVae2Model(c0));
    auto c1 = small_config(1, 42);
    c1.bands = {3};
    set.add(3, vqvae::VqVae2Model(c1));

    auto tile = synth::gen_pristine_tile({}, 16, 13);
    const auto s = set.score(tile);
    CHECK(s.has(1));
    CHECK(s.has(3));
    CHECK(s.present_count() == 2);
    CHECK(s.total_score == doctest::Approx((s.get(1) + s.get(3)) / 2.0));

    CHECK_THROWS_AS(set.score(tile, {1, 2}), vqvae::VqVaeError);  // no model for band 2
    CHECK_NOTHROW(set.score(tile, {1, 3}));

    // Mismatched slot registration rejected.
    auto c2 = small_config(1, 43);
    c2.bands = {5};
    vqvae::PerBandModelSet bad;
    CHECK_THROWS_AS(bad.add(6, vqvae::VqVae2Model(c2)), vqvae::VqVaeError);
}

TEST_CASE("scores are reproducible bit-for-bit") {
    vqvae::VqVae2Model model(small_config(1, 53));
    synth::TextureParams tp;
    tp.seed = 99;
    auto tile = synth::gen_pristine_tile(tp, 16, 1);
    const auto a = vqvae::reconstruction_score(model, tile);
    const auto b = vqvae::reconstruction_score(model, tile);
    CHECK(a.get(0) == b.get(0));
    CHECK(a.total_score == b.total_score);
}
