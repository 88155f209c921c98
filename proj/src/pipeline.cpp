#include "msd/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "msd/nn/checkpoint.hpp"
#include "msd/rng.hpp"
#include "msd/synthgen.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace msd::pipeline {

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

RunPaths run_paths(const cfg::Config& config, const std::filesystem::path& out) {
    RunPaths paths;
    paths.out = out;
    if (const auto* run = config.find("run"))
        paths.tile_store_name = run->get_or("tile_store", "data");
    return paths;
}

std::uint64_t root_seed(const cfg::Config& config, const Overrides& ov) {
    if (ov.seed != 0) return ov.seed;
    if (const auto* run = config.find("run")) return run->get_u64("seed", 1);
    return 1;
}

void write_echo(const cfg::Config& config, const RunPaths& paths, const std::string& command,
                const Overrides& ov) {
    std::filesystem::create_directories(paths.echo_dir());
    std::ofstream os(paths.echo_dir() / (command + ".cfg"), std::ios::trunc);
    os << "# command: " << command << "\n";
    os << "# resolved seed: " << root_seed(config, ov) << "\n";
    if (ov.far >= 0.0) os << "# override far = " << ov.far << "\n";
    if (ov.tile_size > 0) os << "# override tile_size = " << ov.tile_size << "\n";
    if (ov.per_band) os << "# override per_band = true\n";
    if (ov.force) os << "# override force = true\n";
    os << "\n" << config.dump();
}

std::vector<int> parse_bands(const std::string& value) {
    std::vector<int> bands;
    if (value == "all") {
        for (int i = 0; i < raster::kBandCount; ++i) bands.push_back(i);
        return bands;
    }
    for (const auto& name : cfg::split_list(value))
        bands.push_back(raster::band_index_from_name(name));
    if (bands.empty()) throw cfg::ConfigError("empty band list");
    return bands;
}

raster::DatasetManifest load_manifest(const RunPaths& paths, const std::string& dataset) {
    const auto path = paths.data() / (dataset + ".manifest");
    if (!std::filesystem::exists(path))
        throw MissingInputError("manifest not found: " + path.string());
    return raster::DatasetManifest::load(path);
}

// ---------------------------------------------------------------------------
// Scorers

OneClassScorer::OneClassScorer(vqvae::PerBandModelSet set)
    : set_(std::make_unique<vqvae::PerBandModelSet>(std::move(set))) {}

OneClassScorer::OneClassScorer(vqvae::VqVae2Model joint)
    : joint_(std::make_unique<vqvae::VqVae2Model>(std::move(joint))) {}

detector::ScoreVector OneClassScorer::score(const raster::MultispectralTile& tile) const {
    return set_ ? set_->score(tile) : vqvae::reconstruction_score(*joint_, tile);
}

std::vector<int> OneClassScorer::bands() const {
    return set_ ? set_->bands() : joint_->config().bands;
}

detector::ScoreVector BinaryScorer::score(const raster::MultispectralTile& tile) const {
    detector::ScoreVector s;
    s.label = tile.label;
    s.set(0, model_.score(tile));
    return s;
}

std::unique_ptr<eval::TileScorer> load_scorer(const std::filesystem::path& models_dir,
                                              const std::string& name,
                                              const std::vector<int>& restrict_bands) {
    const auto single = models_dir / (name + ".ckpt");
    if (std::filesystem::exists(single)) {
        const auto ckpt = nn::load_checkpoint(single);
        const auto kind = ckpt.meta.count("kind") ? ckpt.meta.at("kind") : "";
        if (kind == "binary_cnn")
            return std::make_unique<BinaryScorer>(baseline::BinaryCnn::load(single));
        if (kind == "vqvae2")
            return std::make_unique<OneClassScorer>(vqvae::VqVae2Model::load(single));
        throw MissingInputError("unrecognized checkpoint kind in " + single.string());
    }

    vqvae::PerBandModelSet set;
    std::vector<int> bands = restrict_bands;
    if (bands.empty())
        for (int i = 0; i < raster::kBandCount; ++i) bands.push_back(i);
    int loaded = 0;
    for (int band : bands) {
        const auto path =
            models_dir / (name + "_band" + std::string(raster::band_name(band)) + ".ckpt");
        if (!std::filesystem::exists(path)) {
            if (!restrict_bands.empty())
                throw MissingInputError("missing per-band checkpoint: " + path.string());
            continue;
        }
        set.add(band, vqvae::VqVae2Model::load(path));
        ++loaded;
    }
    if (loaded == 0)
        throw MissingInputError("no checkpoint found for detector '" + name + "' under " +
                                models_dir.string());
    return std::make_unique<OneClassScorer>(std::move(set));
}

// ---------------------------------------------------------------------------
// synth

namespace {

raster::SplitPlan parse_plan(const std::string& text) {
    raster::SplitPlan plan;
    for (const auto& item : cfg::split_list(text)) {
        std::istringstream is(item);
        std::string split, label, count;
        if (!std::getline(is, split, ':') || !std::getline(is, label, ':') ||
            !std::getline(is, count))
            throw cfg::ConfigError("plan items are split:label:count, got '" + item + "'");
        try {
            plan.add(raster::split_from_string(split), raster::label_from_string(label),
                     static_cast<std::size_t>(std::stoull(count)));
        } catch (const raster::RasterError& e) {
            throw cfg::ConfigError(std::string("bad plan item '") + item + "': " + e.what());
        } catch (const std::logic_error&) {
            throw cfg::ConfigError("bad plan count in '" + item + "'");
        }
    }
    return plan;
}

std::vector<double> exponential_covariance(int channels, double rho) {
    std::vector<double> cov(static_cast<std::size_t>(channels) * channels);
    for (int i = 0; i < channels; ++i)
        for (int j = 0; j < channels; ++j)
            cov[static_cast<std::size_t>(i) * channels + j] = std::pow(rho, std::abs(i - j));
    return cov;
}

}  // namespace

void cmd_synth(const cfg::Config& config, const RunPaths& paths, const Overrides& ov) {
    const auto sections = config.all_of("synth");
    if (sections.empty()) throw cfg::ConfigError("no [synth <name>] sections in config");
    const std::uint64_t seed = root_seed(config, ov);
    raster::TileStore store(paths.data());

    for (const auto* s : sections) {
        if (s->name.empty()) throw cfg::ConfigError("[synth] sections need a dataset name");
        const auto manifest_path = paths.data() / (s->name + ".manifest");
        if (std::filesystem::exists(manifest_path)) {
            if (!ov.force) {
                std::printf("synth: dataset '%s' already exists, skipping (use --force)\n",
                            s->name.c_str());
                continue;
            }
            std::filesystem::remove_all(paths.data() / s->name);
            std::filesystem::remove(manifest_path);
        }

        synth::PseudoDatasetSpec spec;
        spec.name = s->name;
        spec.n_pristine = static_cast<std::size_t>(s->get_int("n_pristine", 0));
        spec.n_generated = static_cast<std::size_t>(s->get_int("n_generated", 0));
        spec.tile_size = ov.tile_size > 0 ? ov.tile_size : s->get_int("tile_size", 64);
        spec.channels = s->get_int("channels", 13);
        spec.seed = rng::derive(seed, fnv1a64("synth:" + s->name));

        spec.texture.correlation_length = s->get_double("correlation_length", 3.0);
        spec.texture.mean_level = s->get_double("mean_level", 32768.0);
        spec.texture.dynamic_range = s->get_double("dynamic_range", 8000.0);
        spec.texture.seed = s->get_u64("texture_seed", rng::derive(spec.seed, 0x7e));
        const double rho = s->get_double("band_correlation", 0.0);
        if (rho != 0.0) spec.texture.band_covariance = exponential_covariance(spec.channels, rho);

        spec.perturbation.family = synth::family_from_string(s->get_or("family", "checkerboard"));
        spec.perturbation.strength = s->get_double("strength", 0.5);
        spec.perturbation.period = s->get_int("period", 2);
        spec.perturbation.seed = s->get_u64("perturb_seed", rng::derive(spec.seed, 0x9e));

        if (s->has("plan")) spec.plan = parse_plan(s->get("plan"));

        const auto manifest = synth::build_pseudo_dataset(spec, store);
        std::printf("synth: dataset '%s' -> %zu tiles\n", s->name.c_str(),
                    manifest.entries.size());
    }
}

// ---------------------------------------------------------------------------
// ingest

void cmd_ingest(const cfg::Config& config, const RunPaths& paths, const Overrides& ov) {
    const auto& s = config.require("ingest");
    const std::string name = s.get_or("name", "ingested");
    const int tile_size = ov.tile_size > 0 ? ov.tile_size : s.get_int("tile_size", 512);
    const auto label = raster::label_from_string(s.get_or("label", "pristine"));
    const auto split = raster::split_from_string(s.get_or("split", "test"));
    const auto interp =
        s.get_or("interp", "nearest") == "bilinear" ? raster::Interp::bilinear
                                                    : raster::Interp::nearest;
    raster::NoDataPolicy policy = raster::NoDataPolicy::strict();
    const std::string nodata = s.get_or("nodata", "strict");
    if (nodata.rfind("fraction:", 0) == 0)
        policy = raster::NoDataPolicy::fraction(std::stod(nodata.substr(9)));
    else if (nodata != "strict")
        throw cfg::ConfigError("nodata must be 'strict' or 'fraction:<f>'");

    raster::MultispectralTile scene;
    if (s.has("scene_tile")) {
        const std::filesystem::path p = s.get("scene_tile");
        if (!std::filesystem::exists(p)) throw MissingInputError("scene tile not found: " + p.string());
        scene = raster::load_tile(p);
        for (auto& b : scene.band_specs)
            if (b.effective_gsd != 10.0)
                throw raster::ResolutionMismatchError("scene tile is not on the 10m grid");
    } else {
        const std::filesystem::path dir = s.get("scene_dir");
        const auto meta_path = dir / "scene.meta";
        if (!std::filesystem::exists(meta_path))
            throw MissingInputError("scene sidecar not found: " + meta_path.string());

        struct RawBand {
            raster::BandSpec spec;
            std::filesystem::path file;
        };
        std::vector<RawBand> bands;
        std::ifstream meta(meta_path);
        std::string line;
        while (std::getline(meta, line)) {
            if (line.empty() || line.front() == '#') continue;
            std::istringstream ls(line);
            std::string kind, band_name, file;
            RawBand rb;
            int bit_depth = 16;
            ls >> kind >> band_name >> rb.spec.native_gsd >> rb.spec.native_size >> bit_depth >>
                file;
            if (kind != "band" || ls.fail())
                throw raster::CorruptHeaderError("malformed scene.meta line: " + line);
            rb.spec.index = raster::band_index_from_name(band_name);
            rb.spec.bit_depth = bit_depth;
            rb.spec.effective_gsd = rb.spec.native_gsd;
            rb.file = dir / file;
            bands.push_back(std::move(rb));
        }
        if (bands.empty()) throw MissingInputError("scene.meta lists no bands");

        const double footprint = bands[0].spec.native_gsd * bands[0].spec.native_size;
        for (const auto& rb : bands)
            if (std::abs(rb.spec.native_gsd * rb.spec.native_size - footprint) > 1e-6)
                throw raster::ResolutionMismatchError(
                    "bands do not share a ground footprint: " + rb.file.string());

        const int target_size = static_cast<int>(std::llround(footprint / 10.0));
        scene.height = target_size;
        scene.width = target_size;
        scene.label = label;
        scene.provenance = name;
        scene.samples.reserve(static_cast<std::size_t>(target_size) * target_size * bands.size());
        for (auto& rb : bands) {
            std::ifstream bf(rb.file, std::ios::binary);
            if (!bf) throw MissingInputError("band file not found: " + rb.file.string());
            const std::size_t count =
                static_cast<std::size_t>(rb.spec.native_size) * rb.spec.native_size;
            std::vector<std::uint16_t> raw(count);
            std::vector<unsigned char> bytes(count * 2);
            bf.read(reinterpret_cast<char*>(bytes.data()),
                    static_cast<std::streamsize>(bytes.size()));
            if (static_cast<std::size_t>(bf.gcount()) != bytes.size())
                throw raster::TruncatedPayloadError("band file too short: " + rb.file.string());
            for (std::size_t i = 0; i < count; ++i)
                raw[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));

            const int factor = raster::upsample_factor(rb.spec.native_gsd, 10.0);
            auto up = raster::upsample_band(raw, rb.spec.native_size, rb.spec.native_size, factor,
                                            interp);
            rb.spec.effective_gsd = 10.0;
            scene.band_specs.push_back(rb.spec);
            scene.samples.insert(scene.samples.end(), up.begin(), up.end());
        }
    }

    auto tiles = raster::filter_nodata(raster::retile(scene, tile_size), policy);

    raster::TileStore store(paths.data());
    const auto manifest_path = paths.data() / (name + ".manifest");
    if (std::filesystem::exists(manifest_path) && !ov.force)
        throw cfg::ConfigError("dataset '" + name + "' already exists (use --force)");
    std::filesystem::remove_all(paths.data() / name);

    raster::DatasetManifest manifest;
    manifest.name = name;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        std::ostringstream locator;
        locator << name << "/tiles/" << std::setw(6) << std::setfill('0') << i << ".tile";
        tiles[i].label = label;
        store.save(locator.str(), tiles[i]);
        manifest.entries.push_back({locator.str(), label, split});
    }
    manifest.save(manifest_path);
    std::printf("ingest: dataset '%s' -> %zu tiles of %dx%d\n", name.c_str(), tiles.size(),
                tile_size, tile_size);
}

// ---------------------------------------------------------------------------
// training

namespace {

vqvae::VqVae2Config vqvae_config_from(const cfg::Section& s, const std::vector<int>& bands,
                                      std::uint64_t seed) {
    vqvae::VqVae2Config cfg;
    cfg.input_channels = static_cast<int>(bands.size());
    cfg.bands = bands;
    cfg.width = s.get_int("width", 16);
    cfg.code_dim = s.get_int("code_dim", 16);
    if (s.has("codebooks")) {
        const auto parts = cfg::split_list(s.get("codebooks"));
        if (parts.size() != 3) throw cfg::ConfigError("codebooks needs three sizes");
        cfg.codebook_sizes = {std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2])};
    }
    cfg.res_blocks = s.get_int("res_blocks", 2);
    cfg.commitment_weight = static_cast<float>(s.get_double("commitment", 0.25));
    cfg.ema_decay = static_cast<float>(s.get_double("ema_decay", 0.99));
    cfg.seed = seed;
    return cfg;
}

vqvae::TrainRun train_run_from(const cfg::Section& s, std::uint64_t seed) {
    vqvae::TrainRun run;
    run.epochs = s.get_int("epochs", 100);
    run.batch_size = s.get_int("batch_size", 64);
    run.patience = s.get_int("patience", 10);
    run.min_delta = s.get_double("min_delta", 1e-5);
    run.lr = s.get_double("lr", 2e-4);
    run.val_fraction = s.get_double("val_fraction", 0.1);
    run.optimizer = s.get_or("optimizer", "adam");
    run.seed = seed;
    return run;
}

}  // namespace

void cmd_train_vqvae(const cfg::Config& config, const RunPaths& paths, const Overrides& ov) {
    const auto sections = config.all_of("vqvae");
    if (sections.empty()) throw cfg::ConfigError("no [vqvae] section in config");
    const std::uint64_t seed = root_seed(config, ov);
    raster::TileStore store(paths.data());
    std::filesystem::create_directories(paths.models());

    for (const auto* s : sections) {
        const std::string name = s->name.empty() ? "vqvae" : s->name;
        const auto manifest = load_manifest(paths, s->get("dataset"));
        const auto bands = parse_bands(s->get_or("bands", "all"));
        const bool per_band = ov.per_band || s->get_bool("per_band", false);

        if (!per_band) {
            const auto ckpt_path = paths.models() / (name + ".ckpt");
            if (std::filesystem::exists(ckpt_path) && !ov.force) {
                std::printf("train-vqvae: %s exists, skipping\n", ckpt_path.c_str());
                continue;
            }
            vqvae::VqVae2Model model(
                vqvae_config_from(*s, bands, rng::derive(seed, fnv1a64("vqvae:" + name))));
            const auto run = train_run_from(*s, rng::derive(seed, fnv1a64("vqvae-run:" + name)));
            const auto log =
                vqvae::train(model, manifest, store, run, ckpt_path.string() + ".state");
            model.save(ckpt_path);
            log.save(paths.models() / (name + ".log"));
            std::printf("train-vqvae: %s best val %.6g (epoch %d, %zu epochs run)\n",
                        name.c_str(), log.best_val, log.best_epoch, log.epochs.size());
            continue;
        }

        // One single-band model per listed band; independent seeds, parallel
        // across models (each training is serial and deterministic).
        std::vector<int> todo;
        for (int band : bands) {
            const auto ckpt_path =
                paths.models() / (name + "_band" + raster::band_name(band) + ".ckpt");
            if (std::filesystem::exists(ckpt_path) && !ov.force)
                std::printf("train-vqvae: %s exists, skipping\n", ckpt_path.c_str());
            else
                todo.push_back(band);
        }
        std::exception_ptr first_error;
#pragma omp parallel for schedule(dynamic)
        for (std::size_t i = 0; i < todo.size(); ++i) {
            try {
                const int band = todo[i];
                const std::string suffix = std::string("_band") + raster::band_name(band);
                vqvae::VqVae2Model model(vqvae_config_from(
                    *s, {band}, rng::derive(seed, fnv1a64("vqvae:" + name + suffix))));
                const auto run = train_run_from(
                    *s, rng::derive(seed, fnv1a64("vqvae-run:" + name + suffix)));
                const auto ckpt_path = paths.models() / (name + suffix + ".ckpt");
                const auto log =
                    vqvae::train(model, manifest, store, run, ckpt_path.string() + ".state");
                model.save(ckpt_path);
                log.save(paths.models() / (name + suffix + ".log"));
#pragma omp critical
                std::printf("train-vqvae: %s band %s best val %.6g (epoch %d/%zu)\n", name.c_str(),
                            raster::band_name(band), log.best_val, log.best_epoch,
                            log.epochs.size());
            } catch (...) {
#pragma omp critical
                if (!first_error) first_error = std::current_exception();
            }
        }
        if (first_error) std::rethrow_exception(first_error);
    }
}

void cmd_train_baseline(const cfg::Config& config, const RunPaths& paths, const Overrides& ov) {
    const auto sections = config.all_of("baseline");
    if (sections.empty()) throw cfg::ConfigError("no [baseline] section in config");
    const std::uint64_t seed = root_seed(config, ov);
    raster::TileStore store(paths.data());
    std::filesystem::create_directories(paths.models());

    for (const auto* s : sections) {
        const std::string name = s->name.empty() ? "baseline" : s->name;
        const auto ckpt_path = paths.models() / (name + ".ckpt");
        if (std::filesystem::exists(ckpt_path) && !ov.force) {
            std::printf("train-baseline: %s exists, skipping\n", ckpt_path.c_str());
            continue;
        }
        const auto manifest = load_manifest(paths, s->get("dataset"));
        const auto bands = parse_bands(s->get_or("bands", "all"));

        baseline::CnnConfig cc;
        cc.input_channels = static_cast<int>(bands.size());
        cc.bands = bands;
        cc.width = s->get_int("width", 16);
        cc.depth = s->get_int("depth", 3);
        cc.stem_downsample = s->get_bool("stem_downsample", true);
        cc.seed = rng::derive(seed, fnv1a64("baseline:" + name));

        baseline::AugmentationConfig aug;
        aug.blur_prob = s->get_double("blur_prob", aug.blur_prob);
        aug.blur_sigma_min = s->get_double("blur_sigma_min", aug.blur_sigma_min);
        aug.blur_sigma_max = s->get_double("blur_sigma_max", aug.blur_sigma_max);
        aug.shift_prob = s->get_double("shift_prob", aug.shift_prob);
        aug.shift_max = s->get_int("shift_max", aug.shift_max);
        aug.rotation_prob = s->get_double("rotation_prob", aug.rotation_prob);
        aug.flip_prob = s->get_double("flip_prob", aug.flip_prob);

        baseline::BinaryTrainRun run;
        run.epochs = s->get_int("epochs", 30);
        run.batch_size = s->get_int("batch_size", 16);
        run.patience = s->get_int("patience", 5);
        run.min_delta = s->get_double("min_delta", 1e-4);
        run.lr = s->get_double("lr", 2e-4);
        run.val_fraction = s->get_double("val_fraction", 0.15);
        run.seed = rng::derive(seed, fnv1a64("baseline-run:" + name));

        baseline::BinaryCnn model(cc);
        const auto log = baseline::train_binary(model, manifest, store, aug, run);
        model.save(ckpt_path);
        log.save(paths.models() / (name + ".log"));
        std::printf("train-baseline: %s best val acc %.4f (epoch %d/%zu, %lld params)\n",
                    name.c_str(), 1.0 - log.best_val, log.best_epoch, log.epochs.size(),
                    static_cast<long long>(model.parameter_count()));
    }
}

// ---------------------------------------------------------------------------
// calibrate / detect

namespace {

std::vector<detector::ScoreVector> score_entries(const eval::TileScorer& scorer,
                                                 const raster::TileStore& store,
                                                 const std::vector<raster::ManifestEntry>& entries) {
    std::vector<detector::ScoreVector> out(entries.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto s = scorer.score(store.load(entries[i].locator));
        s.tile_ref = entries[i].locator;
        s.label = entries[i].label;
        out[i] = std::move(s);
    }
    return out;
}

}  // namespace

void cmd_calibrate(const cfg::Config& config, const RunPaths& paths, const Overrides& ov) {
    const auto& s = config.require("calibrate");
    const std::string detector_name = s.get("detector");
    const std::string dataset = s.get("dataset");
    const double far = ov.far >= 0.0 ? ov.far : 0.1;

    const auto scorer = load_scorer(paths.models(), detector_name);
    const auto manifest = load_manifest(paths, dataset);
    raster::TileStore store(paths.data());
    const auto entries = manifest.select(raster::Split::calibrate, raster::Label::pristine);
    if (entries.empty())
        throw MissingInputError("dataset '" + dataset + "' has no pristine calibrate split");

    const auto scores = score_entries(*scorer, store, entries);
    const auto thresholds = detector::calibrate(scores, far, dataset);
    std::ostringstream far_tag;
    far_tag << far;
    const auto path =
        paths.thresholds() / (detector_name + "_" + dataset + "_far" + far_tag.str() + ".tsv");
    thresholds.save(path);
    std::printf("calibrate: %s on %s at far %.3f -> %s (%zu tiles)\n", detector_name.c_str(),
                dataset.c_str(), far, path.c_str(), entries.size());
}

void cmd_detect(const cfg::Config& config, const RunPaths& paths, const Overrides& ov) {
    (void)ov;
    const auto& s = config.require("detect");
    const std::string detector_name = s.get("detector");
    const std::string dataset = s.get("dataset");
    const auto split = raster::split_from_string(s.get_or("split", "test"));

    const std::filesystem::path thr_path = paths.out / s.get("thresholds");
    if (!std::filesystem::exists(thr_path))
        throw MissingInputError("thresholds not found: " + thr_path.string());
    const auto thresholds = detector::ThresholdSet::load(thr_path);

    const auto scorer = load_scorer(paths.models(), detector_name);
    const auto manifest = load_manifest(paths, dataset);
    raster::TileStore store(paths.data());
    const auto entries = manifest.select(split);
    if (entries.empty()) throw MissingInputError("split has no entries");

    const auto scores = score_entries(*scorer, store, entries);

    std::filesystem::create_directories(paths.detects());
    const auto out_path = paths.detects() / (detector_name + "_" + dataset + "_" +
                                             raster::to_string(split) + ".tsv");
    std::ofstream os(out_path, std::ios::trunc);
    os << "# locator\tlabel\tany_flag";
    for (int b = 0; b < raster::kBandCount; ++b)
        if (thresholds.has(b)) os << "\tband" << raster::band_name(b);
    os << "\ttotal_score\n";
    os.precision(10);
    for (const auto& sc : scores) {
        const auto decision = detector::detect(sc, thresholds);
        os << sc.tile_ref << '\t' << raster::to_string(*sc.label) << '\t'
           << (decision.any_generated() ? "generated" : "pristine");
        for (int b = 0; b < raster::kBandCount; ++b)
            if (thresholds.has(b)) {
                if (sc.has(b))
                    os << '\t' << (decision.band_generated(b) ? 1 : 0) << ":" << sc.get(b);
                else
                    os << "\t-";
            }
        os << '\t' << sc.total_score << '\n';
    }
    std::printf("detect: wrote %s (%zu tiles)\n", out_path.c_str(), scores.size());
}

// ---------------------------------------------------------------------------
// evaluate

void cmd_evaluate(const cfg::Config& config, const RunPaths& paths, const Overrides& ov) {
    const auto& s = config.require("eval");
    const double far = ov.far >= 0.0 ? ov.far : s.get_double("far", 0.1);
    const std::uint64_t seed = root_seed(config, ov);
    raster::TileStore store(paths.data());

    eval::Report report;
    report.matrix.far = far;
    report.matrix.seed = seed;

    std::vector<std::unique_ptr<eval::TileScorer>> owned;
    if (s.has("matrix_detectors") && s.has("matrix_test_sets")) {
        std::map<std::string, const eval::TileScorer*> detectors;
        for (const auto& name : cfg::split_list(s.get("matrix_detectors"))) {
            owned.push_back(load_scorer(paths.models(), name));
            detectors[name] = owned.back().get();
        }
        std::map<std::string, eval::DatasetRef> test_sets;
        std::vector<raster::DatasetManifest> manifests;
        manifests.reserve(16);
        for (const auto& name : cfg::split_list(s.get("matrix_test_sets"))) {
            manifests.push_back(load_manifest(paths, name));
            test_sets[name] = eval::DatasetRef{manifests.back(), &store};
        }
        report.matrix = eval::cross_test(detectors, test_sets, far, seed);
    }

    if (s.has("unseen_dataset")) {
        const auto unseen_manifest = load_manifest(paths, s.get("unseen_dataset"));
        const auto calib_manifest = load_manifest(paths, s.get("unseen_calibration"));
        const auto bands = parse_bands(s.get_or("unseen_bands", "2,3,4"));
        const auto oneclass = load_scorer(paths.models(), s.get("unseen_oneclass"), bands);
        const auto binary = load_scorer(paths.models(), s.get("unseen_binary"));

        std::vector<raster::DatasetManifest> train_manifests;
        std::vector<const raster::DatasetManifest*> train_ptrs;
        auto add_train_manifest = [&](const std::string& detector_name) {
            for (const char* type : {"vqvae", "baseline"}) {
                if (const auto* sec = config.find(type, detector_name)) {
                    train_manifests.push_back(load_manifest(paths, sec->get("dataset")));
                }
            }
        };
        add_train_manifest(s.get("unseen_oneclass"));
        add_train_manifest(s.get("unseen_binary"));
        for (const auto& m : train_manifests) train_ptrs.push_back(&m);

        eval::DatasetRef unseen_ref{unseen_manifest, &store};
        eval::DatasetRef calib_ref{calib_manifest, &store};
        report.unseen.push_back(eval::unseen_architecture_test(
            *oneclass, *binary, calib_ref, unseen_ref, train_ptrs,
            ov.far >= 0.0 ? ov.far : s.get_double("unseen_far", 0.05)));
    }

    if (s.has("scatter_dataset")) {
        const auto scatter_manifest = load_manifest(paths, s.get("scatter_dataset"));
        const auto scorer = load_scorer(paths.models(), s.get("scatter_detector"));
        auto entries = scatter_manifest.select(raster::Split::test);
        const auto scores = score_entries(*scorer, store, entries);
        std::vector<raster::Label> labels;
        for (const auto& e : entries) labels.push_back(e.label);
        const auto pca = detector::pca_project(scores);
        const auto svg = paths.reports() / ("scatter_" + s.get("scatter_dataset") + ".svg");
        const auto tsv = paths.reports() / ("scatter_" + s.get("scatter_dataset") + ".tsv");
        detector::scatter_export(pca, labels, svg, tsv);
        report.artifact_paths.push_back(svg.string());
        report.artifact_paths.push_back(tsv.string());
    }

    report.config_echo["seed"] = std::to_string(seed);
    {
        std::ostringstream os;
        os << far;
        report.config_echo["far"] = os.str();
    }
    report.rerun_command = "msdetect evaluate --config <config> --out " + paths.out.string();
    eval::emit_report(report, paths.reports());
    std::printf("evaluate: report under %s\n", paths.reports().c_str());
}

void cmd_report(const std::filesystem::path& table, const std::filesystem::path& out_dir) {
    if (!std::filesystem::exists(table)) throw MissingInputError("table not found: " + table.string());
    std::ifstream is(table);
    std::string header;
    std::getline(is, header);

    eval::Report report;
    std::set<std::string> trains, tests;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string train_id, test_id, det, band, far, pd, lo, hi, n_test, n_calib, seed;
        std::getline(ls, train_id, '\t');
        std::getline(ls, test_id, '\t');
        std::getline(ls, det, '\t');
        std::getline(ls, band, '\t');
        std::getline(ls, far, '\t');
        std::getline(ls, pd, '\t');
        std::getline(ls, lo, '\t');
        std::getline(ls, hi, '\t');
        std::getline(ls, n_test, '\t');
        std::getline(ls, n_calib, '\t');
        std::getline(ls, seed, '\t');
        if (test_id == "unseen" && train_id == "-") {
            if (report.unseen.empty()) report.unseen.emplace_back();
            report.unseen.back().far = std::stod(far);
            report.unseen.back().n_test = std::stoi(n_test);
            report.unseen.back().n_calib = std::stoi(n_calib);
            report.unseen.back().pd.emplace_back(det, std::stod(pd));
            continue;
        }
        eval::Cell cell;
        cell.pd = std::stod(pd);
        cell.ci_lo = std::stod(lo);
        cell.ci_hi = std::stod(hi);
        cell.n_test = std::stoi(n_test);
        cell.n_calib = std::stoi(n_calib);
        report.matrix.far = std::stod(far);
        report.matrix.seed = std::stoull(seed);
        report.matrix.cells[eval::ExperimentMatrix::key(train_id, test_id, det, band)] = cell;
        trains.insert(train_id);
        tests.insert(test_id);
    }
    report.matrix.train_ids.assign(trains.begin(), trains.end());
    report.matrix.test_ids.assign(tests.begin(), tests.end());
    report.rerun_command = "msdetect report";
    eval::emit_report(report, out_dir);
    std::printf("report: summary under %s\n", out_dir.c_str());
}

}  // namespace msd::pipeline
