// Orchestration shared by the CLI and the acceptance suite: wiring configs
// into synth/train/calibrate/detect/evaluate runs under one output directory.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "msd/baseline.hpp"
#include "msd/config.hpp"
#include "msd/eval.hpp"
#include "msd/vqvae2.hpp"

namespace msd::pipeline {

// Distinct from config errors so the CLI can map it to its own exit code.
class MissingInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunPaths {
    std::filesystem::path out;
    std::string tile_store_name = "data";

    std::filesystem::path data() const { return out / tile_store_name; }
    std::filesystem::path models() const { return out / "models"; }
    std::filesystem::path thresholds() const { return out / "thresholds"; }
    std::filesystem::path detects() const { return out / "detect"; }
    std::filesystem::path reports() const { return out / "reports"; }
    std::filesystem::path echo_dir() const { return out / "echo"; }
};

struct Overrides {
    std::uint64_t seed = 0;  // 0: use config value
    double far = -1.0;       // <0: use config value
    int tile_size = 0;       // 0: use config value
    bool per_band = false;   // forces per-band vqvae training when set
    bool force = false;
};

RunPaths run_paths(const cfg::Config& config, const std::filesystem::path& out);
std::uint64_t root_seed(const cfg::Config& config, const Overrides& ov);
void write_echo(const cfg::Config& config, const RunPaths& paths, const std::string& command,
                const Overrides& ov);

// One-class scorer over per-band models (or a joint model).
class OneClassScorer : public eval::TileScorer {
public:
    explicit OneClassScorer(vqvae::PerBandModelSet set);
    explicit OneClassScorer(vqvae::VqVae2Model joint);

    detector::ScoreVector score(const raster::MultispectralTile& tile) const override;
    std::vector<int> bands() const override;
    std::string kind() const override { return "vqvae2"; }

private:
    std::unique_ptr<vqvae::PerBandModelSet> set_;
    std::unique_ptr<vqvae::VqVae2Model> joint_;
};

class BinaryScorer : public eval::TileScorer {
public:
    explicit BinaryScorer(baseline::BinaryCnn model) : model_(std::move(model)) {}

    detector::ScoreVector score(const raster::MultispectralTile& tile) const override;
    std::vector<int> bands() const override { return {0}; }
    std::string kind() const override { return "binary"; }

    const baseline::BinaryCnn& model() const { return model_; }

private:
    baseline::BinaryCnn model_;
};

// Loads models/<name>.ckpt (joint vqvae or binary) or the per-band family
// models/<name>_band*.ckpt. restrict_bands (spectral indices) limits which
// per-band checkpoints are loaded.
std::unique_ptr<eval::TileScorer> load_scorer(const std::filesystem::path& models_dir,
                                              const std::string& name,
                                              const std::vector<int>& restrict_bands = {});

raster::DatasetManifest load_manifest(const RunPaths& paths, const std::string& dataset);

// Subcommand bodies. All deterministic given (config, overrides).
void cmd_synth(const cfg::Config& config, const RunPaths& paths, const Overrides& ov);
void cmd_ingest(const cfg::Config& config, const RunPaths& paths, const Overrides& ov);
void cmd_train_vqvae(const cfg::Config& config, const RunPaths& paths, const Overrides& ov);
void cmd_train_baseline(const cfg::Config& config, const RunPaths& paths, const Overrides& ov);
void cmd_calibrate(const cfg::Config& config, const RunPaths& paths, const Overrides& ov);
void cmd_detect(const cfg::Config& config, const RunPaths& paths, const Overrides& ov);
void cmd_evaluate(const cfg::Config& config, const RunPaths& paths, const Overrides& ov);
void cmd_report(const std::filesystem::path& table, const std::filesystem::path& out_dir);

// Spectral band indices from a config value: "all", or band names "2,3,4".
std::vector<int> parse_bands(const std::string& value);

std::uint64_t fnv1a64(const std::string& s);

}  // namespace msd::pipeline
