// Two-class CNN baseline with the stem-downsampling toggle and the standard
// augmentation recipe (gaussian blur, shift, 90-degree rotations, flips).
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msd/manifest.hpp"
#include "msd/nn/optim.hpp"
#include "msd/nn/tape.hpp"
#include "msd/raster.hpp"
#include "msd/vqvae2.hpp"

namespace msd::baseline {

class BaselineError : public nn::NnError {
public:
    using NnError::NnError;
};

struct CnnConfig {
    int input_channels = 13;
    bool stem_downsample = true;  // stride-2 first conv when true
    int width = 16;
    int depth = 3;  // stride-2 stages after the stem
    std::vector<int> bands;  // spectral bands fed to the net; defaults like vqvae
    std::uint64_t seed = 1;

    std::string echo() const;
    static CnnConfig from_echo(const std::string& line);
};

struct AugmentationConfig {
    double blur_prob = 0.5;
    double blur_sigma_min = 0.5;
    double blur_sigma_max = 1.5;
    double shift_prob = 0.5;
    int shift_max = 4;           // pixels, edge replication
    double rotation_prob = 0.5;  // multiples of 90 degrees
    double flip_prob = 0.5;
    bool flip_horizontal = true;
    bool flip_vertical = true;
};

// Each transform fires independently with its probability; deterministic
// under seed; shape, label and sample range are preserved.
raster::MultispectralTile augment(const raster::MultispectralTile& tile,
                                  const AugmentationConfig& config, std::uint64_t seed);

// Transform primitives, exposed for the property tests.
raster::MultispectralTile flip_h(const raster::MultispectralTile& tile);
raster::MultispectralTile flip_v(const raster::MultispectralTile& tile);
raster::MultispectralTile rot90(const raster::MultispectralTile& tile, int quarter_turns);
raster::MultispectralTile shift_tile(const raster::MultispectralTile& tile, int dx, int dy);
raster::MultispectralTile blur_tile(const raster::MultispectralTile& tile, double sigma);

struct BinaryTrainRun {
    int epochs = 30;
    int batch_size = 16;
    int patience = 5;
    double min_delta = 1e-4;  // on validation accuracy
    double lr = 2e-4;
    double val_fraction = 0.15;
    std::uint64_t seed = 1;
};

class BinaryCnn {
public:
    explicit BinaryCnn(CnnConfig config);

    const CnnConfig& config() const { return cfg_; }
    std::vector<nn::Parameter<float>*> parameters();
    std::int64_t parameter_count() const;

    // Spatial size of the feature map after the stem conv (stride arith).
    std::array<int, 2> first_feature_map(int height, int width) const {
        const int s = cfg_.stem_downsample ? 2 : 1;
        return {(height + 2 - 3) / s + 1, (width + 2 - 3) / s + 1};
    }

    // Logits for a batch [N,C,H,W]; logistic score in [0,1] for one tile.
    nn::Tensor<float> logits(const nn::Tensor<float>& batch) const;
    double score(const raster::MultispectralTile& tile) const;

    double train_step(const nn::Tensor<float>& batch, const nn::Tensor<float>& targets,
                      nn::Adam<float>& adam);

    void save(const std::filesystem::path& path) const;
    static BinaryCnn load(const std::filesystem::path& path);

private:
    CnnConfig cfg_;
    std::vector<nn::Parameter<float>> params_;

    nn::Parameter<float>& p(const std::string& name);
    const nn::Parameter<float>& p(const std::string& name) const;
    typename nn::TapeF::Var build(nn::TapeF& t, const nn::Tensor<float>& batch, bool bind);
};

// Supervised training on the manifest's train_detector split; both labels
// must be present. Early stopping tracks validation accuracy. The log
// reuses the vqvae format with val_loss holding (1 - accuracy).
vqvae::TrainingLog train_binary(BinaryCnn& model, const raster::DatasetManifest& manifest,
                                const raster::TileStore& store, const AugmentationConfig& aug,
                                const BinaryTrainRun& run);

}  // namespace msd::baseline
