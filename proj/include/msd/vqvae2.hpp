// Three-level vector-quantized autoencoder. Encoders downsample to 1/4, 1/8
// and 1/16 of the input; each level's latents snap to a learned codebook
// (euclidean nearest entry, EMA updates) with straight-through gradients.
// Reconstruction error per band is the detector's feature.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msd/manifest.hpp"
#include "msd/nn/optim.hpp"
#include "msd/nn/tape.hpp"
#include "msd/nn/tensor.hpp"
#include "msd/raster.hpp"
#include "msd/score.hpp"

namespace msd::vqvae {

class VqVaeError : public nn::NnError {
public:
    using NnError::NnError;
};

enum class Level : int { bottom = 0, middle = 1, top = 2 };

struct Codebook {
    nn::Tensor<float> entries;   // [K, D]
    nn::Tensor<float> usage;     // [K], EMA assignment counts
    nn::Tensor<float> ema_sums;  // [K, D], EMA latent sums
    std::vector<int> stale;      // consecutive updates without assignments
    int level = 0;

    int codes() const { return entries.shape[0]; }
    int dim() const { return entries.shape[1]; }
};

struct VqVae2Config {
    int input_channels = 13;  // 13, 1 (per band) or 3 (RGB)
    int levels = 3;
    std::array<int, 3> codebook_sizes = {512, 128, 64};  // bottom, middle, top
    int code_dim = 64;
    std::array<int, 3> downsample = {4, 8, 16};
    float commitment_weight = 0.25f;
    float ema_decay = 0.99f;
    int width = 32;       // conv channels in the encoder/decoder bodies
    int res_blocks = 2;   // residual blocks per level
    // Spectral band indices fed to the model; must match input_channels.
    // Defaults: 13 -> all bands, 3 -> R,G,B (indices 3,2,1), 1 -> band 0.
    std::vector<int> bands;
    std::uint64_t seed = 1;

    // Canonical single-line echo used for checkpoint compatibility checks.
    std::string echo() const;
    static VqVae2Config from_echo(const std::string& line);
};

struct QuantizeResult {
    std::vector<int> indices;      // one per latent row
    nn::Tensor<float> quantized;   // same shape as the input rows
    double error = 0.0;            // mean squared distance
};

// latents: [M, D] rows. Ties break toward the lowest index.
QuantizeResult quantize(const nn::Tensor<float>& latents, const Codebook& codebook);

// EMA codebook update from one batch of assignments. Entries without any
// assignment keep their value; decay -> 0 jumps entries to their batch mean.
void codebook_update_ema(Codebook& codebook, const nn::Tensor<float>& latents,
                         const std::vector<int>& indices, float decay);

struct ForwardResult {
    nn::Tensor<float> reconstruction;   // input shape, normalized units
    double total_loss = 0.0;            // recon MSE + commitment
    double recon_mse = 0.0;
    std::array<double, 3> commitment = {0, 0, 0};
    std::array<double, 3> quant_error = {0, 0, 0};
};

struct TrainRun {
    int epochs = 100;
    int batch_size = 64;
    int patience = 10;
    double min_delta = 1e-5;
    double lr = 2e-4;
    double val_fraction = 0.1;
    std::string optimizer = "adam";  // or "sgd"
    std::uint64_t seed = 1;
    // Test hook: abort after this many epochs, leaving resume state behind.
    int interrupt_after = -1;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    bool stopped = false;
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
    std::vector<std::string> events;  // e.g. codebook reseed notes
    int best_epoch = -1;
    double best_val = 0.0;

    void save(const std::filesystem::path& path) const;
};

class VqVae2Model {
public:
    explicit VqVae2Model(VqVae2Config config);

    const VqVae2Config& config() const { return cfg_; }
    const Codebook& codebook(Level level) const { return books_[static_cast<int>(level)]; }
    std::vector<nn::Parameter<float>*> parameters();
    std::int64_t parameter_count() const;

    // batch: [N, C, H, W] in normalized [0,1] units; H, W divisible by 16.
    ForwardResult forward(const nn::Tensor<float>& batch) const;

    // One optimization step on a batch (backward + optimizer + EMA updates).
    ForwardResult train_step(const nn::Tensor<float>& batch, nn::Adam<float>& adam);
    ForwardResult train_step_sgd(const nn::Tensor<float>& batch, float lr);

    void save(const std::filesystem::path& path) const;
    static VqVae2Model load(const std::filesystem::path& path);

private:
    friend TrainingLog train(VqVae2Model&, const raster::DatasetManifest&,
                             const raster::TileStore&, const TrainRun&,
                             const std::filesystem::path&);

    VqVae2Config cfg_;
    std::vector<nn::Parameter<float>> params_;
    std::array<Codebook, 3> books_;
    std::uint64_t reseed_counter_ = 0;
    std::vector<std::string> pending_events_;

    nn::Parameter<float>& p(const std::string& name);
    const nn::Parameter<float>& p(const std::string& name) const;
    ForwardResult run(const nn::Tensor<float>& batch, bool bind_params, nn::TapeF* tape,
                      typename nn::TapeF::Var* loss_out,
                      std::array<QuantizeResult, 3>* quants,
                      std::array<nn::Tensor<float>, 3>* latents);
    ForwardResult step_impl(const nn::Tensor<float>& batch, nn::Adam<float>* adam, float sgd_lr);
    // Full mutable state (parameters, codebooks, stale counters) for
    // best-model tracking and resume files.
    std::vector<nn::Tensor<float>> snapshot() const;
    void restore(const std::vector<nn::Tensor<float>>& snap);
};

// One-class training on the manifest's train_oneclass split (pristine only;
// any generated tile aborts). Early stopping on a held-out validation
// fraction; the best-validation parameters are kept. If state_path is given,
// per-epoch resume state is written there and consumed on restart.
TrainingLog train(VqVae2Model& model, const raster::DatasetManifest& manifest,
                  const raster::TileStore& store, const TrainRun& run,
                  const std::filesystem::path& state_path = {});

// Per-channel mean squared error between two [N,C,H,W] tensors, written into
// the score slots named by `bands`.
detector::ScoreVector per_band_scores(const nn::Tensor<float>& input,
                                      const nn::Tensor<float>& reconstruction,
                                      const std::vector<int>& bands);

// Normalized per-band MSE between tile and its reconstruction, all bands of
// a joint model.
detector::ScoreVector reconstruction_score(const VqVae2Model& model,
                                           const raster::MultispectralTile& tile);

// Per-band model family: one single-band model per spectral band index.
class PerBandModelSet {
public:
    void add(int band_index, VqVae2Model model);
    bool has(int band_index) const;
    const VqVae2Model& model(int band_index) const;
    std::vector<int> bands() const;

    // Scores every band that has a model; throws if `required_bands` names a
    // band without one.
    detector::ScoreVector score(const raster::MultispectralTile& tile,
                                const std::vector<int>& required_bands = {}) const;

private:
    std::map<int, VqVae2Model> models_;
};

// Tile batch helpers (normalization by 1/65535).
nn::Tensor<float> tiles_to_batch(const std::vector<const raster::MultispectralTile*>& tiles,
                                 const std::vector<int>& channel_positions);

}  // namespace msd::vqvae
