// Procedural stand-in datasets: cross-band-correlated pristine textures and
// their perturbed counterparts. Each perturbation family has a closed-form
// spectral signature so detectors can be validated against signal-processing
// oracles instead of real generator outputs.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msd/manifest.hpp"
#include "msd/raster.hpp"

namespace msd::synth {

class SynthError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TextureParams {
    double correlation_length = 3.0;   // pixels, gaussian smoothing scale
    std::vector<double> band_covariance; // CxC row-major; empty means identity
    double mean_level = 32768.0;
    double dynamic_range = 8000.0;     // per-band standard deviation, raster units
    std::uint64_t seed = 1;
};

enum class Family : std::uint8_t { checkerboard, spectral_smoothing, band_shift };

const char* to_string(Family family);
Family family_from_string(const std::string& s);

struct PerturbationParams {
    Family family = Family::checkerboard;
    double strength = 0.5;  // in [0,1]; 0 is the identity
    int period = 2;         // pixels, checkerboard only
    std::uint64_t seed = 1;
};

// Checkerboard lattice amplitude at strength 1, in raster units.
inline constexpr double kCheckerboardFullAmplitude = 6553.5;
// Blur sigma at strength 1, in pixels.
inline constexpr double kSmoothingFullSigma = 2.0;

// Correlated gaussian random field, quantized to 16 bits. Deterministic under
// (params, size, channels). Throws SynthError for a non-PSD covariance.
raster::MultispectralTile gen_pristine_tile(const TextureParams& params, int size, int channels);

// Apply one perturbation family; output is labeled generated and clamped to
// the 16-bit range. strength 0 returns the input samples unchanged.
raster::MultispectralTile gen_generated_tile(const raster::MultispectralTile& pristine,
                                             const PerturbationParams& pert);

struct PseudoDatasetSpec {
    std::string name;
    std::size_t n_pristine = 0;
    std::size_t n_generated = 0;
    int tile_size = 64;
    int channels = 13;
    TextureParams texture;
    PerturbationParams perturbation;
    raster::SplitPlan plan;  // empty plan: pristine -> train_oneclass, generated -> test
    std::uint64_t seed = 1;
};

// Generates and persists all tiles under store/<name>/ and returns the
// manifest. Throws SynthError if the dataset directory already exists.
raster::DatasetManifest build_pseudo_dataset(const PseudoDatasetSpec& spec,
                                             const raster::TileStore& store);

// Lower triangular factor L with L*L^T == cov (tolerant PSD cholesky).
// Exposed for tests. Throws SynthError when cov is not PSD or not symmetric.
std::vector<double> psd_cholesky(const std::vector<double>& cov, int n);

}  // namespace msd::synth
