// One-class decision layer: per-band thresholds calibrated to a target
// false-alarm rate on pristine scores, band-by-band decisions with a strict
// greater-than rule, and a PCA diagnostic of the score features.
#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msd/raster.hpp"
#include "msd/score.hpp"

namespace msd::detector {

class DetectorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ThresholdSet {
    std::array<std::optional<double>, raster::kBandCount> per_band{};
    double target_far = 0.1;
    int calibration_size = 0;
    std::string source;

    bool has(int band) const { return per_band[static_cast<std::size_t>(band)].has_value(); }
    double get(int band) const { return *per_band[static_cast<std::size_t>(band)]; }

    void save(const std::filesystem::path& path) const;
    static ThresholdSet load(const std::filesystem::path& path);
};

struct Decision {
    std::array<std::optional<bool>, raster::kBandCount> generated_flag{};

    bool band_generated(int band) const {
        return generated_flag[static_cast<std::size_t>(band)].value_or(false);
    }
    // Diagnostic any-band aggregate; not part of the per-band protocol.
    bool any_generated() const {
        for (const auto& f : generated_flag)
            if (f && *f) return true;
        return false;
    }
};

// Per band independently: the smallest observed score t such that
// fraction(score > t) <= target_far over the pool. Inputs must be pristine.
ThresholdSet calibrate(const std::vector<ScoreVector>& pristine_scores, double target_far,
                       const std::string& source = {});

// Band flagged generated iff score > threshold (strict).
Decision detect(const ScoreVector& score, const ThresholdSet& thresholds);

struct PcaResult {
    std::vector<int> bands;                       // feature order used
    std::vector<std::array<double, 2>> points;    // one per input vector
    std::array<double, 2> explained_variance{};   // top-2 eigenvalues
    std::vector<std::vector<double>> axes;        // two loading vectors
};

// Mean-centered projection onto the top-2 covariance eigenvectors over the
// bands present in every input. Sign convention: each axis's
// largest-magnitude loading is positive.
PcaResult pca_project(const std::vector<ScoreVector>& scores);

// Self-contained SVG scatter (distinct markers per label, axes, legend) plus
// a tab-separated companion table of the projected points.
void scatter_export(const PcaResult& pca, const std::vector<raster::Label>& labels,
                    const std::filesystem::path& svg_path,
                    const std::filesystem::path& table_path);

// Symmetric eigendecomposition (cyclic jacobi), eigenvalues descending.
// Exposed for the detector tests' cross-checks.
void symmetric_eigen(const std::vector<double>& matrix, int n, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors /* row i = vector i */);

}  // namespace msd::detector
