// Experiment protocol engine: Pd@FAR, cross-dataset train/test matrices,
// the unseen-family generalization test, and report emission.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msd/detector.hpp"
#include "msd/manifest.hpp"
#include "msd/raster.hpp"
#include "msd/score.hpp"

namespace msd::eval {

class EvalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Anything that maps a tile to a ScoreVector. The binary baseline reports
// its scalar score under a single pseudo-band slot (band 0, labeled "cls"
// in reports).
class TileScorer {
public:
    virtual ~TileScorer() = default;
    virtual detector::ScoreVector score(const raster::MultispectralTile& tile) const = 0;
    virtual std::vector<int> bands() const = 0;
    virtual std::string kind() const = 0;  // e.g. "vqvae2" or "binary"
};

// Fraction of generated scores strictly above the threshold.
double pd_at_far(const std::vector<double>& generated_scores, double threshold);

// Normal-approximation 95% binomial interval around rate p at sample size n.
std::pair<double, double> binomial_interval95(double p, int n);

struct Cell {
    double pd = 0.0;
    double ci_lo = 0.0, ci_hi = 0.0;
    int n_test = 0;
    int n_calib = 0;
};

struct ExperimentMatrix {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    double far = 0.1;
    std::uint64_t seed = 0;
    // key: train_id / test_id / detector kind / band name
    std::map<std::string, Cell> cells;

    static std::string key(const std::string& train_id, const std::string& test_id,
                           const std::string& detector, const std::string& band);
    const Cell* find(const std::string& train_id, const std::string& test_id,
                     const std::string& detector, const std::string& band) const;
};

struct DatasetRef {
    raster::DatasetManifest manifest;
    const raster::TileStore* store = nullptr;
};

// For every (train-id, test-id): calibrate per-band thresholds on the test
// set's pristine calibrate split at `far`, then evaluate Pd on its generated
// test split. One cell per detector band.
ExperimentMatrix cross_test(const std::map<std::string, const TileScorer*>& detectors,
                            const std::map<std::string, DatasetRef>& test_sets, double far,
                            std::uint64_t seed);

struct UnseenResult {
    double far = 0.05;
    int n_test = 0;
    int n_calib = 0;
    // per detector column, e.g. "vqvae2:4" (band) or "binary"
    std::vector<std::pair<std::string, double>> pd;
};

// Table-5-style protocol: one-class per-band detectors (RGB) and the binary
// detector, calibrated on a standard pristine pool, evaluated on a dataset
// generated by a family absent from every training manifest involved.
UnseenResult unseen_architecture_test(const TileScorer& oneclass, const TileScorer& binary,
                                      const DatasetRef& calibration_source,
                                      const DatasetRef& unseen,
                                      const std::vector<const raster::DatasetManifest*>& train_manifests,
                                      double far = 0.05);

struct Report {
    ExperimentMatrix matrix;
    std::vector<UnseenResult> unseen;
    std::vector<std::string> artifact_paths;
    std::map<std::string, std::string> config_echo;
    std::string rerun_command;
};

// Writes report.tsv (one row per cell) and summary.txt (human-readable
// grids, 3 decimals) under out_dir.
void emit_report(const Report& report, const std::filesystem::path& out_dir);

// Perturbation family tag of a generated tile (provenance suffix).
std::string family_of(const raster::MultispectralTile& tile);

}  // namespace msd::eval
