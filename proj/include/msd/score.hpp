// Per-band reconstruction-loss feature vector shared by the one-class and
// binary detector paths.
#pragma once

#include <array>
#include <optional>
#include <string>

#include "msd/raster.hpp"

namespace msd::detector {

struct ScoreVector {
    std::array<std::optional<double>, raster::kBandCount> band_scores{};
    double total_score = 0.0;  // mean over present bands
    std::string tile_ref;
    std::optional<raster::Label> label;

    void set(int band, double score) {
        band_scores[static_cast<std::size_t>(band)] = score;
        recompute_total();
    }
    bool has(int band) const { return band_scores[static_cast<std::size_t>(band)].has_value(); }
    double get(int band) const { return *band_scores[static_cast<std::size_t>(band)]; }
    int present_count() const {
        int n = 0;
        for (const auto& s : band_scores) n += s.has_value() ? 1 : 0;
        return n;
    }
    void recompute_total() {
        double acc = 0.0;
        int n = 0;
        for (const auto& s : band_scores)
            if (s) {
                acc += *s;
                ++n;
            }
        total_score = n ? acc / n : 0.0;
    }
};

}  // namespace msd::detector
