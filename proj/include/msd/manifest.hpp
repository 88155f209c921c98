// Dataset manifests: which tile plays which role in which split.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msd/raster.hpp"

namespace msd::raster {

enum class Split : std::uint8_t { train_gan, train_detector, train_oneclass, calibrate, test };

const char* to_string(Split split);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string locator;
    Label label = Label::pristine;
    Split split = Split::test;
};

struct DatasetManifest {
    std::string name;
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> select(Split split) const;
    std::vector<ManifestEntry> select(Split split, Label label) const;
    std::size_t count(Split split, Label label) const;

    // Line-oriented text: locator<TAB>label<TAB>split.
    void save(const std::filesystem::path& path) const;
    static DatasetManifest load(const std::filesystem::path& path);
};

// Requested entry counts per (split, label).
struct SplitPlan {
    struct Item {
        Split split;
        Label label;
        std::size_t count = 0;
    };
    std::vector<Item> items;

    SplitPlan& add(Split split, Label label, std::size_t count) {
        items.push_back({split, label, count});
        return *this;
    }
    std::size_t total(Label label) const;
};

class ManifestError : public RasterError {
public:
    using RasterError::RasterError;
};

// Deterministic split assignment under shuffle_seed. Tiles not covered by the
// plan are left out of the manifest; requesting more tiles than available of
// a label throws ManifestError.
DatasetManifest build_manifest(const std::string& name,
                               const std::vector<std::pair<std::string, Label>>& tiles,
                               const SplitPlan& plan, std::uint64_t shuffle_seed);

// Splits must partition their entries: no locator in two splits.
bool splits_disjoint(const DatasetManifest& manifest);

// Equal-count merge: takes the same number of entries per (split, label) from
// each source, capped by the smallest supply.
DatasetManifest merge_manifests_equal(const DatasetManifest& a, const DatasetManifest& b,
                                      const std::string& merged_name);

}  // namespace msd::raster
