// Multispectral raster data model: band layout, tiles, resampling,
// tiling, no-data filtering and tile file I/O.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace msd::raster {

class RasterError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tile file errors, kept distinct so callers can tell a bad header from a
// short read.
class CorruptHeaderError : public RasterError {
public:
    using RasterError::RasterError;
};
class DimensionMismatchError : public RasterError {
public:
    using RasterError::RasterError;
};
class TruncatedPayloadError : public RasterError {
public:
    using RasterError::RasterError;
};
class ResolutionMismatchError : public RasterError {
public:
    using RasterError::RasterError;
};

enum class Label : std::uint8_t { pristine, generated };

const char* to_string(Label label);
Label label_from_string(const std::string& s);

// Spectral band ordinals 1,2,3,4,5,6,7,8,8a,9,10,11,12 map to indices 0..12.
inline constexpr int kBandCount = 13;
const char* band_name(int index);
int band_index_from_name(const std::string& name);

struct BandSpec {
    int index = 0;               // 0..12, see band_name()
    double native_gsd = 10.0;    // meters per pixel as acquired
    int native_size = 0;         // pixels per side at native gsd
    int bit_depth = 16;
    double effective_gsd = 10.0; // meters per pixel after resampling
};

// Canonical Sentinel-2 level-1C band layout (10980 footprint at 10m).
std::array<BandSpec, kBandCount> sentinel2_layout();

struct MultispectralTile {
    int height = 0;
    int width = 0;
    std::vector<BandSpec> band_specs;  // one per channel
    std::vector<std::uint16_t> samples; // band-sequential, [c][y][x]
    Label label = Label::pristine;
    std::string provenance;
    std::uint64_t seed = 0;

    int channels() const { return static_cast<int>(band_specs.size()); }
    std::size_t expected_samples() const {
        return static_cast<std::size_t>(height) * width * band_specs.size();
    }
    std::uint16_t at(int c, int y, int x) const {
        return samples[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    std::uint16_t& at(int c, int y, int x) {
        return samples[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    const std::uint16_t* band(int c) const {
        return samples.data() + static_cast<std::size_t>(c) * height * width;
    }
    std::uint16_t* band(int c) {
        return samples.data() + static_cast<std::size_t>(c) * height * width;
    }
    // Position of spectral band `index` within band_specs, -1 if absent.
    int channel_of(int index) const;
};

enum class Interp { nearest, bilinear };

// Upsample one band raster by an integer factor. `factor` is derived from
// native_gsd / target_gsd and must be a whole number.
std::vector<std::uint16_t> upsample_band(const std::vector<std::uint16_t>& band,
                                         int height, int width, int factor,
                                         Interp mode = Interp::nearest);

// Integer resampling factor from native to target gsd; throws
// ResolutionMismatchError when the ratio is not a whole number.
int upsample_factor(double native_gsd, double target_gsd = 10.0);

// Cut a scene (all bands on a common grid) into non-overlapping
// tile_size x tile_size tiles, row-major from the top-left. Partial tiles at
// the right/bottom edges are dropped.
std::vector<MultispectralTile> retile(const MultispectralTile& scene, int tile_size);

struct NoDataPolicy {
    enum class Kind { strict, fraction } kind = Kind::strict;
    double max_fraction = 0.0;  // used by Kind::fraction

    static NoDataPolicy strict() { return {Kind::strict, 0.0}; }
    static NoDataPolicy fraction(double f) { return {Kind::fraction, f}; }
};

bool has_nodata(const MultispectralTile& tile, const NoDataPolicy& policy);
std::vector<MultispectralTile> filter_nodata(std::vector<MultispectralTile> tiles,
                                             const NoDataPolicy& policy);

// Tile file round-trip. Format: 4-byte little-endian header length, a text
// header (dimensions, band specs, label, provenance, seed), then the raw
// band-sequential payload of 16-bit little-endian samples.
void save_tile(const MultispectralTile& tile, const std::filesystem::path& path);
MultispectralTile load_tile(const std::filesystem::path& path);

// Directory-backed tile store addressed by relative locators.
class TileStore {
public:
    explicit TileStore(std::filesystem::path root) : root_(std::move(root)) {}

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path resolve(const std::string& locator) const { return root_ / locator; }
    bool exists(const std::string& locator) const;
    void save(const std::string& locator, const MultispectralTile& tile) const;
    MultispectralTile load(const std::string& locator) const;

private:
    std::filesystem::path root_;
};

}  // namespace msd::raster
