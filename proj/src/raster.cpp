#include "msd/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace msd::raster {

namespace {

const char* kBandNames[kBandCount] = {"1", "2",  "3",  "4",  "5",  "6", "7",
                                      "8", "8a", "9",  "10", "11", "12"};

}  // namespace

const char* to_string(Label label) {
    return label == Label::pristine ? "pristine" : "generated";
}

Label label_from_string(const std::string& s) {
    if (s == "pristine") return Label::pristine;
    if (s == "generated") return Label::generated;
    throw RasterError("unknown label: " + s);
}

const char* band_name(int index) {
    if (index < 0 || index >= kBandCount) throw RasterError("band index out of range");
    return kBandNames[index];
}

int band_index_from_name(const std::string& name) {
    for (int i = 0; i < kBandCount; ++i)
        if (name == kBandNames[i]) return i;
    throw RasterError("unknown band name: " + name);
}

std::array<BandSpec, kBandCount> sentinel2_layout() {
    std::array<BandSpec, kBandCount> layout{};
    for (int i = 0; i < kBandCount; ++i) {
        BandSpec& b = layout[i];
        b.index = i;
        b.bit_depth = 16;
        b.native_gsd = 60.0;
        b.native_size = 1830;
    }
    for (int i : {1, 2, 3, 7}) {  // bands 2,3,4,8
        layout[i].native_gsd = 10.0;
        layout[i].native_size = 10980;
    }
    for (int i : {4, 5, 6, 8, 11, 12}) {  // bands 5,6,7,8a,11,12
        layout[i].native_gsd = 20.0;
        layout[i].native_size = 5490;
    }
    for (auto& b : layout) b.effective_gsd = b.native_gsd;
    return layout;
}

int MultispectralTile::channel_of(int index) const {
    for (int c = 0; c < channels(); ++c)
        if (band_specs[c].index == index) return c;
    return -1;
}

int upsample_factor(double native_gsd, double target_gsd) {
    const double ratio = native_gsd / target_gsd;
    const double rounded = std::round(ratio);
    if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-9) {
        std::ostringstream msg;
        msg << "gsd " << native_gsd << "m is not an integer multiple of " << target_gsd << "m";
        throw ResolutionMismatchError(msg.str());
    }
    return static_cast<int>(rounded);
}

std::vector<std::uint16_t> upsample_band(const std::vector<std::uint16_t>& band,
                                         int height, int width, int factor, Interp mode) {
    if (factor < 1) throw ResolutionMismatchError("upsample factor must be >= 1");
    if (static_cast<std::size_t>(height) * width != band.size())
        throw DimensionMismatchError("band size does not match declared dimensions");
    if (factor == 1) return band;

    const int oh = height * factor;
    const int ow = width * factor;
    std::vector<std::uint16_t> out(static_cast<std::size_t>(oh) * ow);

    if (mode == Interp::nearest) {
        for (int y = 0; y < oh; ++y) {
            const std::uint16_t* src = band.data() + static_cast<std::size_t>(y / factor) * width;
            std::uint16_t* dst = out.data() + static_cast<std::size_t>(y) * ow;
            for (int x = 0; x < ow; ++x) dst[x] = src[x / factor];
        }
        return out;
    }

    // Bilinear, pixel-center alignment, edges replicated.
    const double inv = 1.0 / factor;
    for (int y = 0; y < oh; ++y) {
        const double sy = (y + 0.5) * inv - 0.5;
        int y0 = static_cast<int>(std::floor(sy));
        const double fy = sy - y0;
        int y1 = std::min(y0 + 1, height - 1);
        y0 = std::max(y0, 0);
        for (int x = 0; x < ow; ++x) {
            const double sx = (x + 0.5) * inv - 0.5;
            int x0 = static_cast<int>(std::floor(sx));
            const double fx = sx - x0;
            int x1 = std::min(x0 + 1, width - 1);
            x0 = std::max(x0, 0);
            const double v00 = band[static_cast<std::size_t>(y0) * width + x0];
            const double v01 = band[static_cast<std::size_t>(y0) * width + x1];
            const double v10 = band[static_cast<std::size_t>(y1) * width + x0];
            const double v11 = band[static_cast<std::size_t>(y1) * width + x1];
            const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11);
            out[static_cast<std::size_t>(y) * ow + x] =
                static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 65535.0)));
        }
    }
    return out;
}

std::vector<MultispectralTile> retile(const MultispectralTile& scene, int tile_size) {
    if (tile_size < 8) throw RasterError("tile_size must be >= 8");
    if (scene.samples.size() != scene.expected_samples())
        throw DimensionMismatchError("scene sample count does not match dimensions");

    const int rows = scene.height / tile_size;
    const int cols = scene.width / tile_size;
    std::vector<MultispectralTile> tiles;
    if (rows <= 0 || cols <= 0) return tiles;
    tiles.reserve(static_cast<std::size_t>(rows) * cols);

    for (int ty = 0; ty < rows; ++ty) {
        for (int tx = 0; tx < cols; ++tx) {
            MultispectralTile t;
            t.height = tile_size;
            t.width = tile_size;
            t.band_specs = scene.band_specs;
            t.label = scene.label;
            t.provenance = scene.provenance;
            t.seed = scene.seed;
            t.samples.resize(t.expected_samples());
            for (int c = 0; c < scene.channels(); ++c) {
                for (int y = 0; y < tile_size; ++y) {
                    const std::uint16_t* src =
                        scene.band(c) + static_cast<std::size_t>(ty * tile_size + y) * scene.width +
                        static_cast<std::size_t>(tx) * tile_size;
                    std::memcpy(t.band(c) + static_cast<std::size_t>(y) * tile_size, src,
                                sizeof(std::uint16_t) * tile_size);
                }
            }
            tiles.push_back(std::move(t));
        }
    }
    return tiles;
}

bool has_nodata(const MultispectralTile& tile, const NoDataPolicy& policy) {
    if (policy.kind == NoDataPolicy::Kind::strict) {
        return std::find(tile.samples.begin(), tile.samples.end(), 0) != tile.samples.end();
    }
    const std::size_t zeros =
        static_cast<std::size_t>(std::count(tile.samples.begin(), tile.samples.end(), 0));
    return tile.samples.empty()
               ? false
               : static_cast<double>(zeros) / tile.samples.size() > policy.max_fraction;
}

std::vector<MultispectralTile> filter_nodata(std::vector<MultispectralTile> tiles,
                                             const NoDataPolicy& policy) {
    tiles.erase(std::remove_if(tiles.begin(), tiles.end(),
                               [&](const MultispectralTile& t) { return has_nodata(t, policy); }),
                tiles.end());
    return tiles;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CorruptHeaderError("file too short for header length");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

constexpr char kMagic[] = "msdtile 1";

}  // namespace

void save_tile(const MultispectralTile& tile, const std::filesystem::path& path) {
    if (tile.samples.size() != tile.expected_samples())
        throw DimensionMismatchError("tile sample count does not match dimensions");

    std::ostringstream header;
    header << kMagic << "\n";
    header << "height " << tile.height << "\n";
    header << "width " << tile.width << "\n";
    header << "channels " << tile.channels() << "\n";
    header << "label " << to_string(tile.label) << "\n";
    header << "provenance " << tile.provenance << "\n";
    header << "seed " << tile.seed << "\n";
    for (const BandSpec& b : tile.band_specs) {
        header << "band " << b.index << " " << b.native_gsd << " " << b.native_size << " "
               << b.bit_depth << " " << b.effective_gsd << "\n";
    }
    const std::string htext = header.str();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RasterError("cannot open for writing: " + path.string());
    put_u32(os, static_cast<std::uint32_t>(htext.size()));
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (std::uint16_t v : tile.samples) {
        unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!os) throw RasterError("write failed: " + path.string());
}

MultispectralTile load_tile(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw RasterError("cannot open: " + path.string());

    const std::uint32_t hlen = get_u32(is);
    if (hlen == 0 || hlen > (1u << 20)) throw CorruptHeaderError("implausible header length");
    std::string htext(hlen, '\0');
    is.read(htext.data(), hlen);
    if (!is) throw CorruptHeaderError("file too short for declared header");

    std::istringstream hs(htext);
    std::string line;
    if (!std::getline(hs, line) || line != kMagic)
        throw CorruptHeaderError("bad magic line");

    MultispectralTile tile;
    int channels = -1;
    while (std::getline(hs, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "height") ls >> tile.height;
        else if (key == "width") ls >> tile.width;
        else if (key == "channels") ls >> channels;
        else if (key == "label") {
            std::string v;
            ls >> v;
            tile.label = label_from_string(v);
        } else if (key == "provenance") {
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            tile.provenance = rest;
        } else if (key == "seed") ls >> tile.seed;
        else if (key == "band") {
            BandSpec b;
            ls >> b.index >> b.native_gsd >> b.native_size >> b.bit_depth >> b.effective_gsd;
            tile.band_specs.push_back(b);
        } else {
            throw CorruptHeaderError("unknown header key: " + key);
        }
        if (ls.fail()) throw CorruptHeaderError("malformed header line: " + line);
    }
    if (tile.height <= 0 || tile.width <= 0 || channels < 0)
        throw CorruptHeaderError("missing dimensions");
    if (channels != tile.channels())
        throw DimensionMismatchError("declared channel count does not match band specs");

    tile.samples.resize(tile.expected_samples());
    std::vector<unsigned char> raw(tile.samples.size() * 2);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(is.gcount()) != raw.size())
        throw TruncatedPayloadError("payload shorter than header declares");
    for (std::size_t i = 0; i < tile.samples.size(); ++i)
        tile.samples[i] = static_cast<std::uint16_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
    return tile;
}

bool TileStore::exists(const std::string& locator) const {
    return std::filesystem::exists(resolve(locator));
}

void TileStore::save(const std::string& locator, const MultispectralTile& tile) const {
    const std::filesystem::path p = resolve(locator);
    std::filesystem::create_directories(p.parent_path());
    save_tile(tile, p);
}

MultispectralTile TileStore::load(const std::string& locator) const {
    return load_tile(resolve(locator));
}

}  // namespace msd::raster
