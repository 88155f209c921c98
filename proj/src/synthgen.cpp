#include "msd/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "msd/rng.hpp"

namespace msd::synth {

const char* to_string(Family family) {
    switch (family) {
        case Family::checkerboard: return "checkerboard";
        case Family::spectral_smoothing: return "spectral_smoothing";
        case Family::band_shift: return "band_shift";
    }
    return "?";
}

Family family_from_string(const std::string& s) {
    if (s == "checkerboard") return Family::checkerboard;
    if (s == "spectral_smoothing") return Family::spectral_smoothing;
    if (s == "band_shift") return Family::band_shift;
    throw SynthError("unknown perturbation family: " + s);
}

std::vector<double> psd_cholesky(const std::vector<double>& cov, int n) {
    if (cov.size() != static_cast<std::size_t>(n) * n)
        throw SynthError("covariance size does not match band count");
    double scale = 0.0;
    for (int i = 0; i < n; ++i) scale = std::max(scale, std::abs(cov[i * n + i]));
    const double tol = std::max(scale, 1.0) * 1e-9;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < i; ++j)
            if (std::abs(cov[i * n + j] - cov[j * n + i]) > tol)
                throw SynthError("covariance is not symmetric");

    std::vector<double> L(static_cast<std::size_t>(n) * n, 0.0);
    for (int j = 0; j < n; ++j) {
        double d = cov[j * n + j];
        for (int k = 0; k < j; ++k) d -= L[j * n + k] * L[j * n + k];
        if (d < -tol) throw SynthError("covariance is not positive semi-definite");
        d = d > tol ? std::sqrt(d) : 0.0;
        L[j * n + j] = d;
        for (int i = j + 1; i < n; ++i) {
            double s = cov[i * n + j];
            for (int k = 0; k < j; ++k) s -= L[i * n + k] * L[j * n + k];
            if (d > 0.0) {
                L[i * n + j] = s / d;
            } else if (std::abs(s) > tol) {
                throw SynthError("covariance is not positive semi-definite");
            }
        }
    }
    return L;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    if (sigma <= 0.0) return {1.0};
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    return k;
}

inline int wrap(int i, int n) {
    i %= n;
    return i < 0 ? i + n : i;
}

// Separable circular convolution. Wrap-around keeps generated fields
// stationary and makes the filter an exact low-pass on the periodic
// spectrum (no edge leakage into high frequencies).
void smooth_circular(std::vector<double>& field, int h, int w, const std::vector<double>& k) {
    const int radius = static_cast<int>(k.size()) / 2;
    std::vector<double> tmp(field.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t)
                acc += k[t + radius] * field[static_cast<std::size_t>(y) * w + wrap(x + t, w)];
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t)
                acc += k[t + radius] * tmp[static_cast<std::size_t>(wrap(y + t, h)) * w + x];
            field[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
}

// Band-limits one band while keeping its contrast: blur, then restore the
// band's standard deviation around the mean. Generators that miss fine
// detail still emit full-contrast imagery, so the family's signature is the
// spectrum, not a lower dynamic range.
void blur_band(std::uint16_t* band, int h, int w, const std::vector<double>& k) {
    const std::size_t count = static_cast<std::size_t>(h) * w;
    std::vector<double> field(count);
    double mean_pre = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        field[i] = band[i];
        mean_pre += field[i];
    }
    mean_pre /= static_cast<double>(count);
    double var_pre = 0.0;
    for (std::size_t i = 0; i < count; ++i)
        var_pre += (field[i] - mean_pre) * (field[i] - mean_pre);

    smooth_circular(field, h, w, k);

    double mean_post = 0.0;
    for (std::size_t i = 0; i < count; ++i) mean_post += field[i];
    mean_post /= static_cast<double>(count);
    double var_post = 0.0;
    for (std::size_t i = 0; i < count; ++i)
        var_post += (field[i] - mean_post) * (field[i] - mean_post);

    const double gain = var_post > 1e-12 ? std::sqrt(var_pre / var_post) : 1.0;
    for (std::size_t i = 0; i < count; ++i)
        band[i] = static_cast<std::uint16_t>(
            std::lround(std::clamp(mean_post + gain * (field[i] - mean_post), 0.0, 65535.0)));
}

std::uint16_t clamp16(double v) {
    return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 65535.0)));
}

}  // namespace

raster::MultispectralTile gen_pristine_tile(const TextureParams& params, int size, int channels) {
    if (size <= 0 || channels <= 0) throw SynthError("size and channels must be positive");

    std::vector<double> cov = params.band_covariance;
    if (cov.empty()) {
        cov.assign(static_cast<std::size_t>(channels) * channels, 0.0);
        for (int c = 0; c < channels; ++c) cov[static_cast<std::size_t>(c) * channels + c] = 1.0;
    }
    const std::vector<double> L = psd_cholesky(cov, channels);

    rng::Generator gen(params.seed);
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    std::vector<std::vector<double>> fields(channels, std::vector<double>(plane));
    for (int c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) fields[c][i] = gen.normal();

    const std::vector<double> kernel = gaussian_kernel(params.correlation_length);
    double k2 = 0.0;
    for (double v : kernel) k2 += v * v;
    const double norm = 1.0 / std::sqrt(k2 * k2);  // separable: variance shrinks by (sum k^2)^2
    if (kernel.size() > 1)
        for (int c = 0; c < channels; ++c) smooth_circular(fields[c], size, size, kernel);

    raster::MultispectralTile tile;
    tile.height = size;
    tile.width = size;
    tile.label = raster::Label::pristine;
    tile.seed = params.seed;
    tile.band_specs.resize(channels);
    for (int c = 0; c < channels; ++c) {
        raster::BandSpec& b = tile.band_specs[c];
        b.index = c % raster::kBandCount;
        b.native_gsd = 10.0;
        b.effective_gsd = 10.0;
        b.native_size = size;
    }
    tile.samples.resize(tile.expected_samples());

    std::vector<double> mixed(channels);
    for (std::size_t i = 0; i < plane; ++i) {
        for (int c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (int d = 0; d <= c; ++d)
                acc += L[static_cast<std::size_t>(c) * channels + d] * fields[d][i] * norm;
            mixed[c] = acc;
        }
        for (int c = 0; c < channels; ++c)
            tile.samples[static_cast<std::size_t>(c) * plane + i] =
                clamp16(params.mean_level + params.dynamic_range * mixed[c]);
    }
    return tile;
}

raster::MultispectralTile gen_generated_tile(const raster::MultispectralTile& pristine,
                                             const PerturbationParams& pert) {
    if (pristine.label != raster::Label::pristine)
        throw SynthError("input tile must be labeled pristine");
    if (pert.strength < 0.0 || pert.strength > 1.0)
        throw SynthError("strength must lie in [0,1]");

    raster::MultispectralTile out = pristine;
    out.label = raster::Label::generated;
    out.provenance = pristine.provenance.empty()
                         ? to_string(pert.family)
                         : pristine.provenance + ":" + to_string(pert.family);
    if (pert.strength == 0.0) return out;

    const int h = out.height, w = out.width;
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    switch (pert.family) {
        case Family::checkerboard: {
            if (pert.period < 2) throw SynthError("checkerboard period must be >= 2");
            const double amp = pert.strength * kCheckerboardFullAmplitude;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const int cell = (2 * y / pert.period + 2 * x / pert.period) & 1;
                    const double delta = cell ? amp : -amp;
                    for (int c = 0; c < out.channels(); ++c) {
                        std::uint16_t& v = out.samples[c * plane + static_cast<std::size_t>(y) * w + x];
                        v = clamp16(static_cast<double>(v) + delta);
                    }
                }
            }
            break;
        }
        case Family::spectral_smoothing: {
            const std::vector<double> k = gaussian_kernel(pert.strength * kSmoothingFullSigma);
            if (k.size() > 1)
                for (int c = 0; c < out.channels(); ++c) blur_band(out.band(c), h, w, k);
            break;
        }
        case Family::band_shift: {
            // Monotone per-band gamma remapping of normalized intensity.
            rng::Generator gen(rng::derive(pert.seed, 0xb5));
            for (int c = 0; c < out.channels(); ++c) {
                const double gamma = std::exp(pert.strength * gen.uniform(-0.7, 0.7));
                std::uint16_t* band = out.band(c);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double u = static_cast<double>(band[i]) / 65535.0;
                    band[i] = clamp16(65535.0 * std::pow(u, gamma));
                }
            }
            break;
        }
    }
    return out;
}

raster::DatasetManifest build_pseudo_dataset(const PseudoDatasetSpec& spec,
                                             const raster::TileStore& store) {
    const std::filesystem::path dataset_dir = store.root() / spec.name;
    if (std::filesystem::exists(dataset_dir))
        throw SynthError("dataset already exists in store: " + spec.name);
    std::filesystem::create_directories(dataset_dir / "tiles");

    std::vector<std::pair<std::string, raster::Label>> tiles;
    tiles.reserve(spec.n_pristine + spec.n_generated);

    auto locator_for = [&](std::size_t i) {
        std::ostringstream os;
        os << spec.name << "/tiles/" << std::setw(6) << std::setfill('0') << i << ".tile";
        return os.str();
    };

    for (std::size_t i = 0; i < spec.n_pristine + spec.n_generated; ++i) {
        TextureParams tp = spec.texture;
        tp.seed = rng::derive(spec.seed ^ spec.texture.seed, i);
        raster::MultispectralTile tile = gen_pristine_tile(tp, spec.tile_size, spec.channels);
        tile.provenance = spec.name;
        if (i >= spec.n_pristine) {
            PerturbationParams pp = spec.perturbation;
            pp.seed = rng::derive(spec.perturbation.seed, i);
            tile = gen_generated_tile(tile, pp);
        }
        const std::string locator = locator_for(i);
        store.save(locator, tile);
        tiles.emplace_back(locator, tile.label);
    }

    raster::SplitPlan plan = spec.plan;
    if (plan.items.empty()) {
        plan.add(raster::Split::train_oneclass, raster::Label::pristine, spec.n_pristine);
        plan.add(raster::Split::test, raster::Label::generated, spec.n_generated);
    }
    raster::DatasetManifest manifest =
        raster::build_manifest(spec.name, tiles, plan, rng::derive(spec.seed, 0x5e17));
    manifest.save(store.root() / (spec.name + ".manifest"));
    return manifest;
}

}  // namespace msd::synth
