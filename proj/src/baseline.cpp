#include "msd/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "msd/nn/checkpoint.hpp"
#include "msd/rng.hpp"

namespace msd::baseline {

namespace {

std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

}  // namespace

std::string CnnConfig::echo() const {
    std::ostringstream os;
    os << "input_channels=" << input_channels << ";stem_downsample=" << (stem_downsample ? 1 : 0)
       << ";width=" << width << ";depth=" << depth << ";bands=" << join_ints(bands)
       << ";seed=" << seed;
    return os.str();
}

CnnConfig CnnConfig::from_echo(const std::string& line) {
    CnnConfig cfg;
    std::istringstream is(line);
    std::string item;
    while (std::getline(is, item, ';')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw BaselineError("bad config echo item: " + item);
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        if (key == "input_channels") cfg.input_channels = std::stoi(val);
        else if (key == "stem_downsample") cfg.stem_downsample = val == "1";
        else if (key == "width") cfg.width = std::stoi(val);
        else if (key == "depth") cfg.depth = std::stoi(val);
        else if (key == "bands") cfg.bands = split_ints(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else throw BaselineError("unknown config echo key: " + key);
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Augmentation

raster::MultispectralTile flip_h(const raster::MultispectralTile& tile) {
    raster::MultispectralTile out = tile;
    for (int c = 0; c < tile.channels(); ++c)
        for (int y = 0; y < tile.height; ++y)
            for (int x = 0; x < tile.width; ++x) out.at(c, y, x) = tile.at(c, y, tile.width - 1 - x);
    return out;
}

raster::MultispectralTile flip_v(const raster::MultispectralTile& tile) {
    raster::MultispectralTile out = tile;
    for (int c = 0; c < tile.channels(); ++c)
        for (int y = 0; y < tile.height; ++y)
            for (int x = 0; x < tile.width; ++x) out.at(c, y, x) = tile.at(c, tile.height - 1 - y, x);
    return out;
}

raster::MultispectralTile rot90(const raster::MultispectralTile& tile, int quarter_turns) {
    int q = ((quarter_turns % 4) + 4) % 4;
    if (tile.height != tile.width && (q % 2) == 1)
        throw BaselineError("90-degree rotation requires square tiles");
    raster::MultispectralTile out = tile;
    for (int c = 0; c < tile.channels(); ++c)
        for (int y = 0; y < tile.height; ++y)
            for (int x = 0; x < tile.width; ++x) {
                std::uint16_t v = tile.at(c, y, x);
                switch (q) {
                    case 0: out.at(c, y, x) = v; break;
                    case 1: out.at(c, x, tile.height - 1 - y) = v; break;
                    case 2: out.at(c, tile.height - 1 - y, tile.width - 1 - x) = v; break;
                    case 3: out.at(c, tile.width - 1 - x, y) = v; break;
                }
            }
    return out;
}

raster::MultispectralTile shift_tile(const raster::MultispectralTile& tile, int dx, int dy) {
    raster::MultispectralTile out = tile;
    for (int c = 0; c < tile.channels(); ++c)
        for (int y = 0; y < tile.height; ++y)
            for (int x = 0; x < tile.width; ++x) {
                const int sy = std::clamp(y - dy, 0, tile.height - 1);
                const int sx = std::clamp(x - dx, 0, tile.width - 1);
                out.at(c, y, x) = tile.at(c, sy, sx);
            }
    return out;
}

raster::MultispectralTile blur_tile(const raster::MultispectralTile& tile, double sigma) {
    raster::MultispectralTile out = tile;
    if (sigma <= 0.0) return out;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (double& v : k) v /= sum;

    const int h = tile.height, w = tile.width;
    std::vector<double> tmp(static_cast<std::size_t>(h) * w);
    for (int c = 0; c < tile.channels(); ++c) {
        const std::uint16_t* src = tile.band(c);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    acc += k[static_cast<std::size_t>(t + radius)] *
                           src[static_cast<std::size_t>(y) * w + std::clamp(x + t, 0, w - 1)];
                tmp[static_cast<std::size_t>(y) * w + x] = acc;
            }
        std::uint16_t* dst = out.band(c);
        for (int x = 0; x < w; ++x)
            for (int y = 0; y < h; ++y) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    acc += k[static_cast<std::size_t>(t + radius)] *
                           tmp[static_cast<std::size_t>(std::clamp(y + t, 0, h - 1)) * w + x];
                dst[static_cast<std::size_t>(y) * w + x] =
                    static_cast<std::uint16_t>(std::lround(std::clamp(acc, 0.0, 65535.0)));
            }
    }
    return out;
}

raster::MultispectralTile augment(const raster::MultispectralTile& tile,
                                  const AugmentationConfig& config, std::uint64_t seed) {
    rng::Generator gen(rng::derive(seed, 0xa6));
    raster::MultispectralTile out = tile;

    if (gen.uniform() < config.blur_prob) {
        const double sigma = gen.uniform(config.blur_sigma_min, config.blur_sigma_max);
        out = blur_tile(out, sigma);
    }
    if (gen.uniform() < config.shift_prob && config.shift_max > 0) {
        const int dx = static_cast<int>(gen.below(2u * config.shift_max + 1)) - config.shift_max;
        const int dy = static_cast<int>(gen.below(2u * config.shift_max + 1)) - config.shift_max;
        out = shift_tile(out, dx, dy);
    }
    if (gen.uniform() < config.rotation_prob) {
        out = rot90(out, 1 + static_cast<int>(gen.below(3)));
    }
    if (gen.uniform() < config.flip_prob) {
        const bool both = config.flip_horizontal && config.flip_vertical;
        const bool horizontal = both ? gen.below(2) == 0 : config.flip_horizontal;
        out = horizontal ? flip_h(out) : flip_v(out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary CNN

BinaryCnn::BinaryCnn(CnnConfig config) : cfg_(std::move(config)) {
    if (cfg_.width <= 0 || cfg_.depth < 1) throw BaselineError("bad width/depth");
    if (cfg_.bands.empty()) {
        if (cfg_.input_channels == 13)
            for (int i = 0; i < 13; ++i) cfg_.bands.push_back(i);
        else if (cfg_.input_channels == 3)
            cfg_.bands = {3, 2, 1};
        else if (cfg_.input_channels == 1)
            cfg_.bands = {0};
        else
            throw BaselineError("bands must be given for this channel count");
    }
    if (static_cast<int>(cfg_.bands.size()) != cfg_.input_channels)
        throw BaselineError("bands list must match input_channels");

    rng::Generator gen(rng::derive(cfg_.seed, 0xc33));
    auto add = [&](const std::string& name, std::vector<int> shape, int fan_in) {
        const double bound = std::sqrt(1.0 / fan_in);
        nn::Tensor<float> t(std::move(shape));
        for (std::int64_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<float>(gen.uniform(-bound, bound));
        params_.emplace_back(name, std::move(t));
    };

    const int W = cfg_.width, C = cfg_.input_channels;
    params_.reserve(static_cast<std::size_t>(2 * (cfg_.depth + 1) + 2));
    add("stem.w", {W, C, 3, 3}, C * 9);
    add("stem.b", {W}, C * 9);
    for (int s = 0; s < cfg_.depth; ++s) {
        add("stage" + std::to_string(s) + ".w", {W, W, 3, 3}, W * 9);
        add("stage" + std::to_string(s) + ".b", {W}, W * 9);
    }
    add("head.w", {W, 1}, W);
    add("head.b", {1}, W);
}

nn::Parameter<float>& BinaryCnn::p(const std::string& name) {
    for (auto& prm : params_)
        if (prm.name == name) return prm;
    throw BaselineError("no such parameter: " + name);
}

const nn::Parameter<float>& BinaryCnn::p(const std::string& name) const {
    for (const auto& prm : params_)
        if (prm.name == name) return prm;
    throw BaselineError("no such parameter: " + name);
}

std::vector<nn::Parameter<float>*> BinaryCnn::parameters() {
    std::vector<nn::Parameter<float>*> out;
    out.reserve(params_.size());
    for (auto& prm : params_) out.push_back(&prm);
    return out;
}

std::int64_t BinaryCnn::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& prm : params_) n += prm.value.size();
    return n;
}

typename nn::TapeF::Var BinaryCnn::build(nn::TapeF& t, const nn::Tensor<float>& batch, bool bind) {
    if (batch.ndim() != 4 || batch.shape[1] != cfg_.input_channels)
        throw BaselineError("batch channel count does not match model config");
    auto P = [&](const std::string& name) {
        return bind ? t.param(p(name)) : t.constant(p(name).value);
    };
    auto x = t.input(batch);
    auto h = t.relu(t.bias_add(t.conv2d(x, P("stem.w"), cfg_.stem_downsample ? 2 : 1, 1),
                               P("stem.b")));
    for (int s = 0; s < cfg_.depth; ++s) {
        const std::string base = "stage" + std::to_string(s);
        h = t.relu(t.bias_add(t.conv2d(h, P(base + ".w"), 2, 1), P(base + ".b")));
    }
    auto pooled = t.global_avg_pool(h);
    return t.bias_add(t.linear(pooled, P("head.w")), P("head.b"));
}

nn::Tensor<float> BinaryCnn::logits(const nn::Tensor<float>& batch) const {
    nn::TapeF tape;
    auto z = const_cast<BinaryCnn*>(this)->build(tape, batch, false);
    return tape.value(z);
}

double BinaryCnn::score(const raster::MultispectralTile& tile) const {
    std::vector<int> positions;
    for (int idx : cfg_.bands) {
        const int pos = tile.channel_of(idx);
        if (pos < 0)
            throw BaselineError(std::string("tile is missing spectral band ") +
                                raster::band_name(idx));
        positions.push_back(pos);
    }
    std::vector<const raster::MultispectralTile*> one = {&tile};
    const auto z = logits(vqvae::tiles_to_batch(one, positions));
    return 1.0 / (1.0 + std::exp(-static_cast<double>(z[0])));
}

double BinaryCnn::train_step(const nn::Tensor<float>& batch, const nn::Tensor<float>& targets,
                             nn::Adam<float>& adam) {
    nn::TapeF tape;
    auto z = build(tape, batch, true);
    auto loss = tape.bce_with_logits(z, targets);
    const double value = tape.value(loss)[0];
    if (!std::isfinite(value)) throw BaselineError("non-finite loss in training step");
    auto params = parameters();
    nn::zero_grads(params);
    tape.backward(loss);
    adam.step(params);
    return value;
}

void BinaryCnn::save(const std::filesystem::path& path) const {
    std::vector<std::pair<std::string, const nn::Tensor<float>*>> tensors;
    for (const auto& prm : params_) tensors.emplace_back("param." + prm.name, &prm.value);
    nn::save_checkpoint(path, {{"kind", "binary_cnn"}, {"config", cfg_.echo()}}, tensors);
}

BinaryCnn BinaryCnn::load(const std::filesystem::path& path) {
    auto ckpt = nn::load_checkpoint_checked(path, {{"kind", "binary_cnn"}});
    BinaryCnn model(CnnConfig::from_echo(ckpt.meta.at("config")));
    for (auto& prm : model.params_) {
        const auto& t = ckpt.tensor("param." + prm.name);
        if (t.shape != prm.value.shape) throw BaselineError("checkpoint tensor shape mismatch");
        prm.value = t;
        prm.zero_grad();
    }
    return model;
}

vqvae::TrainingLog train_binary(BinaryCnn& model, const raster::DatasetManifest& manifest,
                                const raster::TileStore& store, const AugmentationConfig& aug,
                                const BinaryTrainRun& run) {
    const auto split = manifest.select(raster::Split::train_detector);
    if (split.empty()) throw BaselineError("train_detector split is empty: " + manifest.name);
    bool has_pristine = false, has_generated = false;
    for (const auto& e : split) {
        has_pristine |= e.label == raster::Label::pristine;
        has_generated |= e.label == raster::Label::generated;
    }
    if (!has_pristine || !has_generated)
        throw BaselineError("binary training needs both labels in train_detector: " +
                            manifest.name);

    std::vector<raster::MultispectralTile> tiles;
    std::vector<float> targets;
    tiles.reserve(split.size());
    for (const auto& e : split) {
        tiles.push_back(store.load(e.locator));
        targets.push_back(e.label == raster::Label::generated ? 1.0f : 0.0f);
    }
    std::vector<int> positions;
    for (int idx : model.config().bands) {
        const int pos = tiles[0].channel_of(idx);
        if (pos < 0)
            throw BaselineError(std::string("dataset is missing spectral band ") +
                                raster::band_name(idx));
        positions.push_back(pos);
    }

    std::vector<std::size_t> order(tiles.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    {
        rng::Generator gen(rng::derive(run.seed, 0x7a11));
        rng::shuffle_indices(order, gen);
    }
    std::size_t n_val = run.val_fraction > 0.0
                            ? std::max<std::size_t>(1, static_cast<std::size_t>(
                                                           run.val_fraction * tiles.size()))
                            : 0;
    if (n_val >= tiles.size()) n_val = tiles.size() - 1;
    const std::vector<std::size_t> train_idx(order.begin(), order.end() - n_val);
    const std::vector<std::size_t> val_idx(order.end() - n_val, order.end());

    auto val_accuracy = [&]() {
        const auto& idx = val_idx.empty() ? train_idx : val_idx;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < idx.size();
             start += static_cast<std::size_t>(run.batch_size)) {
            std::vector<const raster::MultispectralTile*> ptrs;
            std::vector<float> want;
            for (std::size_t i = start;
                 i < std::min(idx.size(), start + static_cast<std::size_t>(run.batch_size)); ++i) {
                ptrs.push_back(&tiles[idx[i]]);
                want.push_back(targets[idx[i]]);
            }
            const auto z = model.logits(vqvae::tiles_to_batch(ptrs, positions));
            for (std::size_t i = 0; i < ptrs.size(); ++i)
                correct += ((z[static_cast<std::int64_t>(i)] > 0.0f) == (want[i] > 0.5f)) ? 1 : 0;
        }
        return static_cast<double>(correct) / static_cast<double>(idx.size());
    };

    nn::Adam<float> adam({static_cast<float>(run.lr)});
    vqvae::TrainingLog log;
    double best_acc = -1.0;
    int since_improve = 0;
    std::vector<nn::Tensor<float>> best;
    for (const auto* prm : model.parameters()) best.push_back(prm->value);

    for (int epoch = 1; epoch <= run.epochs; ++epoch) {
        std::vector<std::size_t> perm = train_idx;
        {
            rng::Generator gen(rng::derive(run.seed, 0xe0000 + static_cast<std::uint64_t>(epoch)));
            rng::shuffle_indices(perm, gen);
        }
        double loss_acc = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < perm.size();
             start += static_cast<std::size_t>(run.batch_size)) {
            std::vector<raster::MultispectralTile> augmented;
            std::vector<const raster::MultispectralTile*> ptrs;
            std::vector<float> want;
            for (std::size_t i = start;
                 i < std::min(perm.size(), start + static_cast<std::size_t>(run.batch_size)); ++i) {
                const std::uint64_t tile_seed =
                    rng::derive(run.seed ^ 0xa76u, static_cast<std::uint64_t>(epoch) * 1000003u +
                                                       static_cast<std::uint64_t>(perm[i]));
                augmented.push_back(augment(tiles[perm[i]], aug, tile_seed));
                want.push_back(targets[perm[i]]);
            }
            for (const auto& t : augmented) ptrs.push_back(&t);
            nn::Tensor<float> tgt({static_cast<int>(want.size())}, std::move(want));
            loss_acc += model.train_step(vqvae::tiles_to_batch(ptrs, positions), tgt, adam) *
                        static_cast<double>(ptrs.size());
            seen += ptrs.size();
        }
        const double train_loss = seen ? loss_acc / static_cast<double>(seen) : 0.0;
        const double acc = val_accuracy();

        vqvae::EpochRecord rec{epoch, train_loss, 1.0 - acc, false};
        if (acc > best_acc + run.min_delta) {
            best_acc = acc;
            best.clear();
            for (const auto* prm : model.parameters()) best.push_back(prm->value);
            log.best_epoch = epoch;
            since_improve = 0;
        } else {
            ++since_improve;
        }
        const bool stop = since_improve >= run.patience;
        rec.stopped = stop;
        log.epochs.push_back(rec);
        if (stop) break;
    }

    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
    log.best_val = 1.0 - best_acc;
    return log;
}

}  // namespace msd::baseline
