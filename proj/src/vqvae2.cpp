#include "msd/vqvae2.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "msd/nn/checkpoint.hpp"
#include "msd/rng.hpp"

namespace msd::vqvae {

namespace {

constexpr int kDeadCodeUpdates = 50;

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

// [N,D,H,W] -> [N*H*W, D] rows (one latent vector per spatial position).
nn::Tensor<float> nchw_to_rows(const nn::Tensor<float>& t) {
    const int n = t.shape[0], d = t.shape[1], h = t.shape[2], w = t.shape[3];
    nn::Tensor<float> rows({n * h * w, d});
    for (int b = 0; b < n; ++b)
        for (int c = 0; c < d; ++c)
            for (int i = 0; i < h * w; ++i)
                rows[(static_cast<std::int64_t>(b) * h * w + i) * d + c] =
                    t[(static_cast<std::int64_t>(b) * d + c) * h * w + i];
    return rows;
}

nn::Tensor<float> rows_to_nchw(const nn::Tensor<float>& rows, int n, int d, int h, int w) {
    nn::Tensor<float> t({n, d, h, w});
    for (int b = 0; b < n; ++b)
        for (int c = 0; c < d; ++c)
            for (int i = 0; i < h * w; ++i)
                t[(static_cast<std::int64_t>(b) * d + c) * h * w + i] =
                    rows[(static_cast<std::int64_t>(b) * h * w + i) * d + c];
    return t;
}

}  // namespace

std::string VqVae2Config::echo() const {
    std::ostringstream os;
    os.precision(9);
    os << "input_channels=" << input_channels << ";levels=" << levels
       << ";codebooks=" << codebook_sizes[0] << "," << codebook_sizes[1] << ","
       << codebook_sizes[2] << ";code_dim=" << code_dim << ";downsample=" << downsample[0] << ","
       << downsample[1] << "," << downsample[2] << ";commitment=" << commitment_weight
       << ";ema_decay=" << ema_decay << ";width=" << width << ";res_blocks=" << res_blocks
       << ";bands=" << join_ints(bands) << ";seed=" << seed;
    return os.str();
}

VqVae2Config VqVae2Config::from_echo(const std::string& line) {
    VqVae2Config cfg;
    std::istringstream is(line);
    std::string item;
    while (std::getline(is, item, ';')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw VqVaeError("bad config echo item: " + item);
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        if (key == "input_channels") cfg.input_channels = std::stoi(val);
        else if (key == "levels") cfg.levels = std::stoi(val);
        else if (key == "codebooks") {
            auto v = split_ints(val);
            if (v.size() != 3) throw VqVaeError("bad codebooks echo");
            cfg.codebook_sizes = {v[0], v[1], v[2]};
        } else if (key == "code_dim") cfg.code_dim = std::stoi(val);
        else if (key == "downsample") {
            auto v = split_ints(val);
            if (v.size() != 3) throw VqVaeError("bad downsample echo");
            cfg.downsample = {v[0], v[1], v[2]};
        } else if (key == "commitment") cfg.commitment_weight = std::stof(val);
        else if (key == "ema_decay") cfg.ema_decay = std::stof(val);
        else if (key == "width") cfg.width = std::stoi(val);
        else if (key == "res_blocks") cfg.res_blocks = std::stoi(val);
        else if (key == "bands") cfg.bands = split_ints(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else throw VqVaeError("unknown config echo key: " + key);
    }
    return cfg;
}

QuantizeResult quantize(const nn::Tensor<float>& latents, const Codebook& codebook) {
    if (codebook.codes() == 0) throw VqVaeError("empty codebook");
    if (latents.ndim() != 2 || latents.shape[1] != codebook.dim())
        throw VqVaeError("latent dimension does not match codebook");

    const int rows = latents.shape[0];
    const int dim = codebook.dim();
    QuantizeResult result;
    result.indices.resize(static_cast<std::size_t>(rows));
    result.quantized = nn::Tensor<float>(latents.shape);
    std::vector<float> dist2(static_cast<std::size_t>(rows));

    nn::kern::nearest_code(latents.ptr(), rows, codebook.entries.ptr(), codebook.codes(), dim,
                           result.indices.data(), dist2.data());

    double err = 0.0;
    for (int m = 0; m < rows; ++m) {
        const float* e = codebook.entries.ptr() + static_cast<std::int64_t>(result.indices[m]) * dim;
        std::copy(e, e + dim, result.quantized.ptr() + static_cast<std::int64_t>(m) * dim);
        err += dist2[m];
    }
    result.error = rows ? err / rows : 0.0;
    return result;
}

void codebook_update_ema(Codebook& codebook, const nn::Tensor<float>& latents,
                         const std::vector<int>& indices, float decay) {
    if (!(decay >= 0.0f && decay < 1.0f)) throw VqVaeError("ema decay must lie in [0,1)");
    const int K = codebook.codes();
    const int D = codebook.dim();
    if (latents.ndim() != 2 || latents.shape[1] != D)
        throw VqVaeError("latent dimension does not match codebook");
    if (static_cast<std::size_t>(latents.shape[0]) != indices.size())
        throw VqVaeError("indices/latents length mismatch");

    std::vector<double> counts(static_cast<std::size_t>(K), 0.0);
    std::vector<double> sums(static_cast<std::size_t>(K) * D, 0.0);
    for (std::size_t m = 0; m < indices.size(); ++m) {
        const int k = indices[m];
        if (k < 0 || k >= K) throw VqVaeError("assignment index out of range");
        counts[static_cast<std::size_t>(k)] += 1.0;
        const float* z = latents.ptr() + static_cast<std::int64_t>(m) * D;
        for (int j = 0; j < D; ++j) sums[static_cast<std::size_t>(k) * D + j] += z[j];
    }

    if (codebook.stale.empty()) codebook.stale.assign(static_cast<std::size_t>(K), 0);
    for (int k = 0; k < K; ++k) {
        if (counts[static_cast<std::size_t>(k)] == 0.0) {
            ++codebook.stale[static_cast<std::size_t>(k)];
            continue;
        }
        codebook.stale[static_cast<std::size_t>(k)] = 0;
        const float n_new = static_cast<float>(counts[static_cast<std::size_t>(k)]);
        codebook.usage[k] = decay * codebook.usage[k] + (1.0f - decay) * n_new;
        for (int j = 0; j < D; ++j) {
            const std::int64_t idx = static_cast<std::int64_t>(k) * D + j;
            codebook.ema_sums[idx] = decay * codebook.ema_sums[idx] +
                                     (1.0f - decay) * static_cast<float>(sums[idx]);
            codebook.entries[idx] = codebook.ema_sums[idx] / codebook.usage[k];
        }
    }
}

VqVae2Model::VqVae2Model(VqVae2Config config) : cfg_(std::move(config)) {
    if (cfg_.levels != 3) throw VqVaeError("this model is a fixed three-level hierarchy");
    if (cfg_.downsample != std::array<int, 3>{4, 8, 16})
        throw VqVaeError("downsample factors are fixed at 4/8/16");
    for (int k : cfg_.codebook_sizes)
        if (k <= 0) throw VqVaeError("codebook sizes must be positive");
    if (cfg_.bands.empty()) {
        if (cfg_.input_channels == 13)
            for (int i = 0; i < 13; ++i) cfg_.bands.push_back(i);
        else if (cfg_.input_channels == 3)
            cfg_.bands = {3, 2, 1};  // R, G, B spectral indices
        else if (cfg_.input_channels == 1)
            cfg_.bands = {0};
        else
            throw VqVaeError("bands must be given for this channel count");
    }
    if (static_cast<int>(cfg_.bands.size()) != cfg_.input_channels)
        throw VqVaeError("bands list must match input_channels");

    rng::Generator gen(rng::derive(cfg_.seed, 0x9a9a));
    const int W = cfg_.width, D = cfg_.code_dim, C = cfg_.input_channels, R = cfg_.res_blocks;

    params_.reserve(static_cast<std::size_t>(28 + 16 * R));
    // Kernel layout is [f, c, k, k]; a forward conv outputs f channels, a
    // transpose conv outputs c channels, so the bias size is passed in.
    auto add_conv = [&](const std::string& name, int f, int c, int k, int bias_channels = 0) {
        const double bound = std::sqrt(1.0 / (c * k * k));
        nn::Tensor<float> w({f, c, k, k});
        for (std::int64_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<float>(gen.uniform(-bound, bound));
        nn::Tensor<float> b({bias_channels > 0 ? bias_channels : f});
        for (std::int64_t i = 0; i < b.size(); ++i)
            b[i] = static_cast<float>(gen.uniform(-bound, bound));
        params_.emplace_back(name + ".w", std::move(w));
        params_.emplace_back(name + ".b", std::move(b));
    };
    auto add_res = [&](const std::string& prefix) {
        for (int r = 0; r < R; ++r) {
            add_conv(prefix + ".res" + std::to_string(r) + ".c1", W, W, 3);
            add_conv(prefix + ".res" + std::to_string(r) + ".c2", W, W, 3);
        }
    };

    add_conv("enc_b.c1", W, C, 4);
    add_conv("enc_b.c2", W, W, 4);
    add_res("enc_b");
    add_conv("enc_m.c1", W, W, 4);
    add_res("enc_m");
    add_conv("enc_t.c1", W, W, 4);
    add_res("enc_t");
    add_conv("to_code_t", D, W, 1);
    add_conv("to_code_m", D, W, 1);
    add_conv("to_code_b", D, W, 1);
    add_conv("up_t", D, D, 4);        // conv_transpose kernels: [in, out, k, k]
    add_conv("up_m", D, D, 4);
    add_conv("dec_skip_m", D, D, 4);
    add_conv("dec_skip_t", D, D, 4);
    add_conv("dec_head", W, D, 3);
    add_res("dec");
    add_conv("dec_up1", W, W, 4);        // [W -> W], transpose
    add_conv("dec_up2", W, C, 4, C);     // [W -> C], transpose

    for (int level = 0; level < 3; ++level) {
        Codebook& cb = books_[static_cast<std::size_t>(level)];
        const int K = cfg_.codebook_sizes[static_cast<std::size_t>(level)];
        cb.level = level;
        cb.entries = nn::Tensor<float>({K, D});
        const double bound = std::sqrt(1.0 / D);
        for (std::int64_t i = 0; i < cb.entries.size(); ++i)
            cb.entries[i] = static_cast<float>(gen.uniform(-bound, bound));
        cb.usage = nn::Tensor<float>({K});
        cb.ema_sums = nn::Tensor<float>({K, D});
        cb.stale.assign(static_cast<std::size_t>(K), 0);
    }
}

nn::Parameter<float>& VqVae2Model::p(const std::string& name) {
    for (auto& prm : params_)
        if (prm.name == name) return prm;
    throw VqVaeError("no such parameter: " + name);
}

const nn::Parameter<float>& VqVae2Model::p(const std::string& name) const {
    for (const auto& prm : params_)
        if (prm.name == name) return prm;
    throw VqVaeError("no such parameter: " + name);
}

std::vector<nn::Parameter<float>*> VqVae2Model::parameters() {
    std::vector<nn::Parameter<float>*> out;
    out.reserve(params_.size());
    for (auto& prm : params_) out.push_back(&prm);
    return out;
}

std::int64_t VqVae2Model::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& prm : params_) n += prm.value.size();
    return n;
}

ForwardResult VqVae2Model::run(const nn::Tensor<float>& batch, bool bind, nn::TapeF* tape_out,
                               nn::TapeF::Var* loss_out, std::array<QuantizeResult, 3>* quants_out,
                               std::array<nn::Tensor<float>, 3>* latents_out) {
    if (batch.ndim() != 4 || batch.shape[1] != cfg_.input_channels)
        throw VqVaeError("batch channel count does not match model config");
    if (batch.shape[2] % 16 != 0 || batch.shape[3] % 16 != 0)
        throw VqVaeError("tile sides must be divisible by 16");

    nn::TapeF& t = *tape_out;
    using Var = nn::TapeF::Var;

    auto P = [&](const std::string& name) -> Var {
        return bind ? t.param(p(name)) : t.constant(p(name).value);
    };
    auto conv = [&](Var x, const std::string& name, int stride, int pad, bool act) {
        Var y = t.bias_add(t.conv2d(x, P(name + ".w"), stride, pad), P(name + ".b"));
        return act ? t.relu(y) : y;
    };
    auto convT = [&](Var x, const std::string& name, int stride, int pad, bool act) {
        Var y = t.bias_add(t.conv_transpose2d(x, P(name + ".w"), stride, pad), P(name + ".b"));
        return act ? t.relu(y) : y;
    };
    auto res_stack = [&](Var x, const std::string& prefix) {
        for (int r = 0; r < cfg_.res_blocks; ++r) {
            const std::string base = prefix + ".res" + std::to_string(r);
            Var h = conv(x, base + ".c1", 1, 1, true);
            h = conv(h, base + ".c2", 1, 1, false);
            x = t.relu(t.add(x, h));
        }
        return x;
    };

    const int n = batch.shape[0];
    const int h4 = batch.shape[2] / 4, w4 = batch.shape[3] / 4;
    const int h8 = batch.shape[2] / 8, w8 = batch.shape[3] / 8;
    const int h16 = batch.shape[2] / 16, w16 = batch.shape[3] / 16;

    Var x = t.input(batch);
    Var e_b = res_stack(conv(conv(x, "enc_b.c1", 2, 1, true), "enc_b.c2", 2, 1, true), "enc_b");
    Var e_m = res_stack(conv(e_b, "enc_m.c1", 2, 1, true), "enc_m");
    Var e_t = res_stack(conv(e_m, "enc_t.c1", 2, 1, true), "enc_t");

    ForwardResult result;
    std::array<QuantizeResult, 3> quants;
    std::array<nn::Tensor<float>, 3> latents;

    // Top level.
    Var z_t = conv(e_t, "to_code_t", 1, 0, false);
    latents[2] = nchw_to_rows(t.value(z_t));
    quants[2] = quantize(latents[2], books_[2]);
    Var st_t = t.straight_through(z_t, rows_to_nchw(quants[2].quantized, n, cfg_.code_dim, h16, w16));
    Var commit_t = t.mean_squares(t.sub(z_t, t.constant(t.value(st_t))));

    // Middle level, conditioned on the decoded top.
    Var u_t = convT(st_t, "up_t", 2, 1, true);
    Var z_m = t.add(conv(e_m, "to_code_m", 1, 0, false), u_t);
    latents[1] = nchw_to_rows(t.value(z_m));
    quants[1] = quantize(latents[1], books_[1]);
    Var st_m = t.straight_through(z_m, rows_to_nchw(quants[1].quantized, n, cfg_.code_dim, h8, w8));
    Var commit_m = t.mean_squares(t.sub(z_m, t.constant(t.value(st_m))));

    // Bottom level.
    Var u_m = convT(st_m, "up_m", 2, 1, true);
    Var z_b = t.add(conv(e_b, "to_code_b", 1, 0, false), u_m);
    latents[0] = nchw_to_rows(t.value(z_b));
    quants[0] = quantize(latents[0], books_[0]);
    Var st_b = t.straight_through(z_b, rows_to_nchw(quants[0].quantized, n, cfg_.code_dim, h4, w4));
    Var commit_b = t.mean_squares(t.sub(z_b, t.constant(t.value(st_b))));

    // Decoder over all three quantized maps.
    Var d0 = t.add(st_b, t.add(convT(st_m, "dec_skip_m", 2, 1, true),
                               convT(st_t, "dec_skip_t", 4, 0, true)));
    Var d1 = res_stack(conv(d0, "dec_head", 1, 1, true), "dec");
    Var recon = convT(convT(d1, "dec_up1", 2, 1, true), "dec_up2", 2, 1, false);

    Var recon_mse = t.mean_squares(t.sub(recon, x));
    Var commit = t.add(commit_b, t.add(commit_m, commit_t));
    Var loss = t.add(recon_mse, t.scale(commit, cfg_.commitment_weight));

    result.reconstruction = t.value(recon);
    result.recon_mse = t.value(recon_mse)[0];
    result.commitment = {t.value(commit_b)[0], t.value(commit_m)[0], t.value(commit_t)[0]};
    result.quant_error = {quants[0].error, quants[1].error, quants[2].error};
    result.total_loss = t.value(loss)[0];
    if (!std::isfinite(result.total_loss)) throw VqVaeError("non-finite loss in forward pass");

    if (loss_out) *loss_out = loss;
    if (quants_out) *quants_out = std::move(quants);
    if (latents_out) *latents_out = std::move(latents);
    return result;
}

ForwardResult VqVae2Model::forward(const nn::Tensor<float>& batch) const {
    nn::TapeF tape;
    // Parameters enter as constants; scoring never differentiates.
    return const_cast<VqVae2Model*>(this)->run(batch, false, &tape, nullptr, nullptr, nullptr);
}

ForwardResult VqVae2Model::train_step(const nn::Tensor<float>& batch, nn::Adam<float>& adam) {
    return step_impl(batch, &adam, 0.0f);
}

ForwardResult VqVae2Model::train_step_sgd(const nn::Tensor<float>& batch, float lr) {
    return step_impl(batch, nullptr, lr);
}

ForwardResult VqVae2Model::step_impl(const nn::Tensor<float>& batch, nn::Adam<float>* adam,
                                     float sgd_lr) {
    nn::TapeF tape;
    nn::TapeF::Var loss;
    std::array<QuantizeResult, 3> quants;
    std::array<nn::Tensor<float>, 3> latents;
    ForwardResult result = run(batch, true, &tape, &loss, &quants, &latents);

    auto params = parameters();
    nn::zero_grads(params);
    tape.backward(loss);
    if (adam)
        adam->step(params);
    else
        nn::sgd_step(params, sgd_lr);

    for (int level = 0; level < 3; ++level) {
        Codebook& cb = books_[static_cast<std::size_t>(level)];
        codebook_update_ema(cb, latents[static_cast<std::size_t>(level)],
                            quants[static_cast<std::size_t>(level)].indices, cfg_.ema_decay);
        // Re-seed entries that stayed unused for too long to a latent from
        // this batch.
        const int rows = latents[static_cast<std::size_t>(level)].shape[0];
        for (int k = 0; k < cb.codes(); ++k) {
            if (cb.stale[static_cast<std::size_t>(k)] < kDeadCodeUpdates || rows == 0) continue;
            rng::Generator gen(rng::derive(cfg_.seed ^ 0xdead, reseed_counter_++));
            const int pick = static_cast<int>(gen.below(static_cast<std::uint64_t>(rows)));
            const float* z = latents[static_cast<std::size_t>(level)].ptr() +
                             static_cast<std::int64_t>(pick) * cb.dim();
            for (int j = 0; j < cb.dim(); ++j)
                cb.entries[static_cast<std::int64_t>(k) * cb.dim() + j] = z[j];
            cb.usage[k] = 1.0f;
            for (int j = 0; j < cb.dim(); ++j)
                cb.ema_sums[static_cast<std::int64_t>(k) * cb.dim() + j] = z[j];
            cb.stale[static_cast<std::size_t>(k)] = 0;
            pending_events_.push_back("reseed level=" + std::to_string(level) +
                                      " entry=" + std::to_string(k));
        }
    }
    return result;
}

nn::Tensor<float> tiles_to_batch(const std::vector<const raster::MultispectralTile*>& tiles,
                                 const std::vector<int>& channel_positions) {
    if (tiles.empty()) throw VqVaeError("empty batch");
    const int h = tiles[0]->height, w = tiles[0]->width;
    const int c = static_cast<int>(channel_positions.size());
    nn::Tensor<float> batch({static_cast<int>(tiles.size()), c, h, w});
    constexpr float kInv = 1.0f / 65535.0f;
    for (std::size_t b = 0; b < tiles.size(); ++b) {
        const auto& t = *tiles[b];
        if (t.height != h || t.width != w) throw VqVaeError("tiles in a batch must share shape");
        for (int ci = 0; ci < c; ++ci) {
            const int pos = channel_positions[static_cast<std::size_t>(ci)];
            if (pos < 0 || pos >= t.channels()) throw VqVaeError("channel position out of range");
            const std::uint16_t* src = t.band(pos);
            float* dst = batch.ptr() + ((static_cast<std::int64_t>(b) * c + ci) * h * w);
            for (int i = 0; i < h * w; ++i) dst[i] = static_cast<float>(src[i]) * kInv;
        }
    }
    return batch;
}

namespace {

std::vector<int> resolve_positions(const raster::MultispectralTile& tile,
                                   const std::vector<int>& bands) {
    std::vector<int> positions;
    positions.reserve(bands.size());
    for (int idx : bands) {
        const int pos = tile.channel_of(idx);
        if (pos < 0)
            throw VqVaeError(std::string("tile is missing spectral band ") +
                             raster::band_name(idx));
        positions.push_back(pos);
    }
    return positions;
}

}  // namespace

detector::ScoreVector per_band_scores(const nn::Tensor<float>& input,
                                      const nn::Tensor<float>& reconstruction,
                                      const std::vector<int>& bands) {
    if (input.shape != reconstruction.shape || input.ndim() != 4)
        throw VqVaeError("per_band_scores expects matching [N,C,H,W] tensors");
    if (static_cast<int>(bands.size()) != input.shape[1])
        throw VqVaeError("bands list must match channel count");
    const std::int64_t n = input.shape[0];
    const std::int64_t hw = static_cast<std::int64_t>(input.shape[2]) * input.shape[3];

    detector::ScoreVector score;
    for (std::size_t ci = 0; ci < bands.size(); ++ci) {
        double acc = 0.0;
        for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t base = (b * input.shape[1] + static_cast<std::int64_t>(ci)) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const double d = static_cast<double>(input[base + i]) -
                                 static_cast<double>(reconstruction[base + i]);
                acc += d * d;
            }
        }
        score.set(bands[ci], acc / static_cast<double>(n * hw));
    }
    return score;
}

detector::ScoreVector reconstruction_score(const VqVae2Model& model,
                                           const raster::MultispectralTile& tile) {
    const auto& bands = model.config().bands;
    const auto positions = resolve_positions(tile, bands);
    std::vector<const raster::MultispectralTile*> one = {&tile};
    const auto batch = tiles_to_batch(one, positions);
    const auto fwd = model.forward(batch);
    auto score = per_band_scores(batch, fwd.reconstruction, bands);
    score.label = tile.label;
    return score;
}

void PerBandModelSet::add(int band_index, VqVae2Model model) {
    if (model.config().input_channels != 1 || model.config().bands != std::vector<int>{band_index})
        throw VqVaeError("per-band set requires single-band models matching their slot");
    models_.emplace(band_index, std::move(model));
}

bool PerBandModelSet::has(int band_index) const { return models_.count(band_index) > 0; }

const VqVae2Model& PerBandModelSet::model(int band_index) const {
    auto it = models_.find(band_index);
    if (it == models_.end())
        throw VqVaeError(std::string("no model for band ") + raster::band_name(band_index));
    return it->second;
}

std::vector<int> PerBandModelSet::bands() const {
    std::vector<int> out;
    for (const auto& [idx, m] : models_) out.push_back(idx);
    return out;
}

detector::ScoreVector PerBandModelSet::score(const raster::MultispectralTile& tile,
                                             const std::vector<int>& required_bands) const {
    for (int idx : required_bands)
        if (!has(idx))
            throw VqVaeError(std::string("no model for requested band ") + raster::band_name(idx));

    detector::ScoreVector out;
    out.label = tile.label;
    for (const auto& [idx, m] : models_) {
        const auto s = reconstruction_score(m, tile);
        out.band_scores[static_cast<std::size_t>(idx)] = s.get(idx);
    }
    out.recompute_total();
    return out;
}

// ---------------------------------------------------------------------------
// Checkpointing

namespace {

std::vector<std::pair<std::string, const nn::Tensor<float>*>> named_tensors(
    const std::vector<nn::Parameter<float>>& params, const std::array<Codebook, 3>& books,
    std::array<nn::Tensor<float>, 3>& stale_buf) {
    std::vector<std::pair<std::string, const nn::Tensor<float>*>> out;
    for (const auto& prm : params) out.emplace_back("param." + prm.name, &prm.value);
    for (int level = 0; level < 3; ++level) {
        const auto& cb = books[static_cast<std::size_t>(level)];
        const std::string base = "codebook." + std::to_string(level);
        out.emplace_back(base + ".entries", &cb.entries);
        out.emplace_back(base + ".usage", &cb.usage);
        out.emplace_back(base + ".ema_sums", &cb.ema_sums);
        auto& sb = stale_buf[static_cast<std::size_t>(level)];
        sb = nn::Tensor<float>({cb.codes()});
        for (int k = 0; k < cb.codes(); ++k) sb[k] = static_cast<float>(cb.stale[static_cast<std::size_t>(k)]);
        out.emplace_back(base + ".stale", &sb);
    }
    return out;
}

}  // namespace

void VqVae2Model::save(const std::filesystem::path& path) const {
    std::array<nn::Tensor<float>, 3> stale_buf;
    auto tensors = named_tensors(params_, books_, stale_buf);
    nn::save_checkpoint(path, {{"kind", "vqvae2"}, {"config", cfg_.echo()}}, tensors);
}

VqVae2Model VqVae2Model::load(const std::filesystem::path& path) {
    auto ckpt = nn::load_checkpoint_checked(path, {{"kind", "vqvae2"}});
    VqVae2Model model(VqVae2Config::from_echo(ckpt.meta.at("config")));
    for (auto& prm : model.params_) {
        const auto& t = ckpt.tensor("param." + prm.name);
        if (t.shape != prm.value.shape) throw VqVaeError("checkpoint tensor shape mismatch");
        prm.value = t;
        prm.zero_grad();
    }
    for (int level = 0; level < 3; ++level) {
        Codebook& cb = model.books_[static_cast<std::size_t>(level)];
        const std::string base = "codebook." + std::to_string(level);
        cb.entries = ckpt.tensor(base + ".entries");
        cb.usage = ckpt.tensor(base + ".usage");
        cb.ema_sums = ckpt.tensor(base + ".ema_sums");
        const auto& st = ckpt.tensor(base + ".stale");
        cb.stale.resize(static_cast<std::size_t>(st.size()));
        for (std::int64_t k = 0; k < st.size(); ++k)
            cb.stale[static_cast<std::size_t>(k)] = static_cast<int>(st[k]);
    }
    return model;
}

std::vector<nn::Tensor<float>> VqVae2Model::snapshot() const {
    std::vector<nn::Tensor<float>> snap;
    for (const auto& prm : params_) snap.push_back(prm.value);
    for (const auto& cb : books_) {
        snap.push_back(cb.entries);
        snap.push_back(cb.usage);
        snap.push_back(cb.ema_sums);
        nn::Tensor<float> st({cb.codes()});
        for (int k = 0; k < cb.codes(); ++k) st[k] = static_cast<float>(cb.stale[static_cast<std::size_t>(k)]);
        snap.push_back(std::move(st));
    }
    return snap;
}

void VqVae2Model::restore(const std::vector<nn::Tensor<float>>& snap) {
    std::size_t i = 0;
    for (auto& prm : params_) prm.value = snap.at(i++);
    for (auto& cb : books_) {
        cb.entries = snap.at(i++);
        cb.usage = snap.at(i++);
        cb.ema_sums = snap.at(i++);
        const auto& st = snap.at(i++);
        cb.stale.resize(static_cast<std::size_t>(st.size()));
        for (std::int64_t k = 0; k < st.size(); ++k)
            cb.stale[static_cast<std::size_t>(k)] = static_cast<int>(st[k]);
    }
}

namespace {

std::string encode_log(const TrainingLog& log) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& r : log.epochs)
        os << r.epoch << "," << r.train_loss << "," << r.val_loss << "," << (r.stopped ? 1 : 0)
           << ";";
    return os.str();
}

void decode_log(const std::string& s, TrainingLog& log) {
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ';')) {
        if (item.empty()) continue;
        EpochRecord r;
        std::istringstream ls(item);
        std::string field;
        std::getline(ls, field, ',');
        r.epoch = std::stoi(field);
        std::getline(ls, field, ',');
        r.train_loss = std::stod(field);
        std::getline(ls, field, ',');
        r.val_loss = std::stod(field);
        std::getline(ls, field, ',');
        r.stopped = field == "1";
        log.epochs.push_back(r);
    }
}

struct ResumeState {
    int next_epoch = 1;
    int since_improve = 0;
    double best_val = 0.0;
    bool has_best = false;
    long long adam_t = 0;
    std::uint64_t reseed_counter = 0;
    TrainingLog log;
    std::vector<nn::Tensor<float>> current, best, adam_m, adam_v;
};

void write_state(const std::filesystem::path& path, const VqVae2Model& model,
                 const std::vector<nn::Tensor<float>>& current,
                 const std::vector<nn::Tensor<float>>& best, nn::Adam<float>& adam,
                 const ResumeState& rs) {
    std::map<std::string, std::string> meta;
    meta["kind"] = "vqvae2_state";
    meta["config"] = model.config().echo();
    meta["next_epoch"] = std::to_string(rs.next_epoch);
    meta["since_improve"] = std::to_string(rs.since_improve);
    {
        std::ostringstream os;
        os.precision(17);
        os << rs.best_val;
        meta["best_val"] = os.str();
    }
    meta["has_best"] = rs.has_best ? "1" : "0";
    meta["best_epoch"] = std::to_string(rs.log.best_epoch);
    meta["adam_t"] = std::to_string(adam.steps());
    meta["reseed_counter"] = std::to_string(rs.reseed_counter);
    meta["log"] = encode_log(rs.log);
    {
        std::ostringstream os;
        for (const auto& e : rs.log.events) os << e << "|";
        meta["events"] = os.str();
    }

    std::vector<std::pair<std::string, const nn::Tensor<float>*>> tensors;
    auto add_group = [&](const char* prefix, const std::vector<nn::Tensor<float>>& group) {
        for (std::size_t i = 0; i < group.size(); ++i)
            tensors.emplace_back(prefix + std::to_string(i), &group[i]);
    };
    add_group("cur.", current);
    add_group("best.", best);
    add_group("adam.m.", adam.moments1());
    add_group("adam.v.", adam.moments2());
    const auto tmp = path.string() + ".tmp";
    nn::save_checkpoint(tmp, meta, tensors);
    std::filesystem::rename(tmp, path);
}

ResumeState read_state(const std::filesystem::path& path, const VqVae2Model& model) {
    auto ckpt = nn::load_checkpoint_checked(
        path, {{"kind", "vqvae2_state"}, {"config", model.config().echo()}});
    ResumeState rs;
    rs.next_epoch = std::stoi(ckpt.meta.at("next_epoch"));
    rs.since_improve = std::stoi(ckpt.meta.at("since_improve"));
    rs.best_val = std::stod(ckpt.meta.at("best_val"));
    rs.has_best = ckpt.meta.at("has_best") == "1";
    rs.log.best_epoch = std::stoi(ckpt.meta.at("best_epoch"));
    rs.adam_t = std::stoll(ckpt.meta.at("adam_t"));
    rs.reseed_counter = std::stoull(ckpt.meta.at("reseed_counter"));
    decode_log(ckpt.meta.at("log"), rs.log);
    {
        std::istringstream is(ckpt.meta.at("events"));
        std::string e;
        while (std::getline(is, e, '|'))
            if (!e.empty()) rs.log.events.push_back(e);
    }
    auto read_group = [&](const char* prefix, std::vector<nn::Tensor<float>>& group) {
        for (std::size_t i = 0;; ++i) {
            const std::string name = prefix + std::to_string(i);
            if (!ckpt.has(name)) break;
            group.push_back(ckpt.tensor(name));
        }
    };
    read_group("cur.", rs.current);
    read_group("best.", rs.best);
    read_group("adam.m.", rs.adam_m);
    read_group("adam.v.", rs.adam_v);
    return rs;
}

}  // namespace

TrainingLog train(VqVae2Model& model, const raster::DatasetManifest& manifest,
                  const raster::TileStore& store, const TrainRun& run,
                  const std::filesystem::path& state_path) {
    const auto split = manifest.select(raster::Split::train_oneclass);
    if (split.empty()) throw VqVaeError("train_oneclass split is empty: " + manifest.name);
    for (const auto& e : split)
        if (e.label != raster::Label::pristine)
            throw VqVaeError("one-class training split contains a generated tile: " + e.locator);

    std::vector<raster::MultispectralTile> tiles;
    tiles.reserve(split.size());
    for (const auto& e : split) tiles.push_back(store.load(e.locator));
    const auto positions = resolve_positions(tiles[0], model.config().bands);

    // Held-out validation subset, deterministic under the run seed.
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

    auto eval_batches = [&](const std::vector<std::size_t>& idx) {
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t start = 0; start < idx.size(); start += run.batch_size) {
            std::vector<const raster::MultispectralTile*> ptrs;
            for (std::size_t i = start; i < std::min(idx.size(), start + run.batch_size); ++i)
                ptrs.push_back(&tiles[idx[i]]);
            const auto res = model.forward(tiles_to_batch(ptrs, positions));
            acc += res.recon_mse * static_cast<double>(ptrs.size());
            count += ptrs.size();
        }
        return count ? acc / static_cast<double>(count) : 0.0;
    };

    nn::Adam<float> adam({static_cast<float>(run.lr)});
    TrainingLog log;
    int since_improve = 0;
    double best_val = 0.0;
    bool has_best = false;
    std::vector<nn::Tensor<float>> best = model.snapshot();
    int start_epoch = 1;

    const bool use_state = !state_path.empty();
    if (use_state && std::filesystem::exists(state_path)) {
        ResumeState rs = read_state(state_path, model);
        model.restore(rs.current);
        adam.restore(rs.adam_t, std::move(rs.adam_m), std::move(rs.adam_v));
        best = std::move(rs.best);
        best_val = rs.best_val;
        has_best = rs.has_best;
        since_improve = rs.since_improve;
        start_epoch = rs.next_epoch;
        model.reseed_counter_ = rs.reseed_counter;
        log = std::move(rs.log);
    }

    const int batch_size = std::max(1, run.batch_size);
    (void)batch_size;

    for (int epoch = start_epoch; epoch <= run.epochs; ++epoch) {
        std::vector<std::size_t> perm = train_idx;
        {
            rng::Generator gen(rng::derive(run.seed, 0xe0000 + static_cast<std::uint64_t>(epoch)));
            rng::shuffle_indices(perm, gen);
        }
        double train_acc = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < perm.size();
             start += static_cast<std::size_t>(run.batch_size)) {
            std::vector<const raster::MultispectralTile*> ptrs;
            for (std::size_t i = start;
                 i < std::min(perm.size(), start + static_cast<std::size_t>(run.batch_size)); ++i)
                ptrs.push_back(&tiles[perm[i]]);
            const auto batch = tiles_to_batch(ptrs, positions);
            const auto res = run.optimizer == "sgd"
                                 ? model.train_step_sgd(batch, static_cast<float>(run.lr))
                                 : model.train_step(batch, adam);
            train_acc += res.total_loss * static_cast<double>(ptrs.size());
            seen += ptrs.size();
        }
        const double train_loss = seen ? train_acc / static_cast<double>(seen) : 0.0;
        const double val_loss = eval_batches(val_idx.empty() ? train_idx : val_idx);

        EpochRecord rec{epoch, train_loss, val_loss, false};
        if (!has_best || val_loss < best_val - run.min_delta) {
            best_val = val_loss;
            has_best = true;
            best = model.snapshot();
            log.best_epoch = epoch;
            since_improve = 0;
        } else {
            ++since_improve;
        }
        const bool stop = since_improve >= run.patience;
        rec.stopped = stop;
        log.epochs.push_back(rec);
        for (auto& e : model.pending_events_)
            log.events.push_back("epoch " + std::to_string(epoch) + ": " + e);
        model.pending_events_.clear();

        if (use_state) {
            ResumeState rs;
            rs.next_epoch = epoch + 1;
            rs.since_improve = since_improve;
            rs.best_val = best_val;
            rs.has_best = has_best;
            rs.reseed_counter = model.reseed_counter_;
            rs.log = log;
            write_state(state_path, model, model.snapshot(), best, adam, rs);
        }
        if (run.interrupt_after > 0 && epoch >= run.interrupt_after && epoch < run.epochs && !stop)
            return log;  // simulated interruption; resume picks up from state
        if (stop) break;
    }

    model.restore(best);
    log.best_val = best_val;
    if (use_state) std::filesystem::remove(state_path);
    return log;
}

void TrainingLog::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw VqVaeError("cannot write training log: " + path.string());
    os << "# epoch\ttrain_loss\tval_loss\tstopped\n";
    os.precision(10);
    for (const auto& r : epochs)
        os << r.epoch << '\t' << r.train_loss << '\t' << r.val_loss << '\t'
           << (r.stopped ? 1 : 0) << '\n';
    for (const auto& e : events) os << "# event " << e << '\n';
    os << "# best_epoch " << best_epoch << '\n';
}

}  // namespace msd::vqvae
