#include "msd/config.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace msd::cfg {

namespace {

const std::map<std::string, std::set<std::string>>& schema() {
    static const std::map<std::string, std::set<std::string>> s = {
        {"run", {"seed", "tile_store"}},
        {"synth",
         {"tile_size", "channels", "n_pristine", "n_generated", "correlation_length",
          "band_correlation", "mean_level", "dynamic_range", "family", "strength", "period",
          "plan", "texture_seed", "perturb_seed"}},
        {"vqvae",
         {"dataset", "width", "code_dim", "codebooks", "res_blocks", "commitment", "ema_decay",
          "epochs", "batch_size", "patience", "min_delta", "lr", "optimizer", "val_fraction",
          "bands", "per_band"}},
        {"baseline",
         {"dataset", "width", "depth", "stem_downsample", "bands", "epochs", "batch_size",
          "patience", "min_delta", "lr", "val_fraction", "blur_prob", "blur_sigma_min",
          "blur_sigma_max", "shift_prob", "shift_max", "rotation_prob", "flip_prob"}},
        {"eval",
         {"far", "matrix_detectors", "matrix_test_sets", "unseen_dataset", "unseen_oneclass",
          "unseen_binary", "unseen_bands", "unseen_far", "unseen_calibration", "scatter_dataset",
          "scatter_detector"}},
        {"calibrate", {"detector", "dataset"}},
        {"detect", {"detector", "thresholds", "dataset", "split"}},
        {"ingest",
         {"scene_dir", "scene_tile", "name", "tile_size", "nodata", "interp", "label", "split"}},
    };
    return s;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

bool Section::has(const std::string& key) const {
    return std::any_of(entries.begin(), entries.end(),
                       [&](const auto& kv) { return kv.first == key; });
}

std::string Section::get(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return v;
    throw ConfigError("missing key '" + key + "' in section [" + type +
                      (name.empty() ? "" : " " + name) + "]");
}

std::string Section::get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
}

int Section::get_int(const std::string& key, int fallback) const {
    if (!has(key)) return fallback;
    try {
        return std::stoi(get(key));
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' is not an integer");
    }
}

double Section::get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    try {
        return std::stod(get(key));
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' is not a number");
    }
}

bool Section::get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "' is not a boolean");
}

std::uint64_t Section::get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    try {
        return std::stoull(get(key));
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' is not an unsigned integer");
    }
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
    Config cfg;
    Section* current = nullptr;
    std::istringstream is(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        std::string line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated section");
            std::istringstream hs(line.substr(1, line.size() - 2));
            Section section;
            hs >> section.type;
            std::string rest;
            std::getline(hs, rest);
            section.name = trim(rest);
            if (!schema().count(section.type))
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown section type '" +
                                  section.type + "'");
            cfg.sections_.push_back(std::move(section));
            current = &cfg.sections_.back();
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        if (!current)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": key before any section");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!schema().at(current->type).count(key))
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key +
                              "' in section [" + current->type + "]");
        if (current->has(key))
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                              "'");
        current->entries.emplace_back(key, value);
    }
    return cfg;
}

Config Config::parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path.string());
    std::ostringstream buffer;
    buffer << is.rdbuf();
    return parse_string(buffer.str(), path.string());
}

std::vector<const Section*> Config::all_of(const std::string& type) const {
    std::vector<const Section*> out;
    for (const auto& s : sections_)
        if (s.type == type) out.push_back(&s);
    return out;
}

const Section* Config::find(const std::string& type, const std::string& name) const {
    for (const auto& s : sections_)
        if (s.type == type && (name.empty() || s.name == name)) return &s;
    return nullptr;
}

const Section& Config::require(const std::string& type, const std::string& name) const {
    const Section* s = find(type, name);
    if (!s)
        throw ConfigError("config is missing section [" + type +
                          (name.empty() ? "" : " " + name) + "]");
    return *s;
}

std::string Config::dump() const {
    std::ostringstream os;
    for (const auto& s : sections_) {
        os << "[" << s.type << (s.name.empty() ? "" : " " + s.name) << "]\n";
        for (const auto& [k, v] : s.entries) os << k << " = " << v << "\n";
        os << "\n";
    }
    return os.str();
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::istringstream is(csv);
    std::string item;
    while (std::getline(is, item, ',')) {
        const auto a = item.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        const auto b = item.find_last_not_of(" \t");
        out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

}  // namespace msd::cfg
