// Flat line-oriented experiment configuration: `[section name]` headers and
// `key = value` lines. The full file is validated against the known schema
// at parse time; unknown sections or keys are rejected.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace msd::cfg {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Section {
    std::string type;  // e.g. "synth", "vqvae", "run"
    std::string name;  // optional instance name, e.g. "alpha"
    std::vector<std::pair<std::string, std::string>> entries;  // file order

    bool has(const std::string& key) const;
    std::string get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
};

class Config {
public:
    static Config parse_file(const std::filesystem::path& path);
    static Config parse_string(const std::string& text, const std::string& origin = "<string>");

    const std::vector<Section>& sections() const { return sections_; }
    std::vector<const Section*> all_of(const std::string& type) const;
    const Section* find(const std::string& type, const std::string& name = {}) const;
    const Section& require(const std::string& type, const std::string& name = {}) const;

    // Canonical dump (used for the per-run config echo).
    std::string dump() const;

private:
    std::vector<Section> sections_;
};

std::vector<std::string> split_list(const std::string& csv);

}  // namespace msd::cfg
