#include "msd/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "msd/rng.hpp"

namespace msd::raster {

namespace {

const char* kSplitNames[] = {"train_gan", "train_detector", "train_oneclass", "calibrate", "test"};

}  // namespace

const char* to_string(Split split) { return kSplitNames[static_cast<int>(split)]; }

Split split_from_string(const std::string& s) {
    for (int i = 0; i < 5; ++i)
        if (s == kSplitNames[i]) return static_cast<Split>(i);
    throw ManifestError("unknown split: " + s);
}

std::vector<ManifestEntry> DatasetManifest::select(Split split) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(e);
    return out;
}

std::vector<ManifestEntry> DatasetManifest::select(Split split, Label label) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == split && e.label == label) out.push_back(e);
    return out;
}

std::size_t DatasetManifest::count(Split split, Label label) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(),
                      [&](const ManifestEntry& e) { return e.split == split && e.label == label; }));
}

void DatasetManifest::save(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ManifestError("cannot open for writing: " + path.string());
    for (const auto& e : entries)
        os << e.locator << '\t' << to_string(e.label) << '\t' << to_string(e.split) << '\n';
    if (!os) throw ManifestError("write failed: " + path.string());
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ManifestError("cannot open: " + path.string());
    DatasetManifest m;
    m.name = path.stem().string();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line.front() == '#') continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string label, split;
        if (!std::getline(ls, e.locator, '\t') || !std::getline(ls, label, '\t') ||
            !std::getline(ls, split)) {
            throw ManifestError("malformed manifest line " + std::to_string(lineno));
        }
        e.label = label_from_string(label);
        e.split = split_from_string(split);
        m.entries.push_back(std::move(e));
    }
    return m;
}

std::size_t SplitPlan::total(Label label) const {
    std::size_t n = 0;
    for (const auto& it : items)
        if (it.label == label) n += it.count;
    return n;
}

DatasetManifest build_manifest(const std::string& name,
                               const std::vector<std::pair<std::string, Label>>& tiles,
                               const SplitPlan& plan, std::uint64_t shuffle_seed) {
    std::vector<std::size_t> pristine, generated;
    for (std::size_t i = 0; i < tiles.size(); ++i)
        (tiles[i].second == Label::pristine ? pristine : generated).push_back(i);

    if (plan.total(Label::pristine) > pristine.size())
        throw ManifestError("plan requests more pristine tiles than available");
    if (plan.total(Label::generated) > generated.size())
        throw ManifestError("plan requests more generated tiles than available");

    rng::Generator gen(rng::derive(shuffle_seed, 0x6d616e69));
    rng::shuffle_indices(pristine, gen);
    rng::shuffle_indices(generated, gen);

    DatasetManifest m;
    m.name = name;
    std::size_t next_pristine = 0, next_generated = 0;
    for (const auto& item : plan.items) {
        auto& pool = item.label == Label::pristine ? pristine : generated;
        auto& next = item.label == Label::pristine ? next_pristine : next_generated;
        for (std::size_t k = 0; k < item.count; ++k) {
            const std::size_t idx = pool[next++];
            m.entries.push_back({tiles[idx].first, item.label, item.split});
        }
    }
    return m;
}

bool splits_disjoint(const DatasetManifest& manifest) {
    std::set<std::string> seen;
    for (const auto& e : manifest.entries)
        if (!seen.insert(e.locator).second) return false;
    return true;
}

DatasetManifest merge_manifests_equal(const DatasetManifest& a, const DatasetManifest& b,
                                      const std::string& merged_name) {
    DatasetManifest m;
    m.name = merged_name;
    for (int s = 0; s < 5; ++s) {
        for (Label label : {Label::pristine, Label::generated}) {
            const Split split = static_cast<Split>(s);
            auto ea = a.select(split, label);
            auto eb = b.select(split, label);
            const std::size_t n = std::min(ea.size(), eb.size());
            const std::size_t take = n > 0 ? n : std::max(ea.size(), eb.size());
            for (std::size_t i = 0; i < std::min(take, ea.size()); ++i) m.entries.push_back(ea[i]);
            for (std::size_t i = 0; i < std::min(take, eb.size()); ++i) m.entries.push_back(eb[i]);
        }
    }
    return m;
}

}  // namespace msd::raster
