#include "msd/nn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace msd::nn {

namespace {

constexpr char kMagic[] = "msdckpt 1";

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
    if (!is) throw CheckpointError("file too short for header length");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

}  // namespace

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw CheckpointError("checkpoint has no tensor: " + name);
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void save_checkpoint(const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
    std::ostringstream header;
    header << kMagic << "\n";
    for (const auto& [k, v] : meta) {
        if (k.find(' ') != std::string::npos || v.find('\n') != std::string::npos)
            throw CheckpointError("meta keys must not contain spaces, values no newlines");
        header << "meta " << k << " " << v << "\n";
    }
    for (const auto& [name, t] : tensors) {
        header << "tensor " << name << " " << t->ndim();
        for (int d : t->shape) header << " " << d;
        header << "\n";
    }
    const std::string htext = header.str();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open for writing: " + path.string());
    put_u32(os, static_cast<std::uint32_t>(htext.size()));
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, t] : tensors)
        for (std::int64_t i = 0; i < t->size(); ++i) put_f32(os, (*t)[i]);
    if (!os) throw CheckpointError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open: " + path.string());

    const std::uint32_t hlen = get_u32(is);
    if (hlen == 0 || hlen > (1u << 24)) throw CheckpointError("implausible header length");
    std::string htext(hlen, '\0');
    is.read(htext.data(), hlen);
    if (!is) throw CheckpointError("file too short for declared header");

    std::istringstream hs(htext);
    std::string line;
    if (!std::getline(hs, line) || line != kMagic) throw CheckpointError("bad magic line");

    Checkpoint ckpt;
    while (std::getline(hs, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string key, rest;
            ls >> key;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            ckpt.meta[key] = rest;
        } else if (kind == "tensor") {
            std::string name;
            int ndim = 0;
            ls >> name >> ndim;
            if (ls.fail() || ndim < 0 || ndim > 8) throw CheckpointError("bad tensor line");
            std::vector<int> shape(static_cast<std::size_t>(ndim));
            for (int& d : shape) ls >> d;
            if (ls.fail()) throw CheckpointError("bad tensor shape");
            ckpt.tensors.emplace_back(name, Tensor<float>(shape));
        } else {
            throw CheckpointError("unknown header line kind: " + kind);
        }
    }

    for (auto& [name, t] : ckpt.tensors) {
        std::vector<unsigned char> raw(static_cast<std::size_t>(t.size()) * 4);
        is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (static_cast<std::size_t>(is.gcount()) != raw.size())
            throw CheckpointError("payload truncated at tensor: " + name);
        for (std::int64_t i = 0; i < t.size(); ++i) {
            std::uint32_t u = static_cast<std::uint32_t>(raw[4 * i]) |
                              (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                              (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                              (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
            float f;
            std::memcpy(&f, &u, 4);
            t[i] = f;
        }
    }
    return ckpt;
}

Checkpoint load_checkpoint_checked(const std::filesystem::path& path,
                                   const std::map<std::string, std::string>& expected_meta) {
    Checkpoint ckpt = load_checkpoint(path);
    for (const auto& [k, v] : expected_meta) {
        auto it = ckpt.meta.find(k);
        if (it == ckpt.meta.end())
            throw CheckpointError("checkpoint missing meta '" + k + "': " + path.string());
        if (it->second != v)
            throw CheckpointError("architecture mismatch for '" + k + "': checkpoint has '" +
                                  it->second + "', expected '" + v + "'");
    }
    return ckpt;
}

}  // namespace msd::nn
