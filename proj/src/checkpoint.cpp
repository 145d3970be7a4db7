#include "organseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "organseg/errors.hpp"

namespace organseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'O', 'S', 'G', 'W', '0', '0', '0', '1'};

template <typename T>
void put(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void save_weights(const fs::path& file,
                  const std::map<std::string, std::pair<Shape, std::vector<double>>>& tensors) {
    std::ofstream f(file, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + file.string());
    f.write(kMagic, sizeof(kMagic));
    put<std::uint64_t>(f, tensors.size());
    for (const auto& [name, t] : tensors) {
        put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(f, static_cast<std::uint32_t>(t.first.size()));
        for (auto d : t.first) put<std::int64_t>(f, d);
        f.write(reinterpret_cast<const char*>(t.second.data()),
                static_cast<std::streamsize>(t.second.size() * sizeof(double)));
    }
    if (!f) throw IoError("write failed: " + file.string());
}

std::map<std::string, std::pair<Shape, std::vector<double>>> load_weights(const fs::path& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) throw IoError("cannot open weights: " + file.string());
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataFormatError("bad weights magic in " + file.string());
    const auto count = get<std::uint64_t>(f);
    std::map<std::string, std::pair<Shape, std::vector<double>>> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint32_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const auto ndim = get<std::uint32_t>(f);
        Shape shape(ndim);
        std::int64_t numel = 1;
        for (auto& d : shape) {
            d = get<std::int64_t>(f);
            numel *= d;
        }
        std::vector<double> data(static_cast<std::size_t>(numel));
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!f) throw DataFormatError("truncated weights file " + file.string());
        out.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }
    return out;
}

void save_checkpoint(const fs::path& dir, const std::vector<Tensor>& params, const Adam* opt,
                     const CheckpointMeta& meta) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint dir " + dir.string());

    std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
    for (const auto& p : params) {
        if (p.name().empty()) throw std::invalid_argument("save_checkpoint: unnamed parameter");
        tensors.emplace(p.name(), std::make_pair(p.shape(), p.values()));
    }
    if (opt) {
        for (const auto& [name, mom] : opt->state()) {
            tensors.emplace("adam.m/" + name,
                            std::make_pair(Shape{static_cast<std::int64_t>(mom.m.size())},
                                           mom.m));
            tensors.emplace("adam.v/" + name,
                            std::make_pair(Shape{static_cast<std::int64_t>(mom.v.size())},
                                           mom.v));
        }
    }
    save_weights(dir / "weights.bin", tensors);

    json j;
    j["config_hash"] = meta.config_hash;
    j["stage"] = meta.stage;
    j["step"] = meta.step;
    j["seed"] = meta.seed;
    j["normalization"] = meta.normalization;
    if (opt) j["adam_t"] = opt->t();
    std::ofstream f(dir / "checkpoint.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint.json in " + dir.string());
    f << j.dump(2) << "\n";
}

CheckpointMeta read_checkpoint_meta(const fs::path& dir) {
    std::ifstream f(dir / "checkpoint.json", std::ios::binary);
    if (!f) throw IoError("cannot open " + (dir / "checkpoint.json").string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataFormatError("malformed checkpoint.json in " + dir.string() + ": " + e.what());
    }
    CheckpointMeta meta;
    meta.config_hash = j.value("config_hash", "");
    meta.stage = j.value("stage", "");
    meta.step = j.value("step", 0);
    meta.seed = j.value("seed", 0ull);
    meta.normalization = j.value("normalization", "instance");
    return meta;
}

CheckpointMeta load_checkpoint(const fs::path& dir, std::vector<Tensor>& params, Adam* opt) {
    const auto tensors = load_weights(dir / "weights.bin");
    for (auto& p : params) {
        const auto it = tensors.find(p.name());
        if (it == tensors.end())
            throw DataFormatError("checkpoint missing parameter " + p.name());
        if (it->second.first != p.shape())
            throw DataFormatError("checkpoint shape mismatch for " + p.name());
        p.values() = it->second.second;
        p.zero_grad();
    }
    CheckpointMeta meta = read_checkpoint_meta(dir);
    if (opt) {
        std::ifstream f(dir / "checkpoint.json", std::ios::binary);
        json j;
        f >> j;
        opt->set_t(j.value("adam_t", 0));
        opt->state().clear();
        for (const auto& p : params) {
            const auto mit = tensors.find("adam.m/" + p.name());
            const auto vit = tensors.find("adam.v/" + p.name());
            if (mit == tensors.end() || vit == tensors.end()) continue;
            Adam::Moments mom;
            mom.m = mit->second.second;
            mom.v = vit->second.second;
            opt->state()[p.name()] = std::move(mom);
        }
    }
    return meta;
}

}  // namespace organseg
