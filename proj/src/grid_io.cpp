#include "organseg/grid_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "organseg/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw volume files are little-endian; big-endian hosts are unsupported");

namespace organseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json sidecar_json(const Vec3i& shape, const Vec3d& spacing, const Vec3d& origin,
                  const char* dtype) {
    json j;
    j["shape"] = {shape[0], shape[1], shape[2]};
    j["spacing_mm"] = {spacing[0], spacing[1], spacing[2]};
    j["origin_mm"] = {origin[0], origin[1], origin[2]};
    j["dtype"] = dtype;
    return j;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f << text;
    if (!f) throw IoError("write failed: " + p.string());
}

json read_sidecar(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open sidecar: " + p.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataFormatError("malformed sidecar " + p.string() + ": " + e.what());
    }
    return j;
}

template <typename T>
void write_raw(const fs::path& p, const std::vector<T>& data) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
    if (!f) throw IoError("write failed: " + p.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& p, std::int64_t count) {
    std::ifstream f(p, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open raw file: " + p.string());
    const std::int64_t bytes = static_cast<std::int64_t>(f.tellg());
    const std::int64_t expected = count * static_cast<std::int64_t>(sizeof(T));
    if (bytes != expected)
        throw DataFormatError("raw file " + p.string() + " has " + std::to_string(bytes) +
                              " bytes, expected " + std::to_string(expected));
    std::vector<T> data(static_cast<std::size_t>(count));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(data.data()), expected);
    if (!f) throw DataFormatError("short read: " + p.string());
    return data;
}

struct Meta {
    Vec3i shape;
    Vec3d spacing;
    Vec3d origin;
    std::string dtype;
};

Meta parse_meta(const fs::path& sidecar) {
    const json j = read_sidecar(sidecar);
    Meta m;
    try {
        for (int a = 0; a < 3; ++a) {
            m.shape[a] = j.at("shape").at(a).get<std::int64_t>();
            m.spacing[a] = j.at("spacing_mm").at(a).get<double>();
            m.origin[a] = j.at("origin_mm").at(a).get<double>();
        }
        m.dtype = j.at("dtype").get<std::string>();
    } catch (const json::exception& e) {
        throw DataFormatError("bad sidecar fields in " + sidecar.string() + ": " + e.what());
    }
    return m;
}

}  // namespace

void write_volume(const fs::path& base, const Volume& v) {
    std::vector<float> f32(v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) f32[i] = static_cast<float>(v.data[i]);
    write_raw(fs::path(base).concat(".raw"), f32);
    write_text(fs::path(base).concat(".json"),
               sidecar_json(v.shape, v.spacing, v.origin, "f32").dump(2) + "\n");
}

void write_labelmap(const fs::path& base, const LabelMap& l) {
    write_raw(fs::path(base).concat(".raw"), l.data);
    write_text(fs::path(base).concat(".json"),
               sidecar_json(l.shape, l.spacing, l.origin, "u16").dump(2) + "\n");
}

Volume read_volume(const fs::path& base) {
    const Meta m = parse_meta(fs::path(base).concat(".json"));
    if (m.dtype != "f32")
        throw DataFormatError("expected dtype f32 in " + base.string() + ".json, got " + m.dtype);
    Volume v(m.shape, m.spacing, 0.0, m.origin);
    const auto f32 = read_raw<float>(fs::path(base).concat(".raw"), numel(m.shape));
    for (std::size_t i = 0; i < f32.size(); ++i) v.data[i] = static_cast<double>(f32[i]);
    return v;
}

LabelMap read_labelmap(const fs::path& base) {
    const Meta m = parse_meta(fs::path(base).concat(".json"));
    if (m.dtype != "u16")
        throw DataFormatError("expected dtype u16 in " + base.string() + ".json, got " + m.dtype);
    LabelMap l(m.shape, m.spacing, 0, m.origin);
    l.data = read_raw<std::uint16_t>(fs::path(base).concat(".raw"), numel(m.shape));
    return l;
}

}  // namespace organseg
