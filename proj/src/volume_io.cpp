#include "regseg/volume_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "regseg/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw volume format assumes a little-endian host");

namespace regseg::io {

namespace {

using nlohmann::json;

void write_sidecar(const std::string& base, const Sidecar& sc) {
    json j;
    j["dims"] = sc.dims;
    j["spacing_mm"] = {sc.spacing_mm[0], sc.spacing_mm[1], sc.spacing_mm[2]};
    j["dtype"] = sc.dtype;
    j["order"] = "row-major";
    j["endian"] = "little";
    if (sc.channels > 0) j["channels"] = sc.channels;
    std::ofstream f(base + ".json");
    if (!f) throw IoError("cannot write " + base + ".json");
    f << j.dump(2) << "\n";
}

long long expected_voxels(const Sidecar& sc) {
    long long n = sc.channels > 0 ? sc.channels : 1;
    for (int d : sc.dims) n *= d;
    return n;
}

}  // namespace

Sidecar read_sidecar(const std::string& base) {
    std::ifstream f(base + ".json");
    if (!f) throw IoError("cannot read " + base + ".json");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed sidecar " + base + ".json: " + e.what());
    }
    Sidecar sc;
    try {
        sc.dims = j.at("dims").get<std::vector<int>>();
        sc.dtype = j.at("dtype").get<std::string>();
        const auto sp = j.at("spacing_mm").get<std::vector<double>>();
        if (sc.dims.size() != 3 || sp.size() != 3)
            throw DataError("sidecar " + base + ".json: dims/spacing must have 3 entries");
        for (int i = 0; i < 3; ++i) sc.spacing_mm[i] = sp[static_cast<size_t>(i)];
        if (j.at("order").get<std::string>() != "row-major")
            throw DataError("sidecar " + base + ".json: unsupported order");
        if (j.at("endian").get<std::string>() != "little")
            throw DataError("sidecar " + base + ".json: unsupported endianness");
        if (j.contains("channels")) sc.channels = j["channels"].get<int>();
    } catch (const json::exception& e) {
        throw DataError("sidecar " + base + ".json: " + e.what());
    }
    for (int d : sc.dims)
        if (d <= 0) throw DataError("sidecar " + base + ".json: non-positive extent");
    if (sc.dtype != "f32" && sc.dtype != "u8")
        throw DataError("sidecar " + base + ".json: dtype must be f32 or u8");
    return sc;
}

void write_bytes(const std::string& path, const void* data, size_t len) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!f) throw IoError("short write to " + path);
}

std::vector<uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot read " + path);
    const std::streamsize len = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(len));
    f.read(reinterpret_cast<char*>(buf.data()), len);
    if (!f) throw IoError("short read from " + path);
    return buf;
}

void write_volume(const std::string& base, const Tensor<float>& vol,
                  const double spacing_mm[3]) {
    if (vol.rank() != 3) throw ShapeError("write_volume expects [D,H,W], got " +
                                          shape_str(vol.shape));
    Sidecar sc;
    sc.dims = vol.shape;
    sc.dtype = "f32";
    if (spacing_mm)
        for (int i = 0; i < 3; ++i) sc.spacing_mm[i] = spacing_mm[i];
    write_sidecar(base, sc);
    write_bytes(base + ".raw", vol.ptr(), static_cast<size_t>(vol.size()) * sizeof(float));
}

Tensor<float> read_volume(const std::string& base) {
    const Sidecar sc = read_sidecar(base);
    if (sc.dtype != "f32" || sc.channels != 0)
        throw DataError(base + ": expected a plain f32 volume");
    const std::vector<uint8_t> raw = read_bytes(base + ".raw");
    if (raw.size() != static_cast<size_t>(expected_voxels(sc)) * sizeof(float))
        throw DataError(base + ".raw: size does not match sidecar dims");
    Tensor<float> vol(sc.dims);
    std::memcpy(vol.ptr(), raw.data(), raw.size());
    return vol;
}

void write_labels(const std::string& base, const LabelMap& labels) {
    Sidecar sc;
    sc.dims = labels.shape;
    sc.dtype = "u8";
    write_sidecar(base, sc);
    write_bytes(base + ".raw", labels.ptr(), static_cast<size_t>(labels.size()));
}

LabelMap read_labels(const std::string& base) {
    const Sidecar sc = read_sidecar(base);
    if (sc.dtype != "u8" || sc.channels != 0)
        throw DataError(base + ": expected a u8 label map");
    const std::vector<uint8_t> raw = read_bytes(base + ".raw");
    if (raw.size() != static_cast<size_t>(expected_voxels(sc)))
        throw DataError(base + ".raw: size does not match sidecar dims");
    LabelMap lm(sc.dims);
    std::memcpy(lm.ptr(), raw.data(), raw.size());
    return lm;
}

void write_dvf(const std::string& base, const Tensor<float>& disp) {
    if (disp.rank() != 4 || disp.dim(0) != 3)
        throw ShapeError("write_dvf expects [3,D,H,W], got " + shape_str(disp.shape));
    Sidecar sc;
    sc.dims = {disp.dim(1), disp.dim(2), disp.dim(3)};
    sc.dtype = "f32";
    sc.channels = 3;
    write_sidecar(base, sc);
    write_bytes(base + ".raw", disp.ptr(), static_cast<size_t>(disp.size()) * sizeof(float));
}

Tensor<float> read_dvf(const std::string& base) {
    const Sidecar sc = read_sidecar(base);
    if (sc.dtype != "f32" || sc.channels != 3)
        throw DataError(base + ": expected a 3-channel f32 displacement field");
    const std::vector<uint8_t> raw = read_bytes(base + ".raw");
    if (raw.size() != static_cast<size_t>(expected_voxels(sc)) * sizeof(float))
        throw DataError(base + ".raw: size does not match sidecar dims");
    Tensor<float> disp({3, sc.dims[0], sc.dims[1], sc.dims[2]});
    std::memcpy(disp.ptr(), raw.data(), raw.size());
    return disp;
}

uint64_t fnv1a(const void* data, size_t len, uint64_t h) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t hash_file(const std::string& path) {
    const std::vector<uint8_t> buf = read_bytes(path);
    return fnv1a(buf.data(), buf.size());
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace regseg::io
