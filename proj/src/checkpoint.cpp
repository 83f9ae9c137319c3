#include "regseg/checkpoint.hpp"

#include <fstream>

#include "json.hpp"

#include "regseg/errors.hpp"
#include "regseg/volume_io.hpp"

namespace regseg::ckpt {

namespace {

using nlohmann::json;

constexpr int kVersion = 1;

json spec_to_json(const ArchSpec& s) {
    json j;
    j["kind"] = arch_name(s.kind);
    j["filters"] = s.filters;
    j["num_classes"] = s.num_classes;
    j["leaky_slope"] = s.leaky_slope;
    j["seed"] = s.seed;
    return j;
}

ArchSpec spec_from_json(const json& j) {
    ArchSpec s;
    s.kind = arch_from_name(j.at("kind").get<std::string>());
    const auto f = j.at("filters").get<std::vector<int>>();
    if (f.size() != 5) throw DataError("checkpoint manifest: filters must have 5 entries");
    std::copy(f.begin(), f.end(), s.filters.begin());
    s.num_classes = j.at("num_classes").get<int>();
    s.leaky_slope = j.at("leaky_slope").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

}  // namespace

void save(const std::string& base, const Network<float>& net, long long iteration,
          const std::map<std::string, Tensor<float>>& extra, const std::string& meta) {
    // Lay the blob out in manifest order: network parameters, then extras.
    std::vector<float> blob;
    json tensors = json::object();
    auto append = [&](const std::string& name, const Tensor<float>& t) {
        json e;
        e["offset"] = blob.size();
        e["shape"] = t.shape;
        e["dtype"] = "f32";
        tensors[name] = e;
        blob.insert(blob.end(), t.data.begin(), t.data.end());
    };
    for (const auto& [name, e] : net.params.entries) append("net/" + name, e.value);
    for (const auto& [name, t] : extra) append("extra/" + name, t);

    io::write_bytes(base + ".bin", blob.data(), blob.size() * sizeof(float));

    json j;
    j["format"] = "regseg-checkpoint";
    j["version"] = kVersion;
    j["arch"] = spec_to_json(net.spec);
    j["iteration"] = iteration;
    j["tensors"] = tensors;
    j["blob_hash"] = io::hex64(io::fnv1a(blob.data(), blob.size() * sizeof(float)));
    try {
        j["meta"] = json::parse(meta);
    } catch (const json::exception&) {
        throw ConfigError("checkpoint meta must be a JSON object string");
    }
    std::ofstream f(base + ".json");
    if (!f) throw IoError("cannot write " + base + ".json");
    f << j.dump(2) << "\n";
}

Loaded load(const std::string& base, const ArchKind* expect) {
    std::ifstream f(base + ".json");
    if (!f) throw IoError("cannot read " + base + ".json");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw CorruptCheckpointError("malformed manifest " + base + ".json: " + e.what());
    }

    Loaded out;
    try {
        if (j.at("format").get<std::string>() != "regseg-checkpoint" ||
            j.at("version").get<int>() != kVersion)
            throw CorruptCheckpointError(base + ": not a supported checkpoint");
        out.net.spec = spec_from_json(j.at("arch"));
        out.iteration = j.at("iteration").get<long long>();
        out.meta = j.value("meta", json::object()).dump();
    } catch (const json::exception& e) {
        throw CorruptCheckpointError(base + ": manifest missing fields: " + e.what());
    }
    if (expect && *expect != out.net.spec.kind)
        throw ConfigError("checkpoint holds arch '" + std::string(arch_name(out.net.spec.kind)) +
                          "', expected '" + arch_name(*expect) + "'");

    const std::vector<uint8_t> raw = io::read_bytes(base + ".bin");
    if (raw.size() % sizeof(float) != 0)
        throw CorruptCheckpointError(base + ".bin: size not a multiple of 4");
    const std::string h = io::hex64(io::fnv1a(raw.data(), raw.size()));
    if (h != j.at("blob_hash").get<std::string>())
        throw CorruptCheckpointError(base + ".bin: blob hash mismatch");
    const float* blob = reinterpret_cast<const float*>(raw.data());
    const long long nfloats = static_cast<long long>(raw.size() / sizeof(float));

    out.net = build<float>(out.net.spec);
    auto read_tensor = [&](const json& e, Tensor<float>& dst, const std::string& name) {
        const auto shape = e.at("shape").get<std::vector<int>>();
        if (shape != dst.shape && !dst.shape.empty())
            throw CorruptCheckpointError(base + ": tensor '" + name + "' shape mismatch");
        const long long off = e.at("offset").get<long long>();
        if (off < 0 || off + dst.size() > nfloats)
            throw CorruptCheckpointError(base + ": tensor '" + name + "' outside blob");
        std::copy(blob + off, blob + off + dst.size(), dst.data.begin());
    };
    for (auto& [name, entry] : out.net.params.entries) {
        const std::string key = "net/" + name;
        if (!j.at("tensors").contains(key))
            throw CorruptCheckpointError(base + ": missing tensor '" + key + "'");
        read_tensor(j["tensors"][key], entry.value, key);
    }
    for (const auto& [key, e] : j.at("tensors").items()) {
        if (key.rfind("extra/", 0) != 0) continue;
        Tensor<float> t(e.at("shape").get<std::vector<int>>());
        read_tensor(e, t, key);
        out.extra.emplace(key.substr(6), std::move(t));
    }
    return out;
}

}  // namespace regseg::ckpt
