#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdint>
#include <filesystem>
#include <string>

#include "regseg/checkpoint.hpp"
#include "regseg/rng.hpp"
#include "regseg/volume_io.hpp"

using namespace regseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("regseg_io_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string base(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("scalar volumes round-trip bit-exactly with their sidecar") {
    TempDir td;
    Rng rng(1);
    Tensor<float> vol({5, 6, 7});
    for (auto& v : vol.data) v = static_cast<float>(draw_uniform(rng, -1000, 1000));
    const double spacing[3] = {1.5, 0.75, 0.75};
    io::write_volume(td.base("vol"), vol, spacing);

    Tensor<float> back = io::read_volume(td.base("vol"));
    CHECK(back.shape == vol.shape);
    CHECK(back.data == vol.data);

    io::Sidecar sc = io::read_sidecar(td.base("vol"));
    CHECK(sc.dims == std::vector<int>{5, 6, 7});
    CHECK(sc.dtype == "f32");
    CHECK(sc.channels == 0);
    CHECK(sc.spacing_mm[0] == doctest::Approx(1.5));
    CHECK(sc.spacing_mm[1] == doctest::Approx(0.75));
}

TEST_CASE("label maps round-trip bit-exactly") {
    TempDir td;
    Rng rng(2);
    LabelMap lab({6, 5, 4});
    for (auto& v : lab.data) v = static_cast<uint8_t>(draw_index(rng, 6));
    io::write_labels(td.base("lab"), lab);
    LabelMap back = io::read_labels(td.base("lab"));
    CHECK(back.shape == lab.shape);
    CHECK(back.data == lab.data);
    CHECK(io::read_sidecar(td.base("lab")).dtype == "u8");
}

TEST_CASE("displacement fields round-trip with their channel count") {
    TempDir td;
    Rng rng(3);
    Tensor<float> u({3, 4, 5, 6});
    for (auto& v : u.data) v = static_cast<float>(draw_uniform(rng, -4, 4));
    io::write_dvf(td.base("dvf"), u);
    Tensor<float> back = io::read_dvf(td.base("dvf"));
    CHECK(back.shape == u.shape);
    CHECK(back.data == u.data);
    CHECK(io::read_sidecar(td.base("dvf")).channels == 3);
}

TEST_CASE("missing or truncated files raise io errors") {
    TempDir td;
    CHECK_THROWS_AS(io::read_volume(td.base("nope")), IoError);
    CHECK_THROWS_AS(io::read_labels(td.base("nope")), IoError);
    CHECK_THROWS_AS(io::read_sidecar(td.base("nope")), IoError);
    CHECK_THROWS_AS(io::read_bytes(td.base("nope.bin")), IoError);

    // sidecar promising more voxels than the payload holds
    Tensor<float> vol({4, 4, 4});
    io::write_volume(td.base("short"), vol);
    const auto raw = io::read_bytes(td.base("short") + ".raw");
    io::write_bytes(td.base("short") + ".raw", raw.data(), raw.size() - 8);
    CHECK_THROWS_AS(io::read_volume(td.base("short")), DataError);
}

TEST_CASE("fnv1a agrees with an independent implementation") {
    auto reference = [](const uint8_t* p, size_t n) {
        uint64_t h = 14695981039346656037ULL;  // offset basis
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;  // FNV prime
        }
        return h;
    };
    const std::string msgs[] = {"", "a", "regseg", "the quick brown fox"};
    for (const auto& m : msgs) {
        const uint64_t expect = reference(reinterpret_cast<const uint8_t*>(m.data()), m.size());
        CHECK(io::fnv1a(m.data(), m.size()) == expect);
    }
    // chaining: hashing in two chunks equals hashing the concatenation
    const std::string s = "chunked-input-check";
    const uint64_t whole = io::fnv1a(s.data(), s.size());
    const uint64_t part = io::fnv1a(s.data() + 7, s.size() - 7, io::fnv1a(s.data(), 7));
    CHECK(part == whole);
    CHECK(io::hex64(0xdeadbeefULL) == "00000000deadbeef");

    TempDir td;
    io::write_bytes(td.base("h.bin"), s.data(), s.size());
    CHECK(io::hash_file(td.base("h.bin")) == whole);
}

TEST_CASE("checkpoints round-trip parameters, extras and metadata") {
    TempDir td;
    ArchSpec spec;
    spec.kind = ArchKind::cross_stitch;
    spec.filters = {4, 8, 16, 8, 4};
    Network<float> net = build<float>(spec);
    init_params(net, 77);
    // make running stats nontrivial so non-trainable tensors are exercised
    for (auto& v : net.params.at("seg/e0/rmean").data) v = 0.25f;

    std::map<std::string, Tensor<float>> extra;
    Rng rng(9);
    extra["adam_m/seg/e0/w"] = Tensor<float>({4, 1, 3, 3, 3});
    for (auto& v : extra["adam_m/seg/e0/w"].data) v = static_cast<float>(draw_normal(rng, 0, 1));
    extra["homo/eta0"] = Tensor<float>({1}, {0.125f});

    const std::string meta = R"({"rng":"12345","lr":0.0001})";
    ckpt::save(td.base("ck"), net, 42, extra, meta);

    ckpt::Loaded ld = ckpt::load(td.base("ck"));
    CHECK(ld.iteration == 42);
    CHECK(ld.net.spec.kind == ArchKind::cross_stitch);
    CHECK(ld.net.spec.filters == spec.filters);
    for (const auto& [name, e] : net.params.entries)
        CHECK(ld.net.params.at(name).data == e.value.data);
    REQUIRE(ld.extra.count("adam_m/seg/e0/w") == 1);
    CHECK(ld.extra.at("adam_m/seg/e0/w").data == extra.at("adam_m/seg/e0/w").data);
    CHECK(ld.extra.at("homo/eta0")[0] == 0.125f);
    CHECK(ld.meta.find("12345") != std::string::npos);

    // architecture guard
    ArchKind wrong = ArchKind::seg;
    CHECK_THROWS_AS(ckpt::load(td.base("ck"), &wrong), ConfigError);
    ArchKind right = ArchKind::cross_stitch;
    CHECK(ckpt::load(td.base("ck"), &right).iteration == 42);
}

TEST_CASE("a flipped blob byte is detected as corruption") {
    TempDir td;
    ArchSpec spec;
    spec.kind = ArchKind::seg;
    spec.filters = {4, 8, 16, 8, 4};
    Network<float> net = build<float>(spec);
    init_params(net, 5);
    ckpt::save(td.base("ck"), net, 7);

    auto blob = io::read_bytes(td.base("ck") + ".bin");
    blob[blob.size() / 2] ^= 0x40;
    io::write_bytes(td.base("ck") + ".bin", blob.data(), blob.size());
    CHECK_THROWS_AS(ckpt::load(td.base("ck")), CorruptCheckpointError);

    CHECK_THROWS_AS(ckpt::load(td.base("missing")), IoError);
}
