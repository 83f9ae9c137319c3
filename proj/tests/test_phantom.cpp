#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <filesystem>
#include <map>

#include "regseg/dvf.hpp"
#include "regseg/metrics.hpp"
#include "regseg/phantom.hpp"
#include "regseg/volume_io.hpp"

using namespace regseg;
using phantom::PhantomSpec;
namespace fs = std::filesystem;

namespace {

PhantomSpec clean_spec(uint64_t seed, int n) {
    PhantomSpec s;
    s.seed = seed;
    s.extent = n;
    s.noise_sigma = 0;
    s.bias_amplitude = 0;
    s.gas_prob = 0;
    return s;
}

}  // namespace

TEST_CASE("spec validation rejects malformed configurations") {
    PhantomSpec s;
    s.extent = 45;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.extent = 40;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = PhantomSpec{};
    s.bladder_scale_min = 0.3;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = PhantomSpec{};
    s.deform_sigma = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = PhantomSpec{};
    s.gas_prob = 1.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    PhantomSpec ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("generation is deterministic and seed-sensitive") {
    PhantomSpec s;
    s.seed = 3;
    s.extent = 64;
    phantom::Case a = phantom::gen_planning(s);
    phantom::Case b = phantom::gen_planning(s);
    CHECK(a.volume.data == b.volume.data);
    CHECK(a.labels.data == b.labels.data);

    phantom::DailyCase da = phantom::gen_daily(a, s, 5);
    phantom::DailyCase db = phantom::gen_daily(b, s, 5);
    CHECK(da.scan.volume.data == db.scan.volume.data);
    CHECK(da.scan.labels.data == db.scan.labels.data);
    CHECK(da.dvf_gt.data == db.dvf_gt.data);
    CHECK(da.bladder_scale == db.bladder_scale);

    // a different fraction salt draws a different day
    phantom::DailyCase dc = phantom::gen_daily(a, s, 6);
    CHECK(dc.scan.labels.data != da.scan.labels.data);

    PhantomSpec s2 = s;
    s2.seed = 4;
    phantom::Case c = phantom::gen_planning(s2);
    CHECK(c.labels.data != a.labels.data);
}

TEST_CASE("a motionless day with neutral bladder reproduces the planning scan") {
    PhantomSpec s = clean_spec(11, 48);
    s.deform_magnitude = 0;
    phantom::Case plan = phantom::gen_planning(s);
    phantom::DailyCase d = phantom::gen_daily(plan, s, 0, /*bladder_scale=*/1.0);
    CHECK(d.scan.volume.data == plan.volume.data);
    CHECK(d.scan.labels.data == plan.labels.data);
    for (float v : d.dvf_gt.data) CHECK(v == 0.0f);
}

TEST_CASE("intensities follow the HU table inside each structure") {
    PhantomSpec s = clean_spec(7, 64);
    phantom::Case c = phantom::gen_planning(s);
    std::map<int, std::pair<double, long long>> acc;
    for (long long i = 0; i < c.labels.size(); ++i) {
        auto& [sum, n] = acc[c.labels[i]];
        sum += c.volume[i];
        ++n;
    }
    const std::array<std::pair<int, float>, 6> expect{{{phantom::kAir, s.hu.air},
                                                       {phantom::kProstate, s.hu.prostate},
                                                       {phantom::kSeminalVesicles,
                                                        s.hu.seminal_vesicles},
                                                       {phantom::kBladder, s.hu.bladder},
                                                       {phantom::kRectum, s.hu.rectum},
                                                       {phantom::kTorso, s.hu.torso}}};
    for (auto [lab, hu] : expect) {
        REQUIRE(acc.count(lab) == 1);
        const auto& [sum, n] = acc[lab];
        CHECK(n > 100);
        // partial-volume smoothing only perturbs boundary voxels, so the
        // structure mean stays within a few HU of the table value
        CHECK(std::abs(sum / static_cast<double>(n) - hu) < 8.0);
    }
}

TEST_CASE("the ground-truth field maps planning labels onto the daily labels") {
    PhantomSpec s;
    s.seed = 19;
    s.extent = 64;
    phantom::Case plan = phantom::gen_planning(s);
    phantom::DailyCase d = phantom::gen_daily(plan, s, 2);
    LabelMap warped = dvf::warp_labels_nearest(plan.labels, d.dvf_gt);
    CHECK(warped.data == d.scan.labels.data);

    // and the day differs meaningfully from planning before registration
    long long diff = 0;
    for (long long i = 0; i < plan.labels.size(); ++i) diff += plan.labels[i] != warped[i];
    CHECK(diff > 1000);
}

TEST_CASE("default-magnitude fields are folding-free") {
    for (uint64_t seed : {0ull, 1ull, 2ull}) {
        PhantomSpec s;
        s.seed = seed;
        s.extent = 64;
        phantom::Case plan = phantom::gen_planning(s);
        for (double scale : {0.0, 1.45}) {
            phantom::DailyCase d = phantom::gen_daily(plan, s, seed + 10, scale);
            CHECK(dvf::dvf_stats(d.dvf_gt).folding_fraction == 0.0);
        }
    }
    PhantomSpec s;
    s.seed = 5;
    s.extent = 96;
    phantom::Case plan = phantom::gen_planning(s);
    phantom::DailyCase d = phantom::gen_daily(plan, s, 1);
    CHECK(dvf::dvf_stats(d.dvf_gt).folding_fraction == 0.0);
}

TEST_CASE("the radial bladder map hits the requested volume ratio") {
    PhantomSpec s;
    s.seed = 23;
    s.extent = 96;
    s.deform_magnitude = 0;  // isolate the volumetric map from the random motion
    phantom::Case plan = phantom::gen_planning(s);
    phantom::DailyCase d = phantom::gen_daily(plan, s, 0, 1.5);
    long long vp = 0, vd = 0;
    for (long long i = 0; i < plan.labels.size(); ++i) {
        vp += plan.labels[i] == phantom::kBladder;
        vd += d.scan.labels[i] == phantom::kBladder;
    }
    const double ratio = static_cast<double>(vd) / static_cast<double>(vp);
    CHECK(ratio >= 1.35);
    CHECK(ratio <= 1.65);

    CHECK_THROWS_AS(phantom::gen_daily(plan, s, 0, 2.5), ConfigError);
}

TEST_CASE("each structure is a single connected component") {
    for (uint64_t seed : {0ull, 3ull, 6ull}) {
        PhantomSpec s;
        s.seed = seed;
        s.extent = 64;
        phantom::Case c = phantom::gen_planning(s);
        for (int lab = 1; lab <= 4; ++lab) {
            LabelMap m(c.labels.shape);
            long long total = 0;
            for (long long i = 0; i < m.size(); ++i) {
                m[i] = c.labels[i] == lab ? 1 : 0;
                total += m[i];
            }
            REQUIRE(total > 0);
            LabelMap cc = metrics::largest_cc(m);
            long long kept = 0;
            for (long long i = 0; i < cc.size(); ++i) kept += cc[i] != 0;
            CAPTURE(seed);
            CAPTURE(lab);
            CHECK(kept == total);
        }
    }
}

TEST_CASE("dataset trees are reproducible and complete on disk") {
    const fs::path root = fs::temp_directory_path() / "regseg_phantom_ds_test";
    fs::remove_all(root);
    PhantomSpec s;
    s.seed = 2;
    s.extent = 44;  // smallest legal extent keeps this test quick
    const uint64_t h1 = phantom::make_dataset((root / "a").string(), 2, 2, s);
    const uint64_t h2 = phantom::make_dataset((root / "b").string(), 2, 2, s);
    CHECK(h1 == h2);
    PhantomSpec s3 = s;
    s3.seed = 9;
    const uint64_t h3 = phantom::make_dataset((root / "c").string(), 2, 2, s3);
    CHECK(h3 != h1);

    CHECK(fs::exists(root / "a" / "split.json"));
    for (const char* cs : {"case_0_0", "case_0_1", "case_1_0", "case_1_1"}) {
        const fs::path dir = root / "a" / cs;
        CAPTURE(cs);
        REQUIRE(fs::is_directory(dir));
        CHECK(fs::exists(dir / "manifest.json"));
        Tensor<float> vol = io::read_volume((dir / "planning").string());
        CHECK(vol.shape == std::vector<int>{44, 44, 44});
        LabelMap lab = io::read_labels((dir / "daily_labels").string());
        for (long long i = 0; i < lab.size(); ++i) CHECK(lab[i] <= phantom::kTorso);
        Tensor<float> u = io::read_dvf((dir / "dvf_gt").string());
        CHECK(u.shape == std::vector<int>{3, 44, 44, 44});
    }
    CHECK_THROWS_AS(phantom::make_dataset((root / "z").string(), 0, 1, s), ConfigError);
    fs::remove_all(root);
}
