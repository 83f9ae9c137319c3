#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "regseg/metrics.hpp"
#include "regseg/rng.hpp"

using namespace regseg;
using namespace regseg::metrics;

namespace {

// Random blobby masks: union of a few solid spheres over a small grid.
LabelMap random_blob(int n, Rng& rng, int max_spheres = 3) {
    LabelMap m({n, n, n});
    const int k = 1 + static_cast<int>(draw_index(rng, max_spheres));
    for (int s = 0; s < k; ++s) {
        const double cz = draw_uniform(rng, 2, n - 3), cy = draw_uniform(rng, 2, n - 3),
                     cx = draw_uniform(rng, 2, n - 3);
        const double r = draw_uniform(rng, 1.5, 0.35 * n);
        long long i = 0;
        for (int z = 0; z < n; ++z)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x, ++i) {
                    const double d2 = (z - cz) * (z - cz) + (y - cy) * (y - cy) +
                                      (x - cx) * (x - cx);
                    if (d2 <= r * r) m[i] = 1;
                }
    }
    return m;
}

std::vector<std::array<int, 3>> brute_surface(const LabelMap& m) {
    const int D = m.shape[0], H = m.shape[1], W = m.shape[2];
    auto fg = [&](int z, int y, int x) {
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
        return m[(static_cast<long long>(z) * H + y) * W + x] != 0;
    };
    std::vector<std::array<int, 3>> pts;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!fg(z, y, x)) continue;
                if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) ||
                    !fg(z, y + 1, x) || !fg(z, y, x - 1) || !fg(z, y, x + 1))
                    pts.push_back({z, y, x});
            }
    return pts;
}

// All pairwise min-distances from each point in `from` to the set `to`.
std::vector<double> brute_directed(const std::vector<std::array<int, 3>>& from,
                                   const std::vector<std::array<int, 3>>& to) {
    std::vector<double> out;
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            const double d2 = static_cast<double>(p[0] - q[0]) * (p[0] - q[0]) +
                              static_cast<double>(p[1] - q[1]) * (p[1] - q[1]) +
                              static_cast<double>(p[2] - q[2]) * (p[2] - q[2]);
            best = std::min(best, d2);
        }
        out.push_back(std::sqrt(best));
    }
    return out;
}

double brute_percentile(std::vector<double> v, int pct) {
    std::sort(v.begin(), v.end());
    if (pct >= 100) return v.back();
    const auto idx = static_cast<size_t>(std::max<long long>(
        0, static_cast<long long>(std::ceil(pct / 100.0 * static_cast<double>(v.size()))) - 1));
    return v[idx];
}

}  // namespace

TEST_CASE("overlap coefficient basics and empty-mask flags") {
    LabelMap a({4, 4, 4}), b({4, 4, 4});
    DscResult r = dsc(a, b);
    CHECK(r.value == 1.0);
    CHECK(r.both_empty);
    a[0] = 1;
    r = dsc(a, b);
    CHECK(r.value == 0.0);
    CHECK(r.one_empty);
    b[0] = 1;
    b[1] = 1;
    r = dsc(a, b);  // |A|=1, |B|=2, |A∩B|=1
    CHECK(r.value == doctest::Approx(2.0 / 3.0));
    CHECK_FALSE(r.both_empty);
    CHECK_FALSE(r.one_empty);
    LabelMap c({4, 4, 5});
    CHECK_THROWS_AS(dsc(a, c), ShapeError);
}

TEST_CASE("surface extraction matches the brute-force definition") {
    Rng rng(41);
    for (int t = 0; t < 20; ++t) {
        const int n = 6 + static_cast<int>(draw_index(rng, 6));
        LabelMap m = random_blob(n, rng);
        long long fg = 0;
        for (long long i = 0; i < m.size(); ++i) fg += m[i] != 0;
        if (fg == 0) {
            CHECK_THROWS_AS(extract_surface(m), EmptyMaskError);
            continue;
        }
        auto expect = brute_surface(m);
        SurfacePointSet got = extract_surface(m);
        REQUIRE(got.points.size() == expect.size());
        CHECK(got.points == expect);  // lexicographic order in both
    }
}

TEST_CASE("squared distance transform matches the brute force") {
    Rng rng(43);
    for (int t = 0; t < 10; ++t) {
        const int D = 5 + static_cast<int>(draw_index(rng, 4));
        const int H = 5 + static_cast<int>(draw_index(rng, 4));
        const int W = 5 + static_cast<int>(draw_index(rng, 4));
        std::vector<std::array<int, 3>> seeds;
        const int k = 1 + static_cast<int>(draw_index(rng, 8));
        for (int s = 0; s < k; ++s)
            seeds.push_back({static_cast<int>(draw_index(rng, D)),
                             static_cast<int>(draw_index(rng, H)),
                             static_cast<int>(draw_index(rng, W))});
        Tensor<double> d = squared_edt({D, H, W}, seeds);
        long long i = 0;
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x, ++i) {
                    double best = std::numeric_limits<double>::infinity();
                    for (const auto& q : seeds) {
                        const double d2 = static_cast<double>(z - q[0]) * (z - q[0]) +
                                          static_cast<double>(y - q[1]) * (y - q[1]) +
                                          static_cast<double>(x - q[2]) * (x - q[2]);
                        best = std::min(best, d2);
                    }
                    CHECK(d[i] == doctest::Approx(best).epsilon(1e-12));
                }
    }
}

TEST_CASE("surface distances match an all-pairs oracle on random blob pairs") {
    Rng rng(47);
    int tested = 0;
    for (int t = 0; t < 60 && tested < 40; ++t) {
        const int n = 6 + static_cast<int>(draw_index(rng, 7));  // up to 12^3
        LabelMap a = random_blob(n, rng), b = random_blob(n, rng);
        long long fa = 0, fb = 0;
        for (long long i = 0; i < a.size(); ++i) {
            fa += a[i] != 0;
            fb += b[i] != 0;
        }
        if (fa == 0 || fb == 0) continue;
        ++tested;

        auto sa = brute_surface(a), sb = brute_surface(b);
        auto da = brute_directed(sa, sb), db = brute_directed(sb, sa);
        double ma = 0, mb = 0;
        for (double x : da) ma += x;
        for (double x : db) mb += x;
        const double msd_expect =
            0.5 * (ma / static_cast<double>(da.size()) + mb / static_cast<double>(db.size()));
        const double hd_expect = std::max(brute_percentile(da, 100), brute_percentile(db, 100));
        const double hd95_expect = std::max(brute_percentile(da, 95), brute_percentile(db, 95));

        CHECK(msd(a, b) == doctest::Approx(msd_expect).epsilon(1e-9));
        CHECK(hd(a, b, 100) == doctest::Approx(hd_expect).epsilon(1e-9));
        CHECK(hd(a, b, 95) == doctest::Approx(hd95_expect).epsilon(1e-9));
    }
    REQUIRE(tested >= 30);
    LabelMap a({5, 5, 5}), b({5, 5, 5});
    a[0] = b[0] = 1;
    CHECK_THROWS_AS(hd(a, b, 90), ConfigError);
}

TEST_CASE("largest connected component matches a flood-fill oracle") {
    Rng rng(53);
    for (int t = 0; t < 15; ++t) {
        const int n = 6 + static_cast<int>(draw_index(rng, 5));
        LabelMap m({n, n, n});
        for (long long i = 0; i < m.size(); ++i) m[i] = draw_uniform(rng, 0, 1) < 0.35 ? 1 : 0;

        // oracle: label all components, keep the biggest (first seed on ties)
        std::vector<int> comp(static_cast<size_t>(m.size()), -1);
        int next = 0, best_id = -1;
        long long best_size = 0;
        for (long long s = 0; s < m.size(); ++s) {
            if (!m[s] || comp[static_cast<size_t>(s)] >= 0) continue;
            std::vector<long long> q{s};
            comp[static_cast<size_t>(s)] = next;
            long long size = 0;
            while (!q.empty()) {
                long long cur = q.back();
                q.pop_back();
                ++size;
                const int z = static_cast<int>(cur / (n * n)), y = static_cast<int>((cur / n) % n),
                          x = static_cast<int>(cur % n);
                const int dz[6] = {-1, 1, 0, 0, 0, 0}, dy[6] = {0, 0, -1, 1, 0, 0},
                          dx[6] = {0, 0, 0, 0, -1, 1};
                for (int k = 0; k < 6; ++k) {
                    const int nz = z + dz[k], ny = y + dy[k], nx = x + dx[k];
                    if (nz < 0 || nz >= n || ny < 0 || ny >= n || nx < 0 || nx >= n) continue;
                    const long long ni = (static_cast<long long>(nz) * n + ny) * n + nx;
                    if (m[ni] && comp[static_cast<size_t>(ni)] < 0) {
                        comp[static_cast<size_t>(ni)] = next;
                        q.push_back(ni);
                    }
                }
            }
            if (size > best_size) {
                best_size = size;
                best_id = next;
            }
            ++next;
        }
        LabelMap expect({n, n, n});
        if (best_id >= 0)
            for (long long i = 0; i < m.size(); ++i)
                expect[i] = comp[static_cast<size_t>(i)] == best_id ? 1 : 0;

        LabelMap got = largest_cc(m);
        CHECK(got.data == expect.data);
    }
    // empty input stays empty
    LabelMap e({4, 4, 4});
    LabelMap ge = largest_cc(e);
    for (long long i = 0; i < ge.size(); ++i) CHECK(ge[i] == 0);
}

TEST_CASE("per-organ metric rows flag undefined distances") {
    LabelMap ref({6, 6, 6}), pred({6, 6, 6});
    OrganMetrics m = evaluate_masks(ref, pred);
    CHECK(m.failed);
    CHECK(m.dsc == 1.0);  // both empty
    ref[0] = 1;
    m = evaluate_masks(ref, pred);
    CHECK(m.failed);
    CHECK(m.dsc == 0.0);

    // identical nonempty masks: perfect overlap, zero distances
    pred[0] = 1;
    m = evaluate_masks(ref, pred);
    CHECK_FALSE(m.failed);
    CHECK(m.dsc == 1.0);
    CHECK(m.msd_mm == 0.0);
    CHECK(m.hd_mm == 0.0);
    CHECK(m.hd95_mm == 0.0);

    // a unit offset between two single-voxel masks is distance 1
    LabelMap p2({6, 6, 6});
    p2[1] = 1;
    m = evaluate_masks(ref, p2);
    CHECK(m.msd_mm == doctest::Approx(1.0));
    CHECK(m.hd_mm == doctest::Approx(1.0));
}
