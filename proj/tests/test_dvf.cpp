#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "regseg/dvf.hpp"
#include "regseg/rng.hpp"

using namespace regseg;

namespace {

Tensor<float> random_field(int n, Rng& rng, double amp) {
    Tensor<float> u({3, n, n, n});
    for (auto& v : u.data) v = static_cast<float>(draw_uniform(rng, -amp, amp));
    return u;
}

Tensor<float> random_volume(int n, Rng& rng) {
    Tensor<float> v({n, n, n});
    for (auto& x : v.data) x = static_cast<float>(draw_uniform(rng, -1, 1));
    return v;
}

}  // namespace

TEST_CASE("warp_image with a zero field is the identity") {
    Rng rng(3);
    const int n = 7;
    Tensor<float> vol = random_volume(n, rng);
    Tensor<float> zero({3, n, n, n});
    Tensor<float> out = dvf::warp_image(vol, zero);
    for (long long i = 0; i < vol.size(); ++i) CHECK(out[i] == vol[i]);
}

TEST_CASE("warp_image pulls with an integer shift, clamped at the border") {
    Rng rng(7);
    const int n = 6;
    Tensor<float> vol = random_volume(n, rng);
    Tensor<float> u({3, n, n, n});
    const long long S = static_cast<long long>(n) * n * n;
    for (long long i = 0; i < S; ++i) u[2 * S + i] = 1.0f;  // dx = +1
    Tensor<float> out = dvf::warp_image(vol, u);
    long long i = 0;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x, ++i) {
                const int sx = std::min(x + 1, n - 1);
                CHECK(out[i] ==
                      doctest::Approx(vol[(static_cast<long long>(z) * n + y) * n + sx]));
            }
    Tensor<float> bad({3, n, n, n + 1});
    CHECK_THROWS_AS(dvf::warp_image(vol, bad), ShapeError);
    Tensor<float> not_dvf({2, n, n, n});
    CHECK_THROWS_AS(dvf::warp_image(vol, not_dvf), ShapeError);
}

TEST_CASE("warp_labels_nearest pulls the label at the rounded source voxel") {
    const int n = 5;
    LabelMap lab({n, n, n});
    long long i = 0;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x, ++i) lab[i] = static_cast<uint8_t>((z + y + x) % 6);
    Tensor<float> u({3, n, n, n});
    const long long S = static_cast<long long>(n) * n * n;
    for (long long k = 0; k < S; ++k) {
        u[0 * S + k] = 0.9f;    // rounds to +1 in z
        u[1 * S + k] = -0.4f;   // rounds to 0 in y
        u[2 * S + k] = -1.2f;   // rounds to -1 in x
    }
    LabelMap out = dvf::warp_labels_nearest(lab, u);
    i = 0;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x, ++i) {
                const int sz = std::min(z + 1, n - 1);
                const int sx = std::max(x - 1, 0);
                CHECK(out[i] == lab[(static_cast<long long>(sz) * n + y) * n + sx]);
            }
}

TEST_CASE("jacobian determinant: identity, isotropic expansion, constructed fold") {
    const int n = 8;
    Tensor<float> zero({3, n, n, n});
    Tensor<float> det = dvf::jacobian_det(zero);
    CHECK(det.shape == std::vector<int>{n - 2, n - 2, n - 2});
    for (long long i = 0; i < det.size(); ++i) CHECK(det[i] == doctest::Approx(1.0));

    // u = 0.1 * (z, y, x): gradient is 0.1 I, det(1.1 I) = 1.331 everywhere
    Tensor<float> lin({3, n, n, n});
    const long long S = static_cast<long long>(n) * n * n;
    long long i = 0;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x, ++i) {
                lin[0 * S + i] = 0.1f * z;
                lin[1 * S + i] = 0.1f * y;
                lin[2 * S + i] = 0.1f * x;
            }
    det = dvf::jacobian_det(lin);
    for (long long k = 0; k < det.size(); ++k)
        CHECK(det[k] == doctest::Approx(1.331).epsilon(1e-3));

    // u_x = -2x flips the x axis: det = 1*1*(1-2) = -1
    Tensor<float> fold({3, n, n, n});
    i = 0;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x, ++i) fold[2 * S + i] = -2.0f * x;
    det = dvf::jacobian_det(fold);
    for (long long k = 0; k < det.size(); ++k) CHECK(det[k] == doctest::Approx(-1.0));

    Tensor<float> tiny({3, 2, 5, 5});
    CHECK_THROWS_AS(dvf::jacobian_det(tiny), SizeError);
}

TEST_CASE("dvf_stats aggregates the determinant field like a direct computation") {
    Rng rng(11);
    const int n = 9;
    Tensor<float> u = random_field(n, rng, 2.0);
    Tensor<float> det = dvf::jacobian_det(u);

    auto expect_of = [&](const LabelMap* mask) {
        double s = 0, s2 = 0;
        long long cnt = 0, folded = 0;
        for (long long i = 0; i < det.size(); ++i) {
            if (mask && (*mask)[i] == 0) continue;
            s += det[i];
            s2 += static_cast<double>(det[i]) * det[i];
            ++cnt;
            if (det[i] <= 0) ++folded;
        }
        const double m = s / static_cast<double>(cnt);
        return std::tuple{std::sqrt(s2 / static_cast<double>(cnt) - m * m),
                          static_cast<double>(folded) / static_cast<double>(cnt), cnt};
    };

    dvf::DvfStats st = dvf::dvf_stats(u);
    auto [estd, efold, ecnt] = expect_of(nullptr);
    CHECK(st.std_jacobian == doctest::Approx(estd).epsilon(1e-12));
    CHECK(st.folding_fraction == doctest::Approx(efold).epsilon(1e-12));
    CHECK(st.region_voxels == ecnt);
    CHECK(st.folding_fraction > 0);  // amplitude 2 noise must fold somewhere

    LabelMap mask({n - 2, n - 2, n - 2});
    for (long long i = 0; i < mask.size(); ++i) mask[i] = (i % 3 == 0) ? 1 : 0;
    st = dvf::dvf_stats(u, &mask);
    auto [mstd, mfold, mcnt] = expect_of(&mask);
    CHECK(st.std_jacobian == doctest::Approx(mstd).epsilon(1e-12));
    CHECK(st.folding_fraction == doctest::Approx(mfold).epsilon(1e-12));
    CHECK(st.region_voxels == mcnt);

    LabelMap empty({n - 2, n - 2, n - 2});
    CHECK_THROWS_AS(dvf::dvf_stats(u, &empty), ConfigError);
    LabelMap wrong({n, n, n});
    CHECK_THROWS_AS(dvf::dvf_stats(u, &wrong), ShapeError);
}

TEST_CASE("rescale_dvf converts shapes and displacement units between grids") {
    const int n = 8;
    Tensor<float> one({3, n, n, n});
    one.fill(1.0f);  // one fine voxel of displacement everywhere

    Dvf<float> fine{one, GridLevel::fine};
    Dvf<float> coarse = dvf::rescale_dvf(fine, GridLevel::coarse);
    CHECK(coarse.disp.shape == std::vector<int>{3, n / 4, n / 4, n / 4});
    // the same physical shift measured in coarse voxels is a quarter as large
    for (long long i = 0; i < coarse.disp.size(); ++i)
        CHECK(coarse.disp[i] == doctest::Approx(0.25));

    Dvf<float> back = dvf::rescale_dvf(coarse, GridLevel::fine);
    CHECK(back.disp.shape == std::vector<int>{3, n, n, n});
    for (long long i = 0; i < back.disp.size(); ++i)
        CHECK(back.disp[i] == doctest::Approx(1.0));

    Dvf<float> mid = dvf::rescale_dvf(fine, GridLevel::mid);
    CHECK(mid.disp.shape == std::vector<int>{3, n / 2, n / 2, n / 2});
    for (long long i = 0; i < mid.disp.size(); ++i) CHECK(mid.disp[i] == doctest::Approx(0.5));

    Dvf<float> same = dvf::rescale_dvf(fine, GridLevel::fine);
    CHECK(same.disp.data == one.data);

    Dvf<float> odd{Tensor<float>({3, 5, 5, 5}), GridLevel::fine};
    CHECK_THROWS_AS(dvf::rescale_dvf(odd, GridLevel::mid), ShapeError);
}

TEST_CASE("differentiable warp agrees with the plain image warp") {
    Rng rng(13);
    const int n = 6;
    Tensor<float> vol({2, n, n, n});
    for (auto& v : vol.data) v = static_cast<float>(draw_uniform(rng, -1, 1));
    Tensor<float> u = random_field(n, rng, 1.5);

    Tape<float> tp;
    Var<float> w = ops::warp(tp, tp.leaf(vol, "m"), tp.leaf(u, "u"));
    Tensor<float> plain = dvf::warp_image(vol, u);
    CHECK(tp.value(w).shape == plain.shape);
    for (long long i = 0; i < plain.size(); ++i)
        CHECK(tp.value(w)[i] == doctest::Approx(plain[i]).epsilon(1e-6));
}
