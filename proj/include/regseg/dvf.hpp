#pragma once

#include <cmath>
#include <optional>

#include "regseg/ops.hpp"

namespace regseg {

enum class GridLevel { fine, mid, coarse };

inline int grid_stride(GridLevel g) {
    switch (g) {
        case GridLevel::fine: return 1;
        case GridLevel::mid: return 2;
        case GridLevel::coarse: return 4;
    }
    return 1;
}

// Displacement field on its own grid, channels (dz,dy,dx) in voxel units.
template <typename T>
struct Dvf {
    Tensor<T> disp;  // [3,D,H,W]
    GridLevel grid_level = GridLevel::fine;
};

namespace dvf {

namespace detail {

template <typename T>
double sample_trilinear(const T* vol, int D, int H, int W, double z, double y, double x) {
    int z0, z1, y0, y1, x0, x1;
    double tz, ty, tx, dq;
    ops::detail::sample_axis(z, D, z0, z1, tz, dq);
    ops::detail::sample_axis(y, H, y0, y1, ty, dq);
    ops::detail::sample_axis(x, W, x0, x1, tx, dq);
    auto at = [&](int zz, int yy, int xx) -> double {
        return static_cast<double>(vol[(static_cast<long long>(zz) * H + yy) * W + xx]);
    };
    const double c00 = at(z0, y0, x0) * (1 - tx) + at(z0, y0, x1) * tx;
    const double c01 = at(z0, y1, x0) * (1 - tx) + at(z0, y1, x1) * tx;
    const double c10 = at(z1, y0, x0) * (1 - tx) + at(z1, y0, x1) * tx;
    const double c11 = at(z1, y1, x0) * (1 - tx) + at(z1, y1, x1) * tx;
    return (c00 * (1 - ty) + c01 * ty) * (1 - tz) + (c10 * (1 - ty) + c11 * ty) * tz;
}

template <typename T>
void check_dvf(const Tensor<T>& u) {
    if (u.rank() != 4 || u.dim(0) != 3) throw ShapeError("dvf must be [3,D,H,W]");
}

}  // namespace detail

// out(x) = moving(x + u(x)), trilinear with clamped sampling.
// moving: [D,H,W] or [C,D,H,W].
template <typename T>
Tensor<T> warp_image(const Tensor<T>& moving, const Tensor<T>& u) {
    detail::check_dvf(u);
    const bool has_c = moving.rank() == 4;
    const int C = has_c ? moving.dim(0) : 1;
    const int D = moving.dim(has_c ? 1 : 0), H = moving.dim(has_c ? 2 : 1),
              W = moving.dim(has_c ? 3 : 2);
    if (u.dim(1) != D || u.dim(2) != H || u.dim(3) != W)
        throw ShapeError("warp_image: dvf grid " + shape_str(u.shape) + " vs image " +
                         shape_str(moving.shape));
    const long long S = static_cast<long long>(D) * H * W;
    Tensor<T> out(moving.shape);
    long long i = 0;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x, ++i) {
                const double qz = z + static_cast<double>(u[0 * S + i]);
                const double qy = y + static_cast<double>(u[1 * S + i]);
                const double qx = x + static_cast<double>(u[2 * S + i]);
                for (int c = 0; c < C; ++c)
                    out[c * S + i] = static_cast<T>(
                        detail::sample_trilinear(moving.ptr() + c * S, D, H, W, qz, qy, qx));
            }
    return out;
}

// Nearest-label warping: the label at the rounded (clamped) source coordinate.
template <typename T>
LabelMap warp_labels_nearest(const LabelMap& labels, const Tensor<T>& u) {
    detail::check_dvf(u);
    const int D = labels.shape[0], H = labels.shape[1], W = labels.shape[2];
    if (u.dim(1) != D || u.dim(2) != H || u.dim(3) != W)
        throw ShapeError("warp_labels: dvf grid does not match label grid");
    const long long S = static_cast<long long>(D) * H * W;
    LabelMap out({D, H, W});
    long long i = 0;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x, ++i) {
                auto clampi = [](double q, int L) {
                    int v = static_cast<int>(std::lround(q));
                    return std::min(std::max(v, 0), L - 1);
                };
                const int sz = clampi(z + static_cast<double>(u[0 * S + i]), D);
                const int sy = clampi(y + static_cast<double>(u[1 * S + i]), H);
                const int sx = clampi(x + static_cast<double>(u[2 * S + i]), W);
                out[i] = labels[(static_cast<long long>(sz) * H + sy) * W + sx];
            }
    return out;
}

// Linear-onehot warping: trilinear interpolation of each one-hot channel.
template <typename T>
Tensor<T> warp_labels_onehot(const LabelMap& labels, const Tensor<T>& u, int num_classes,
                             const std::vector<int>* remap = nullptr) {
    Tensor<T> oh = ops::one_hot<T>(labels, num_classes, remap);
    return warp_image(oh, u);
}

// det(I + grad u) at interior voxels, central differences. Output [D-2,H-2,W-2].
template <typename T>
Tensor<T> jacobian_det(const Tensor<T>& u) {
    detail::check_dvf(u);
    const int D = u.dim(1), H = u.dim(2), W = u.dim(3);
    if (D < 3 || H < 3 || W < 3)
        throw SizeError("jacobian_det requires extents >= 3, got " + shape_str({D, H, W}));
    const long long S = static_cast<long long>(D) * H * W;
    Tensor<T> out({D - 2, H - 2, W - 2});
    auto at = [&](int c, int z, int y, int x) -> double {
        return static_cast<double>(u[c * S + (static_cast<long long>(z) * H + y) * W + x]);
    };
    long long o = 0;
    for (int z = 1; z < D - 1; ++z)
        for (int y = 1; y < H - 1; ++y)
            for (int x = 1; x < W - 1; ++x, ++o) {
                double J[3][3];
                for (int c = 0; c < 3; ++c) {
                    J[c][0] = 0.5 * (at(c, z + 1, y, x) - at(c, z - 1, y, x));
                    J[c][1] = 0.5 * (at(c, z, y + 1, x) - at(c, z, y - 1, x));
                    J[c][2] = 0.5 * (at(c, z, y, x + 1) - at(c, z, y, x - 1));
                }
                J[0][0] += 1.0;
                J[1][1] += 1.0;
                J[2][2] += 1.0;
                out[o] = static_cast<T>(J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                        J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                        J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]));
            }
    return out;
}

struct DvfStats {
    double std_jacobian = 0;
    double folding_fraction = 0;
    long long region_voxels = 0;
};

// Statistics over interior voxels; mask (if given) must match the jacobian
// output extents, nonzero entries included.
template <typename T>
DvfStats dvf_stats(const Tensor<T>& u, const LabelMap* mask = nullptr) {
    Tensor<T> det = jacobian_det(u);
    if (mask && mask->shape != det.shape)
        throw ShapeError("dvf_stats mask extents must match jacobian interior extents");
    double s = 0, s2 = 0;
    long long n = 0, folded = 0;
    for (long long i = 0; i < det.size(); ++i) {
        if (mask && (*mask)[i] == 0) continue;
        const double d = static_cast<double>(det[i]);
        s += d;
        s2 += d * d;
        ++n;
        if (d <= 0) ++folded;
    }
    if (n == 0) throw ConfigError("dvf_stats: empty region");
    const double m = s / static_cast<double>(n);
    const double var = std::max(0.0, s2 / static_cast<double>(n) - m * m);
    return {std::sqrt(var), static_cast<double>(folded) / static_cast<double>(n), n};
}

// Resamples a displacement field between grid levels (factor 2 or 4) and
// converts displacement magnitudes to the destination grid's voxel units.
template <typename T>
Dvf<T> rescale_dvf(const Dvf<T>& in, GridLevel to_level) {
    const int s_from = grid_stride(in.grid_level);
    const int s_to = grid_stride(to_level);
    if (s_from == s_to) return in;
    const double value_scale = static_cast<double>(s_from) / static_cast<double>(s_to);
    Tensor<T> cur = in.disp;
    int sf = s_from;
    while (sf > s_to) {  // upsample by 2 per step
        const int D = cur.dim(1), H = cur.dim(2), W = cur.dim(3);
        const long long S = static_cast<long long>(D) * H * W;
        Tensor<T> up({3, 2 * D, 2 * H, 2 * W});
        auto az = ops::detail::upsample_axis(D);
        auto ay = ops::detail::upsample_axis(H);
        auto ax = ops::detail::upsample_axis(W);
        long long o = 0;
        for (int c = 0; c < 3; ++c)
            for (int z = 0; z < 2 * D; ++z)
                for (int y = 0; y < 2 * H; ++y)
                    for (int x = 0; x < 2 * W; ++x, ++o) {
                        const auto &lz = az[static_cast<size_t>(z)],
                                   &ly = ay[static_cast<size_t>(y)],
                                   &lx = ax[static_cast<size_t>(x)];
                        up[o] = static_cast<T>(detail::sample_trilinear(
                            cur.ptr() + c * S, D, H, W, lz.i0 + lz.w1, ly.i0 + ly.w1,
                            lx.i0 + lx.w1));
                    }
        cur = std::move(up);
        sf /= 2;
    }
    while (sf < s_to) {  // downsample by 2 per step
        const int D = cur.dim(1), H = cur.dim(2), W = cur.dim(3);
        if (D % 2 || H % 2 || W % 2)
            throw ShapeError("rescale_dvf: odd extent cannot be halved");
        const long long S = static_cast<long long>(D) * H * W;
        Tensor<T> dn({3, D / 2, H / 2, W / 2});
        long long o = 0;
        for (int c = 0; c < 3; ++c)
            for (int z = 0; z < D / 2; ++z)
                for (int y = 0; y < H / 2; ++y)
                    for (int x = 0; x < W / 2; ++x, ++o)
                        dn[o] = static_cast<T>(detail::sample_trilinear(
                            cur.ptr() + c * S, D, H, W, 2 * z + 0.5, 2 * y + 0.5, 2 * x + 0.5));
        cur = std::move(dn);
        sf *= 2;
    }
    for (long long i = 0; i < cur.size(); ++i)
        cur[i] = static_cast<T>(static_cast<double>(cur[i]) * value_scale);
    return {std::move(cur), to_level};
}

}  // namespace dvf
}  // namespace regseg
