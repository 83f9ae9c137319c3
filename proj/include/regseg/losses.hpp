#pragma once

#include <cmath>

#include "regseg/ops.hpp"

namespace regseg::losses {

constexpr double kStabilizerEps = 1e-7;

// 1 - Pearson correlation of the two voxel populations, range [0,2].
// Constant images (zero variance) yield correlation 0, i.e. loss 1.
template <typename T>
Var<T> ncc_loss(Tape<T>& tp, Var<T> fixed, Var<T> warped) {
    const Tensor<T>& fv = tp.value(fixed);
    const Tensor<T>& wv = tp.value(warped);
    if (!fv.same_shape(wv))
        throw ShapeError("ncc_loss: " + shape_str(fv.shape) + " vs " + shape_str(wv.shape));
    const long long N = fv.size();
    if (N < 2) throw SizeError("ncc_loss requires at least 2 voxels");

    double ma = 0, mb = 0;
    for (long long i = 0; i < N; ++i) {
        ma += static_cast<double>(fv[i]);
        mb += static_cast<double>(wv[i]);
    }
    ma /= static_cast<double>(N);
    mb /= static_cast<double>(N);
    double saa = 0, sbb = 0, sab = 0;
    for (long long i = 0; i < N; ++i) {
        const double a = static_cast<double>(fv[i]) - ma;
        const double b = static_cast<double>(wv[i]) - mb;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    const double den = std::sqrt(saa * sbb) + kStabilizerEps;
    const bool degenerate = saa == 0.0 || sbb == 0.0;
    const double corr = degenerate ? 0.0 : sab / den;

    Tensor<T> out({1});
    out[0] = static_cast<T>(1.0 - corr);
    Var<T> r = tp.make("ncc_loss", std::move(out), {fixed, warped});
    tp.set_back(r, [&tp, fixed, warped, r, ma, mb, saa, sbb, sab, den, degenerate]() {
        if (degenerate) return;
        const double g = -static_cast<double>(tp.grad(r)[0]);  // dL/dcorr = -1
        const Tensor<T>& fv2 = tp.value(fixed);
        const Tensor<T>& wv2 = tp.value(warped);
        Tensor<T>& gf = tp.grad(fixed);
        Tensor<T>& gw = tp.grad(warped);
        const long long N2 = fv2.size();
        const double corr = sab / den;
        const double ra = std::sqrt(sbb / saa);  // d(sqrt(saa*sbb))/d saa * 2
        const double rb = std::sqrt(saa / sbb);
        for (long long i = 0; i < N2; ++i) {
            const double a = static_cast<double>(fv2[i]) - ma;
            const double b = static_cast<double>(wv2[i]) - mb;
            // centered-sum means vanish, so no mean-correction term is needed
            gf[i] += static_cast<T>(g * (b / den - corr / den * a * ra));
            gw[i] += static_cast<T>(g * (a / den - corr / den * b * rb));
        }
    });
    return r;
}

// Dice loss over foreground structures (background channel 0 excluded unless
// include_background). pred and target: [K+1,D,H,W], pred a probability map.
template <typename T>
Var<T> dice_loss(Tape<T>& tp, Var<T> pred, Var<T> target, bool include_background = false) {
    const Tensor<T>& pv = tp.value(pred);
    const Tensor<T>& tv = tp.value(target);
    if (!pv.same_shape(tv))
        throw ShapeError("dice_loss: " + shape_str(pv.shape) + " vs " + shape_str(tv.shape));
    if (pv.rank() < 2) throw ShapeError("dice_loss expects [K+1,...]");
    const int C = pv.dim(0);
    const long long S = pv.size() / C;
    const int k0 = include_background ? 0 : 1;
    if (k0 >= C) throw ConfigError("dice_loss: no foreground channels");
    const int K = C - k0;

    std::vector<double> inter(static_cast<size_t>(C), 0.0), uni(static_cast<size_t>(C), 0.0);
    double acc = 0;
    for (int c = k0; c < C; ++c) {
        const T* pb = pv.ptr() + c * S;
        const T* tb = tv.ptr() + c * S;
        double I = 0, P = 0, G = 0;
        for (long long i = 0; i < S; ++i) {
            I += static_cast<double>(pb[i]) * static_cast<double>(tb[i]);
            P += static_cast<double>(pb[i]);
            G += static_cast<double>(tb[i]);
        }
        inter[static_cast<size_t>(c)] = I;
        uni[static_cast<size_t>(c)] = P + G;
        acc += (2.0 * I + kStabilizerEps) / (P + G + kStabilizerEps);
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(1.0 - acc / K);

    Var<T> r = tp.make("dice_loss", std::move(out), {pred, target});
    tp.set_back(r, [&tp, pred, target, r, inter, uni, k0, K]() {
        const double g = static_cast<double>(tp.grad(r)[0]);
        const Tensor<T>& pv2 = tp.value(pred);
        const Tensor<T>& tv2 = tp.value(target);
        Tensor<T>& gp = tp.grad(pred);
        Tensor<T>& gt = tp.grad(target);
        const int C2 = pv2.dim(0);
        const long long S2 = pv2.size() / C2;
        for (int c = k0; c < C2; ++c) {
            const double I = inter[static_cast<size_t>(c)];
            const double U = uni[static_cast<size_t>(c)] + kStabilizerEps;
            const double num = 2.0 * I + kStabilizerEps;
            const T* pb = pv2.ptr() + c * S2;
            const T* tb = tv2.ptr() + c * S2;
            T* gpb = gp.ptr() + c * S2;
            T* gtb = gt.ptr() + c * S2;
            const double cfac = -g / K;
            for (long long i = 0; i < S2; ++i) {
                gpb[i] += static_cast<T>(cfac * (2.0 * static_cast<double>(tb[i]) * U - num) /
                                         (U * U));
                gtb[i] += static_cast<T>(cfac * (2.0 * static_cast<double>(pb[i]) * U - num) /
                                         (U * U));
            }
        }
    });
    return r;
}

// Mean squared Frobenius norm of the displacement Hessian over interior
// voxels, second derivatives by central differences. dvf: [3,D,H,W].
template <typename T>
Var<T> bending_energy(Tape<T>& tp, Var<T> dvf) {
    const Tensor<T>& u = tp.value(dvf);
    if (u.rank() != 4 || u.dim(0) != 3) throw ShapeError("bending_energy dvf must be [3,D,H,W]");
    const int D = u.dim(1), H = u.dim(2), W = u.dim(3);
    if (D < 3 || H < 3 || W < 3)
        throw SizeError("bending_energy requires extents >= 3, got " + shape_str({D, H, W}));
    const long long S = static_cast<long long>(D) * H * W;
    const long long N = static_cast<long long>(D - 2) * (H - 2) * (W - 2);

    auto at = [&](const T* b, int z, int y, int x) -> double {
        return static_cast<double>(b[(static_cast<long long>(z) * H + y) * W + x]);
    };

    double total = 0;
    for (int c = 0; c < 3; ++c) {
        const T* b = u.ptr() + c * S;
        for (int z = 1; z < D - 1; ++z)
            for (int y = 1; y < H - 1; ++y)
                for (int x = 1; x < W - 1; ++x) {
                    const double ctr = at(b, z, y, x);
                    const double dzz = at(b, z + 1, y, x) - 2 * ctr + at(b, z - 1, y, x);
                    const double dyy = at(b, z, y + 1, x) - 2 * ctr + at(b, z, y - 1, x);
                    const double dxx = at(b, z, y, x + 1) - 2 * ctr + at(b, z, y, x - 1);
                    const double dzy = (at(b, z + 1, y + 1, x) - at(b, z + 1, y - 1, x) -
                                        at(b, z - 1, y + 1, x) + at(b, z - 1, y - 1, x)) /
                                       4.0;
                    const double dzx = (at(b, z + 1, y, x + 1) - at(b, z + 1, y, x - 1) -
                                        at(b, z - 1, y, x + 1) + at(b, z - 1, y, x - 1)) /
                                       4.0;
                    const double dyx = (at(b, z, y + 1, x + 1) - at(b, z, y + 1, x - 1) -
                                        at(b, z, y - 1, x + 1) + at(b, z, y - 1, x - 1)) /
                                       4.0;
                    total += dzz * dzz + dyy * dyy + dxx * dxx +
                             2 * (dzy * dzy + dzx * dzx + dyx * dyx);
                }
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(total / static_cast<double>(N));

    Var<T> r = tp.make("bending_energy", std::move(out), {dvf});
    tp.set_back(r, [&tp, dvf, r, D, H, W, S, N]() {
        const double g = static_cast<double>(tp.grad(r)[0]) / static_cast<double>(N);
        const Tensor<T>& u2 = tp.value(dvf);
        Tensor<T>& gu = tp.grad(dvf);
        auto at = [&](const T* b, int z, int y, int x) -> double {
            return static_cast<double>(b[(static_cast<long long>(z) * H + y) * W + x]);
        };
        auto addg = [&](T* b, int z, int y, int x, double v) {
            b[(static_cast<long long>(z) * H + y) * W + x] += static_cast<T>(v);
        };
        for (int c = 0; c < 3; ++c) {
            const T* b = u2.ptr() + c * S;
            T* gb = gu.ptr() + c * S;
            for (int z = 1; z < D - 1; ++z)
                for (int y = 1; y < H - 1; ++y)
                    for (int x = 1; x < W - 1; ++x) {
                        const double ctr = at(b, z, y, x);
                        const double dzz = at(b, z + 1, y, x) - 2 * ctr + at(b, z - 1, y, x);
                        const double dyy = at(b, z, y + 1, x) - 2 * ctr + at(b, z, y - 1, x);
                        const double dxx = at(b, z, y, x + 1) - 2 * ctr + at(b, z, y, x - 1);
                        const double dzy = (at(b, z + 1, y + 1, x) - at(b, z + 1, y - 1, x) -
                                            at(b, z - 1, y + 1, x) + at(b, z - 1, y - 1, x)) /
                                           4.0;
                        const double dzx = (at(b, z + 1, y, x + 1) - at(b, z + 1, y, x - 1) -
                                            at(b, z - 1, y, x + 1) + at(b, z - 1, y, x - 1)) /
                                           4.0;
                        const double dyx = (at(b, z, y + 1, x + 1) - at(b, z, y + 1, x - 1) -
                                            at(b, z, y - 1, x + 1) + at(b, z, y - 1, x - 1)) /
                                           4.0;
                        const double czz = 2 * g * dzz, cyy = 2 * g * dyy, cxx = 2 * g * dxx;
                        addg(gb, z + 1, y, x, czz);
                        addg(gb, z - 1, y, x, czz);
                        addg(gb, z, y + 1, x, cyy);
                        addg(gb, z, y - 1, x, cyy);
                        addg(gb, z, y, x + 1, cxx);
                        addg(gb, z, y, x - 1, cxx);
                        addg(gb, z, y, x, -2 * (czz + cyy + cxx));
                        const double czy = g * dzy, czx = g * dzx, cyx = g * dyx;
                        addg(gb, z + 1, y + 1, x, czy);
                        addg(gb, z - 1, y - 1, x, czy);
                        addg(gb, z + 1, y - 1, x, -czy);
                        addg(gb, z - 1, y + 1, x, -czy);
                        addg(gb, z + 1, y, x + 1, czx);
                        addg(gb, z - 1, y, x - 1, czx);
                        addg(gb, z + 1, y, x - 1, -czx);
                        addg(gb, z - 1, y, x + 1, -czx);
                        addg(gb, z, y + 1, x + 1, cyx);
                        addg(gb, z, y - 1, x - 1, cyx);
                        addg(gb, z, y + 1, x - 1, -cyx);
                        addg(gb, z, y - 1, x + 1, -cyx);
                    }
        }
    });
    return r;
}

// Per-term scalars, each already aggregated over the supervised resolutions.
// Unused terms stay invalid (single-task networks).
template <typename T>
struct LossTerms {
    Var<T> ncc;
    Var<T> dsc_r;
    Var<T> dsc_s;
    Var<T> be;
};

// Arithmetic mean of the three supervised resolution losses.
template <typename T>
Var<T> deep_supervision_aggregate(Tape<T>& tp, Var<T> coarse, Var<T> mid, Var<T> fine) {
    return ops::scale(tp, ops::add(tp, ops::add(tp, coarse, mid), fine), 1.0 / 3.0);
}

// w0*ncc + w1*dsc_r + w2*dsc_s + w3*be over whichever terms are present.
template <typename T>
Var<T> joint_loss(Tape<T>& tp, const LossTerms<T>& terms, double w0, double w1, double w2,
                  double w3) {
    if (w0 < 0 || w1 < 0 || w2 < 0 || w3 < 0) throw ConfigError("negative loss weight");
    Var<T> total;
    auto acc = [&](Var<T> term, double w) {
        if (!term.valid() || w == 0.0) return;
        Var<T> t = ops::scale(tp, term, w);
        total = total.valid() ? ops::add(tp, total, t) : t;
    };
    acc(terms.ncc, w0);
    acc(terms.dsc_r, w1);
    acc(terms.dsc_s, w2);
    acc(terms.be, w3);
    if (!total.valid()) throw ConfigError("joint_loss: no active terms");
    return total;
}

using ops::add;
using ops::scale;

}  // namespace regseg::losses
