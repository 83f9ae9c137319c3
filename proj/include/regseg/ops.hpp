#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "regseg/tape.hpp"

namespace regseg::ops {

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void check_binary_shapes(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b) && a.size() != 1 && b.size() != 1)
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

}  // namespace detail

template <typename T, typename Fwd, typename Bwd>
Var<T> binary_ew(Tape<T>& tp, const char* name, Var<T> a, Var<T> b, Fwd fwd, Bwd bwd) {
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    detail::check_binary_shapes(av, bv, name);
    const bool abc = av.size() == 1 && bv.size() != 1;
    const bool bbc = bv.size() == 1 && av.size() != 1;
    Tensor<T> out(abc ? bv.shape : av.shape);
    for (long long i = 0; i < out.size(); ++i)
        out[i] = fwd(av[abc ? 0 : i], bv[bbc ? 0 : i]);
    Var<T> r = tp.make(name, std::move(out), {a, b});
    tp.set_back(r, [&tp, a, b, r, abc, bbc, bwd]() {
        const Tensor<T>& g = tp.grad(r);
        const Tensor<T>& av2 = tp.value(a);
        const Tensor<T>& bv2 = tp.value(b);
        Tensor<T>& ga = tp.grad(a);
        Tensor<T>& gb = tp.grad(b);
        for (long long i = 0; i < g.size(); ++i) {
            T da, db;
            bwd(av2[abc ? 0 : i], bv2[bbc ? 0 : i], g[i], da, db);
            ga[abc ? 0 : i] += da;
            gb[bbc ? 0 : i] += db;
        }
    });
    return r;
}

template <typename T>
Var<T> add(Tape<T>& tp, Var<T> a, Var<T> b) {
    return binary_ew(tp, "add", a, b, [](T x, T y) { return x + y; },
                     [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Var<T> sub(Tape<T>& tp, Var<T> a, Var<T> b) {
    return binary_ew(tp, "sub", a, b, [](T x, T y) { return x - y; },
                     [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Var<T> mul(Tape<T>& tp, Var<T> a, Var<T> b) {
    return binary_ew(tp, "mul", a, b, [](T x, T y) { return x * y; },
                     [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Var<T> scale(Tape<T>& tp, Var<T> a, double c) {
    const Tensor<T>& av = tp.value(a);
    Tensor<T> out(av.shape);
    for (long long i = 0; i < out.size(); ++i) out[i] = static_cast<T>(c) * av[i];
    Var<T> r = tp.make("scale", std::move(out), {a});
    tp.set_back(r, [&tp, a, r, c]() {
        const Tensor<T>& g = tp.grad(r);
        Tensor<T>& ga = tp.grad(a);
        for (long long i = 0; i < g.size(); ++i) ga[i] += static_cast<T>(c) * g[i];
    });
    return r;
}

template <typename T>
Var<T> offset(Tape<T>& tp, Var<T> a, double c) {
    const Tensor<T>& av = tp.value(a);
    Tensor<T> out(av.shape);
    for (long long i = 0; i < out.size(); ++i) out[i] = av[i] + static_cast<T>(c);
    Var<T> r = tp.make("offset", std::move(out), {a});
    tp.set_back(r, [&tp, a, r]() {
        const Tensor<T>& g = tp.grad(r);
        Tensor<T>& ga = tp.grad(a);
        for (long long i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return r;
}

template <typename T>
Var<T> exp_op(Tape<T>& tp, Var<T> a) {
    const Tensor<T>& av = tp.value(a);
    Tensor<T> out(av.shape);
    for (long long i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    Var<T> r = tp.make("exp", std::move(out), {a});
    tp.set_back(r, [&tp, a, r]() {
        const Tensor<T>& g = tp.grad(r);
        const Tensor<T>& ov = tp.value(r);
        Tensor<T>& ga = tp.grad(a);
        for (long long i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
    });
    return r;
}

template <typename T>
Var<T> sum(Tape<T>& tp, Var<T> a) {
    const Tensor<T>& av = tp.value(a);
    double acc = 0;
    for (long long i = 0; i < av.size(); ++i) acc += static_cast<double>(av[i]);
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc);
    Var<T> r = tp.make("sum", std::move(out), {a});
    tp.set_back(r, [&tp, a, r]() {
        const T g = tp.grad(r)[0];
        Tensor<T>& ga = tp.grad(a);
        for (long long i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    return r;
}

template <typename T>
Var<T> mean(Tape<T>& tp, Var<T> a) {
    long long n = tp.value(a).size();
    return scale(tp, sum(tp, a), 1.0 / static_cast<double>(n));
}

template <typename T>
Var<T> leaky_relu(Tape<T>& tp, Var<T> a, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) throw ConfigError("leaky_relu slope must be in (0,1)");
    const Tensor<T>& av = tp.value(a);
    Tensor<T> out(av.shape);
    const T s = static_cast<T>(slope);
    for (long long i = 0; i < out.size(); ++i) {
        T x = av[i];
        out[i] = x >= T(0) ? x : s * x;
    }
    Var<T> r = tp.make("leaky_relu", std::move(out), {a});
    tp.set_back(r, [&tp, a, r, s]() {
        const Tensor<T>& g = tp.grad(r);
        const Tensor<T>& av2 = tp.value(a);
        Tensor<T>& ga = tp.grad(a);
        for (long long i = 0; i < g.size(); ++i) ga[i] += av2[i] >= T(0) ? g[i] : s * g[i];
    });
    return r;
}

// ---------------------------------------------------------------------------
// 3D valid convolution, cubic kernel 1 or 3, stride 1 or 2
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride) { return (in - k) / stride + 1; }

namespace detail {

// Splits each row into even/odd columns so stride-2 kernels can run on
// contiguous data; the extra tail entries stay zero.
template <typename T>
void deinterleave_rows(const Tensor<T>& in, Tensor<T>& ev, Tensor<T>& od) {
    const int C = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int Wh = W / 2 + 2;
    ev = Tensor<T>({C, D, H, Wh});
    od = Tensor<T>({C, D, H, Wh});
    const long long rows = static_cast<long long>(C) * D * H;
    for (long long r = 0; r < rows; ++r) {
        const T* src = in.ptr() + r * W;
        T* e = ev.ptr() + r * Wh;
        T* o = od.ptr() + r * Wh;
        for (int x = 0; x + 1 < W; x += 2) {
            e[x / 2] = src[x];
            o[x / 2] = src[x + 1];
        }
        if (W % 2) e[W / 2] = src[W - 1];
    }
}

// Nine-tap row dot products for the weight gradient: av/at accumulate
// grad-row x input-row products for one (kz) slab across many rows.
template <typename T>
struct Taps9 {
    const T* p[9];
};

template <typename T, int L>
inline void dot9_block(const Taps9<T>& t, const T* __restrict__ grow, int& ox, int ow,
                       T av[9][16]) {
    const T* __restrict__ p0 = t.p[0];
    const T* __restrict__ p1 = t.p[1];
    const T* __restrict__ p2 = t.p[2];
    const T* __restrict__ p3 = t.p[3];
    const T* __restrict__ p4 = t.p[4];
    const T* __restrict__ p5 = t.p[5];
    const T* __restrict__ p6 = t.p[6];
    const T* __restrict__ p7 = t.p[7];
    const T* __restrict__ p8 = t.p[8];
    for (; ox + L <= ow; ox += L) {
#pragma omp simd
        for (int l = 0; l < L; ++l) {
            const T gv = grow[ox + l];
            av[0][l] += gv * p0[ox + l];
            av[1][l] += gv * p1[ox + l];
            av[2][l] += gv * p2[ox + l];
            av[3][l] += gv * p3[ox + l];
            av[4][l] += gv * p4[ox + l];
            av[5][l] += gv * p5[ox + l];
            av[6][l] += gv * p6[ox + l];
            av[7][l] += gv * p7[ox + l];
            av[8][l] += gv * p8[ox + l];
        }
    }
}

template <typename T>
inline void dot9_rows(const Taps9<T>& t, const T* grow, int ow, T av[9][16], T at[9]) {
    int ox = 0;
    dot9_block<T, 16>(t, grow, ox, ow, av);
    dot9_block<T, 8>(t, grow, ox, ow, av);
    dot9_block<T, 4>(t, grow, ox, ow, av);
    for (; ox < ow; ++ox) {
        const T gv = grow[ox];
        for (int j = 0; j < 9; ++j) at[j] += gv * t.p[j][ox];
    }
}

// Channels-last path for 3^3 kernels on channel-rich tensors: with the
// channel axis contiguous, every inner loop is a dense FMA over channels and
// stride handling is uniform. Transposing in and out costs one pass each,
// which the deeper layers amortise easily; channel-poor inputs (first
// encoder convs) stay on the row-blocked path above.
constexpr int kChanLastMax = 128;    // accumulator capacity, channels
constexpr int kChanLastMinCi = 16;   // below this the transposes don't pay

// [C, sp] -> [sp, C]
template <typename T>
void chanlast_pack(const T* src, int C, long long sp, T* dst) {
    for (int c = 0; c < C; ++c) {
        const T* s = src + static_cast<long long>(c) * sp;
        T* d = dst + c;
        for (long long i = 0; i < sp; ++i) d[i * C] = s[i];
    }
}

// [sp, C] -> [C, sp], adding into dst
template <typename T>
void chanlast_unpack_add(const T* src, int C, long long sp, T* dst) {
    for (int c = 0; c < C; ++c) {
        const T* s = src + c;
        T* d = dst + static_cast<long long>(c) * sp;
        for (long long i = 0; i < sp; ++i) d[i] += s[i * C];
    }
}

template <typename T>
void chanlast_fwd(const T* inT, const T* wT, const T* b, T* outT, int ci, int co, int H,
                  int W, int OD, int OH, int OW, int s) {
    T acc[4][kChanLastMax];
    for (int oz = 0; oz < OD; ++oz)
        for (int oy = 0; oy < OH; ++oy)
            for (int ox0 = 0; ox0 < OW; ox0 += 4) {
                const int nb = OW - ox0 < 4 ? OW - ox0 : 4;
                for (int j = 0; j < nb; ++j)
                    for (int c = 0; c < co; ++c) acc[j][c] = b[c];
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const T* wrow0 = wT + ((kz * 3 + ky) * 3 + kx) * ci * co;
                            const T* inb =
                                inT + ((static_cast<long long>(oz * s + kz) * H + oy * s + ky) *
                                           W +
                                       ox0 * s + kx) *
                                          ci;
                            if (nb == 4) {
                                T* __restrict__ a0 = acc[0];
                                T* __restrict__ a1 = acc[1];
                                T* __restrict__ a2 = acc[2];
                                T* __restrict__ a3 = acc[3];
                                for (int ic = 0; ic < ci; ++ic) {
                                    const T* __restrict__ wrow = wrow0 + ic * co;
                                    const T v0 = inb[ic];
                                    const T v1 = inb[s * ci + ic];
                                    const T v2 = inb[2 * s * ci + ic];
                                    const T v3 = inb[3 * s * ci + ic];
#pragma omp simd
                                    for (int c = 0; c < co; ++c) {
                                        a0[c] += v0 * wrow[c];
                                        a1[c] += v1 * wrow[c];
                                        a2[c] += v2 * wrow[c];
                                        a3[c] += v3 * wrow[c];
                                    }
                                }
                            } else {
                                for (int ic = 0; ic < ci; ++ic) {
                                    const T* __restrict__ wrow = wrow0 + ic * co;
                                    for (int j = 0; j < nb; ++j) {
                                        const T v = inb[j * s * ci + ic];
                                        T* __restrict__ a = acc[j];
#pragma omp simd
                                        for (int c = 0; c < co; ++c) a[c] += v * wrow[c];
                                    }
                                }
                            }
                        }
                for (int j = 0; j < nb; ++j) {
                    T* orow = outT + ((static_cast<long long>(oz) * OH + oy) * OW + ox0 + j) * co;
                    for (int c = 0; c < co; ++c) orow[c] = acc[j][c];
                }
            }
}

// gw layout matches the weight tensor, [co][ci][3][3][3]
template <typename T>
void chanlast_wgrad(const T* inT, const T* gT, T* gw, int ci, int co, int H, int W, int OD,
                    int OH, int OW, int s) {
    T acc[4][kChanLastMax];
    for (int kz = 0; kz < 3; ++kz)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const int tap = (kz * 3 + ky) * 3 + kx;
                for (int ic0 = 0; ic0 < ci; ic0 += 4) {
                    const int nb = ci - ic0 < 4 ? ci - ic0 : 4;
                    for (int j = 0; j < nb; ++j)
                        for (int c = 0; c < co; ++c) acc[j][c] = T(0);
                    for (int oz = 0; oz < OD; ++oz)
                        for (int oy = 0; oy < OH; ++oy) {
                            const T* __restrict__ grow =
                                gT + (static_cast<long long>(oz) * OH + oy) * OW * co;
                            const T* irow =
                                inT + ((static_cast<long long>(oz * s + kz) * H + oy * s + ky) *
                                           W +
                                       kx) *
                                          ci +
                                ic0;
                            if (nb == 4) {
                                T* __restrict__ a0 = acc[0];
                                T* __restrict__ a1 = acc[1];
                                T* __restrict__ a2 = acc[2];
                                T* __restrict__ a3 = acc[3];
                                for (int ox = 0; ox < OW; ++ox) {
                                    const T* iv = irow + static_cast<long long>(ox) * s * ci;
                                    const T v0 = iv[0], v1 = iv[1], v2 = iv[2], v3 = iv[3];
                                    const T* __restrict__ gr = grow + ox * co;
#pragma omp simd
                                    for (int c = 0; c < co; ++c) {
                                        a0[c] += v0 * gr[c];
                                        a1[c] += v1 * gr[c];
                                        a2[c] += v2 * gr[c];
                                        a3[c] += v3 * gr[c];
                                    }
                                }
                            } else {
                                for (int ox = 0; ox < OW; ++ox) {
                                    const T* iv = irow + static_cast<long long>(ox) * s * ci;
                                    const T* __restrict__ gr = grow + ox * co;
                                    for (int j = 0; j < nb; ++j) {
                                        const T v = iv[j];
                                        T* __restrict__ a = acc[j];
#pragma omp simd
                                        for (int c = 0; c < co; ++c) a[c] += v * gr[c];
                                    }
                                }
                            }
                        }
                    for (int j = 0; j < nb; ++j)
                        for (int c = 0; c < co; ++c)
                            gw[(static_cast<long long>(c) * ci + ic0 + j) * 27 + tap] +=
                                acc[j][c];
                }
            }
}

// wT2 layout [tap][oc][ic]; ginT accumulates in channels-last layout
template <typename T>
void chanlast_igrad(const T* gT, const T* wT2, T* ginT, int ci, int co, int H, int W, int OD,
                    int OH, int OW, int s) {
    T acc[2][kChanLastMax];
    for (int oz = 0; oz < OD; ++oz)
        for (int oy = 0; oy < OH; ++oy)
            for (int ox0 = 0; ox0 < OW; ox0 += 2) {
                const int nb = OW - ox0 < 2 ? OW - ox0 : 2;
                const T* __restrict__ g0 =
                    gT + ((static_cast<long long>(oz) * OH + oy) * OW + ox0) * co;
                const T* __restrict__ g1 = g0 + co;
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const T* wt = wT2 + ((kz * 3 + ky) * 3 + kx) * co * ci;
                            T* __restrict__ a0 = acc[0];
                            T* __restrict__ a1 = acc[1];
                            for (int c = 0; c < ci; ++c) a0[c] = a1[c] = T(0);
                            if (nb == 2) {
                                for (int oc = 0; oc < co; ++oc) {
                                    const T v0 = g0[oc], v1 = g1[oc];
                                    const T* __restrict__ wr = wt + oc * ci;
#pragma omp simd
                                    for (int c = 0; c < ci; ++c) {
                                        a0[c] += v0 * wr[c];
                                        a1[c] += v1 * wr[c];
                                    }
                                }
                            } else {
                                for (int oc = 0; oc < co; ++oc) {
                                    const T v0 = g0[oc];
                                    const T* __restrict__ wr = wt + oc * ci;
#pragma omp simd
                                    for (int c = 0; c < ci; ++c) a0[c] += v0 * wr[c];
                                }
                            }
                            for (int j = 0; j < nb; ++j) {
                                T* __restrict__ girow =
                                    ginT + ((static_cast<long long>(oz * s + kz) * H + oy * s +
                                             ky) *
                                                W +
                                            (ox0 + j) * s + kx) *
                                               ci;
                                const T* __restrict__ a = acc[j];
                                for (int c = 0; c < ci; ++c) girow[c] += a[c];
                            }
                        }
            }
}

}  // namespace detail

template <typename T>
Var<T> conv3d(Tape<T>& tp, Var<T> input, Var<T> weight, Var<T> bias, int stride) {
    const Tensor<T>& in = tp.value(input);
    const Tensor<T>& w = tp.value(weight);
    const Tensor<T>& b = tp.value(bias);
    if (in.rank() != 4) throw ShapeError("conv3d input must be [C,D,H,W]");
    if (w.rank() != 5) throw ShapeError("conv3d weight must be [Co,Ci,k,k,k]");
    const int ci = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci)
        throw ShapeError("conv3d channel mismatch: input " + std::to_string(ci) + " vs weight " +
                         std::to_string(w.dim(1)));
    if (k != 1 && k != 3) throw ConfigError("conv3d supports kernel 1 or 3");
    if (w.dim(3) != k || w.dim(4) != k) throw ShapeError("conv3d kernel must be cubic");
    if (stride != 1 && stride != 2) throw ConfigError("conv3d stride must be 1 or 2");
    if (D < k || H < k || W < k)
        throw SizeError("conv3d spatial extent " + shape_str({D, H, W}) + " below kernel " +
                        std::to_string(k));
    if (b.size() != co) throw ShapeError("conv3d bias length mismatch");
    const int OD = conv_out_extent(D, k, stride);
    const int OH = conv_out_extent(H, k, stride);
    const int OW = conv_out_extent(W, k, stride);

    Tensor<T> out({co, OD, OH, OW});
    const long long isp = static_cast<long long>(D) * H * W;
    const long long osp = static_cast<long long>(OD) * OH * OW;
    const bool chanlast = k == 3 && ci >= detail::kChanLastMinCi &&
                          ci <= detail::kChanLastMax && co <= detail::kChanLastMax;
    if (chanlast) {
        std::vector<T> inT(static_cast<size_t>(isp) * ci);
        detail::chanlast_pack(in.ptr(), ci, isp, inT.data());
        std::vector<T> wT(static_cast<size_t>(27) * ci * co);  // [tap][ic][oc]
        for (int oc = 0; oc < co; ++oc)
            for (int ic = 0; ic < ci; ++ic)
                for (int t = 0; t < 27; ++t)
                    wT[(static_cast<size_t>(t) * ci + ic) * co + oc] =
                        w[(static_cast<long long>(oc) * ci + ic) * 27 + t];
        std::vector<T> outT(static_cast<size_t>(osp) * co);
        detail::chanlast_fwd(inT.data(), wT.data(), b.ptr(), outT.data(), ci, co, H, W, OD,
                             OH, OW, stride);
        detail::chanlast_unpack_add(outT.data(), co, osp, out.ptr());
    } else {
    // Row-blocked: one output row accumulates in L1 across the whole
    // (ic, kz, ky, kx) reduction, so main-memory traffic is one write per
    // output element instead of 27*ci read-modify-writes. The stride-1 3^3
    // path additionally fuses all nine (ky,kx) taps into one sweep.
    std::vector<T> accbuf(static_cast<size_t>(OW));
    Tensor<T> inev, inod;  // even/odd column split, stride-2 fast path only
    if (k == 3 && stride == 2) detail::deinterleave_rows(in, inev, inod);
    const long long hsp =
        inev.size() > 0 ? static_cast<long long>(D) * H * inev.dim(3) : 0;
    for (int oc = 0; oc < co; ++oc) {
        T* ob = out.ptr() + oc * osp;
        const T bv = b[oc];
        for (int oz = 0; oz < OD; ++oz) {
            const int iz0 = oz * stride;
            for (int oy = 0; oy < OH; ++oy) {
                const int iy0 = oy * stride;
                T* __restrict__ acc = accbuf.data();
                for (int ox = 0; ox < OW; ++ox) acc[ox] = bv;
                for (int ic = 0; ic < ci; ++ic) {
                    const T* ib = in.ptr() + ic * isp;
                    const T* wb = w.ptr() + (static_cast<long long>(oc) * ci + ic) * k * k * k;
                    if (k == 3 && stride == 2) {
                        const int Wh = inev.dim(3);
                        for (int kz = 0; kz < 3; ++kz) {
                            const long long rb =
                                ic * hsp + (static_cast<long long>(iz0 + kz) * H + iy0) * Wh;
                            const T* __restrict__ r0e = inev.ptr() + rb;
                            const T* __restrict__ r1e = r0e + Wh;
                            const T* __restrict__ r2e = r1e + Wh;
                            const T* __restrict__ r0o = inod.ptr() + rb;
                            const T* __restrict__ r1o = r0o + Wh;
                            const T* __restrict__ r2o = r1o + Wh;
                            const T* wr = wb + kz * 9;
                            const T w00 = wr[0], w01 = wr[1], w02 = wr[2];
                            const T w10 = wr[3], w11 = wr[4], w12 = wr[5];
                            const T w20 = wr[6], w21 = wr[7], w22 = wr[8];
                            for (int ox = 0; ox < OW; ++ox)
                                acc[ox] += w00 * r0e[ox] + w01 * r0o[ox] + w02 * r0e[ox + 1] +
                                           w10 * r1e[ox] + w11 * r1o[ox] + w12 * r1e[ox + 1] +
                                           w20 * r2e[ox] + w21 * r2o[ox] + w22 * r2e[ox + 1];
                        }
                    } else if (k == 3 && stride == 1) {
                        for (int kz = 0; kz < 3; ++kz) {
                            const T* __restrict__ r0 =
                                ib + (static_cast<long long>(oz + kz) * H + oy) * W;
                            const T* __restrict__ r1 = r0 + W;
                            const T* __restrict__ r2 = r1 + W;
                            const T* wr = wb + kz * 9;
                            const T w00 = wr[0], w01 = wr[1], w02 = wr[2];
                            const T w10 = wr[3], w11 = wr[4], w12 = wr[5];
                            const T w20 = wr[6], w21 = wr[7], w22 = wr[8];
                            for (int ox = 0; ox < OW; ++ox)
                                acc[ox] += w00 * r0[ox] + w01 * r0[ox + 1] + w02 * r0[ox + 2] +
                                           w10 * r1[ox] + w11 * r1[ox + 1] + w12 * r1[ox + 2] +
                                           w20 * r2[ox] + w21 * r2[ox + 1] + w22 * r2[ox + 2];
                        }
                    } else {
                        for (int kz = 0; kz < k; ++kz)
                            for (int ky = 0; ky < k; ++ky) {
                                const T* irow =
                                    ib + (static_cast<long long>(iz0 + kz) * H + iy0 + ky) * W;
                                const T* wrow = wb + (kz * k + ky) * k;
                                for (int kx = 0; kx < k; ++kx) {
                                    const T wv = wrow[kx];
                                    const T* __restrict__ ir = irow + kx;
                                    if (stride == 1) {
                                        for (int ox = 0; ox < OW; ++ox) acc[ox] += wv * ir[ox];
                                    } else {
                                        for (int ox = 0; ox < OW; ++ox)
                                            acc[ox] += wv * ir[2 * ox];
                                    }
                                }
                            }
                    }
                }
                T* orow = ob + (static_cast<long long>(oz) * OH + oy) * OW;
                for (int ox = 0; ox < OW; ++ox) orow[ox] = acc[ox];
            }
        }
    }
    }

    Var<T> r = tp.make("conv3d", std::move(out), {input, weight, bias});
    tp.set_back(r, [&tp, input, weight, bias, r, stride]() {
        const Tensor<T>& g = tp.grad(r);
        const Tensor<T>& in2 = tp.value(input);
        const Tensor<T>& w2 = tp.value(weight);
        Tensor<T>& gin = tp.grad(input);
        Tensor<T>& gw = tp.grad(weight);
        Tensor<T>& gb = tp.grad(bias);
        const int ci2 = in2.dim(0), D2 = in2.dim(1), H2 = in2.dim(2), W2 = in2.dim(3);
        const int co2 = w2.dim(0), k2 = w2.dim(2);
        const int OD2 = g.dim(1), OH2 = g.dim(2), OW2 = g.dim(3);
        const long long isp2 = static_cast<long long>(D2) * H2 * W2;
        const long long osp2 = static_cast<long long>(OD2) * OH2 * OW2;

        for (int oc = 0; oc < co2; ++oc) {
            const T* gout = g.ptr() + oc * osp2;
            double bacc = 0;
            for (long long i = 0; i < osp2; ++i) bacc += static_cast<double>(gout[i]);
            gb[oc] += static_cast<T>(bacc);
        }

        const bool chanlast = k2 == 3 && ci2 >= detail::kChanLastMinCi &&
                              ci2 <= detail::kChanLastMax && co2 <= detail::kChanLastMax;
        if (chanlast) {
            std::vector<T> inT(static_cast<size_t>(isp2) * ci2);
            detail::chanlast_pack(in2.ptr(), ci2, isp2, inT.data());
            std::vector<T> gT(static_cast<size_t>(osp2) * co2);
            detail::chanlast_pack(g.ptr(), co2, osp2, gT.data());
            detail::chanlast_wgrad(inT.data(), gT.data(), gw.ptr(), ci2, co2, H2, W2, OD2,
                                   OH2, OW2, stride);
            if (!tp.requires_grad(input)) return;
            std::vector<T> wT2(static_cast<size_t>(27) * ci2 * co2);  // [tap][oc][ic]
            for (int oc = 0; oc < co2; ++oc)
                for (int ic = 0; ic < ci2; ++ic)
                    for (int t = 0; t < 27; ++t)
                        wT2[(static_cast<size_t>(t) * co2 + oc) * ci2 + ic] =
                            w2[(static_cast<long long>(oc) * ci2 + ic) * 27 + t];
            std::vector<T> ginT(static_cast<size_t>(isp2) * ci2, T(0));
            detail::chanlast_igrad(gT.data(), wT2.data(), ginT.data(), ci2, co2, H2, W2, OD2,
                                   OH2, OW2, stride);
            detail::chanlast_unpack_add(ginT.data(), ci2, isp2, gin.ptr());
            return;
        }

        // weight gradients: dot products of grad rows and input rows;
        // vector partial sums persist across rows and fold once per sweep
        Tensor<T> inev, inod;
        if (k2 == 3 && stride == 2) detail::deinterleave_rows(in2, inev, inod);
        const long long hsp =
            inev.size() > 0 ? static_cast<long long>(D2) * H2 * inev.dim(3) : 0;
        for (int oc = 0; oc < co2; ++oc) {
            const T* gout = g.ptr() + oc * osp2;
            for (int ic = 0; ic < ci2; ++ic) {
                const T* ib = in2.ptr() + ic * isp2;
                const long long wbase = (static_cast<long long>(oc) * ci2 + ic) * k2 * k2 * k2;
                if (k2 == 3) {
                    const int Wh = inev.size() > 0 ? inev.dim(3) : 0;
                    for (int kz = 0; kz < 3; ++kz) {
                        T av[9][16] = {};
                        T at[9] = {};
                        for (int oz = 0; oz < OD2; ++oz)
                            for (int oy = 0; oy < OH2; ++oy) {
                                detail::Taps9<T> t;
                                if (stride == 2) {
                                    const long long rb =
                                        ic * hsp +
                                        (static_cast<long long>(2 * oz + kz) * H2 + 2 * oy) * Wh;
                                    const T* r0e = inev.ptr() + rb;
                                    const T* r0o = inod.ptr() + rb;
                                    t.p[0] = r0e;
                                    t.p[1] = r0o;
                                    t.p[2] = r0e + 1;
                                    t.p[3] = r0e + Wh;
                                    t.p[4] = r0o + Wh;
                                    t.p[5] = r0e + Wh + 1;
                                    t.p[6] = r0e + 2 * Wh;
                                    t.p[7] = r0o + 2 * Wh;
                                    t.p[8] = r0e + 2 * Wh + 1;
                                } else {
                                    const T* r0 =
                                        ib + (static_cast<long long>(oz + kz) * H2 + oy) * W2;
                                    t.p[0] = r0;
                                    t.p[1] = r0 + 1;
                                    t.p[2] = r0 + 2;
                                    t.p[3] = r0 + W2;
                                    t.p[4] = r0 + W2 + 1;
                                    t.p[5] = r0 + W2 + 2;
                                    t.p[6] = r0 + 2 * W2;
                                    t.p[7] = r0 + 2 * W2 + 1;
                                    t.p[8] = r0 + 2 * W2 + 2;
                                }
                                const T* grow =
                                    gout + (static_cast<long long>(oz) * OH2 + oy) * OW2;
                                detail::dot9_rows(t, grow, OW2, av, at);
                            }
                        for (int j = 0; j < 9; ++j) {
                            T s = at[j];
                            for (int l = 0; l < 16; ++l) s += av[j][l];
                            gw[wbase + kz * 9 + j] += s;
                        }
                    }
                } else {
                    for (int kz = 0; kz < k2; ++kz)
                        for (int ky = 0; ky < k2; ++ky)
                            for (int kx = 0; kx < k2; ++kx) {
                                T av[16] = {};
                                T at = 0;
                                for (int oz = 0; oz < OD2; ++oz) {
                                    const int iz = oz * stride + kz;
                                    for (int oy = 0; oy < OH2; ++oy) {
                                        const int iy = oy * stride + ky;
                                        const T* __restrict__ irow =
                                            ib + (static_cast<long long>(iz) * H2 + iy) * W2 + kx;
                                        const T* __restrict__ grow =
                                            gout + (static_cast<long long>(oz) * OH2 + oy) * OW2;
                                        int ox = 0;
                                        for (; ox + 16 <= OW2; ox += 16) {
#pragma omp simd
                                            for (int l = 0; l < 16; ++l)
                                                av[l] += grow[ox + l] * irow[(ox + l) * stride];
                                        }
                                        for (; ox < OW2; ++ox) at += grow[ox] * irow[ox * stride];
                                    }
                                }
                                for (int l = 0; l < 16; ++l) at += av[l];
                                gw[wbase + (kz * k2 + ky) * k2 + kx] += at;
                            }
                }
            }
        }

        if (!tp.requires_grad(input)) return;

        // input gradient
        if (k2 == 1 && stride == 1) {
            // 1x1x1: plain channel mixing, gin[ic] += w[oc][ic] * gout[oc]
            for (int oc = 0; oc < co2; ++oc) {
                const T* __restrict__ gout = g.ptr() + oc * osp2;
                for (int ic = 0; ic < ci2; ++ic) {
                    const T wv = w2[static_cast<long long>(oc) * ci2 + ic];
                    T* __restrict__ gib = gin.ptr() + ic * isp2;
                    for (long long i = 0; i < osp2; ++i) gib[i] += wv * gout[i];
                }
            }
        } else if (k2 == 3 && stride == 1) {
            // Full correlation as a fused conv over the zero-padded gradient
            // with the flipped kernel, reusing the forward's 9-tap shape.
            const int PD = OD2 + 4, PH = OH2 + 4, PW = OW2 + 4;
            std::vector<T> padbuf(static_cast<size_t>(PD) * PH * PW);
            std::vector<T> accbuf(static_cast<size_t>(W2));
            for (int oc = 0; oc < co2; ++oc) {
                std::fill(padbuf.begin(), padbuf.end(), T(0));
                const T* gout = g.ptr() + oc * osp2;
                for (int oz = 0; oz < OD2; ++oz)
                    for (int oy = 0; oy < OH2; ++oy)
                        std::copy(gout + (static_cast<long long>(oz) * OH2 + oy) * OW2,
                                  gout + (static_cast<long long>(oz) * OH2 + oy) * OW2 + OW2,
                                  padbuf.begin() +
                                      ((static_cast<long long>(oz) + 2) * PH + oy + 2) * PW + 2);
                for (int ic = 0; ic < ci2; ++ic) {
                    const long long wbase =
                        (static_cast<long long>(oc) * ci2 + ic) * 27;
                    T wf[27];
                    for (int kz = 0; kz < 3; ++kz)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx)
                                wf[(kz * 3 + ky) * 3 + kx] =
                                    w2[wbase + ((2 - kz) * 3 + (2 - ky)) * 3 + (2 - kx)];
                    T* gib = gin.ptr() + ic * isp2;
                    for (int iz = 0; iz < D2; ++iz)
                        for (int iy = 0; iy < H2; ++iy) {
                            T* __restrict__ acc = accbuf.data();
                            for (int x = 0; x < W2; ++x) acc[x] = 0;
                            for (int kz = 0; kz < 3; ++kz) {
                                const T* __restrict__ r0 =
                                    padbuf.data() +
                                    (static_cast<long long>(iz + kz) * PH + iy) * PW;
                                const T* __restrict__ r1 = r0 + PW;
                                const T* __restrict__ r2 = r1 + PW;
                                const T* wr = wf + kz * 9;
                                const T w00 = wr[0], w01 = wr[1], w02 = wr[2];
                                const T w10 = wr[3], w11 = wr[4], w12 = wr[5];
                                const T w20 = wr[6], w21 = wr[7], w22 = wr[8];
                                for (int x = 0; x < W2; ++x)
                                    acc[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2] +
                                              w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2] +
                                              w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2];
                            }
                            T* girow = gib + (static_cast<long long>(iz) * H2 + iy) * W2;
                            for (int x = 0; x < W2; ++x) girow[x] += acc[x];
                        }
                }
            }
        } else if (k2 == 3 && stride == 2) {
            // Accumulate even/odd target columns in contiguous row buffers,
            // interleaving back once per input row.
            std::vector<T> evbuf(static_cast<size_t>(OW2) + 2), odbuf(static_cast<size_t>(OW2) + 2);
            for (int ic = 0; ic < ci2; ++ic) {
                T* gib = gin.ptr() + ic * isp2;
                for (int iz = 0; iz < D2; ++iz)
                    for (int iy = 0; iy < H2; ++iy) {
                        T* __restrict__ accE = evbuf.data();
                        T* __restrict__ accO = odbuf.data();
                        for (size_t j = 0; j < evbuf.size(); ++j) accE[j] = accO[j] = 0;
                        bool any = false;
                        for (int oc = 0; oc < co2; ++oc) {
                            const T* gout = g.ptr() + oc * osp2;
                            const long long wbase =
                                (static_cast<long long>(oc) * ci2 + ic) * 27;
                            for (int kz = 0; kz < 3; ++kz) {
                                const int tz = iz - kz;
                                if (tz < 0 || tz % 2 || tz / 2 >= OD2) continue;
                                const int oz = tz / 2;
                                for (int ky = 0; ky < 3; ++ky) {
                                    const int ty = iy - ky;
                                    if (ty < 0 || ty % 2 || ty / 2 >= OH2) continue;
                                    const int oy = ty / 2;
                                    const T* __restrict__ grow =
                                        gout + (static_cast<long long>(oz) * OH2 + oy) * OW2;
                                    const T* wrow = w2.ptr() + wbase + (kz * 3 + ky) * 3;
                                    const T w0 = wrow[0], w1 = wrow[1], w2v = wrow[2];
                                    any = true;
                                    T* __restrict__ accE1 = accE + 1;
                                    for (int ox = 0; ox < OW2; ++ox) accE[ox] += w0 * grow[ox];
                                    for (int ox = 0; ox < OW2; ++ox) accE1[ox] += w2v * grow[ox];
                                    for (int ox = 0; ox < OW2; ++ox) accO[ox] += w1 * grow[ox];
                                }
                            }
                        }
                        if (!any) continue;
                        T* girow = gib + (static_cast<long long>(iz) * H2 + iy) * W2;
                        for (int e = 0; 2 * e < W2; ++e) girow[2 * e] += accE[e];
                        for (int o = 0; 2 * o + 1 < W2; ++o) girow[2 * o + 1] += accO[o];
                    }
            }
        } else {
            for (int oc = 0; oc < co2; ++oc) {
                const T* gout = g.ptr() + oc * osp2;
                for (int ic = 0; ic < ci2; ++ic) {
                    T* gib = gin.ptr() + ic * isp2;
                    const long long wbase =
                        (static_cast<long long>(oc) * ci2 + ic) * k2 * k2 * k2;
                    for (int kz = 0; kz < k2; ++kz)
                        for (int ky = 0; ky < k2; ++ky)
                            for (int kx = 0; kx < k2; ++kx) {
                                const T wv = w2[wbase + (kz * k2 + ky) * k2 + kx];
                                for (int oz = 0; oz < OD2; ++oz) {
                                    const int iz = oz * stride + kz;
                                    for (int oy = 0; oy < OH2; ++oy) {
                                        const int iy = oy * stride + ky;
                                        T* girow = gib +
                                                   (static_cast<long long>(iz) * H2 + iy) * W2 +
                                                   kx;
                                        const T* grow =
                                            gout + (static_cast<long long>(oz) * OH2 + oy) * OW2;
                                        for (int ox = 0; ox < OW2; ++ox)
                                            girow[2 * ox] += wv * grow[ox];
                                    }
                                }
                            }
                }
            }
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// Trilinear upsampling, factor exactly 2, half-pixel centers, clamped
// ---------------------------------------------------------------------------

namespace detail {

struct LinSample {
    int i0, i1;
    double w1;  // weight of i1; weight of i0 is 1-w1
};

inline std::vector<LinSample> upsample_axis(int in_len) {
    std::vector<LinSample> s(static_cast<size_t>(2 * in_len));
    for (int o = 0; o < 2 * in_len; ++o) {
        double src = (o + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        if (src > in_len - 1) src = in_len - 1;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in_len - 2) i0 = std::max(0, in_len - 2);
        double t = src - i0;
        int i1 = std::min(i0 + 1, in_len - 1);
        s[static_cast<size_t>(o)] = {i0, i1, t};
    }
    return s;
}

}  // namespace detail

template <typename T>
Var<T> trilinear_upsample2x(Tape<T>& tp, Var<T> input) {
    const Tensor<T>& in = tp.value(input);
    if (in.rank() != 4) throw ShapeError("trilinear_upsample2x input must be [C,D,H,W]");
    const int C = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
    auto sz = detail::upsample_axis(D);
    auto sy = detail::upsample_axis(H);
    auto sx = detail::upsample_axis(W);
    Tensor<T> out({C, 2 * D, 2 * H, 2 * W});
    const long long isp = static_cast<long long>(D) * H * W;
    const long long osp = 8LL * isp;
    for (int c = 0; c < C; ++c) {
        const T* ib = in.ptr() + c * isp;
        T* ob = out.ptr() + c * osp;
        for (int oz = 0; oz < 2 * D; ++oz) {
            const auto& az = sz[static_cast<size_t>(oz)];
            for (int oy = 0; oy < 2 * H; ++oy) {
                const auto& ay = sy[static_cast<size_t>(oy)];
                const T* r00 = ib + (static_cast<long long>(az.i0) * H + ay.i0) * W;
                const T* r01 = ib + (static_cast<long long>(az.i0) * H + ay.i1) * W;
                const T* r10 = ib + (static_cast<long long>(az.i1) * H + ay.i0) * W;
                const T* r11 = ib + (static_cast<long long>(az.i1) * H + ay.i1) * W;
                const double wz1 = az.w1, wy1 = ay.w1;
                T* orow = ob + (static_cast<long long>(oz) * 2 * H + oy) * 2 * W;
                for (int ox = 0; ox < 2 * W; ++ox) {
                    const auto& ax = sx[static_cast<size_t>(ox)];
                    const double wx1 = ax.w1;
                    double v =
                        (1 - wz1) * ((1 - wy1) * ((1 - wx1) * r00[ax.i0] + wx1 * r00[ax.i1]) +
                                     wy1 * ((1 - wx1) * r01[ax.i0] + wx1 * r01[ax.i1])) +
                        wz1 * ((1 - wy1) * ((1 - wx1) * r10[ax.i0] + wx1 * r10[ax.i1]) +
                               wy1 * ((1 - wx1) * r11[ax.i0] + wx1 * r11[ax.i1]));
                    orow[ox] = static_cast<T>(v);
                }
            }
        }
    }
    Var<T> r = tp.make("trilinear_upsample2x", std::move(out), {input});
    tp.set_back(r, [&tp, input, r]() {
        const Tensor<T>& g = tp.grad(r);
        Tensor<T>& gin = tp.grad(input);
        const int C2 = gin.dim(0), D2 = gin.dim(1), H2 = gin.dim(2), W2 = gin.dim(3);
        auto sz2 = detail::upsample_axis(D2);
        auto sy2 = detail::upsample_axis(H2);
        auto sx2 = detail::upsample_axis(W2);
        const long long isp2 = static_cast<long long>(D2) * H2 * W2;
        const long long osp2 = 8LL * isp2;
        for (int c = 0; c < C2; ++c) {
            T* gib = gin.ptr() + c * isp2;
            const T* gob = g.ptr() + c * osp2;
            for (int oz = 0; oz < 2 * D2; ++oz) {
                const auto& az = sz2[static_cast<size_t>(oz)];
                for (int oy = 0; oy < 2 * H2; ++oy) {
                    const auto& ay = sy2[static_cast<size_t>(oy)];
                    const T* grow = gob + (static_cast<long long>(oz) * 2 * H2 + oy) * 2 * W2;
                    for (int ox = 0; ox < 2 * W2; ++ox) {
                        const auto& ax = sx2[static_cast<size_t>(ox)];
                        const double gv = grow[ox];
                        const double wz[2] = {1 - az.w1, az.w1};
                        const double wy[2] = {1 - ay.w1, ay.w1};
                        const double wx[2] = {1 - ax.w1, ax.w1};
                        const int zi[2] = {az.i0, az.i1}, yi[2] = {ay.i0, ay.i1},
                                  xi[2] = {ax.i0, ax.i1};
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b)
                                for (int c3 = 0; c3 < 2; ++c3)
                                    gib[(static_cast<long long>(zi[a]) * H2 + yi[b]) * W2 +
                                        xi[c3]] += static_cast<T>(gv * wz[a] * wy[b] * wx[c3]);
                    }
                }
            }
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// Batch normalization (stats per channel over all remaining axes)
// ---------------------------------------------------------------------------

enum class BnMode { train, eval };

// running_mean/running_var persist outside the tape and are updated in train
// mode with the given momentum. Gradients flow to input, gamma and beta.
template <typename T>
Var<T> batch_norm(Tape<T>& tp, Var<T> input, Var<T> gamma, Var<T> beta, Tensor<T>* running_mean,
                  Tensor<T>* running_var, BnMode mode, double eps = 1e-5, double momentum = 0.9) {
    const Tensor<T>& in = tp.value(input);
    if (in.rank() < 2) throw ShapeError("batch_norm input must be [C,...]");
    const int C = in.dim(0);
    const long long S = in.size() / C;
    if (tp.value(gamma).size() != C || tp.value(beta).size() != C)
        throw ShapeError("batch_norm scale/shift length mismatch");
    if (running_mean->size() != C || running_var->size() != C)
        throw ShapeError("batch_norm running stats length mismatch");

    std::vector<double> mu(static_cast<size_t>(C)), var(static_cast<size_t>(C));
    if (mode == BnMode::train) {
        for (int c = 0; c < C; ++c) {
            const T* xb = in.ptr() + c * S;
            double m = 0;
            for (long long i = 0; i < S; ++i) m += static_cast<double>(xb[i]);
            m /= static_cast<double>(S);
            double v = 0;
            for (long long i = 0; i < S; ++i) {
                const double d = static_cast<double>(xb[i]) - m;
                v += d * d;
            }
            v /= static_cast<double>(S);
            mu[static_cast<size_t>(c)] = m;
            var[static_cast<size_t>(c)] = v;
            (*running_mean)[c] = static_cast<T>(momentum * (*running_mean)[c] + (1 - momentum) * m);
            (*running_var)[c] = static_cast<T>(momentum * (*running_var)[c] + (1 - momentum) * v);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mu[static_cast<size_t>(c)] = (*running_mean)[c];
            var[static_cast<size_t>(c)] = (*running_var)[c];
        }
    }

    Tensor<T> out(in.shape);
    const Tensor<T>& gam = tp.value(gamma);
    const Tensor<T>& bet = tp.value(beta);
    for (int c = 0; c < C; ++c) {
        const double inv = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
        const double gm = gam[c], bt = bet[c], m = mu[static_cast<size_t>(c)];
        const T* xb = in.ptr() + c * S;
        T* ob = out.ptr() + c * S;
        for (long long i = 0; i < S; ++i) ob[i] = static_cast<T>(gm * ((xb[i] - m) * inv) + bt);
    }

    Var<T> r = tp.make("batch_norm", std::move(out), {input, gamma, beta});
    tp.set_back(r, [&tp, input, gamma, beta, r, mu, var, eps, mode]() {
        const Tensor<T>& g = tp.grad(r);
        const Tensor<T>& in2 = tp.value(input);
        const Tensor<T>& gam2 = tp.value(gamma);
        Tensor<T>& gin = tp.grad(input);
        Tensor<T>& ggam = tp.grad(gamma);
        Tensor<T>& gbet = tp.grad(beta);
        const int C2 = in2.dim(0);
        const long long S2 = in2.size() / C2;
        for (int c = 0; c < C2; ++c) {
            const double m = mu[static_cast<size_t>(c)];
            const double inv = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
            const double gm = gam2[c];
            const T* xb = in2.ptr() + c * S2;
            const T* gb = g.ptr() + c * S2;
            T* gib = gin.ptr() + c * S2;
            double sum_g = 0, sum_gx = 0;
            for (long long i = 0; i < S2; ++i) {
                const double xh = (static_cast<double>(xb[i]) - m) * inv;
                sum_g += static_cast<double>(gb[i]);
                sum_gx += static_cast<double>(gb[i]) * xh;
            }
            ggam[c] += static_cast<T>(sum_gx);
            gbet[c] += static_cast<T>(sum_g);
            if (mode == BnMode::train) {
                const double mg = sum_g / static_cast<double>(S2);
                const double mgx = sum_gx / static_cast<double>(S2);
                for (long long i = 0; i < S2; ++i) {
                    const double xh = (static_cast<double>(xb[i]) - m) * inv;
                    gib[i] +=
                        static_cast<T>(gm * inv * (static_cast<double>(gb[i]) - mg - xh * mgx));
                }
            } else {
                for (long long i = 0; i < S2; ++i)
                    gib[i] += static_cast<T>(gm * inv * static_cast<double>(gb[i]));
            }
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// Channel concat, spatial center crop, channel softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_c(Tape<T>& tp, Var<T> a, Var<T> b) {
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    if (av.rank() != 4 || bv.rank() != 4 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3))
        throw ShapeError("concat_c: spatial shapes differ");
    Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2), av.dim(3)});
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.size());
    Var<T> r = tp.make("concat_c", std::move(out), {a, b});
    tp.set_back(r, [&tp, a, b, r]() {
        const Tensor<T>& g = tp.grad(r);
        Tensor<T>& ga = tp.grad(a);
        Tensor<T>& gb = tp.grad(b);
        for (long long i = 0; i < ga.size(); ++i) ga[i] += g[i];
        for (long long i = 0; i < gb.size(); ++i) gb[i] += g[ga.size() + i];
    });
    return r;
}

// Symmetric spatial center crop of [C,D,H,W] down to extent e per axis.
template <typename T>
Var<T> crop_center(Tape<T>& tp, Var<T> a, int e) {
    const Tensor<T>& av = tp.value(a);
    if (av.rank() != 4) throw ShapeError("crop_center input must be [C,D,H,W]");
    const int C = av.dim(0), D = av.dim(1), H = av.dim(2), W = av.dim(3);
    if (e > D || e > H || e > W) throw SizeError("crop_center target larger than input");
    const int oz = (D - e) / 2, oy = (H - e) / 2, ox = (W - e) / 2;
    Tensor<T> out({C, e, e, e});
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < e; ++z)
            for (int y = 0; y < e; ++y) {
                const T* src =
                    av.ptr() + ((static_cast<long long>(c) * D + z + oz) * H + y + oy) * W + ox;
                T* dst = out.ptr() + ((static_cast<long long>(c) * e + z) * e + y) * e;
                std::copy(src, src + e, dst);
            }
    Var<T> r = tp.make("crop_center", std::move(out), {a});
    tp.set_back(r, [&tp, a, r, e, oz, oy, ox]() {
        const Tensor<T>& g = tp.grad(r);
        Tensor<T>& ga = tp.grad(a);
        const int C2 = ga.dim(0), D2 = ga.dim(1), H2 = ga.dim(2), W2 = ga.dim(3);
        for (int c = 0; c < C2; ++c)
            for (int z = 0; z < e; ++z)
                for (int y = 0; y < e; ++y) {
                    T* dst = ga.ptr() +
                             ((static_cast<long long>(c) * D2 + z + oz) * H2 + y + oy) * W2 + ox;
                    const T* src = g.ptr() + ((static_cast<long long>(c) * e + z) * e + y) * e;
                    for (int x = 0; x < e; ++x) dst[x] += src[x];
                }
    });
    return r;
}

template <typename T>
Var<T> softmax_c(Tape<T>& tp, Var<T> a) {
    const Tensor<T>& av = tp.value(a);
    if (av.rank() < 2) throw ShapeError("softmax_c input must be [C,...]");
    const int C = av.dim(0);
    const long long S = av.size() / C;
    Tensor<T> out(av.shape);
    for (long long i = 0; i < S; ++i) {
        double mx = -1e300;
        for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(av[c * S + i]));
        double den = 0;
        for (int c = 0; c < C; ++c) den += std::exp(static_cast<double>(av[c * S + i]) - mx);
        for (int c = 0; c < C; ++c)
            out[c * S + i] =
                static_cast<T>(std::exp(static_cast<double>(av[c * S + i]) - mx) / den);
    }
    Var<T> r = tp.make("softmax_c", std::move(out), {a});
    tp.set_back(r, [&tp, a, r]() {
        const Tensor<T>& g = tp.grad(r);
        const Tensor<T>& sv = tp.value(r);
        Tensor<T>& ga = tp.grad(a);
        const int C2 = sv.dim(0);
        const long long S2 = sv.size() / C2;
        for (long long i = 0; i < S2; ++i) {
            double dot = 0;
            for (int c = 0; c < C2; ++c)
                dot += static_cast<double>(g[c * S2 + i]) * static_cast<double>(sv[c * S2 + i]);
            for (int c = 0; c < C2; ++c)
                ga[c * S2 + i] += static_cast<T>(static_cast<double>(sv[c * S2 + i]) *
                                                 (static_cast<double>(g[c * S2 + i]) - dot));
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// Differentiable warping: out(x) = moving(x + u(x)), trilinear, clamped
// ---------------------------------------------------------------------------

namespace detail {

// Trilinear sample setup per axis; dq is the derivative of the clamped
// coordinate w.r.t. the raw coordinate (0 outside the domain).
inline void sample_axis(double q, int L, int& i0, int& i1, double& t, double& dq) {
    dq = (q >= 0.0 && q <= static_cast<double>(L - 1)) ? 1.0 : 0.0;
    if (q < 0) q = 0;
    if (q > L - 1) q = L - 1;
    i0 = static_cast<int>(std::floor(q));
    if (i0 > L - 2) i0 = std::max(0, L - 2);
    i1 = std::min(i0 + 1, L - 1);
    t = q - i0;
}

}  // namespace detail

// moving: [C,D,H,W]; dvf: [3,D,H,W] with channels (dz,dy,dx) in voxel units.
template <typename T>
Var<T> warp(Tape<T>& tp, Var<T> moving, Var<T> dvf) {
    const Tensor<T>& mv = tp.value(moving);
    const Tensor<T>& uv = tp.value(dvf);
    if (mv.rank() != 4) throw ShapeError("warp moving must be [C,D,H,W]");
    if (uv.rank() != 4 || uv.dim(0) != 3) throw ShapeError("warp dvf must be [3,D,H,W]");
    if (mv.dim(1) != uv.dim(1) || mv.dim(2) != uv.dim(2) || mv.dim(3) != uv.dim(3))
        throw ShapeError("warp: dvf grid does not match moving image grid");
    const int C = mv.dim(0), D = mv.dim(1), H = mv.dim(2), W = mv.dim(3);
    const long long S = static_cast<long long>(D) * H * W;

    Tensor<T> out({C, D, H, W});
    long long idx = 0;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x, ++idx) {
                const double qz = z + static_cast<double>(uv[0 * S + idx]);
                const double qy = y + static_cast<double>(uv[1 * S + idx]);
                const double qx = x + static_cast<double>(uv[2 * S + idx]);
                int z0, z1, y0, y1, x0, x1;
                double tz, ty, tx, dz, dy, dx;
                detail::sample_axis(qz, D, z0, z1, tz, dz);
                detail::sample_axis(qy, H, y0, y1, ty, dy);
                detail::sample_axis(qx, W, x0, x1, tx, dx);
                for (int c = 0; c < C; ++c) {
                    const T* mb = mv.ptr() + c * S;
                    const double v000 = mb[(static_cast<long long>(z0) * H + y0) * W + x0];
                    const double v001 = mb[(static_cast<long long>(z0) * H + y0) * W + x1];
                    const double v010 = mb[(static_cast<long long>(z0) * H + y1) * W + x0];
                    const double v011 = mb[(static_cast<long long>(z0) * H + y1) * W + x1];
                    const double v100 = mb[(static_cast<long long>(z1) * H + y0) * W + x0];
                    const double v101 = mb[(static_cast<long long>(z1) * H + y0) * W + x1];
                    const double v110 = mb[(static_cast<long long>(z1) * H + y1) * W + x0];
                    const double v111 = mb[(static_cast<long long>(z1) * H + y1) * W + x1];
                    const double c00 = v000 * (1 - tx) + v001 * tx;
                    const double c01 = v010 * (1 - tx) + v011 * tx;
                    const double c10 = v100 * (1 - tx) + v101 * tx;
                    const double c11 = v110 * (1 - tx) + v111 * tx;
                    const double c0 = c00 * (1 - ty) + c01 * ty;
                    const double c1 = c10 * (1 - ty) + c11 * ty;
                    out[c * S + idx] = static_cast<T>(c0 * (1 - tz) + c1 * tz);
                }
            }

    Var<T> r = tp.make("warp", std::move(out), {moving, dvf});
    tp.set_back(r, [&tp, moving, dvf, r]() {
        const Tensor<T>& g = tp.grad(r);
        const Tensor<T>& mv2 = tp.value(moving);
        const Tensor<T>& uv2 = tp.value(dvf);
        Tensor<T>& gm = tp.grad(moving);
        Tensor<T>& gu = tp.grad(dvf);
        const int C2 = mv2.dim(0), D2 = mv2.dim(1), H2 = mv2.dim(2), W2 = mv2.dim(3);
        const long long S2 = static_cast<long long>(D2) * H2 * W2;
        long long idx = 0;
        for (int z = 0; z < D2; ++z)
            for (int y = 0; y < H2; ++y)
                for (int x = 0; x < W2; ++x, ++idx) {
                    const double qz = z + static_cast<double>(uv2[0 * S2 + idx]);
                    const double qy = y + static_cast<double>(uv2[1 * S2 + idx]);
                    const double qx = x + static_cast<double>(uv2[2 * S2 + idx]);
                    int z0, z1, y0, y1, x0, x1;
                    double tz, ty, tx, ddz, ddy, ddx;
                    detail::sample_axis(qz, D2, z0, z1, tz, ddz);
                    detail::sample_axis(qy, H2, y0, y1, ty, ddy);
                    detail::sample_axis(qx, W2, x0, x1, tx, ddx);
                    double guz = 0, guy = 0, gux = 0;
                    for (int c = 0; c < C2; ++c) {
                        const double gv = g[c * S2 + idx];
                        if (gv == 0) continue;
                        const T* mb = mv2.ptr() + c * S2;
                        T* gmb = gm.ptr() + c * S2;
                        const long long o000 = (static_cast<long long>(z0) * H2 + y0) * W2 + x0;
                        const long long o001 = (static_cast<long long>(z0) * H2 + y0) * W2 + x1;
                        const long long o010 = (static_cast<long long>(z0) * H2 + y1) * W2 + x0;
                        const long long o011 = (static_cast<long long>(z0) * H2 + y1) * W2 + x1;
                        const long long o100 = (static_cast<long long>(z1) * H2 + y0) * W2 + x0;
                        const long long o101 = (static_cast<long long>(z1) * H2 + y0) * W2 + x1;
                        const long long o110 = (static_cast<long long>(z1) * H2 + y1) * W2 + x0;
                        const long long o111 = (static_cast<long long>(z1) * H2 + y1) * W2 + x1;
                        const double wz[2] = {1 - tz, tz}, wy[2] = {1 - ty, ty},
                                     wx[2] = {1 - tx, tx};
                        gmb[o000] += static_cast<T>(gv * wz[0] * wy[0] * wx[0]);
                        gmb[o001] += static_cast<T>(gv * wz[0] * wy[0] * wx[1]);
                        gmb[o010] += static_cast<T>(gv * wz[0] * wy[1] * wx[0]);
                        gmb[o011] += static_cast<T>(gv * wz[0] * wy[1] * wx[1]);
                        gmb[o100] += static_cast<T>(gv * wz[1] * wy[0] * wx[0]);
                        gmb[o101] += static_cast<T>(gv * wz[1] * wy[0] * wx[1]);
                        gmb[o110] += static_cast<T>(gv * wz[1] * wy[1] * wx[0]);
                        gmb[o111] += static_cast<T>(gv * wz[1] * wy[1] * wx[1]);
                        const double v000 = mb[o000], v001 = mb[o001], v010 = mb[o010],
                                     v011 = mb[o011], v100 = mb[o100], v101 = mb[o101],
                                     v110 = mb[o110], v111 = mb[o111];
                        const double dz_v =
                            (1 - ty) * ((1 - tx) * (v100 - v000) + tx * (v101 - v001)) +
                            ty * ((1 - tx) * (v110 - v010) + tx * (v111 - v011));
                        const double dy_v =
                            (1 - tz) * ((1 - tx) * (v010 - v000) + tx * (v011 - v001)) +
                            tz * ((1 - tx) * (v110 - v100) + tx * (v111 - v101));
                        const double dx_v =
                            (1 - tz) * ((1 - ty) * (v001 - v000) + ty * (v011 - v010)) +
                            tz * ((1 - ty) * (v101 - v100) + ty * (v111 - v110));
                        guz += gv * dz_v;
                        guy += gv * dy_v;
                        gux += gv * dx_v;
                    }
                    gu[0 * S2 + idx] += static_cast<T>(guz * ddz);
                    gu[1 * S2 + idx] += static_cast<T>(guy * ddy);
                    gu[2 * S2 + idx] += static_cast<T>(gux * ddx);
                }
    });
    return r;
}

// ---------------------------------------------------------------------------
// Cross-stitch unit: per-channel 2x2 linear mixer of two task paths
// ---------------------------------------------------------------------------

// alpha: [C,4] with per-channel entries (a_ss, a_sr, a_rs, a_rr).
template <typename T>
std::pair<Var<T>, Var<T>> cross_stitch_apply(Tape<T>& tp, Var<T> xs, Var<T> xr, Var<T> alpha) {
    const Tensor<T>& s = tp.value(xs);
    const Tensor<T>& rr = tp.value(xr);
    const Tensor<T>& a = tp.value(alpha);
    if (!s.same_shape(rr)) throw ShapeError("cross_stitch: path shapes differ");
    if (a.rank() != 2 || a.dim(0) != s.dim(0) || a.dim(1) != 4)
        throw ShapeError("cross_stitch: alpha must be [C,4]");
    const int C = s.dim(0);
    const long long S = s.size() / C;

    auto mix = [&](int row) {
        Tensor<T> out(s.shape);
        for (int c = 0; c < C; ++c) {
            const T w0 = a[c * 4 + 2 * row], w1 = a[c * 4 + 2 * row + 1];
            const T* sb = s.ptr() + c * S;
            const T* rb = rr.ptr() + c * S;
            T* ob = out.ptr() + c * S;
            for (long long i = 0; i < S; ++i) ob[i] = w0 * sb[i] + w1 * rb[i];
        }
        return out;
    };

    auto back_for = [&tp, xs, xr, alpha](Var<T> out, int row) {
        return [&tp, xs, xr, alpha, out, row]() {
            const Tensor<T>& g = tp.grad(out);
            const Tensor<T>& s2 = tp.value(xs);
            const Tensor<T>& r2 = tp.value(xr);
            const Tensor<T>& a2 = tp.value(alpha);
            Tensor<T>& gs = tp.grad(xs);
            Tensor<T>& gr = tp.grad(xr);
            Tensor<T>& ga = tp.grad(alpha);
            const int C2 = s2.dim(0);
            const long long S2 = s2.size() / C2;
            for (int c = 0; c < C2; ++c) {
                const T w0 = a2[c * 4 + 2 * row], w1 = a2[c * 4 + 2 * row + 1];
                const T* gb = g.ptr() + c * S2;
                const T* sb = s2.ptr() + c * S2;
                const T* rb = r2.ptr() + c * S2;
                T* gsb = gs.ptr() + c * S2;
                T* grb = gr.ptr() + c * S2;
                double as = 0, ar = 0;
                for (long long i = 0; i < S2; ++i) {
                    gsb[i] += w0 * gb[i];
                    grb[i] += w1 * gb[i];
                    as += static_cast<double>(gb[i]) * static_cast<double>(sb[i]);
                    ar += static_cast<double>(gb[i]) * static_cast<double>(rb[i]);
                }
                ga[c * 4 + 2 * row] += static_cast<T>(as);
                ga[c * 4 + 2 * row + 1] += static_cast<T>(ar);
            }
        };
    };

    Var<T> os = tp.make("cross_stitch_s", mix(0), {xs, xr, alpha});
    tp.set_back(os, back_for(os, 0));
    Var<T> orr = tp.make("cross_stitch_r", mix(1), {xs, xr, alpha});
    tp.set_back(orr, back_for(orr, 1));
    return {os, orr};
}

// ---------------------------------------------------------------------------
// Plain-tensor helpers (no gradients)
// ---------------------------------------------------------------------------

// Center-aligned strided subsample of the spatial axes of [C,D,H,W] (or
// [D,H,W]) producing extent m per axis with sample i at offset + stride*i.
template <typename T>
Tensor<T> subsample_center(const Tensor<T>& t, int m, int stride) {
    const bool has_c = t.rank() == 4;
    const int C = has_c ? t.dim(0) : 1;
    const int D = t.dim(has_c ? 1 : 0), H = t.dim(has_c ? 2 : 1), W = t.dim(has_c ? 3 : 2);
    const int oz = (D - stride * m) / 2, oy = (H - stride * m) / 2, ox = (W - stride * m) / 2;
    if (oz < 0 || oy < 0 || ox < 0) throw SizeError("subsample_center target too large");
    std::vector<int> shp = has_c ? std::vector<int>{C, m, m, m} : std::vector<int>{m, m, m};
    Tensor<T> out(shp);
    long long o = 0;
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < m; ++z)
            for (int y = 0; y < m; ++y)
                for (int x = 0; x < m; ++x, ++o)
                    out[o] = t[((static_cast<long long>(c) * D + oz + stride * z) * H + oy +
                                stride * y) *
                                   W +
                               ox + stride * x];
    return out;
}

inline LabelMap subsample_center_labels(const LabelMap& lm, int m, int stride) {
    const int D = lm.shape[0], H = lm.shape[1], W = lm.shape[2];
    const int oz = (D - stride * m) / 2, oy = (H - stride * m) / 2, ox = (W - stride * m) / 2;
    if (oz < 0 || oy < 0 || ox < 0) throw SizeError("subsample_center target too large");
    LabelMap out({m, m, m});
    long long o = 0;
    for (int z = 0; z < m; ++z)
        for (int y = 0; y < m; ++y)
            for (int x = 0; x < m; ++x, ++o)
                out[o] = lm[((static_cast<long long>(oz + stride * z)) * H + oy + stride * y) * W +
                            ox + stride * x];
    return out;
}

// One-hot encoding [K+1,D,H,W]; labels outside [0,num_classes) are remapped
// through remap (e.g. torso tissue -> background) or rejected.
template <typename T>
Tensor<T> one_hot(const LabelMap& lm, int num_classes,
                  const std::vector<int>* remap = nullptr) {
    Tensor<T> out({num_classes, lm.shape[0], lm.shape[1], lm.shape[2]});
    const long long S = lm.size();
    for (long long i = 0; i < S; ++i) {
        int v = lm[i];
        if (remap && v < static_cast<int>(remap->size())) v = (*remap)[static_cast<size_t>(v)];
        if (v < 0 || v >= num_classes)
            throw DataError("label id " + std::to_string(lm[i]) + " out of range");
        out[static_cast<long long>(v) * S + i] = T(1);
    }
    return out;
}

// Per-voxel argmax over channel 0 of [C,D,H,W].
template <typename T>
LabelMap argmax_c(const Tensor<T>& t) {
    const int C = t.dim(0);
    const long long S = t.size() / C;
    LabelMap out({t.dim(1), t.dim(2), t.dim(3)});
    for (long long i = 0; i < S; ++i) {
        int best = 0;
        T bv = t[i];
        for (int c = 1; c < C; ++c)
            if (t[c * S + i] > bv) {
                bv = t[c * S + i];
                best = c;
            }
        out[i] = static_cast<uint8_t>(best);
    }
    return out;
}

}  // namespace regseg::ops
