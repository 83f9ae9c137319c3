#include "regseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>

#include "regseg/errors.hpp"

namespace regseg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_same_shape(const LabelMap& a, const LabelMap& b) {
    if (a.shape != b.shape)
        throw ShapeError("mask shapes differ: " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

long long count_fg(const LabelMap& m) {
    long long n = 0;
    for (long long i = 0; i < m.size(); ++i)
        if (m[i]) ++n;
    return n;
}

// 1-D lower-envelope distance transform (Felzenszwalb/Huttenlocher), with
// infinite entries skipped as absent parabolas.
void edt_1d(const double* f, double* d, int n, int* v, double* z) {
    auto intersect = [&](int q, int p) {
        return ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
               (2.0 * q - 2.0 * p);
    };
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        double s = intersect(q, v[k]);
        while (s <= z[k]) {  // z[0] = -inf guarantees termination at k >= 0
            --k;
            s = intersect(q, v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (k < 0) {
        for (int q = 0; q < n; ++q) d[q] = kInf;
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double dx = q - v[j];
        d[q] = dx * dx + f[v[j]];
    }
}

std::vector<double> directed_distances(const SurfacePointSet& from, const Tensor<double>& edt_to,
                                       const std::vector<int>& shape) {
    const int H = shape[1], W = shape[2];
    std::vector<double> out;
    out.reserve(from.points.size());
    for (const auto& p : from.points) {
        const double d2 = edt_to[(static_cast<long long>(p[0]) * H + p[1]) * W + p[2]];
        out.push_back(std::sqrt(d2));
    }
    return out;
}

double percentile_nearest_rank(std::vector<double> v, int pct) {
    if (v.empty()) throw EmptyMaskError("no surface distances");
    std::sort(v.begin(), v.end());
    if (pct >= 100) return v.back();
    const size_t idx = static_cast<size_t>(
        std::max<long long>(0, static_cast<long long>(
                                   std::ceil(pct / 100.0 * static_cast<double>(v.size()))) -
                                   1));
    return v[idx];
}

}  // namespace

DscResult dsc(const LabelMap& a, const LabelMap& b) {
    check_same_shape(a, b);
    long long na = 0, nb = 0, ni = 0;
    for (long long i = 0; i < a.size(); ++i) {
        const bool fa = a[i] != 0, fb = b[i] != 0;
        na += fa;
        nb += fb;
        ni += fa && fb;
    }
    DscResult r;
    if (na == 0 && nb == 0) {
        r.value = 1.0;
        r.both_empty = true;
    } else if (na == 0 || nb == 0) {
        r.value = 0.0;
        r.one_empty = true;
    } else {
        r.value = 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
    }
    return r;
}

SurfacePointSet extract_surface(const LabelMap& mask) {
    if (count_fg(mask) == 0) throw EmptyMaskError("extract_surface on empty mask");
    const int D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    SurfacePointSet s;
    auto at = [&](int z, int y, int x) -> bool {
        return mask[(static_cast<long long>(z) * H + y) * W + x] != 0;
    };
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!at(z, y, x)) continue;
                const bool border = z == 0 || z == D - 1 || y == 0 || y == H - 1 || x == 0 ||
                                    x == W - 1;
                const bool exposed =
                    border || !at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) ||
                    !at(z, y + 1, x) || !at(z, y, x - 1) || !at(z, y, x + 1);
                if (exposed) s.points.push_back({z, y, x});
            }
    return s;
}

Tensor<double> squared_edt(const std::vector<int>& shape,
                           const std::vector<std::array<int, 3>>& seeds) {
    const int D = shape[0], H = shape[1], W = shape[2];
    Tensor<double> d({D, H, W});
    d.fill(kInf);
    for (const auto& p : seeds) d[(static_cast<long long>(p[0]) * H + p[1]) * W + p[2]] = 0.0;

    const int n_max = std::max({D, H, W});
    std::vector<double> f(static_cast<size_t>(n_max)), row(static_cast<size_t>(n_max));
    std::vector<int> v(static_cast<size_t>(n_max));
    std::vector<double> z(static_cast<size_t>(n_max + 1));

    // along x
    for (int zz = 0; zz < D; ++zz)
        for (int y = 0; y < H; ++y) {
            double* base = d.ptr() + (static_cast<long long>(zz) * H + y) * W;
            edt_1d(base, row.data(), W, v.data(), z.data());
            std::copy(row.begin(), row.begin() + W, base);
        }
    // along y
    for (int zz = 0; zz < D; ++zz)
        for (int x = 0; x < W; ++x) {
            for (int y = 0; y < H; ++y)
                f[static_cast<size_t>(y)] = d[(static_cast<long long>(zz) * H + y) * W + x];
            edt_1d(f.data(), row.data(), H, v.data(), z.data());
            for (int y = 0; y < H; ++y)
                d[(static_cast<long long>(zz) * H + y) * W + x] = row[static_cast<size_t>(y)];
        }
    // along z
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            for (int zz = 0; zz < D; ++zz)
                f[static_cast<size_t>(zz)] = d[(static_cast<long long>(zz) * H + y) * W + x];
            edt_1d(f.data(), row.data(), D, v.data(), z.data());
            for (int zz = 0; zz < D; ++zz)
                d[(static_cast<long long>(zz) * H + y) * W + x] = row[static_cast<size_t>(zz)];
        }
    return d;
}

double msd(const LabelMap& a, const LabelMap& b) {
    check_same_shape(a, b);
    const SurfacePointSet sa = extract_surface(a);
    const SurfacePointSet sb = extract_surface(b);
    const Tensor<double> ea = squared_edt(a.shape, sa.points);
    const Tensor<double> eb = squared_edt(b.shape, sb.points);
    const std::vector<double> da = directed_distances(sa, eb, a.shape);
    const std::vector<double> db = directed_distances(sb, ea, b.shape);
    double ma = 0, mb = 0;
    for (double x : da) ma += x;
    for (double x : db) mb += x;
    return 0.5 * (ma / static_cast<double>(da.size()) + mb / static_cast<double>(db.size()));
}

double hd(const LabelMap& a, const LabelMap& b, int percentile) {
    check_same_shape(a, b);
    if (percentile != 100 && percentile != 95)
        throw ConfigError("hd percentile must be 100 or 95");
    const SurfacePointSet sa = extract_surface(a);
    const SurfacePointSet sb = extract_surface(b);
    const Tensor<double> ea = squared_edt(a.shape, sa.points);
    const Tensor<double> eb = squared_edt(b.shape, sb.points);
    const double fa = percentile_nearest_rank(directed_distances(sa, eb, a.shape), percentile);
    const double fb = percentile_nearest_rank(directed_distances(sb, ea, b.shape), percentile);
    return std::max(fa, fb);
}

LabelMap largest_cc(const LabelMap& mask) {
    const int D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    LabelMap out(mask.shape);
    std::vector<int> comp(static_cast<size_t>(mask.size()), -1);
    long long best_size = 0;
    int best_id = -1;
    int next_id = 0;
    std::vector<long long> stack;
    for (long long seed = 0; seed < mask.size(); ++seed) {
        if (!mask[seed] || comp[static_cast<size_t>(seed)] >= 0) continue;
        const int id = next_id++;
        long long size = 0;
        stack.push_back(seed);
        comp[static_cast<size_t>(seed)] = id;
        while (!stack.empty()) {
            const long long cur = stack.back();
            stack.pop_back();
            ++size;
            const int z = static_cast<int>(cur / (static_cast<long long>(H) * W));
            const int y = static_cast<int>((cur / W) % H);
            const int x = static_cast<int>(cur % W);
            const int dz[6] = {-1, 1, 0, 0, 0, 0};
            const int dy[6] = {0, 0, -1, 1, 0, 0};
            const int dx[6] = {0, 0, 0, 0, -1, 1};
            for (int k = 0; k < 6; ++k) {
                const int nz = z + dz[k], ny = y + dy[k], nx = x + dx[k];
                if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                const long long ni = (static_cast<long long>(nz) * H + ny) * W + nx;
                if (mask[ni] && comp[static_cast<size_t>(ni)] < 0) {
                    comp[static_cast<size_t>(ni)] = id;
                    stack.push_back(ni);
                }
            }
        }
        // strict > keeps the first (lexicographically smallest seed) on ties
        if (size > best_size) {
            best_size = size;
            best_id = id;
        }
    }
    if (best_id >= 0)
        for (long long i = 0; i < mask.size(); ++i)
            out[i] = comp[static_cast<size_t>(i)] == best_id ? 1 : 0;
    return out;
}

OrganMetrics evaluate_masks(const LabelMap& reference, const LabelMap& predicted) {
    OrganMetrics m;
    const DscResult d = dsc(reference, predicted);
    m.dsc = d.value;
    if (count_fg(reference) == 0 || count_fg(predicted) == 0) {
        m.failed = true;
        return m;
    }
    m.msd_mm = msd(reference, predicted);
    m.hd_mm = hd(reference, predicted, 100);
    m.hd95_mm = hd(reference, predicted, 95);
    return m;
}

}  // namespace regseg::metrics
