#include "regseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "regseg/errors.hpp"
#include "regseg/rng.hpp"
#include "regseg/volume_io.hpp"

namespace regseg::phantom {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Ellipsoid {
    double cz, cy, cx;  // center, voxels
    double rz, ry, rx;  // semi-axes, voxels

    // Normalized radius: <= 1 inside.
    double rho(double z, double y, double x) const {
        const double az = (z - cz) / rz, ay = (y - cy) / ry, ax = (x - cx) / rx;
        return std::sqrt(az * az + ay * ay + ax * ax);
    }
};

// Anatomy layout in fractions of the edge length; painting order below makes
// the organ masks disjoint by construction.
struct Layout {
    Ellipsoid torso, bladder, prostate, sv_left, sv_right;
    Ellipsoid rectum;   // treated as a tube: (y,x) ellipse over |z-cz| <= rz
};

// Layout is a pure function of (extent, seed) so gen_daily can re-derive the
// exact anatomy the planning scan was painted with. Mild per-seed jitter of
// centers and radii stands in for inter-patient variation.
Layout make_layout(int n, uint64_t seed) {
    const double c = 0.5 * n;
    Layout L;
    L.torso = {c, c, c, 0.46 * n, 0.40 * n, 0.44 * n};
    L.bladder = {c, c - 0.15 * n, c, 0.11 * n, 0.11 * n, 0.11 * n};
    L.prostate = {c, c + 0.05 * n, c, 0.08 * n, 0.07 * n, 0.08 * n};
    // The two vesicles overlap at the midline: they share one label and the
    // evaluation keeps only the largest connected component per structure, so
    // a disjoint pair could never score a DSC above ~0.5.
    L.sv_left = {c - 0.15 * n, c + 0.05 * n, c - 0.03 * n, 0.045 * n, 0.04 * n, 0.06 * n};
    L.sv_right = {c - 0.15 * n, c + 0.05 * n, c + 0.03 * n, 0.045 * n, 0.04 * n, 0.06 * n};
    L.rectum = {c, c + 0.21 * n, c, 0.30 * n, 0.055 * n, 0.055 * n};

    Rng rng(mix_seed(seed, "layout"));
    auto jitter = [&](Ellipsoid& e, bool isotropic) {
        e.cz += draw_uniform(rng, -0.01, 0.01) * n;
        e.cy += draw_uniform(rng, -0.01, 0.01) * n;
        e.cx += draw_uniform(rng, -0.01, 0.01) * n;
        if (isotropic) {
            // one shared factor: the bladder must stay spherical for the
            // radial volume-scaling map to be exact
            const double s = draw_uniform(rng, 0.95, 1.04);
            e.rz *= s, e.ry *= s, e.rx *= s;
        } else {
            e.rz *= draw_uniform(rng, 0.95, 1.05);
            e.ry *= draw_uniform(rng, 0.95, 1.05);
            e.rx *= draw_uniform(rng, 0.95, 1.05);
        }
    };
    // torso stays put; organs move/resize independently per seed
    jitter(L.bladder, true);
    jitter(L.prostate, false);
    jitter(L.sv_left, false);
    jitter(L.sv_right, false);
    jitter(L.rectum, false);
    return L;
}

bool in_tube(const Ellipsoid& e, double z, double y, double x) {
    if (std::abs(z - e.cz) > e.rz) return false;
    const double ay = (y - e.cy) / e.ry, ax = (x - e.cx) / e.rx;
    return ay * ay + ax * ax <= 1.0;
}

void blur_axis(Tensor<float>& vol, int axis, const std::vector<double>& kernel) {
    const int D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
    const int R = static_cast<int>(kernel.size()) / 2;
    const int ext[3] = {D, H, W};
    const long long stride[3] = {static_cast<long long>(H) * W, W, 1};
    Tensor<float> out(vol.shape);
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int idx3[3] = {z, y, x};
                double acc = 0;
                for (int k = -R; k <= R; ++k) {
                    const int q = std::clamp(idx3[axis] + k, 0, ext[axis] - 1);
                    const long long off = (static_cast<long long>(z) * H + y) * W + x +
                                          (q - idx3[axis]) * stride[axis];
                    acc += kernel[static_cast<size_t>(k + R)] * vol[off];
                }
                out[(static_cast<long long>(z) * H + y) * W + x] = static_cast<float>(acc);
            }
    vol = std::move(out);
}

// Smooth scalar field from blurred white noise. Peak normalization (|f| <= 1
// with peak exactly 1) suits bias fields; RMS normalization keeps the typical
// amplitude at 1 everywhere, which is what displacement fields need — a
// peak-normalized field is near zero outside one blob. In RMS mode the raw
// noise is zeroed in a one-sigma boundary band first: the clamp-padded blur
// otherwise under-averages near the faces, producing gradients steep enough
// to fold, and a field that decays toward the boundary also keeps warps from
// sampling outside the volume.
Tensor<float> smooth_noise(int n, double sigma, Rng& rng, bool unit_rms = false) {
    Tensor<float> f({n, n, n});
    for (auto& v : f.data) v = static_cast<float>(draw_uniform(rng, -1, 1));
    if (unit_rms) {
        const int band = std::min(static_cast<int>(std::ceil(sigma)), n / 4);
        long long i = 0;
        for (int z = 0; z < n; ++z)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x, ++i) {
                    const int d = std::min({z, y, x, n - 1 - z, n - 1 - y, n - 1 - x});
                    if (d < band) f[i] = 0.0f;
                }
    }
    f = gaussian_blur3(f, sigma);
    double norm = 0;
    if (unit_rms) {
        for (float v : f.data) norm += static_cast<double>(v) * v;
        norm = std::sqrt(norm / static_cast<double>(f.size()));
    } else {
        for (float v : f.data) norm = std::max(norm, static_cast<double>(std::abs(v)));
    }
    if (norm > 0)
        for (auto& v : f.data) v = static_cast<float>(v / norm);
    return f;
}

// Radial bladder-scaling map: returns the source normalized radius g(rho) for
// a voxel at normalized radius rho, such that the warped bladder volume is
// `scale` times the planning volume. Identity beyond rho_outer.
struct BladderScaleMap {
    double rho_s = 1, rho_o = 2.0;

    explicit BladderScaleMap(double scale) {
        rho_s = std::cbrt(scale);
    }

    double g(double rho) const {
        if (rho >= rho_o) return rho;
        if (rho <= rho_s) return rho / rho_s;
        // cubic Hermite on [rho_s, rho_o]: (rho_s -> 1, slope 1/rho_s) to
        // (rho_o -> rho_o, slope 1); monotone for the scales we allow
        const double t = (rho - rho_s) / (rho_o - rho_s), h = rho_o - rho_s;
        const double t2 = t * t, t3 = t2 * t;
        return (2 * t3 - 3 * t2 + 1) * 1.0 + (t3 - 2 * t2 + t) * h / rho_s +
               (-2 * t3 + 3 * t2) * rho_o + (t3 - t2) * h;
    }
};

uint64_t hash_case_files(const fs::path& dir, const std::vector<std::string>& bases) {
    uint64_t h = 14695981039346656037ULL;
    for (const auto& b : bases) {
        for (const char* ext : {".json", ".raw"}) {
            const uint64_t fh = io::hash_file((dir / (b + ext)).string());
            h = io::fnv1a(&fh, sizeof(fh), h);
        }
    }
    return h;
}

}  // namespace

void PhantomSpec::validate() const {
    if (extent < 44 || extent % 4 != 0)
        throw ConfigError("phantom extent must be >= 44 and divisible by 4, got " +
                          std::to_string(extent));
    if (noise_sigma < 0 || bias_amplitude < 0 || deform_magnitude < 0)
        throw ConfigError("phantom noise/bias/deformation magnitudes must be >= 0");
    if (deform_sigma <= 0) throw ConfigError("deform_sigma must be > 0");
    if (!(bladder_scale_min > 0.5 && bladder_scale_max < 2.0 &&
          bladder_scale_min <= bladder_scale_max))
        throw ConfigError("bladder scale range must lie within (0.5, 2.0)");
    if (gas_prob < 0 || gas_prob > 1) throw ConfigError("gas_prob must be in [0,1]");
}

Tensor<float> gaussian_blur3(const Tensor<float>& vol, double sigma) {
    if (vol.rank() != 3) throw ShapeError("gaussian_blur3 expects [D,H,W]");
    const int R = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * R + 1));
    double s = 0;
    for (int i = -R; i <= R; ++i) {
        k[static_cast<size_t>(i + R)] = std::exp(-0.5 * i * i / (sigma * sigma));
        s += k[static_cast<size_t>(i + R)];
    }
    for (auto& v : k) v /= s;
    Tensor<float> out = vol;
    for (int axis = 0; axis < 3; ++axis) blur_axis(out, axis, k);
    return out;
}

Case gen_planning(const PhantomSpec& spec) {
    spec.validate();
    const int n = spec.extent;
    const Layout L = make_layout(n, spec.seed);
    Rng rng(mix_seed(spec.seed, "planning"));

    Case out{Tensor<float>({n, n, n}), LabelMap({n, n, n})};
    long long i = 0;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x, ++i) {
                uint8_t lab = kAir;
                if (L.torso.rho(z, y, x) <= 1) lab = kTorso;
                if (lab == kTorso) {
                    if (in_tube(L.rectum, z, y, x)) lab = kRectum;
                    if (L.bladder.rho(z, y, x) <= 1) lab = kBladder;
                    if (L.sv_left.rho(z, y, x) <= 1 || L.sv_right.rho(z, y, x) <= 1)
                        lab = kSeminalVesicles;
                    if (L.prostate.rho(z, y, x) <= 1) lab = kProstate;
                }
                out.labels[i] = lab;
            }
    for (int lab = kProstate; lab <= kRectum; ++lab) {
        long long cnt = 0;
        for (i = 0; i < out.labels.size(); ++i) cnt += out.labels[i] == lab;
        if (cnt == 0)
            throw ConfigError(std::string("organ '") + organ_name(lab) +
                              "' does not fit extent " + std::to_string(n));
    }

    const Tensor<float> bias = smooth_noise(n, 0.2 * n, rng);
    const float hu_of[6] = {spec.hu.air,     spec.hu.prostate, spec.hu.seminal_vesicles,
                            spec.hu.bladder, spec.hu.rectum,   spec.hu.torso};
    for (i = 0; i < out.volume.size(); ++i) {
        const uint8_t lab = out.labels[i];
        float v = hu_of[lab];
        if (lab != kAir) {
            v += static_cast<float>(spec.bias_amplitude) * bias[i];
            v += static_cast<float>(draw_normal(rng, 0, spec.noise_sigma));
        }
        out.volume[i] = std::clamp(v, -1000.0f, 1000.0f);
    }
    return out;
}

DailyCase gen_daily(const Case& planning, const PhantomSpec& spec, uint64_t fraction_salt,
                    double bladder_scale) {
    spec.validate();
    const int n = spec.extent;
    if (planning.volume.shape != std::vector<int>{n, n, n})
        throw ShapeError("gen_daily: planning shape does not match spec extent");
    const Layout L = make_layout(n, spec.seed);
    Rng rng(mix_seed(mix_seed(spec.seed, "daily"), fraction_salt));

    double scale = bladder_scale;
    if (scale <= 0) scale = draw_uniform(rng, spec.bladder_scale_min, spec.bladder_scale_max);
    if (!(scale > 0.5 && scale < 2.0))
        throw ConfigError("bladder scale must lie within (0.5, 2.0)");
    const BladderScaleMap map(scale);
    // The taper region must stay inside the torso, otherwise air gets dragged
    // into the body (and large scales would collide with neighboring organs).
    {
        const double rb = L.bladder.ry;  // isotropic bladder
        const double edge = map.rho_o * rb;
        const double worst =
            std::max({(std::abs(L.bladder.cy - L.torso.cy) + edge) / L.torso.ry,
                      edge / L.torso.rz, edge / L.torso.rx});
        if (worst > 0.98)
            throw ConfigError("bladder scale field does not fit inside the torso");
    }

    DailyCase out;
    out.bladder_scale = scale;
    out.dvf_gt = Tensor<float>({3, n, n, n});
    const long long S = static_cast<long long>(n) * n * n;

    // Random smooth component, one field per displacement channel.
    if (spec.deform_magnitude > 0) {
        for (int ch = 0; ch < 3; ++ch) {
            Tensor<float> f = smooth_noise(n, spec.deform_sigma, rng, /*unit_rms=*/true);
            for (long long i = 0; i < S; ++i)
                out.dvf_gt[ch * S + i] = static_cast<float>(spec.deform_magnitude) * f[i];
        }
    }

    // Radial bladder component: a daily voxel at normalized radius rho pulls
    // from planning radius g(rho), so u += dir * (g(rho)/rho - 1).
    if (scale != 1.0) {
        const double rb = L.bladder.ry;
        long long i = 0;
        for (int z = 0; z < n; ++z)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x, ++i) {
                    const double dz = z - L.bladder.cz, dy = y - L.bladder.cy,
                                 dx = x - L.bladder.cx;
                    const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
                    const double rho = r / rb;
                    if (rho >= map.rho_o || r == 0) continue;
                    const double f = map.g(rho) / rho - 1.0;
                    out.dvf_gt[0 * S + i] += static_cast<float>(f * dz);
                    out.dvf_gt[1 * S + i] += static_cast<float>(f * dy);
                    out.dvf_gt[2 * S + i] += static_cast<float>(f * dx);
                }
    }

    out.scan.volume = dvf::warp_image(planning.volume, out.dvf_gt);
    out.scan.labels = dvf::warp_labels_nearest(planning.labels, out.dvf_gt);

    // Optional rectal gas pocket: intensity only, labels unchanged.
    if (draw_uniform(rng, 0, 1) < spec.gas_prob) {
        const double gz = L.rectum.cz + draw_uniform(rng, -0.15, 0.15) * n;
        const double gr = draw_uniform(rng, 0.6, 0.9) * L.rectum.ry;
        const Ellipsoid gas{gz, L.rectum.cy, L.rectum.cx, 2.0 * gr, gr, gr};
        for (long long i = 0; i < S; ++i) {
            if (out.scan.labels[i] != kRectum) continue;
            const int z = static_cast<int>(i / (n * static_cast<long long>(n)));
            const int y = static_cast<int>((i / n) % n);
            const int x = static_cast<int>(i % n);
            if (gas.rho(z, y, x) <= 1) out.scan.volume[i] = spec.hu.gas;
        }
    }
    return out;
}

uint64_t make_dataset(const std::string& out_dir, int n_patients, int fractions_per_patient,
                      const PhantomSpec& spec) {
    spec.validate();
    if (n_patients < 1 || fractions_per_patient < 1)
        throw ConfigError("need at least one patient and one fraction");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    const std::vector<std::string> bases = {"planning", "planning_labels", "daily",
                                            "daily_labels", "dvf_gt"};
    uint64_t combined = 14695981039346656037ULL;
    json split;
    split["train"] = json::array();
    split["val"] = json::array();

    for (int p = 0; p < n_patients; ++p) {
        PhantomSpec pspec = spec;
        pspec.seed = mix_seed(spec.seed, "patient" + std::to_string(p));
        const Case planning = gen_planning(pspec);
        for (int f = 0; f < fractions_per_patient; ++f) {
            const std::string name = "case_" + std::to_string(p) + "_" + std::to_string(f);
            const fs::path dir = fs::path(out_dir) / name;
            fs::create_directories(dir, ec);
            if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

            const DailyCase daily = gen_daily(planning, pspec, static_cast<uint64_t>(f));
            io::write_volume((dir / "planning").string(), planning.volume);
            io::write_labels((dir / "planning_labels").string(), planning.labels);
            io::write_volume((dir / "daily").string(), daily.scan.volume);
            io::write_labels((dir / "daily_labels").string(), daily.scan.labels);
            io::write_dvf((dir / "dvf_gt").string(), daily.dvf_gt);

            const uint64_t ch = hash_case_files(dir, bases);
            json manifest;
            manifest["case"] = name;
            manifest["patient"] = p;
            manifest["fraction"] = f;
            manifest["extent"] = spec.extent;
            manifest["seed"] = spec.seed;
            manifest["bladder_scale"] = daily.bladder_scale;
            manifest["files_hash"] = io::hex64(ch);
            std::ofstream mf(dir / "manifest.json");
            if (!mf) throw IoError("cannot write " + (dir / "manifest.json").string());
            mf << manifest.dump(2) << "\n";

            combined = io::fnv1a(&ch, sizeof(ch), combined);
            // last patient's fractions are validation (or last fraction when
            // there is a single patient)
            const bool val = n_patients > 1 ? p == n_patients - 1
                                            : f == fractions_per_patient - 1;
            split[val ? "val" : "train"].push_back(name);
        }
    }
    std::ofstream sf(fs::path(out_dir) / "split.json");
    if (!sf) throw IoError("cannot write split.json in " + out_dir);
    sf << split.dump(2) << "\n";
    return combined;
}

}  // namespace regseg::phantom
