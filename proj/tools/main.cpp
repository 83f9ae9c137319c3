// Command-line front end: phantom generation, training, evaluation, DVF
// analysis, reporting and developer verification (gradcheck/selftest).
//
// Exit codes: 0 success, 1 selftest/gradcheck failure, 2 configuration error,
// 3 I/O error, 4 numerics failure (NaN loss), 5 corrupt checkpoint,
// 6 CSV schema mismatch.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "regseg/checkpoint.hpp"
#include "regseg/gradcheck.hpp"
#include "regseg/phantom.hpp"
#include "regseg/report.hpp"
#include "regseg/trainer.hpp"
#include "regseg/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace regseg;

namespace {

constexpr int kExitSelftest = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerics = 4;
constexpr int kExitCorrupt = 5;
constexpr int kExitSchema = 6;

// Echo the full flag set of the invoking command into an artifact manifest.
void write_run_manifest(const std::string& path, const CLI::App* cmd) {
    json j;
    j["command"] = cmd->get_name();
    json flags = json::object();
    for (const CLI::Option* o : cmd->get_options()) {
        if (o->get_name() == "--help") continue;
        const auto& res = o->results();
        if (res.size() == 1)
            flags[o->get_name()] = res[0];
        else if (!res.empty())
            flags[o->get_name()] = res;
        else if (!o->get_default_str().empty())
            flags[o->get_name()] = o->get_default_str();
    }
    j["flags"] = flags;
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

int run_phantom(const CLI::App* cmd, const std::string& out, int patients, int fractions,
                uint64_t seed, int size, double bladder_scale) {
    phantom::PhantomSpec spec;
    spec.extent = size;
    spec.seed = seed;
    if (bladder_scale > 0) {
        spec.bladder_scale_min = bladder_scale;
        spec.bladder_scale_max = bladder_scale;
    }
    spec.validate();
    const uint64_t hash = phantom::make_dataset(out, patients, fractions, spec);
    write_run_manifest((fs::path(out) / "run.json").string(), cmd);
    std::printf("dataset written to %s\nmanifest hash %s\n", out.c_str(),
                io::hex64(hash).c_str());
    return 0;
}

int run_train(const CLI::App* cmd, const train::TrainConfig& cfg, const std::string& data,
              const std::string& out, const std::string& resume) {
    train::Dataset ds = train::load_dataset(data);
    train::Trainer tr = resume.empty() ? train::Trainer(cfg)
                                       : train::Trainer::load_checkpoint(resume, cfg);
    train::RunPaths paths;
    paths.ckpt_base = out;
    paths.log_csv = out + "_log.csv";
    paths.weights_csv = out + "_weights.csv";

    const auto t0 = std::chrono::steady_clock::now();
    try {
        run_training(tr, ds, cfg.iterations, paths);
    } catch (const NumericsError& e) {
        std::fprintf(stderr, "numerics failure: %s\nstate dumped to %s_dump\n", e.what(),
                     out.c_str());
        return kExitNumerics;
    }
    const double mins =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    write_run_manifest(out + "_run.json", cmd);
    std::printf("trained %d iterations in %.1f min\ncheckpoint %s.json\nlog %s\n",
                cfg.iterations, mins, out.c_str(), paths.log_csv.c_str());
    return 0;
}

const char* organ_label(int k) { return phantom::organ_name(k); }

int run_eval(const CLI::App* cmd, const std::string& ckpt, const std::string& data,
             const std::string& out_csv, int patch, const std::string& dvf_mode,
             const std::string& save_dir, const std::string& split) {
    ckpt::Loaded loaded = ckpt::load(ckpt);
    train::Dataset ds = train::load_dataset(data);
    const std::vector<train::CasePair>& cases =
        split == "train" ? ds.train_cases : ds.val_cases;
    if (cases.empty()) throw ConfigError("no cases in split '" + split + "'");

    std::ofstream csv(out_csv);
    if (!csv) throw IoError("cannot write " + out_csv);
    csv << "case,organ,path,dsc,msd_mm,hd_mm,hd95_mm\n";
    if (!save_dir.empty()) fs::create_directories(save_dir);

    auto put = [&](const std::string& c, const std::string& organ, const std::string& path,
                   const metrics::OrganMetrics& m) {
        auto num = [](double v, bool failed) {
            return failed ? std::string("nan") : std::to_string(v);
        };
        csv << c << ',' << organ << ',' << path << ',' << num(m.dsc, m.failed) << ','
            << num(m.msd_mm, m.failed) << ',' << num(m.hd_mm, m.failed) << ','
            << num(m.hd95_mm, m.failed) << '\n';
    };

    for (const auto& cp : cases) {
        const Tensor<float>* override_dvf = nullptr;
        Tensor<float> zero_dvf;
        if (dvf_mode == "gt") {
            if (cp.dvf_gt.size() == 0)
                throw ConfigError("case '" + cp.name + "' has no reference field");
            override_dvf = &cp.dvf_gt;
        } else if (dvf_mode == "zero") {
            const int N = cp.daily.dim(0);
            zero_dvf = Tensor<float>({3, N, N, N});
            override_dvf = &zero_dvf;
        } else if (dvf_mode != "network") {
            throw ConfigError("unknown --dvf mode '" + dvf_mode + "'");
        }
        train::CaseReport rep = train::evaluate_case(loaded.net, cp, patch, override_dvf);
        for (int k = 1; k <= phantom::kNumOrgans; ++k) {
            if (rep.has_seg)
                put(cp.name, organ_label(k), "segmentation", rep.seg[size_t(k - 1)]);
            if (rep.has_reg)
                put(cp.name, organ_label(k), "registration", rep.reg[size_t(k - 1)]);
        }
        if (rep.has_reg)
            std::printf("%s: std_jacobian %.4f folding %.5f\n", cp.name.c_str(),
                        rep.stats.std_jacobian, rep.stats.folding_fraction);
        if (!save_dir.empty()) {
            const fs::path base = fs::path(save_dir) / cp.name;
            if (rep.has_seg) io::write_labels(base.string() + "_seg", rep.seg_pred);
            if (rep.has_reg) {
                io::write_labels(base.string() + "_reg", rep.reg_pred);
                io::write_dvf(base.string() + "_dvf", rep.dvf_full);
            }
        }
    }
    csv.close();
    write_run_manifest(out_csv + ".run.json", cmd);
    std::printf("metrics written to %s\n", out_csv.c_str());
    return 0;
}

int run_dvf_stats(const std::string& dvf_base, const std::string& labels_base, int label) {
    Tensor<float> u = io::read_dvf(dvf_base);
    dvf::DvfStats st;
    if (!labels_base.empty()) {
        LabelMap lm = io::read_labels(labels_base);
        const int D = u.dim(1), H = u.dim(2), W = u.dim(3);
        LabelMap mask({D - 2, H - 2, W - 2});
        long long o = 0;
        for (int z = 1; z < D - 1; ++z)
            for (int y = 1; y < H - 1; ++y)
                for (int x = 1; x < W - 1; ++x, ++o) {
                    const uint8_t v = lm[(static_cast<long long>(z) * H + y) * W + x];
                    mask[o] = label < 0 ? (v != 0) : (v == label);
                }
        st = dvf::dvf_stats(u, &mask);
    } else {
        st = dvf::dvf_stats(u);
    }
    json j;
    j["std_jacobian"] = st.std_jacobian;
    j["folding_fraction"] = st.folding_fraction;
    j["region_voxels"] = st.region_voxels;
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
}

int run_report(const std::vector<std::string>& csvs, const std::string& out_md,
               const std::string& weights_csv, const std::string& log_csv,
               const std::string& svg_dir) {
    try {
        if (!csvs.empty() && !out_md.empty()) {
            std::vector<std::pair<std::string, std::vector<report::MetricsRow>>> nets;
            for (const auto& p : csvs)
                nets.emplace_back(fs::path(p).stem().string(), report::read_metrics_csv(p));
            std::ofstream f(out_md);
            if (!f) throw IoError("cannot write " + out_md);
            f << report::metrics_markdown(nets);
            std::printf("table written to %s\n", out_md.c_str());
        }
        auto emit_svg = [&](const std::string& name, const std::string& svg) {
            fs::create_directories(svg_dir.empty() ? "." : svg_dir);
            const fs::path p = fs::path(svg_dir.empty() ? "." : svg_dir) / name;
            std::ofstream f(p);
            if (!f) throw IoError("cannot write " + p.string());
            f << svg;
            std::printf("plot written to %s\n", p.string().c_str());
        };
        if (!weights_csv.empty())
            emit_svg("weights.svg",
                     report::line_svg("Loss-weight evolution", "iteration", "weight",
                                      report::weight_series(weights_csv)));
        if (!log_csv.empty())
            emit_svg("losses.svg", report::line_svg("Training losses", "iteration", "loss",
                                                    report::loss_series(log_csv)));
    } catch (const DataError& e) {
        std::fprintf(stderr, "schema error: %s\n", e.what());
        return kExitSchema;
    }
    return 0;
}

int run_gradcheck(uint64_t seed, bool quick, bool full_arch, const std::string& inject) {
    gradcheck::Options opt;
    opt.seed = seed;
    opt.quick = quick;
    opt.full_arch = full_arch;
    opt.inject = inject;
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = gradcheck::run_all(opt);
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-22s %s  max rel err %.2e  (%lld coords, %.2fs)\n", r.name.c_str(),
                    r.pass ? "PASS" : "FAIL", r.max_rel, r.coords, r.seconds);
        ok = ok && r.pass;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s: %zu checks in %.1fs\n", ok ? "ALL PASS" : "FAILURES PRESENT",
                results.size(), secs);
    if (!ok)
        for (const auto& r : results)
            if (!r.pass) std::fprintf(stderr, "failing op: %s\n", r.name.c_str());
    return ok ? 0 : kExitSelftest;
}

bool expect(bool cond, const char* name, bool& ok) {
    std::printf("%-46s %s\n", name, cond ? "PASS" : "FAIL");
    ok = ok && cond;
    return cond;
}

int run_selftest(uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;

    // Shape law
    for (int n : {44, 48, 96}) {
        const OutputShapes os = output_shapes(n);
        expect(os.coarse == n / 4 - 7 && os.mid == n / 2 - 18 && os.fine == n - 40,
               ("output shape law n=" + std::to_string(n)).c_str(), ok);
    }

    // Loss identities
    {
        Rng rng(mix_seed(seed, "selftest"));
        Tensor<double> img({1, 5, 5, 5});
        for (auto& v : img.data) v = draw_uniform(rng, -1, 1);
        Tensor<double> neg = img;
        for (auto& v : neg.data) v = -v;
        Tape<double> tp;
        Var<double> a = tp.leaf(img), b = tp.leaf(img), c = tp.leaf(neg);
        expect(std::abs(tp.value(losses::ncc_loss(tp, a, b))[0]) < 1e-6,
               "ncc identity: NCC(I,I) = 0", ok);
        expect(std::abs(tp.value(losses::ncc_loss(tp, a, c))[0] - 2) < 1e-6,
               "ncc identity: NCC(I,-I) = 2", ok);

        LabelMap lm({4, 4, 4});
        for (auto& v : lm.data) v = static_cast<uint8_t>(draw_index(rng, 3));
        Tensor<double> oh = ops::one_hot<double>(lm, 3);
        Var<double> p = tp.leaf(oh), t = tp.leaf(oh);
        expect(tp.value(losses::dice_loss(tp, p, t))[0] < 1e-6,
               "dice identity: perfect prediction", ok);

        // affine displacement has zero second derivatives
        Tensor<double> u({3, 6, 6, 6});
        const double A[3][4] = {{0.02, -0.01, 0.03, 0.2}, {0.01, 0.04, 0.0, -0.1},
                                {-0.02, 0.01, 0.02, 0.3}};
        for (int ch = 0; ch < 3; ++ch)
            for (int z = 0; z < 6; ++z)
                for (int y = 0; y < 6; ++y)
                    for (int x = 0; x < 6; ++x)
                        u[((static_cast<long long>(ch) * 6 + z) * 6 + y) * 6 + x] =
                            A[ch][0] * z + A[ch][1] * y + A[ch][2] * x + A[ch][3];
        expect(tp.value(losses::bending_energy(tp, tp.leaf(u)))[0] < 1e-9,
               "bending identity: affine field", ok);
    }

    // Jacobian facts
    {
        Tensor<float> z({3, 5, 5, 5});
        const dvf::DvfStats st = dvf::dvf_stats(z);
        expect(st.std_jacobian == 0 && st.folding_fraction == 0, "jacobian: zero field", ok);
        Tensor<float> s({3, 7, 7, 7});
        for (int ch = 0; ch < 3; ++ch)
            for (int z2 = 0; z2 < 7; ++z2)
                for (int y = 0; y < 7; ++y)
                    for (int x = 0; x < 7; ++x) {
                        const int c[3] = {z2, y, x};
                        s[((static_cast<long long>(ch) * 7 + z2) * 7 + y) * 7 + x] =
                            0.1f * static_cast<float>(c[ch]);
                    }
        Tensor<float> jd = dvf::jacobian_det(s);
        bool close = true;
        for (float v : jd.data) close = close && std::abs(v - 1.331) < 1e-3;
        expect(close, "jacobian: 1.1 scale determinant 1.331", ok);
    }

    // Weighting identities
    {
        weighting::DwaState dwa(3, 1.0);
        auto w = dwa.weights();
        expect(w[0] == 1 && w[1] == 1 && w[2] == 1, "dwa: first-iteration weights = 1", ok);
        weighting::DwaState d2(2, 1.0);
        d2.push({1.0, 1.0});
        d2.push({1.0, 0.0});
        auto w2 = d2.weights();
        expect(std::abs(w2[0] - 1.4621) < 1e-4 && std::abs(w2[1] - 0.5379) < 1e-4,
               "dwa: K=2 r=(1,0) softmax weights", ok);
        expect(std::abs(w2[0] + w2[1] - 2) < 1e-12, "dwa: weights sum to K", ok);

        // homoscedastic optimum: d/deta [exp(-eta) L + eta/2] = 0 at sigma^2 = 2L
        const double L = 0.7;
        const double eta = std::log(2 * L);
        expect(std::abs(-std::exp(-eta) * L + 0.5) < 1e-9,
               "homoscedastic: gradient vanishes at sigma^2=2L", ok);
    }

    // Gradient checks (reduced preset)
    gradcheck::Options opt;
    opt.seed = seed;
    opt.quick = true;
    for (const auto& r : gradcheck::run_all(opt))
        expect(r.pass, ("gradcheck " + r.name).c_str(), ok);

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("selftest %s in %.1fs\n", ok ? "PASSED" : "FAILED", secs);
    return ok ? 0 : kExitSelftest;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Joint registration/segmentation multi-task CNN engine on synthetic CT phantoms"};
    app.require_subcommand(1);

    // phantom
    auto* cmd_ph = app.add_subcommand("phantom", "Generate a synthetic dataset tree");
    std::string ph_out = "dataset";
    int ph_patients = 2, ph_fractions = 2, ph_size = 96;
    uint64_t ph_seed = 0;
    double ph_bscale = 0;
    cmd_ph->add_option("--out", ph_out, "Output directory");
    cmd_ph->add_option("--patients", ph_patients, "Number of patients");
    cmd_ph->add_option("--fractions", ph_fractions, "Daily fractions per patient");
    cmd_ph->add_option("--seed", ph_seed, "Master seed");
    cmd_ph->add_option("--size", ph_size, "Volume extent per axis");
    cmd_ph->add_option("--bladder-scale", ph_bscale,
                       "Fixed bladder volume scale (0 = draw per fraction)");

    // train
    auto* cmd_tr = app.add_subcommand("train", "Train a network");
    train::TrainConfig cfg;
    std::string tr_arch = "cross-stitch", tr_weighting = "equal";
    std::string tr_data = "dataset", tr_out = "ckpt", tr_resume;
    bool tr_nondet = false;
    cmd_tr->add_option("--arch", tr_arch, "seg|reg|jrs-reg|dense|sedd|cross-stitch");
    cmd_tr->add_option("--weighting", tr_weighting, "equal|homoscedastic|dwa");
    cmd_tr->add_option("--data", tr_data, "Dataset directory");
    cmd_tr->add_option("--iters", cfg.iterations, "Training iterations");
    cmd_tr->add_option("--patch", cfg.patch, "Patch extent");
    cmd_tr->add_option("--lr", cfg.lr, "Learning rate (fixed)");
    cmd_tr->add_option("--bending", cfg.bending_weight, "Bending-energy weight");
    cmd_tr->add_option("--grad-clip", cfg.grad_clip, "Global gradient-norm cap (0 = off)");
    cmd_tr->add_option("--seed", cfg.seed, "Master seed");
    cmd_tr->add_option("--log-interval", cfg.log_interval, "Iterations between log rows");
    cmd_tr->add_option("--dwa-tmp", cfg.dwa_tmp, "DWA softmax temperature");
    cmd_tr->add_option("--dwa-ma", cfg.dwa_ma_window, "DWA moving-average window (0 = off)");
    cmd_tr->add_flag("--radam", cfg.radam, "Rectified Adam instead of Adam");
    cmd_tr->add_flag("--no-deterministic", tr_nondet, "Allow nondeterministic execution");
    cmd_tr->add_option("--out", tr_out, "Checkpoint base path");
    cmd_tr->add_option("--resume", tr_resume, "Checkpoint base to resume from");

    // eval
    auto* cmd_ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data = "dataset", ev_out = "metrics.csv", ev_dvf = "network",
                ev_save, ev_split = "val";
    int ev_patch = 48;
    cmd_ev->add_option("--ckpt", ev_ckpt, "Checkpoint base path")->required();
    cmd_ev->add_option("--data", ev_data, "Dataset directory");
    cmd_ev->add_option("--out", ev_out, "Metrics CSV path");
    cmd_ev->add_option("--patch", ev_patch, "Sliding-window extent");
    cmd_ev->add_option("--dvf", ev_dvf, "network|gt|zero displacement source");
    cmd_ev->add_option("--save", ev_save, "Directory for predicted masks and fields");
    cmd_ev->add_option("--split", ev_split, "train|val");

    // dvf-stats
    auto* cmd_dv = app.add_subcommand("dvf-stats", "Jacobian statistics of a stored field");
    std::string dv_dvf, dv_labels;
    int dv_label = -1;
    cmd_dv->add_option("--dvf", dv_dvf, "Field base path")->required();
    cmd_dv->add_option("--labels", dv_labels, "Optional label volume for masking");
    cmd_dv->add_option("--label", dv_label, "Mask label id (-1 = any nonzero)");

    // report
    auto* cmd_rp = app.add_subcommand("report", "Render tables and plots from CSVs");
    std::vector<std::string> rp_csvs;
    std::string rp_out, rp_weights, rp_log, rp_svg_dir;
    cmd_rp->add_option("--csv", rp_csvs, "Metrics CSVs (one per network)");
    cmd_rp->add_option("--out", rp_out, "Markdown output path");
    cmd_rp->add_option("--weights-csv", rp_weights, "Weight-evolution CSV to plot");
    cmd_rp->add_option("--log-csv", rp_log, "Training-log CSV to plot");
    cmd_rp->add_option("--svg-dir", rp_svg_dir, "Directory for SVG plots");

    // gradcheck / selftest
    auto* cmd_gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    uint64_t gc_seed = 0;
    bool gc_quick = false, gc_no_arch = false;
    std::string gc_inject;
    cmd_gc->add_option("--seed", gc_seed, "Random seed");
    cmd_gc->add_flag("--quick", gc_quick, "Reduced instance counts");
    cmd_gc->add_flag("--no-arch", gc_no_arch, "Skip whole-network checks");
    cmd_gc->add_option("--inject-fault", gc_inject,
                       "Perturb the named op's analytic gradient (harness check)");

    auto* cmd_st = app.add_subcommand("selftest", "Full invariant suite");
    uint64_t st_seed = 0;
    cmd_st->add_option("--seed", st_seed, "Random seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_ph->parsed())
            return run_phantom(cmd_ph, ph_out, ph_patients, ph_fractions, ph_seed, ph_size,
                               ph_bscale);
        if (cmd_tr->parsed()) {
            cfg.arch = arch_from_name(tr_arch);
            cfg.strategy = weighting::strategy_from_name(tr_weighting);
            cfg.deterministic = !tr_nondet;
            return run_train(cmd_tr, cfg, tr_data, tr_out, tr_resume);
        }
        if (cmd_ev->parsed())
            return run_eval(cmd_ev, ev_ckpt, ev_data, ev_out, ev_patch, ev_dvf, ev_save,
                            ev_split);
        if (cmd_dv->parsed()) return run_dvf_stats(dv_dvf, dv_labels, dv_label);
        if (cmd_rp->parsed()) return run_report(rp_csvs, rp_out, rp_weights, rp_log, rp_svg_dir);
        if (cmd_gc->parsed()) return run_gradcheck(gc_seed, gc_quick, !gc_no_arch, gc_inject);
        if (cmd_st->parsed()) return run_selftest(st_seed);
    } catch (const CorruptCheckpointError& e) {
        std::fprintf(stderr, "corrupt checkpoint: %s\n", e.what());
        return kExitCorrupt;
    } catch (const NumericsError& e) {
        std::fprintf(stderr, "numerics failure: %s\n", e.what());
        return kExitNumerics;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const SizeError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitSchema;
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kExitIo;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    }
    return 0;
}
