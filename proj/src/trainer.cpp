#include "regseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "regseg/checkpoint.hpp"
#include "regseg/volume_io.hpp"

namespace regseg::train {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
    output_shapes(patch);  // patch >= 44, divisible by 4
    if (lr <= 0) throw ConfigError("learning rate must be positive");
    if (bending_weight < 0) throw ConfigError("bending weight must be nonnegative");
    if (iterations < 0) throw ConfigError("negative iteration count");
    if (num_classes < 2) throw ConfigError("need at least background + 1 class");
    if (log_interval < 1) throw ConfigError("log interval must be >= 1");
}

const std::vector<int>& seg_class_remap() {
    // air and torso -> background; scored organs keep their ids
    static const std::vector<int> remap = {0, 1, 2, 3, 4, 0};
    return remap;
}

namespace {

constexpr double kHuScale = 1.0 / 1000.0;  // HU in [-1000,1000] -> [-1,1]

Tensor<float> normalized(const Tensor<float>& v) {
    Tensor<float> out = v;
    for (auto& x : out.data) x = static_cast<float>(x * kHuScale);
    return out;
}

void index_groups(CasePair& cp) {
    for (auto& g : cp.group_voxels) g.clear();
    for (long long i = 0; i < cp.daily_labels.size(); ++i) {
        switch (cp.daily_labels[i]) {
            case phantom::kProstate:
            case phantom::kSeminalVesicles: cp.group_voxels[0].push_back(i); break;
            case phantom::kBladder:
            case phantom::kRectum: cp.group_voxels[1].push_back(i); break;
            case phantom::kTorso: cp.group_voxels[2].push_back(i); break;
            default: break;
        }
    }
}

CasePair load_case(const fs::path& dir, const std::string& name) {
    CasePair cp;
    cp.name = name;
    cp.planning = normalized(io::read_volume((dir / "planning").string()));
    cp.planning_labels = io::read_labels((dir / "planning_labels").string());
    cp.daily = normalized(io::read_volume((dir / "daily").string()));
    cp.daily_labels = io::read_labels((dir / "daily_labels").string());
    if (fs::exists(dir / "dvf_gt.json")) cp.dvf_gt = io::read_dvf((dir / "dvf_gt").string());
    index_groups(cp);
    return cp;
}

}  // namespace

CasePair make_case_pair(std::string name, const phantom::Case& planning,
                        const phantom::DailyCase& daily) {
    CasePair cp;
    cp.name = std::move(name);
    cp.planning = normalized(planning.volume);
    cp.planning_labels = planning.labels;
    cp.daily = normalized(daily.scan.volume);
    cp.daily_labels = daily.scan.labels;
    cp.dvf_gt = daily.dvf_gt;
    index_groups(cp);
    return cp;
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream sf(fs::path(dir) / "split.json");
    if (!sf) throw IoError("cannot read split.json in " + dir);
    json split;
    try {
        sf >> split;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed split.json: ") + e.what());
    }
    Dataset ds;
    for (const auto& [key, dst] : {std::pair<const char*, std::vector<CasePair>*>{
                                       "train", &ds.train_cases},
                                   {"val", &ds.val_cases}}) {
        if (!split.contains(key)) throw DataError("split.json missing '" + std::string(key) + "'");
        for (const auto& name : split[key])
            dst->push_back(load_case(fs::path(dir) / name.get<std::string>(),
                                     name.get<std::string>()));
    }
    if (ds.train_cases.empty()) throw DataError("dataset has no training cases");
    return ds;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& c) : cfg(c) {
    cfg.validate();
    ArchSpec spec;
    spec.kind = cfg.arch;
    spec.filters = ArchSpec::default_filters(cfg.arch);
    spec.num_classes = cfg.num_classes;
    net = build<float>(spec);
    init_params(net, cfg.seed);
    homo = weighting::HomoscedasticState<float>(
        cfg.strategy == weighting::Strategy::homoscedastic ? num_tasks() : 0);
    dwa = weighting::DwaState(num_tasks(), cfg.dwa_tmp);
    dwa.ma_window = cfg.dwa_ma_window;
    rng.seed(mix_seed(cfg.seed, "trainer"));
}

int Trainer::num_tasks() const {
    switch (cfg.arch) {
        case ArchKind::seg: return 1;      // dsc_s
        case ArchKind::reg: return 1;      // ncc
        case ArchKind::jrs_reg: return 2;  // ncc, dsc_r
        default: return 3;                 // ncc, dsc_r, dsc_s
    }
}

PatchPair Trainer::sample_patch(const Dataset& ds) {
    const auto idx = draw_index(rng, static_cast<long long>(ds.train_cases.size()));
    return sample_patch(ds.train_cases[static_cast<size_t>(idx)]);
}

PatchPair Trainer::sample_patch(const CasePair& cp) {
    const int n = cfg.patch;
    const int N = cp.daily_labels.dim(0);
    if (N < n)
        throw SizeError("case extent " + std::to_string(N) + " smaller than patch " +
                        std::to_string(n));
    int group = -1;
    long long center = -1;
    for (int attempt = 0; attempt < 64; ++attempt) {
        const int g = static_cast<int>(draw_index(rng, 3));
        const auto& vox = cp.group_voxels[static_cast<size_t>(g)];
        if (vox.empty()) {
            ++resamples;
            continue;
        }
        group = g;
        center = vox[static_cast<size_t>(draw_index(rng, static_cast<long long>(vox.size())))];
        break;
    }
    if (group < 0) throw ConfigError("case '" + cp.name + "' has no sampleable voxels");

    const int cz = static_cast<int>(center / (N * N));
    const int cy = static_cast<int>((center / N) % N);
    const int cx = static_cast<int>(center % N);
    auto clamp_origin = [&](int c) { return std::min(std::max(c - n / 2, 0), N - n); };

    PatchPair p;
    p.class_group = group;
    p.origin = {clamp_origin(cz), clamp_origin(cy), clamp_origin(cx)};

    auto crop_vol = [&](const Tensor<float>& v) {
        Tensor<float> out({n, n, n});
        long long o = 0;
        for (int z = 0; z < n; ++z)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x, ++o)
                    out[o] = v[(static_cast<long long>(p.origin[0] + z) * N + p.origin[1] + y) *
                                   N +
                               p.origin[2] + x];
        return out;
    };
    auto crop_lab = [&](const LabelMap& v) {
        LabelMap out({n, n, n});
        long long o = 0;
        for (int z = 0; z < n; ++z)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x, ++o)
                    out[o] = v[(static_cast<long long>(p.origin[0] + z) * N + p.origin[1] + y) *
                                   N +
                               p.origin[2] + x];
        return out;
    };
    p.fixed = crop_vol(cp.daily);
    p.fixed_labels = crop_lab(cp.daily_labels);
    p.moving = crop_vol(cp.planning);
    p.moving_labels = crop_lab(cp.planning_labels);
    return p;
}

namespace {

// Per-direction deep-supervision-aggregated loss terms on the shared tape.
struct DirTerms {
    Var<float> ncc, dscr, dscs, be;
};

DirTerms direction_terms(Tape<float>& tp, Network<float>& net, const ParamVars<float>& pv,
                         const Tensor<float>& fixed, const Tensor<float>& moving,
                         const LabelMap& fixed_labels, const LabelMap& moving_labels,
                         const TrainConfig& cfg) {
    const ArchSpec& spec = net.spec;
    const int n = fixed.dim(0);
    const int K1 = cfg.num_classes;
    const auto* remap = &seg_class_remap();

    NetInputs<float> in;
    in.fixed = fixed;
    if (spec.has_reg_head()) {
        in.moving = moving;
        if (spec.kind != ArchKind::reg)
            in.moving_seg = ops::one_hot<float>(moving_labels, K1, remap);
    }
    MultiResOutput<float> out = forward(tp, net, pv, in, ops::BnMode::train);

    const OutputShapes os = output_shapes(n);
    const int ext[3] = {os.coarse, os.mid, os.fine};
    const int strd[3] = {4, 2, 1};
    const bool use_dscr = out.has_reg && spec.kind != ArchKind::reg;

    std::array<Var<float>, 3> l_seg, l_ncc, l_dscr, l_be;
    for (int i = 0; i < 3; ++i) {
        const int e = ext[i], s = strd[i];
        if (out.has_seg) {
            Var<float> target = tp.leaf(
                ops::one_hot<float>(ops::subsample_center_labels(fixed_labels, e, s), K1, remap),
                "seg_target");
            l_seg[i] = losses::dice_loss(tp, ops::softmax_c(tp, out.seg[i]), target);
        }
        if (out.has_reg) {
            Tensor<float> msub = ops::subsample_center(moving, e, s);
            Tensor<float> fsub = ops::subsample_center(fixed, e, s);
            msub.shape = {1, e, e, e};
            fsub.shape = {1, e, e, e};
            Var<float> mv = tp.leaf(std::move(msub), "moving_sub");
            Var<float> fv = tp.leaf(std::move(fsub), "fixed_sub");
            Var<float> warped = ops::warp(tp, mv, out.dvf[i]);
            l_ncc[i] = losses::ncc_loss(tp, fv, warped);
            l_be[i] = losses::bending_energy(tp, out.dvf[i]);
            if (use_dscr) {
                Var<float> moh = tp.leaf(
                    ops::one_hot<float>(ops::subsample_center_labels(moving_labels, e, s), K1,
                                        remap),
                    "moving_onehot");
                Var<float> foh = tp.leaf(
                    ops::one_hot<float>(ops::subsample_center_labels(fixed_labels, e, s), K1,
                                        remap),
                    "fixed_onehot");
                l_dscr[i] = losses::dice_loss(tp, ops::warp(tp, moh, out.dvf[i]), foh);
            }
        }
    }

    DirTerms t;
    if (out.has_seg) t.dscs = losses::deep_supervision_aggregate(tp, l_seg[0], l_seg[1], l_seg[2]);
    if (out.has_reg) {
        t.ncc = losses::deep_supervision_aggregate(tp, l_ncc[0], l_ncc[1], l_ncc[2]);
        t.be = losses::deep_supervision_aggregate(tp, l_be[0], l_be[1], l_be[2]);
        if (use_dscr)
            t.dscr = losses::deep_supervision_aggregate(tp, l_dscr[0], l_dscr[1], l_dscr[2]);
    }
    return t;
}

Var<float> add_or_set(Tape<float>& tp, Var<float> a, Var<float> b) {
    if (!a.valid()) return b;
    if (!b.valid()) return a;
    return ops::add(tp, a, b);
}

}  // namespace

std::array<double, 4> Trainer::current_weights() const {
    std::array<double, 4> w{0, 0, 0, cfg.bending_weight};
    const bool has[3] = {cfg.arch != ArchKind::seg,  // ncc
                         cfg.arch != ArchKind::seg && cfg.arch != ArchKind::reg,  // dsc_r
                         ArchSpec{.kind = cfg.arch}.has_seg_head()};              // dsc_s
    std::vector<double> task_w;
    switch (cfg.strategy) {
        case weighting::Strategy::equal:
            task_w.assign(static_cast<size_t>(num_tasks()), 1.0);
            break;
        case weighting::Strategy::dwa: task_w = dwa.weights(); break;
        case weighting::Strategy::homoscedastic:
            for (int i = 0; i < homo.num_tasks(); ++i) task_w.push_back(homo.effective_weight(i));
            break;
    }
    size_t t = 0;
    for (int slot = 0; slot < 3; ++slot)
        if (has[slot]) w[static_cast<size_t>(slot)] = task_w[t++];
    if (cfg.arch == ArchKind::seg) w[3] = 0;  // no displacement field to regularize
    return w;
}

Tensor<float>& Trainer::param_by_name(const std::string& name) {
    if (name.rfind("homo/eta", 0) == 0) {
        const int i = std::stoi(name.substr(8));
        return homo.eta[static_cast<size_t>(i)];
    }
    return net.params.at(name);
}

void Trainer::apply_update(std::map<std::string, Tensor<float>>& grads) {
    // global-norm clip
    if (cfg.grad_clip > 0) {
        double sq = 0;
        for (const auto& [name, g] : grads)
            for (float v : g.data) sq += static_cast<double>(v) * v;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
            const float s = static_cast<float>(cfg.grad_clip / norm);
            for (auto& [name, g] : grads)
                for (float& v : g.data) v *= s;
            ++clips;
        }
    }

    const long long t = iteration + 1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
    // variance rectification (RAdam)
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double b2t = std::pow(b2, static_cast<double>(t));
    const double rho_t = rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
    const bool rectified = rho_t > 4.0;
    const double r_t = rectified
                           ? std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                           : 0.0;

    for (auto& [name, g] : grads) {
        Tensor<float>& p = param_by_name(name);
        if (!p.same_shape(g))
            throw ShapeError("gradient shape mismatch for parameter '" + name + "'");
        auto mit = opt_m.find(name);
        if (mit == opt_m.end()) {
            opt_m.emplace(name, Tensor<float>(p.shape));
            opt_v.emplace(name, Tensor<float>(p.shape));
            mit = opt_m.find(name);
        }
        Tensor<float>& m = mit->second;
        Tensor<float>& v = opt_v.at(name);
        for (long long i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double mi = b1 * m[i] + (1 - b1) * gi;
            const double vi = b2 * v[i] + (1 - b2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            double step;
            if (!cfg.radam) {
                step = cfg.lr * mhat / (std::sqrt(vi / bc2) + eps);
            } else if (rectified) {
                step = cfg.lr * r_t * mhat / (std::sqrt(vi / bc2) + eps);
            } else {
                step = cfg.lr * mhat;  // warmup: unrectified SGD-with-momentum form
            }
            p[i] = static_cast<float>(p[i] - step);
        }
    }
    ++iteration;
}

std::map<std::string, Tensor<float>> Trainer::direction_grads(const PatchPair& pair,
                                                              bool swapped, StepRecord* rec) {
    Tape<float> tp;
    ParamVars<float> pv = stage_params(tp, net);
    std::vector<Var<float>> eta_vars;
    if (cfg.strategy == weighting::Strategy::homoscedastic)
        eta_vars = weighting::stage_eta(tp, homo);

    const Tensor<float>& fx = swapped ? pair.moving : pair.fixed;
    const Tensor<float>& mv = swapped ? pair.fixed : pair.moving;
    const LabelMap& fl = swapped ? pair.moving_labels : pair.fixed_labels;
    const LabelMap& ml = swapped ? pair.fixed_labels : pair.moving_labels;
    DirTerms t = direction_terms(tp, net, pv, fx, mv, fl, ml, cfg);

    auto val = [&](Var<float> v) { return v.valid() ? static_cast<double>(tp.value(v)[0]) : 0.0; };
    std::vector<Var<float>> tasks;
    if (t.ncc.valid()) tasks.push_back(t.ncc);
    if (t.dscr.valid()) tasks.push_back(t.dscr);
    if (t.dscs.valid()) tasks.push_back(t.dscs);

    Var<float> total;
    if (cfg.strategy == weighting::Strategy::homoscedastic) {
        total = weighting::homoscedastic_loss(tp, tasks, eta_vars);
    } else {
        const auto w = current_weights();
        losses::LossTerms<float> lt{t.ncc, t.dscr, t.dscs, Var<float>{}};
        total = losses::joint_loss(tp, lt, w[0], w[1], w[2], 0.0);
    }
    if (t.be.valid()) total = add_or_set(tp, total, ops::scale(tp, t.be, cfg.bending_weight));

    if (rec) {
        rec->l_ncc += val(t.ncc);
        rec->l_dscr += val(t.dscr);
        rec->l_dscs += val(t.dscs);
        rec->l_be += val(t.be);
        rec->total += static_cast<double>(tp.value(total)[0]);
    }
    tp.backward(total);

    std::map<std::string, Tensor<float>> grads;
    for (auto& [name, var] : pv)
        grads[name] = tp.has_grad(var) ? tp.grad(var) : Tensor<float>(net.params.at(name).shape);
    for (size_t i = 0; i < eta_vars.size(); ++i) {
        const std::string name = "homo/eta" + std::to_string(i);
        grads[name] =
            tp.has_grad(eta_vars[i]) ? tp.grad(eta_vars[i]) : Tensor<float>({1});
    }
    return grads;
}

StepRecord Trainer::train_step(const PatchPair& pair) {
    const auto t0 = std::chrono::steady_clock::now();
    StepRecord rec;
    const auto w = current_weights();
    rec.w0 = w[0];
    rec.w1 = w[1];
    rec.w2 = w[2];
    rec.w3 = w[3];

    Tape<float> tp;
    ParamVars<float> pv = stage_params(tp, net);
    std::vector<Var<float>> eta_vars;
    if (cfg.strategy == weighting::Strategy::homoscedastic)
        eta_vars = weighting::stage_eta(tp, homo);

    // the batch is doubled by exchanging the fixed and moving patches
    DirTerms a = direction_terms(tp, net, pv, pair.fixed, pair.moving, pair.fixed_labels,
                                 pair.moving_labels, cfg);
    DirTerms b = direction_terms(tp, net, pv, pair.moving, pair.fixed, pair.moving_labels,
                                 pair.fixed_labels, cfg);
    DirTerms s;
    s.ncc = add_or_set(tp, a.ncc, b.ncc);
    s.dscr = add_or_set(tp, a.dscr, b.dscr);
    s.dscs = add_or_set(tp, a.dscs, b.dscs);
    s.be = add_or_set(tp, a.be, b.be);

    auto val = [&](Var<float> v) { return v.valid() ? static_cast<double>(tp.value(v)[0]) : 0.0; };
    rec.l_ncc = val(s.ncc);
    rec.l_dscr = val(s.dscr);
    rec.l_dscs = val(s.dscs);
    rec.l_be = val(s.be);

    std::vector<Var<float>> tasks;
    if (s.ncc.valid()) tasks.push_back(s.ncc);
    if (s.dscr.valid()) tasks.push_back(s.dscr);
    if (s.dscs.valid()) tasks.push_back(s.dscs);

    Var<float> total;
    if (cfg.strategy == weighting::Strategy::homoscedastic) {
        total = weighting::homoscedastic_loss(tp, tasks, eta_vars);
    } else {
        losses::LossTerms<float> lt{s.ncc, s.dscr, s.dscs, Var<float>{}};
        total = losses::joint_loss(tp, lt, w[0], w[1], w[2], 0.0);
    }
    if (s.be.valid()) total = add_or_set(tp, total, ops::scale(tp, s.be, cfg.bending_weight));
    rec.total = static_cast<double>(tp.value(total)[0]);

    tp.backward(total);

    std::map<std::string, Tensor<float>> grads;
    for (auto& [name, var] : pv)
        grads[name] = tp.has_grad(var) ? tp.grad(var) : Tensor<float>(net.params.at(name).shape);
    for (size_t i = 0; i < eta_vars.size(); ++i) {
        const std::string name = "homo/eta" + std::to_string(i);
        grads[name] = tp.has_grad(eta_vars[i]) ? tp.grad(eta_vars[i]) : Tensor<float>({1});
    }
    const long long clips_before = clips;
    apply_update(grads);
    rec.clipped = clips != clips_before;

    if (cfg.strategy == weighting::Strategy::dwa) {
        std::vector<double> hist;
        if (s.ncc.valid()) hist.push_back(rec.l_ncc);
        if (s.dscr.valid()) hist.push_back(rec.l_dscr);
        if (s.dscs.valid()) hist.push_back(rec.l_dscs);
        dwa.push(hist);
    }

    rec.iter = iteration;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

void Trainer::save_checkpoint(const std::string& base) const {
    std::map<std::string, Tensor<float>> extra;
    for (const auto& [name, t] : opt_m) extra["adam_m/" + name] = t;
    for (const auto& [name, t] : opt_v) extra["adam_v/" + name] = t;
    for (size_t i = 0; i < homo.eta.size(); ++i) extra["homo/eta" + std::to_string(i)] = homo.eta[i];
    if (!dwa.prev1.empty()) {
        Tensor<float> p1({static_cast<int>(dwa.prev1.size())});
        for (size_t i = 0; i < dwa.prev1.size(); ++i) p1[static_cast<long long>(i)] =
            static_cast<float>(dwa.prev1[i]);
        extra["dwa/prev1"] = std::move(p1);
    }
    if (!dwa.prev2.empty()) {
        Tensor<float> p2({static_cast<int>(dwa.prev2.size())});
        for (size_t i = 0; i < dwa.prev2.size(); ++i) p2[static_cast<long long>(i)] =
            static_cast<float>(dwa.prev2[i]);
        extra["dwa/prev2"] = std::move(p2);
    }

    std::ostringstream rs;
    rs << rng;
    json meta;
    meta["rng"] = rs.str();
    meta["strategy"] = weighting::strategy_name(cfg.strategy);
    meta["patch"] = cfg.patch;
    meta["lr"] = cfg.lr;
    meta["bending_weight"] = cfg.bending_weight;
    meta["radam"] = cfg.radam;
    meta["dwa_seen"] = dwa.iters_seen;
    meta["resamples"] = resamples;
    meta["clips"] = clips;
    ckpt::save(base, net, iteration, extra, meta.dump());
}

Trainer Trainer::load_checkpoint(const std::string& base, const TrainConfig& cfg) {
    ckpt::Loaded loaded = ckpt::load(base, &cfg.arch);
    Trainer tr(cfg);
    tr.net = std::move(loaded.net);
    tr.iteration = loaded.iteration;

    json meta = json::parse(loaded.meta);
    if (meta.contains("rng")) {
        std::istringstream rs(meta["rng"].get<std::string>());
        rs >> tr.rng;
    }
    tr.resamples = meta.value("resamples", 0LL);
    tr.clips = meta.value("clips", 0LL);
    tr.dwa.iters_seen = meta.value("dwa_seen", 0);

    for (auto& [name, t] : loaded.extra) {
        if (name.rfind("adam_m/", 0) == 0) {
            tr.opt_m[name.substr(7)] = std::move(t);
        } else if (name.rfind("adam_v/", 0) == 0) {
            tr.opt_v[name.substr(7)] = std::move(t);
        } else if (name.rfind("homo/eta", 0) == 0) {
            const size_t i = static_cast<size_t>(std::stoi(name.substr(8)));
            if (i < tr.homo.eta.size()) tr.homo.eta[i] = std::move(t);
        } else if (name == "dwa/prev1") {
            tr.dwa.prev1.assign(t.data.begin(), t.data.end());
        } else if (name == "dwa/prev2") {
            tr.dwa.prev2.assign(t.data.begin(), t.data.end());
        }
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

CaseReport evaluate_case(Network<float>& net, const CasePair& cp, int patch,
                         const Tensor<float>* override_dvf) {
    const ArchSpec& spec = net.spec;
    const int n = patch;
    const int N = cp.daily.dim(0);
    if (N < n)
        throw SizeError("volume extent " + std::to_string(N) + " smaller than window " +
                        std::to_string(n));
    const int fine = output_shapes(n).fine;
    const int off = (n - fine) / 2;

    CaseReport rep;
    rep.has_seg = spec.has_seg_head();
    rep.has_reg = spec.has_reg_head();
    rep.seg_pred = LabelMap({N, N, N});
    rep.dvf_full = Tensor<float>({3, N, N, N});
    const long long S = static_cast<long long>(N) * N * N;

    std::vector<int> origins;
    for (int o = 0;; o += fine) {
        if (o > N - n) o = N - n;
        origins.push_back(o);
        if (o == N - n) break;
    }

    const bool run_network = rep.has_seg || !override_dvf;
    if (run_network) {
        const auto* remap = &seg_class_remap();
        for (int oz : origins)
            for (int oy : origins)
                for (int ox : origins) {
                    auto crop_vol = [&](const Tensor<float>& v) {
                        Tensor<float> out({n, n, n});
                        long long o = 0;
                        for (int z = 0; z < n; ++z)
                            for (int y = 0; y < n; ++y)
                                for (int x = 0; x < n; ++x, ++o)
                                    out[o] = v[(static_cast<long long>(oz + z) * N + oy + y) * N +
                                               ox + x];
                        return out;
                    };
                    Tape<float> tp;
                    ParamVars<float> pv = stage_params(tp, net);
                    NetInputs<float> in;
                    in.fixed = crop_vol(cp.daily);
                    if (spec.has_reg_head()) {
                        in.moving = crop_vol(cp.planning);
                        if (spec.kind != ArchKind::reg) {
                            LabelMap ml({n, n, n});
                            long long o = 0;
                            for (int z = 0; z < n; ++z)
                                for (int y = 0; y < n; ++y)
                                    for (int x = 0; x < n; ++x, ++o)
                                        ml[o] = cp.planning_labels[(static_cast<long long>(oz + z) *
                                                                        N +
                                                                    oy + y) *
                                                                       N +
                                                                   ox + x];
                            in.moving_seg = ops::one_hot<float>(ml, spec.num_classes, remap);
                        }
                    }
                    MultiResOutput<float> out = forward(tp, net, pv, in, ops::BnMode::eval);
                    if (rep.has_seg) {
                        const Tensor<float> probs = tp.value(ops::softmax_c(tp, out.seg[2]));
                        const LabelMap tile = ops::argmax_c(probs);
                        for (int z = 0; z < fine; ++z)
                            for (int y = 0; y < fine; ++y)
                                for (int x = 0; x < fine; ++x)
                                    rep.seg_pred[(static_cast<long long>(oz + off + z) * N + oy +
                                                  off + y) *
                                                     N +
                                                 ox + off + x] =
                                        tile[(static_cast<long long>(z) * fine + y) * fine + x];
                    }
                    if (rep.has_reg && !override_dvf) {
                        const Tensor<float>& tile = tp.value(out.dvf[2]);
                        const long long TS = static_cast<long long>(fine) * fine * fine;
                        for (int c = 0; c < 3; ++c)
                            for (int z = 0; z < fine; ++z)
                                for (int y = 0; y < fine; ++y)
                                    for (int x = 0; x < fine; ++x)
                                        rep.dvf_full[c * S +
                                                     (static_cast<long long>(oz + off + z) * N +
                                                      oy + off + y) *
                                                         N +
                                                     ox + off + x] =
                                            tile[c * TS +
                                                 (static_cast<long long>(z) * fine + y) * fine +
                                                 x];
                    }
                }
    }
    if (override_dvf) {
        if (override_dvf->shape != rep.dvf_full.shape)
            throw ShapeError("override field must be [3,N,N,N]");
        rep.dvf_full = *override_dvf;
        rep.has_reg = true;
    }

    auto organ_mask = [](const LabelMap& lm, int label) {
        LabelMap m(lm.shape);
        for (long long i = 0; i < lm.size(); ++i) m[i] = lm[i] == label ? 1 : 0;
        return m;
    };

    if (rep.has_seg) {
        for (int k = 1; k <= phantom::kNumOrgans; ++k) {
            const LabelMap pred = metrics::largest_cc(organ_mask(rep.seg_pred, k));
            rep.seg[static_cast<size_t>(k - 1)] =
                metrics::evaluate_masks(organ_mask(cp.daily_labels, k), pred);
        }
    }
    if (rep.has_reg) {
        rep.reg_pred = dvf::warp_labels_nearest(cp.planning_labels, rep.dvf_full);
        for (int k = 1; k <= phantom::kNumOrgans; ++k) {
            const LabelMap pred = metrics::largest_cc(organ_mask(rep.reg_pred, k));
            rep.reg[static_cast<size_t>(k - 1)] =
                metrics::evaluate_masks(organ_mask(cp.daily_labels, k), pred);
        }
        rep.stats = dvf::dvf_stats(rep.dvf_full);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

void write_log_row(std::ofstream& f, const StepRecord& r) {
    f << r.iter << ',' << r.l_ncc << ',' << r.l_dscr << ',' << r.l_dscs << ',' << r.l_be << ','
      << r.total << ',' << r.w0 << ',' << r.w1 << ',' << r.w2 << ',' << r.w3 << ',' << r.seconds
      << '\n';
}

}  // namespace

std::vector<StepRecord> run_training(Trainer& tr, const Dataset& ds, int iterations,
                                     const RunPaths& paths) {
    std::ofstream log_f, w_f;
    if (!paths.log_csv.empty()) {
        log_f.open(paths.log_csv);
        if (!log_f) throw IoError("cannot write " + paths.log_csv);
        log_f << "iter,l_ncc,l_dscr,l_dscs,l_be,total,w0,w1,w2,w3,seconds\n";
    }
    if (!paths.weights_csv.empty()) {
        w_f.open(paths.weights_csv);
        if (!w_f) throw IoError("cannot write " + paths.weights_csv);
        w_f << "iter,strategy,w_ncc,w_dscr,w_dscs,w_be";
        if (tr.cfg.strategy == weighting::Strategy::homoscedastic)
            for (size_t k = 0; k < tr.homo.eta.size(); ++k) w_f << ",eta" << k;
        if (tr.cfg.strategy == weighting::Strategy::dwa)
            for (int k = 0; k < tr.dwa.num_tasks; ++k) w_f << ",r" << k;
        w_f << '\n';
    }

    std::vector<StepRecord> logged;
    for (int i = 1; i <= iterations; ++i) {
        PatchPair pair = tr.sample_patch(ds);
        StepRecord rec;
        try {
            rec = tr.train_step(pair);
        } catch (const NumericsError&) {
            if (!paths.ckpt_base.empty()) tr.save_checkpoint(paths.ckpt_base + "_dump");
            throw;
        }
        const bool log_now = i == 1 || i == iterations || i % tr.cfg.log_interval == 0;
        if (log_now) {
            logged.push_back(rec);
            if (log_f) write_log_row(log_f, rec);
            if (w_f) {
                w_f << rec.iter << ',' << weighting::strategy_name(tr.cfg.strategy) << ','
                    << rec.w0 << ',' << rec.w1 << ',' << rec.w2 << ',' << rec.w3;
                if (tr.cfg.strategy == weighting::Strategy::homoscedastic)
                    for (size_t k = 0; k < tr.homo.eta.size(); ++k)
                        w_f << ',' << tr.homo.eta[k][0];
                if (tr.cfg.strategy == weighting::Strategy::dwa)
                    for (double r : tr.dwa.ratios()) w_f << ',' << r;
                w_f << '\n';
            }
        }
    }
    if (!paths.ckpt_base.empty()) tr.save_checkpoint(paths.ckpt_base);
    return logged;
}

}  // namespace regseg::train
