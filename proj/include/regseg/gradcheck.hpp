#pragma once

// Central finite-difference verification of every differentiable op and of the
// full per-architecture training losses, in double precision. Shared by the
// `gradcheck`/`selftest` commands and the test suites.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "regseg/losses.hpp"
#include "regseg/network.hpp"
#include "regseg/ops.hpp"
#include "regseg/rng.hpp"
#include "regseg/weighting.hpp"

namespace regseg::gradcheck {

struct CheckResult {
    std::string name;
    double max_rel = 0;   // worst relative gradient error seen
    bool pass = true;
    double seconds = 0;
    long long coords = 0;  // coordinates compared
};

struct Options {
    uint64_t seed = 0;
    int instances = 20;   // random instances per op
    int coords = 24;      // sampled coordinates per input tensor
    double eps = 1e-3;      // central-difference step for single-op checks
    double eps_arch = 1e-5; // whole-network step; 1e-3 would cross the
                            // piecewise-linear kinks of warp/leaky_relu
    double tol = 1e-4;      // relative error bound
    bool quick = false;   // selftest preset: fewer instances/coordinates
    bool full_arch = true;
    std::string inject;   // op name whose analytic gradient gets perturbed
};

namespace detail {

using D = double;
// Builds a scalar loss from staged leaves; must be deterministic in the leaf
// values so finite differences probe the same graph.
// The Rng is reseeded identically for every evaluation of one instance so
// probe functionals drawn inside the builder stay fixed under perturbation.
using Builder = std::function<Var<D>(Tape<D>&, const std::vector<Var<D>>&, Rng&)>;

inline double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

inline double eval_scalar(const std::vector<Tensor<D>>& inputs, const Builder& f,
                          uint64_t inst_seed) {
    Tape<D> tp;
    Rng prng(inst_seed);
    std::vector<Var<D>> vars;
    for (const auto& t : inputs) vars.push_back(tp.leaf(t, "in", true));
    return tp.value(f(tp, vars, prng))[0];
}

inline void run_check(const std::string& name, const Options& opt, Rng& rng,
                      const std::function<std::vector<Tensor<D>>(Rng&)>& make_inputs,
                      const Builder& f, std::vector<CheckResult>& out) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = name;
    const int instances = opt.quick ? std::max(2, opt.instances / 4) : opt.instances;
    const int coords = opt.quick ? std::max(4, opt.coords / 3) : opt.coords;
    for (int inst = 0; inst < instances; ++inst) {
        std::vector<Tensor<D>> inputs = make_inputs(rng);
        const uint64_t inst_seed = rng();

        Tape<D> tp;
        Rng prng(inst_seed);
        std::vector<Var<D>> vars;
        for (const auto& t : inputs) vars.push_back(tp.leaf(t, "in", true));
        Var<D> loss = f(tp, vars, prng);
        tp.backward(loss);
        std::vector<Tensor<D>> analytic;
        for (size_t i = 0; i < vars.size(); ++i)
            analytic.push_back(tp.has_grad(vars[i]) ? tp.grad(vars[i])
                                                    : Tensor<D>(inputs[i].shape));
        if (!opt.inject.empty() && name == opt.inject && analytic[0].size() > 0)
            for (auto& g : analytic[0].data) g += 1e-2;  // deliberate fault

        for (size_t i = 0; i < inputs.size(); ++i) {
            const long long n = inputs[i].size();
            if (n == 0) continue;
            const long long probes = std::min<long long>(coords, n);
            for (long long p = 0; p < probes; ++p) {
                const long long j = probes == n ? p : draw_index(rng, n);
                const double orig = inputs[i][j];
                inputs[i][j] = orig + opt.eps;
                const double fp = eval_scalar(inputs, f, inst_seed);
                inputs[i][j] = orig - opt.eps;
                const double fm = eval_scalar(inputs, f, inst_seed);
                inputs[i][j] = orig;
                const double fd = (fp - fm) / (2 * opt.eps);
                const double e = rel_err(analytic[i][j], fd);
                r.max_rel = std::max(r.max_rel, e);
                ++r.coords;
                if (e > opt.tol) r.pass = false;
            }
        }
        if (!r.pass) break;
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(r);
}

inline Tensor<D> rand_t(Rng& rng, std::vector<int> shape, double lo = -1, double hi = 1) {
    Tensor<D> t(std::move(shape));
    for (auto& v : t.data) v = draw_uniform(rng, lo, hi);
    return t;
}

// Scalarizes a tensor-valued op by a fixed random linear functional so every
// output coordinate influences the loss.
inline Var<D> dot_const(Tape<D>& tp, Var<D> v, Rng& rng) {
    Tensor<D> w(tp.value(v).shape);
    for (auto& x : w.data) x = draw_uniform(rng, -1, 1);
    return ops::sum(tp, ops::mul(tp, v, tp.leaf(std::move(w), "probe")));
}

inline LabelMap rand_labels(Rng& rng, std::vector<int> shape, int num_classes) {
    LabelMap lm(std::move(shape));
    for (auto& v : lm.data) v = static_cast<uint8_t>(draw_index(rng, num_classes));
    return lm;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-op checks
// ---------------------------------------------------------------------------

inline void check_ops(const Options& opt, std::vector<CheckResult>& out) {
    using namespace detail;
    Rng rng(mix_seed(opt.seed, "gradcheck"));

    auto ew_pair = [](Rng& r) {
        return std::vector<Tensor<D>>{rand_t(r, {2, 3, 4}), rand_t(r, {2, 3, 4})};
    };
    run_check("add", opt, rng, ew_pair,
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::add(tp, v[0], v[1]), prng);
              },
              out);
    run_check("sub", opt, rng, ew_pair,
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::sub(tp, v[0], v[1]), prng);
              },
              out);
    run_check("mul", opt, rng, ew_pair,
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::mul(tp, v[0], v[1]), prng);
              },
              out);
    run_check("scale", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {3, 5})}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::scale(tp, v[0], 1.7), prng);
              },
              out);
    run_check("offset", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {3, 5})}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::offset(tp, v[0], -0.4), prng);
              },
              out);
    run_check("exp", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {3, 5}, -2, 2)}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::exp_op(tp, v[0]), prng);
              },
              out);
    run_check("sum", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {4, 6})}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) { (void)prng; return ops::sum(tp, v[0]); },
              out);
    run_check("mean", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {4, 6})}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) { (void)prng; return ops::mean(tp, v[0]); },
              out);
    run_check("leaky_relu", opt, rng,
              [&](Rng& r) {
                  // keep activations away from the kink at 0
                  Tensor<D> t = rand_t(r, {3, 4, 4});
                  for (auto& v : t.data)
                      if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
                  return std::vector<Tensor<D>>{std::move(t)};
              },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::leaky_relu(tp, v[0], 0.01), prng);
              },
              out);
    run_check("softmax_c", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {4, 2, 3, 2}, -3, 3)}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::softmax_c(tp, v[0]), prng);
              },
              out);
    run_check("concat_c", opt, rng,
              [](Rng& r) {
                  return std::vector<Tensor<D>>{rand_t(r, {2, 3, 3, 3}), rand_t(r, {3, 3, 3, 3})};
              },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::concat_c(tp, v[0], v[1]), prng);
              },
              out);
    run_check("crop_center", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {2, 7, 7, 7})}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::crop_center(tp, v[0], 3), prng);
              },
              out);
    run_check("trilinear_upsample2x", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {2, 4, 4, 4})}; },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::trilinear_upsample2x(tp, v[0]), prng);
              },
              out);

    // conv3d over both dispatch paths (channel-poor and channel-dense)
    struct ConvCfg {
        int ci, co, L, k, s;
        const char* tag;
    };
    const ConvCfg conv_cfgs[] = {
        {3, 4, 9, 3, 1, "conv3d_k3s1"},    {2, 3, 10, 3, 2, "conv3d_k3s2"},
        {4, 5, 6, 1, 1, "conv3d_k1s1"},    {3, 2, 7, 1, 2, "conv3d_k1s2"},
        {16, 4, 7, 3, 1, "conv3d_cl_s1"},  {17, 3, 8, 3, 2, "conv3d_cl_s2"},
    };
    for (const auto& c : conv_cfgs) {
        run_check(c.tag, opt, rng,
                  [c](Rng& r) {
                      return std::vector<Tensor<D>>{rand_t(r, {c.ci, c.L, c.L, c.L}),
                                                    rand_t(r, {c.co, c.ci, c.k, c.k, c.k}, -0.5,
                                                           0.5),
                                                    rand_t(r, {c.co}, -0.2, 0.2)};
                  },
                  [&, c](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                      return dot_const(tp, ops::conv3d(tp, v[0], v[1], v[2], c.s), prng);
                  },
                  out);
    }

    run_check("batch_norm", opt, rng,
              [](Rng& r) {
                  return std::vector<Tensor<D>>{rand_t(r, {3, 4, 4, 4}), rand_t(r, {3}, 0.5, 1.5),
                                                rand_t(r, {3}, -0.3, 0.3)};
              },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  Tensor<D> rm({3}), rv({3});
                  for (auto& x : rv.data) x = 1;
                  return dot_const(
                      tp, ops::batch_norm(tp, v[0], v[1], v[2], &rm, &rv, ops::BnMode::train),
                      prng);
              },
              out);
    run_check("cross_stitch", opt, rng,
              [](Rng& r) {
                  return std::vector<Tensor<D>>{rand_t(r, {3, 3, 3, 3}), rand_t(r, {3, 3, 3, 3}),
                                                rand_t(r, {3, 4}, 0.1, 0.9)};
              },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  auto [ys, yr] = ops::cross_stitch_apply(tp, v[0], v[1], v[2]);
                  return ops::add(tp, dot_const(tp, ys, prng), dot_const(tp, yr, prng));
              },
              out);
    run_check("warp", opt, rng,
              [](Rng& r) {
                  Tensor<D> mv = rand_t(r, {2, 6, 6, 6});
                  // fractional offsets well inside one cell: no trilinear kinks
                  // within the finite-difference step
                  Tensor<D> u = rand_t(r, {3, 6, 6, 6}, 0.15, 0.35);
                  return std::vector<Tensor<D>>{std::move(mv), std::move(u)};
              },
              [&](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  return dot_const(tp, ops::warp(tp, v[0], v[1]), prng);
              },
              out);
    run_check("ncc_loss", opt, rng,
              [](Rng& r) {
                  return std::vector<Tensor<D>>{rand_t(r, {1, 5, 5, 5}), rand_t(r, {1, 5, 5, 5})};
              },
              [](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  (void)prng;
                  return losses::ncc_loss(tp, v[0], v[1]);
              },
              out);
    run_check("dice_loss", opt, rng,
              [&](Rng& r) {
                  Tensor<D> logits = rand_t(r, {4, 4, 4, 4}, -2, 2);
                  Tensor<D> target =
                      ops::one_hot<D>(rand_labels(r, {4, 4, 4}, 4), 4);
                  return std::vector<Tensor<D>>{std::move(logits), std::move(target)};
              },
              [](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  (void)prng;
                  return losses::dice_loss(tp, ops::softmax_c(tp, v[0]), v[1]);
              },
              out);
    run_check("bending_energy", opt, rng,
              [](Rng& r) { return std::vector<Tensor<D>>{rand_t(r, {3, 6, 6, 6}, -0.5, 0.5)}; },
              [](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  (void)prng;
                  return losses::bending_energy(tp, v[0]);
              },
              out);
    run_check("homoscedastic_loss", opt, rng,
              [](Rng& r) {
                  return std::vector<Tensor<D>>{rand_t(r, {1}, 0.1, 2), rand_t(r, {1}, 0.1, 2),
                                                rand_t(r, {1}, -1, 1), rand_t(r, {1}, -1, 1)};
              },
              [](Tape<D>& tp, const std::vector<Var<D>>& v, Rng& prng) {
                  (void)prng;
                  return weighting::homoscedastic_loss(tp, {v[0], v[1]}, {v[2], v[3]});
              },
              out);
}

// ---------------------------------------------------------------------------
// Full-architecture loss checks (random parameter coordinates)
// ---------------------------------------------------------------------------

namespace detail {

inline Var<D> arch_loss(Tape<D>& tp, Network<D>& net, const ParamVars<D>& pv,
                        const Tensor<D>& fixed, const Tensor<D>& moving, const LabelMap& fl,
                        const LabelMap& ml, const std::vector<int>& remap) {
    const ArchSpec& spec = net.spec;
    const int n = fixed.dim(0);
    NetInputs<D> in;
    in.fixed = fixed;
    if (spec.has_reg_head()) {
        in.moving = moving;
        if (spec.kind != ArchKind::reg)
            in.moving_seg = ops::one_hot<D>(ml, spec.num_classes, &remap);
    }
    MultiResOutput<D> out = forward(tp, net, pv, in, ops::BnMode::train);
    const OutputShapes os = output_shapes(n);
    const int ext[3] = {os.coarse, os.mid, os.fine};
    const int strd[3] = {4, 2, 1};
    std::array<Var<D>, 3> ls, ln, lr, lb;
    for (int i = 0; i < 3; ++i) {
        const int e = ext[i], s = strd[i];
        if (out.has_seg) {
            Var<D> tgt = tp.leaf(
                ops::one_hot<D>(ops::subsample_center_labels(fl, e, s), spec.num_classes, &remap),
                "tgt");
            ls[i] = losses::dice_loss(tp, ops::softmax_c(tp, out.seg[i]), tgt);
        }
        if (out.has_reg) {
            Tensor<D> ms = ops::subsample_center(moving, e, s);
            Tensor<D> fs = ops::subsample_center(fixed, e, s);
            ms.shape = {1, e, e, e};
            fs.shape = {1, e, e, e};
            Var<D> mv = tp.leaf(std::move(ms), "m");
            Var<D> fv = tp.leaf(std::move(fs), "f");
            ln[i] = losses::ncc_loss(tp, fv, ops::warp(tp, mv, out.dvf[i]));
            lb[i] = losses::bending_energy(tp, out.dvf[i]);
            if (spec.kind != ArchKind::reg) {
                Var<D> moh = tp.leaf(ops::one_hot<D>(ops::subsample_center_labels(ml, e, s),
                                                     spec.num_classes, &remap),
                                     "moh");
                Var<D> foh = tp.leaf(ops::one_hot<D>(ops::subsample_center_labels(fl, e, s),
                                                     spec.num_classes, &remap),
                                     "foh");
                lr[i] = losses::dice_loss(tp, ops::warp(tp, moh, out.dvf[i]), foh);
            }
        }
    }
    losses::LossTerms<D> t;
    if (out.has_seg) t.dsc_s = losses::deep_supervision_aggregate(tp, ls[0], ls[1], ls[2]);
    if (out.has_reg) {
        t.ncc = losses::deep_supervision_aggregate(tp, ln[0], ln[1], ln[2]);
        t.be = losses::deep_supervision_aggregate(tp, lb[0], lb[1], lb[2]);
        if (spec.kind != ArchKind::reg)
            t.dsc_r = losses::deep_supervision_aggregate(tp, lr[0], lr[1], lr[2]);
    }
    return losses::joint_loss(tp, t, 1.0, 1.0, 1.0, 0.5);
}

}  // namespace detail

inline void check_archs(const Options& opt, std::vector<CheckResult>& out) {
    using namespace detail;
    Rng rng(mix_seed(opt.seed, "gradcheck_arch"));
    const std::vector<int> remap = {0, 1, 2, 3, 4, 0};
    const int n = 44;
    const ArchKind kinds[] = {ArchKind::seg,  ArchKind::reg,  ArchKind::jrs_reg,
                              ArchKind::dense, ArchKind::sedd, ArchKind::cross_stitch};
    for (ArchKind k : kinds) {
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        r.name = std::string("arch_") + arch_name(k);

        ArchSpec spec;
        spec.kind = k;
        spec.filters = k == ArchKind::cross_stitch ? std::array<int, 5>{4, 8, 16, 8, 4}
                                                   : std::array<int, 5>{6, 11, 23, 11, 6};
        Network<D> net = build<D>(spec);
        init_params(net, mix_seed(opt.seed, r.name));
        // Freshly initialized displacements are ~0, putting every warp sample
        // exactly on a trilinear cell corner (a derivative kink). Bias the
        // displacement heads mid-cell so the loss is smooth around this point.
        for (auto& [pname, e] : net.params.entries)
            if (pname.find("/reg/head_") != std::string::npos &&
                pname.size() > 2 && pname.compare(pname.size() - 2, 2, "/b") == 0)
                for (auto& v : e.value.data) v = 0.37;

        Tensor<D> fixed = rand_t(rng, {n, n, n}, -1, 1);
        Tensor<D> moving = rand_t(rng, {n, n, n}, -1, 1);
        LabelMap fl = rand_labels(rng, {n, n, n}, 6);
        LabelMap ml = rand_labels(rng, {n, n, n}, 6);

        auto eval = [&]() {
            Tape<D> tp;
            ParamVars<D> pv = stage_params(tp, net);
            return tp.value(arch_loss(tp, net, pv, fixed, moving, fl, ml, remap))[0];
        };

        Tape<D> tp;
        ParamVars<D> pv = stage_params(tp, net);
        tp.backward(arch_loss(tp, net, pv, fixed, moving, fl, ml, remap));

        std::vector<std::string> trainables;
        for (const auto& [name, e] : net.params.entries)
            if (e.trainable) trainables.push_back(name);

        const int probes = opt.quick ? 6 : 20;
        for (int p = 0; p < probes; ++p) {
            const std::string& pname =
                trainables[static_cast<size_t>(draw_index(rng, (long long)trainables.size()))];
            Tensor<D>& pt = net.params.at(pname);
            const long long j = draw_index(rng, pt.size());
            const double analytic =
                tp.has_grad(pv.at(pname)) ? tp.grad(pv.at(pname))[j] : 0.0;
            const double orig = pt[j];
            // On failure retry with a smaller step: a kink inside the
            // difference interval moves out, a wrong gradient stays wrong.
            double e = 1e30;
            for (double eps = opt.eps_arch; e > opt.tol && eps > opt.eps_arch / 1e3;
                 eps /= 10) {
                pt[j] = orig + eps;
                const double fp = eval();
                pt[j] = orig - eps;
                const double fm = eval();
                pt[j] = orig;
                e = rel_err(analytic, (fp - fm) / (2 * eps));
            }
            r.max_rel = std::max(r.max_rel, e);
            ++r.coords;
            if (e > opt.tol) r.pass = false;
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(r);
    }
}

inline std::vector<CheckResult> run_all(const Options& opt) {
    std::vector<CheckResult> out;
    check_ops(opt, out);
    if (opt.full_arch) check_archs(opt, out);
    return out;
}

}  // namespace regseg::gradcheck
