#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cmath>
#include <filesystem>

#include "regseg/trainer.hpp"

using namespace regseg;
using namespace regseg::train;
namespace fs = std::filesystem;

namespace {

CasePair small_case(uint64_t seed, int extent, const std::string& name = "case") {
    phantom::PhantomSpec s;
    s.seed = seed;
    s.extent = extent;
    phantom::Case plan = phantom::gen_planning(s);
    phantom::DailyCase daily = phantom::gen_daily(plan, s, 0);
    return make_case_pair(name, plan, daily);
}

TrainConfig base_cfg(ArchKind arch = ArchKind::cross_stitch) {
    TrainConfig cfg;
    cfg.arch = arch;
    cfg.patch = 44;
    cfg.seed = 1;
    return cfg;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0;
    for (long long i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace

TEST_CASE("config validation and task counts") {
    TrainConfig bad = base_cfg();
    bad.patch = 45;
    CHECK_THROWS_AS(bad.validate(), SizeError);
    bad = base_cfg();
    bad.lr = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = base_cfg();
    bad.bending_weight = -0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK(Trainer(base_cfg(ArchKind::seg)).num_tasks() == 1);
    CHECK(Trainer(base_cfg(ArchKind::reg)).num_tasks() == 1);
    CHECK(Trainer(base_cfg(ArchKind::jrs_reg)).num_tasks() == 2);
    CHECK(Trainer(base_cfg(ArchKind::dense)).num_tasks() == 3);
    CHECK(Trainer(base_cfg(ArchKind::sedd)).num_tasks() == 3);
    CHECK(Trainer(base_cfg(ArchKind::cross_stitch)).num_tasks() == 3);

    const auto& remap = seg_class_remap();
    CHECK(remap == std::vector<int>{0, 1, 2, 3, 4, 0});
}

TEST_CASE("effective weights per architecture and strategy") {
    {
        Trainer tr(base_cfg(ArchKind::seg));
        const auto w = tr.current_weights();
        CHECK(w[0] == 0.0);  // no image-similarity task
        CHECK(w[1] == 0.0);
        CHECK(w[2] == 1.0);
        CHECK(w[3] == 0.0);  // no displacement field to regularize
    }
    {
        TrainConfig cfg = base_cfg(ArchKind::reg);
        cfg.bending_weight = 0.7;
        Trainer tr(cfg);
        const auto w = tr.current_weights();
        CHECK(w[0] == 1.0);
        CHECK(w[1] == 0.0);
        CHECK(w[2] == 0.0);
        CHECK(w[3] == 0.7);
    }
    {
        Trainer tr(base_cfg(ArchKind::cross_stitch));
        const auto w = tr.current_weights();
        CHECK(w[0] == 1.0);
        CHECK(w[1] == 1.0);
        CHECK(w[2] == 1.0);
        CHECK(w[3] == 0.5);
    }
    {
        TrainConfig cfg = base_cfg(ArchKind::cross_stitch);
        cfg.strategy = weighting::Strategy::homoscedastic;
        Trainer tr(cfg);
        tr.homo.eta[0][0] = std::log(2.0f);
        const auto w = tr.current_weights();
        CHECK(w[0] == doctest::Approx(0.5));
        CHECK(w[1] == doctest::Approx(1.0));
    }
}

TEST_CASE("patch sampling balances the three voxel classes") {
    CasePair cp = small_case(2, 44);
    for (int g = 0; g < 3; ++g) REQUIRE(!cp.group_voxels[static_cast<size_t>(g)].empty());

    Trainer tr(base_cfg(ArchKind::seg));
    std::array<long long, 3> hist{0, 0, 0};
    const int draws = 6000;
    for (int i = 0; i < draws; ++i) {
        PatchPair p = tr.sample_patch(cp);
        REQUIRE(p.class_group >= 0);
        REQUIRE(p.class_group < 3);
        ++hist[static_cast<size_t>(p.class_group)];
        if (i == 0) {
            CHECK(p.fixed.shape == std::vector<int>{44, 44, 44});
            CHECK(p.origin == std::array<int, 3>{0, 0, 0});  // patch == extent
        }
    }
    for (long long h : hist)
        CHECK(static_cast<double>(h) / draws == doctest::Approx(1.0 / 3.0).epsilon(0.075));
    CHECK(tr.resamples == 0);  // every class is present in this case

    // patch larger than the volume is rejected
    TrainConfig cfg = base_cfg();
    cfg.patch = 48;
    Trainer tr48(cfg);
    CHECK_THROWS_AS(tr48.sample_patch(cp), SizeError);
}

TEST_CASE("swapping the patch roles equals the swapped-direction gradients") {
    CasePair cp = small_case(3, 44);
    TrainConfig cfg = base_cfg(ArchKind::cross_stitch);

    Trainer a(cfg), b(cfg);
    PatchPair pair = a.sample_patch(cp);

    PatchPair sw;
    sw.fixed = pair.moving;
    sw.moving = pair.fixed;
    sw.fixed_labels = pair.moving_labels;
    sw.moving_labels = pair.fixed_labels;

    auto ga = a.direction_grads(pair, /*swapped=*/true);
    auto gb = b.direction_grads(sw, /*swapped=*/false);
    REQUIRE(ga.size() == gb.size());
    for (const auto& [name, g] : ga) {
        REQUIRE(gb.count(name) == 1);
        CAPTURE(name);
        CHECK(max_abs_diff(g, gb.at(name)) <= 1e-7);
    }
}

TEST_CASE("one optimization step sums the per-term losses of both directions") {
    CasePair cp = small_case(5, 44);
    TrainConfig cfg = base_cfg(ArchKind::cross_stitch);

    Trainer a(cfg), b(cfg);
    PatchPair pair = a.sample_patch(cp);
    StepRecord rec = a.train_step(pair);
    CHECK(a.iteration == 1);
    CHECK(rec.iter == 1);
    CHECK(rec.total > 0);

    StepRecord two{};
    b.direction_grads(pair, false, &two);
    b.direction_grads(pair, true, &two);
    CHECK(rec.l_ncc == doctest::Approx(two.l_ncc).epsilon(1e-5));
    CHECK(rec.l_dscr == doctest::Approx(two.l_dscr).epsilon(1e-5));
    CHECK(rec.l_dscs == doctest::Approx(two.l_dscs).epsilon(1e-5));
    CHECK(rec.l_be == doctest::Approx(two.l_be).epsilon(1e-5));
    // total applies the weights to the summed terms; recompute from the parts
    const double expect = two.l_ncc + two.l_dscr + two.l_dscs + cfg.bending_weight * two.l_be;
    CHECK(rec.total == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("first optimizer step has the closed-form magnitude") {
    TrainConfig cfg = base_cfg(ArchKind::seg);
    cfg.lr = 1e-3;
    Trainer tr(cfg);
    const std::string pname = "p0/e0/b";
    Tensor<float> before = tr.net.params.at(pname);

    std::map<std::string, Tensor<float>> grads;
    grads[pname] = Tensor<float>(before.shape);
    for (auto& v : grads[pname].data) v = 0.5f;
    tr.apply_update(grads);
    CHECK(tr.iteration == 1);
    // t=1: m-hat = g, v-hat = g^2, step = lr * g / (|g| + 1e-8) ~ lr * sign(g)
    for (long long i = 0; i < before.size(); ++i)
        CHECK(tr.net.params.at(pname)[i] ==
              doctest::Approx(before[i] - cfg.lr).epsilon(1e-6));

    // the rectified variant stays in its warmup form at t=1: step = lr * g
    TrainConfig rcfg = cfg;
    rcfg.radam = true;
    Trainer rtr(rcfg);
    Tensor<float> rbefore = rtr.net.params.at(pname);
    std::map<std::string, Tensor<float>> rg;
    rg[pname] = Tensor<float>(rbefore.shape);
    for (auto& v : rg[pname].data) v = 0.5f;
    rtr.apply_update(rg);
    for (long long i = 0; i < rbefore.size(); ++i)
        CHECK(rtr.net.params.at(pname)[i] ==
              doctest::Approx(rbefore[i] - cfg.lr * 0.5).epsilon(1e-6));
}

TEST_CASE("the global-norm clip rescales oversized gradients") {
    TrainConfig cfg = base_cfg(ArchKind::seg);
    cfg.grad_clip = 10.0;
    Trainer tr(cfg);
    const std::string pname = "p0/e0/b";
    std::map<std::string, Tensor<float>> grads;
    grads[pname] = Tensor<float>(tr.net.params.at(pname).shape);  // 23 entries
    for (auto& v : grads[pname].data) v = 10.0f;                  // norm ~ 48
    tr.apply_update(grads);
    CHECK(tr.clips == 1);
    double sq = 0;
    for (float v : grads.at(pname).data) sq += static_cast<double>(v) * v;
    CHECK(std::sqrt(sq) == doctest::Approx(10.0).epsilon(1e-5));

    std::map<std::string, Tensor<float>> small;
    small[pname] = Tensor<float>(tr.net.params.at(pname).shape);
    for (auto& v : small[pname].data) v = 0.1f;
    tr.apply_update(small);
    CHECK(tr.clips == 1);  // under the cap: no new clip
}

TEST_CASE("checkpoints restore the full training state bit-exactly") {
    const fs::path dir = fs::temp_directory_path() / "regseg_trainer_ckpt_test";
    fs::create_directories(dir);
    CasePair cp = small_case(7, 44);
    Dataset ds;
    ds.train_cases.push_back(cp);

    TrainConfig cfg = base_cfg(ArchKind::jrs_reg);
    cfg.strategy = weighting::Strategy::homoscedastic;
    Trainer tr(cfg);
    for (int i = 0; i < 2; ++i) tr.train_step(tr.sample_patch(ds));
    tr.save_checkpoint((dir / "ck").string());

    Trainer back = Trainer::load_checkpoint((dir / "ck").string(), cfg);
    CHECK(back.iteration == tr.iteration);
    CHECK(back.resamples == tr.resamples);
    CHECK(back.clips == tr.clips);
    for (const auto& [name, e] : tr.net.params.entries)
        CHECK(back.net.params.at(name).data == e.value.data);
    REQUIRE(back.opt_m.size() == tr.opt_m.size());
    for (const auto& [name, t] : tr.opt_m) CHECK(back.opt_m.at(name).data == t.data);
    for (const auto& [name, t] : tr.opt_v) CHECK(back.opt_v.at(name).data == t.data);
    for (size_t i = 0; i < tr.homo.eta.size(); ++i)
        CHECK(back.homo.eta[i].data == tr.homo.eta[i].data);

    // the restored generator continues the same sampling stream
    PatchPair pa = tr.sample_patch(ds);
    PatchPair pb = back.sample_patch(ds);
    CHECK(pa.origin == pb.origin);
    CHECK(pa.class_group == pb.class_group);
    CHECK(pa.fixed.data == pb.fixed.data);

    TrainConfig wrong = cfg;
    wrong.arch = ArchKind::sedd;
    CHECK_THROWS_AS(Trainer::load_checkpoint((dir / "ck").string(), wrong), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("resuming mid-run reproduces an uninterrupted run") {
    const fs::path dir = fs::temp_directory_path() / "regseg_trainer_resume_test";
    fs::create_directories(dir);
    CasePair cp = small_case(9, 44);
    Dataset ds;
    ds.train_cases.push_back(cp);
    TrainConfig cfg = base_cfg(ArchKind::cross_stitch);

    Trainer straight(cfg);
    for (int i = 0; i < 4; ++i) straight.train_step(straight.sample_patch(ds));

    Trainer first(cfg);
    for (int i = 0; i < 2; ++i) first.train_step(first.sample_patch(ds));
    first.save_checkpoint((dir / "half").string());
    Trainer resumed = Trainer::load_checkpoint((dir / "half").string(), cfg);
    for (int i = 0; i < 2; ++i) resumed.train_step(resumed.sample_patch(ds));

    CHECK(resumed.iteration == straight.iteration);
    for (const auto& [name, e] : straight.net.params.entries) {
        CAPTURE(name);
        CHECK(resumed.net.params.at(name).data == e.value.data);
    }
    for (const auto& [name, t] : straight.opt_m)
        CHECK(resumed.opt_m.at(name).data == t.data);
    fs::remove_all(dir);
}

TEST_CASE("dataset trees round-trip through the loader") {
    const fs::path dir = fs::temp_directory_path() / "regseg_trainer_ds_test";
    fs::remove_all(dir);
    phantom::PhantomSpec s;
    s.seed = 4;
    s.extent = 44;
    phantom::make_dataset(dir.string(), 2, 1, s);
    Dataset ds = load_dataset(dir.string());
    CHECK(!ds.train_cases.empty());
    for (const CasePair& cp : ds.train_cases) {
        CHECK(cp.daily.shape == std::vector<int>{44, 44, 44});
        for (float v : cp.daily.data) {
            CHECK(v >= -1.0f);
            CHECK(v <= 1.0f);
        }
        CHECK(cp.dvf_gt.size() > 0);
        CHECK(!cp.group_voxels[0].empty());
    }
    CHECK_THROWS_AS(load_dataset((dir / "missing").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("sliding-window evaluation with the ground-truth field") {
    CasePair cp = small_case(11, 64);
    ArchSpec spec;
    spec.kind = ArchKind::reg;
    spec.filters = ArchSpec::default_filters(ArchKind::reg);
    Network<float> net = build<float>(spec);
    init_params(net, 1);

    // the exact generating field must reproduce the daily organs
    CaseReport gt = evaluate_case(net, cp, 44, &cp.dvf_gt);
    CHECK(gt.has_reg);
    double mean = 0;
    for (const auto& om : gt.reg) {
        CHECK_FALSE(om.failed);
        CHECK(om.dsc >= 0.95);
        mean += om.dsc;
    }
    CHECK(mean / phantom::kNumOrgans >= 0.98);
    CHECK(gt.stats.folding_fraction == 0.0);

    // the zero field leaves the anatomy unregistered
    Tensor<float> zero({3, 64, 64, 64});
    CaseReport none = evaluate_case(net, cp, 44, &zero);
    double mean0 = 0;
    for (const auto& om : none.reg) mean0 += om.dsc;
    CHECK(mean0 / phantom::kNumOrgans < mean / phantom::kNumOrgans - 0.05);

    CHECK_THROWS_AS(evaluate_case(net, cp, 96, &cp.dvf_gt), SizeError);
    Tensor<float> bad({3, 44, 44, 44});
    CHECK_THROWS_AS(evaluate_case(net, cp, 44, &bad), ShapeError);
}
