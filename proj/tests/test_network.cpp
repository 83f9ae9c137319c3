#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "regseg/network.hpp"

using namespace regseg;

namespace {

NetInputs<float> make_inputs(int n, int num_classes, uint64_t seed) {
    Rng rng(seed);
    NetInputs<float> in;
    in.fixed = Tensor<float>({n, n, n});
    for (auto& v : in.fixed.data) v = static_cast<float>(draw_uniform(rng, -1, 1));
    Tensor<float> mov({n, n, n});
    for (auto& v : mov.data) v = static_cast<float>(draw_uniform(rng, -1, 1));
    in.moving = std::move(mov);
    LabelMap lab({n, n, n});
    for (auto& v : lab.data) v = static_cast<uint8_t>(draw_index(rng, num_classes));
    in.moving_seg = ops::one_hot<float>(lab, num_classes);
    return in;
}

ArchSpec small_spec(ArchKind k) {
    ArchSpec s;
    s.kind = k;
    s.filters = {4, 8, 16, 8, 4};
    s.num_classes = 5;
    return s;
}

}  // namespace

TEST_CASE("deep-supervision output extents and their validation") {
    auto s44 = output_shapes(44);
    CHECK(s44.coarse == 4);
    CHECK(s44.mid == 4);
    CHECK(s44.fine == 4);
    auto s48 = output_shapes(48);
    CHECK(s48.coarse == 5);
    CHECK(s48.mid == 6);
    CHECK(s48.fine == 8);
    auto s96 = output_shapes(96);
    CHECK(s96.coarse == 17);
    CHECK(s96.mid == 30);
    CHECK(s96.fine == 56);
    CHECK_THROWS_AS(output_shapes(40), SizeError);
    CHECK_THROWS_AS(output_shapes(45), SizeError);
    CHECK(supervision_offset(48, 5, 4) == 14);
    CHECK(supervision_offset(48, 6, 2) == 18);
    CHECK(supervision_offset(48, 8, 1) == 20);
}

TEST_CASE("every architecture produces the advertised heads and extents") {
    const int n = 44;
    for (ArchKind k : {ArchKind::seg, ArchKind::reg, ArchKind::jrs_reg, ArchKind::dense,
                       ArchKind::sedd, ArchKind::cross_stitch}) {
        CAPTURE(arch_name(k));
        ArchSpec spec = small_spec(k);
        Network<float> net = build<float>(spec);
        init_params(net, 7);
        NetInputs<float> in = make_inputs(n, spec.num_classes, 3);
        Tape<float> tp;
        ParamVars<float> pv = stage_params(tp, net);
        MultiResOutput<float> out = forward(tp, net, pv, in, ops::BnMode::eval);
        CHECK(out.has_seg == spec.has_seg_head());
        CHECK(out.has_reg == spec.has_reg_head());
        auto sh = output_shapes(n);
        const std::array<int, 3> ext{sh.coarse, sh.mid, sh.fine};
        for (int r = 0; r < 3; ++r) {
            if (out.has_seg) {
                const auto& s = tp.value(out.seg[static_cast<size_t>(r)]).shape;
                CHECK(s == std::vector<int>{spec.num_classes, ext[static_cast<size_t>(r)],
                                            ext[static_cast<size_t>(r)],
                                            ext[static_cast<size_t>(r)]});
            }
            if (out.has_reg) {
                const auto& s = tp.value(out.dvf[static_cast<size_t>(r)]).shape;
                CHECK(s == std::vector<int>{3, ext[static_cast<size_t>(r)],
                                            ext[static_cast<size_t>(r)],
                                            ext[static_cast<size_t>(r)]});
            }
        }
        const long long np = count_params(net);
        CHECK(np > 0);
        std::printf("params[%s] = %lld\n", arch_name(k), np);
    }
}

TEST_CASE("identity stitching decouples the two cross-stitch paths") {
    const int n = 44;
    ArchSpec spec = small_spec(ArchKind::cross_stitch);
    Network<float> net = build<float>(spec);
    init_params(net, 11);
    // identity mixers: each path keeps its own features untouched
    for (const char* cs : {"cs0/alpha", "cs1/alpha", "cs2/alpha", "cs3/alpha"}) {
        Tensor<float>& a = net.params.at(cs);
        for (int c = 0; c < a.dim(0); ++c) {
            a[c * 4 + 0] = 1;
            a[c * 4 + 1] = 0;
            a[c * 4 + 2] = 0;
            a[c * 4 + 3] = 1;
        }
    }
    NetInputs<float> in = make_inputs(n, spec.num_classes, 5);

    // train-mode batch norm keeps activations at unit scale; its output depends
    // only on the current batch, so repeated forwards stay comparable
    auto seg_fine = [&]() {
        Tape<float> tp;
        ParamVars<float> pv = stage_params(tp, net);
        MultiResOutput<float> out = forward(tp, net, pv, in, ops::BnMode::train);
        return tp.value(out.seg[2]);
    };
    Tensor<float> before = seg_fine();
    for (auto& v : net.params.at("reg/e0/w").data) v += 0.05f;
    for (auto& v : net.params.at("reg/m1/w").data) v -= 0.03f;
    Tensor<float> after = seg_fine();
    for (long long i = 0; i < before.size(); ++i)
        CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-6));

    // with a mixing unit active, the same perturbation must reach the seg path
    Tensor<float>& a0 = net.params.at("cs0/alpha");
    for (int c = 0; c < a0.dim(0); ++c) a0[c * 4 + 1] = 0.5f;
    Tensor<float> mixed = seg_fine();
    double diff = 0;
    for (long long i = 0; i < before.size(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(mixed[i]) - before[i]));
    CHECK(diff > 1e-4);
}

TEST_CASE("parameter initialization statistics") {
    ArchSpec spec;
    spec.kind = ArchKind::cross_stitch;  // default filters {16,32,64,32,16}
    Network<float> net = build<float>(spec);
    init_params(net, 2024);

    double asum = 0, wsum = 0, wsum2 = 0;
    long long acnt = 0, wcnt = 0;
    for (const auto& [name, e] : net.params.entries) {
        auto ends = [&](const std::string& suf) {
            return name.size() >= suf.size() &&
                   name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
        };
        if (ends("/alpha")) {
            for (float v : e.value.data) {
                CHECK(v >= 0);
                CHECK(v <= 1);
                asum += v;
                ++acnt;
            }
        } else if (ends("/w")) {
            for (float v : e.value.data) {
                wsum += v;
                wsum2 += static_cast<double>(v) * v;
                ++wcnt;
            }
        } else if (ends("/gamma") || ends("/rvar")) {
            for (float v : e.value.data) CHECK(v == 1.0f);
        } else {
            for (float v : e.value.data) CHECK(v == 0.0f);
        }
    }
    CHECK(acnt == (32 + 64 + 64 + 32) * 4);
    CHECK(asum / static_cast<double>(acnt) == doctest::Approx(0.5).epsilon(0.06));
    const double wm = wsum / static_cast<double>(wcnt);
    const double wstd = std::sqrt(wsum2 / static_cast<double>(wcnt) - wm * wm);
    CHECK(wm == doctest::Approx(0.0).epsilon(1e-3));
    CHECK(wstd == doctest::Approx(0.02).epsilon(0.03));
}

TEST_CASE("build and init are deterministic in the seed") {
    ArchSpec spec = small_spec(ArchKind::cross_stitch);
    Network<float> a = build<float>(spec), b = build<float>(spec);
    init_params(a, 99);
    init_params(b, 99);
    for (const auto& [name, e] : a.params.entries) CHECK(e.value.data == b.params.at(name).data);
    Network<float> c = build<float>(spec);
    init_params(c, 100);
    bool any_diff = false;
    for (const auto& [name, e] : c.params.entries)
        if (e.value.data != a.params.at(name).data) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("input validation: missing tensors and non-cubic patches") {
    ArchSpec spec = small_spec(ArchKind::jrs_reg);
    Network<float> net = build<float>(spec);
    init_params(net, 1);
    NetInputs<float> in = make_inputs(44, spec.num_classes, 1);

    {
        NetInputs<float> no_mov;
        no_mov.fixed = in.fixed;
        Tape<float> tp;
        ParamVars<float> pv = stage_params(tp, net);
        CHECK_THROWS_AS(forward(tp, net, pv, no_mov, ops::BnMode::eval), ConfigError);
    }
    {
        NetInputs<float> no_seg;
        no_seg.fixed = in.fixed;
        no_seg.moving = in.moving;
        Tape<float> tp;
        ParamVars<float> pv = stage_params(tp, net);
        CHECK_THROWS_AS(forward(tp, net, pv, no_seg, ops::BnMode::eval), ConfigError);
    }
    {
        NetInputs<float> bad = in;
        bad.fixed = Tensor<float>({44, 44, 48});
        Tape<float> tp;
        ParamVars<float> pv = stage_params(tp, net);
        CHECK_THROWS_AS(forward(tp, net, pv, bad, ops::BnMode::eval), ShapeError);
    }
    {
        ArchSpec bad_spec = spec;
        bad_spec.filters = {4, 8, 16, 8, 5};
        CHECK_THROWS_AS(build<float>(bad_spec), ConfigError);
        CHECK_THROWS_AS(arch_from_name("pyramid"), ConfigError);
        CHECK(arch_from_name("cross-stitch") == ArchKind::cross_stitch);
        CHECK(std::string(arch_name(ArchKind::sedd)) == "sedd");
    }
}
