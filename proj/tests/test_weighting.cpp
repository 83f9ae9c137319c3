#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "regseg/rng.hpp"
#include "regseg/weighting.hpp"

using namespace regseg;
using namespace regseg::weighting;

TEST_CASE("strategy names round-trip") {
    for (Strategy s : {Strategy::equal, Strategy::homoscedastic, Strategy::dwa})
        CHECK(strategy_from_name(strategy_name(s)) == s);
    CHECK_THROWS_AS(strategy_from_name("gradnorm"), ConfigError);
    WeightVector w = equal_weights(0.5);
    CHECK(w.w0 == 1.0);
    CHECK(w.w1 == 1.0);
    CHECK(w.w2 == 1.0);
    CHECK(w.w3 == 0.5);
}

TEST_CASE("dynamic averaging starts uniform and matches the closed form") {
    DwaState st(2);
    // no history and one pushed loss vector: ratios pinned at 1, weights 1
    for (int step = 0; step < 2; ++step) {
        for (double v : st.weights()) CHECK(v == doctest::Approx(1.0));
        st.push({1.0, 1.0});
    }
    // craft ratios (1, 0): exp(1)/(exp(1)+exp(0)) etc., scaled by K=2
    st = DwaState(2);
    st.push({2.0, 1.0});
    st.push({2.0, 0.0});  // r0 = 2/2 = 1, r1 = 0/1 = 0
    auto w = st.weights();
    CHECK(w[0] == doctest::Approx(2 * std::exp(1.0) / (std::exp(1.0) + 1)).epsilon(1e-4));
    CHECK(w[1] == doctest::Approx(2 * 1.0 / (std::exp(1.0) + 1)).epsilon(1e-4));
    CHECK(w[0] == doctest::Approx(1.4621).epsilon(1e-3));
    CHECK(w[1] == doctest::Approx(0.5379).epsilon(1e-3));
}

TEST_CASE("dynamic-averaging weights always sum to the task count") {
    Rng rng(3);
    DwaState st(3, 2.0);
    for (int i = 0; i < 50; ++i) {
        st.push({draw_uniform(rng, 0, 2), draw_uniform(rng, 0, 2), draw_uniform(rng, 0, 2)});
        auto w = st.weights();
        double s = 0;
        for (double v : w) s += v;
        CHECK(s == doctest::Approx(3.0).epsilon(1e-12));
        // closed form against a manual computation
        if (st.iters_seen >= 2) {
            for (int k = 0; k < 3; ++k) {
                const double r = std::min(st.prev1[static_cast<size_t>(k)] /
                                              st.prev2[static_cast<size_t>(k)],
                                          st.r_cap);
                double den = 0;
                for (int j = 0; j < 3; ++j)
                    den += std::exp(std::min(st.prev1[static_cast<size_t>(j)] /
                                                 st.prev2[static_cast<size_t>(j)],
                                             st.r_cap) /
                                    st.tmp);
                CHECK(w[static_cast<size_t>(k)] ==
                      doctest::Approx(3 * std::exp(r / st.tmp) / den).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("near-zero historical losses cap the ratio instead of dividing by zero") {
    DwaState st(2);
    st.push({0.0, 1.0});
    st.push({5.0, 1.0});
    auto r = st.ratios();
    CHECK(r[0] == 10.0);  // den <= 0 falls back to the cap
    CHECK(r[1] == 1.0);
    st = DwaState(2);
    st.push({0.01, 1.0});
    st.push({5.0, 1.0});  // raw ratio 500 -> capped
    CHECK(st.ratios()[0] == 10.0);
}

TEST_CASE("the moving-average window smooths the ratio inputs") {
    DwaState st(1);
    st.ma_window = 3;
    st.push({3.0});  // window mean 3
    st.push({6.0});  // window mean 4.5
    st.push({9.0});  // window mean 6
    CHECK(st.prev1[0] == doctest::Approx(6.0));
    CHECK(st.prev2[0] == doctest::Approx(4.5));
    st.push({12.0});  // window slides to {6,9,12}, mean 9
    CHECK(st.prev1[0] == doctest::Approx(9.0));
    CHECK(st.ratios()[0] == doctest::Approx(9.0 / 6.0));
    CHECK_THROWS_AS(st.push({1.0, 2.0}), ConfigError);
}

TEST_CASE("homoscedastic objective: analytic gradient and optimum") {
    // d/d eta [exp(-eta) L + eta/2] = -exp(-eta) L + 1/2, zero at eta = log(2L)
    const std::vector<double> L{0.8, 0.25};
    HomoscedasticState<double> st(2);
    st.eta[0][0] = 0.3;
    st.eta[1][0] = -0.5;

    Tape<double> tp;
    auto evars = stage_eta(tp, st);
    std::vector<Var<double>> tl;
    for (double v : L) tl.push_back(tp.leaf(Tensor<double>({1}, {v}), "L"));
    Var<double> total = homoscedastic_loss(tp, tl, evars);
    const double expect = std::exp(-0.3) * 0.8 + 0.15 + std::exp(0.5) * 0.25 - 0.25;
    CHECK(tp.value(total)[0] == doctest::Approx(expect).epsilon(1e-12));
    tp.backward(total);
    CHECK(tp.grad(evars[0])[0] == doctest::Approx(-std::exp(-0.3) * 0.8 + 0.5).epsilon(1e-9));
    CHECK(tp.grad(evars[1])[0] == doctest::Approx(-std::exp(0.5) * 0.25 + 0.5).epsilon(1e-9));

    // at the optimum eta = log(2L) the gradient vanishes
    HomoscedasticState<double> opt(2);
    for (int i = 0; i < 2; ++i) opt.eta[static_cast<size_t>(i)][0] = std::log(2 * L[static_cast<size_t>(i)]);
    Tape<double> tp2;
    auto ev2 = stage_eta(tp2, opt);
    std::vector<Var<double>> tl2;
    for (double v : L) tl2.push_back(tp2.leaf(Tensor<double>({1}, {v}), "L"));
    tp2.backward(homoscedastic_loss(tp2, tl2, ev2));
    for (int i = 0; i < 2; ++i)
        CHECK(std::abs(tp2.grad(ev2[static_cast<size_t>(i)])[0]) < 1e-9);

    CHECK(opt.effective_weight(0) == doctest::Approx(1.0 / (2 * L[0])).epsilon(1e-12));
    CHECK_THROWS_AS(homoscedastic_loss(tp2, tl2, std::vector<Var<double>>{}), ConfigError);
    std::vector<Var<double>> empty_tasks;
    std::vector<Var<double>> empty_eta;
    CHECK_THROWS_AS(homoscedastic_loss(tp2, empty_tasks, empty_eta), ConfigError);
}
