// Rough single-core throughput check for the convolution kernels; not part
// of the test suite.
#include <chrono>
#include <cstdio>

#include "regseg/network.hpp"

using namespace regseg;

int main() {
    const int n = 48;
    ArchSpec spec;
    spec.kind = ArchKind::cross_stitch;
    Network<float> net = build<float>(spec);
    init_params(net, 1);

    NetInputs<float> in;
    in.fixed = Tensor<float>({n, n, n});
    in.moving = Tensor<float>({n, n, n});
    in.moving_seg = Tensor<float>({spec.num_classes, n, n, n});
    Rng rng(2);
    for (auto& v : in.fixed.data) v = static_cast<float>(draw_uniform(rng, -1, 1));
    for (auto& v : in.moving->data) v = static_cast<float>(draw_uniform(rng, -1, 1));
    for (auto& v : in.moving_seg->data) v = static_cast<float>(draw_uniform(rng, 0, 1));

    // forward + backward of the full dual-path network
    const int iters = 5;
    auto t0 = std::chrono::steady_clock::now();
    for (int it = 0; it < iters; ++it) {
        Tape<float> tp;
        ParamVars<float> pv = stage_params(tp, net);
        MultiResOutput<float> out = forward(tp, net, pv, in, ops::BnMode::train);
        Var<float> s = ops::mean(tp, out.seg[2]);
        Var<float> r = ops::mean(tp, out.dvf[2]);
        Var<float> total = ops::add(tp, s, r);
        tp.backward(total);
    }
    auto t1 = std::chrono::steady_clock::now();
    const double dt = std::chrono::duration<double>(t1 - t0).count() / iters;
    std::printf("fwd+bwd per iteration (n=%d): %.3f s\n", n, dt);
    std::printf("2000 iterations x 2 directions: %.1f min\n", 2000 * 2 * dt / 60.0);
    return 0;
}
