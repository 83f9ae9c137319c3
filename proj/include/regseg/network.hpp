#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>

#include "regseg/losses.hpp"
#include "regseg/ops.hpp"
#include "regseg/rng.hpp"

namespace regseg {

enum class ArchKind { seg, reg, jrs_reg, dense, sedd, cross_stitch };

inline const char* arch_name(ArchKind k) {
    switch (k) {
        case ArchKind::seg: return "seg";
        case ArchKind::reg: return "reg";
        case ArchKind::jrs_reg: return "jrs-reg";
        case ArchKind::dense: return "dense";
        case ArchKind::sedd: return "sedd";
        case ArchKind::cross_stitch: return "cross-stitch";
    }
    return "?";
}

inline ArchKind arch_from_name(const std::string& s) {
    if (s == "seg") return ArchKind::seg;
    if (s == "reg") return ArchKind::reg;
    if (s == "jrs-reg") return ArchKind::jrs_reg;
    if (s == "dense") return ArchKind::dense;
    if (s == "sedd") return ArchKind::sedd;
    if (s == "cross-stitch") return ArchKind::cross_stitch;
    throw ConfigError("unknown architecture '" + s + "'");
}

struct ArchSpec {
    ArchKind kind = ArchKind::cross_stitch;
    std::array<int, 5> filters{16, 32, 64, 32, 16};  // [c0,c1,c2,c1,c0]
    int num_classes = 5;                             // K+1 incl. background
    double leaky_slope = 0.01;
    uint64_t seed = 0;

    static std::array<int, 5> default_filters(ArchKind k) {
        // Cross-stitch runs two paths, the single-path nets use the
        // sqrt(2)-scaled counts so parameter totals are comparable.
        if (k == ArchKind::cross_stitch) return {16, 32, 64, 32, 16};
        return {23, 45, 91, 45, 23};
    }

    void validate() const {
        if (filters[0] != filters[4] || filters[1] != filters[3])
            throw ConfigError("filters must follow the [c0,c1,c2,c1,c0] pattern");
        for (int f : filters)
            if (f <= 0) throw ConfigError("non-positive filter count");
        if (num_classes < 2) throw ConfigError("need at least background + 1 structure");
        if (!(leaky_slope > 0 && leaky_slope < 1)) throw ConfigError("leaky slope out of (0,1)");
    }

    bool has_seg_head() const {
        return kind == ArchKind::seg || kind == ArchKind::dense || kind == ArchKind::sedd ||
               kind == ArchKind::cross_stitch;
    }
    bool has_reg_head() const { return kind != ArchKind::seg; }

    // Channels fed to the segmentation-task path (fixed image only).
    int seg_in_channels() const { return 1; }
    // Channels fed to the registration-task / shared path.
    int reg_in_channels() const {
        if (kind == ArchKind::reg) return 2;  // fixed + moving
        return 2 + num_classes;               // fixed + moving + one-hot moving seg
    }
};

// Deep-supervision output extents for input patch extent n.
struct OutputShapes {
    int coarse, mid, fine;
};

inline OutputShapes output_shapes(int n) {
    if (n < 44 || n % 4 != 0)
        throw SizeError("patch extent must be >= 44 and divisible by 4, got " +
                        std::to_string(n));
    return {n / 4 - 7, n / 2 - 18, n - 40};
}

// Offsets of the center-aligned strided ground-truth grids in the input patch.
inline int supervision_offset(int n, int extent, int stride) { return (n - stride * extent) / 2; }

template <typename T>
struct ParamStore {
    struct Entry {
        Tensor<T> value;
        bool trainable = false;
    };
    std::map<std::string, Entry> entries;  // ordered: reproducible iteration

    Tensor<T>& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw ConfigError("missing parameter '" + name + "'");
        return it->second.value;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw ConfigError("missing parameter '" + name + "'");
        return it->second.value;
    }
    void add(const std::string& name, std::vector<int> shape, bool trainable) {
        entries[name] = Entry{Tensor<T>(std::move(shape)), trainable};
    }
    long long trainable_count() const {
        long long n = 0;
        for (const auto& [k, e] : entries)
            if (e.trainable) n += e.value.size();
        return n;
    }
};

template <typename T>
struct Network {
    ArchSpec spec;
    ParamStore<T> params;
};

namespace net_detail {

// Registers the conv + batch-norm parameter set for one block.
template <typename T>
void add_conv_block(ParamStore<T>& ps, const std::string& prefix, int cin, int cout) {
    ps.add(prefix + "/w", {cout, cin, 3, 3, 3}, true);
    ps.add(prefix + "/b", {cout}, true);
    ps.add(prefix + "/gamma", {cout}, true);
    ps.add(prefix + "/beta", {cout}, true);
    ps.add(prefix + "/rmean", {cout}, false);
    ps.add(prefix + "/rvar", {cout}, false);
}

template <typename T>
void add_head(ParamStore<T>& ps, const std::string& prefix, int cin, int cout) {
    ps.add(prefix + "/w", {cout, cin, 1, 1, 1}, true);
    ps.add(prefix + "/b", {cout}, true);
}

// Encoder blocks e0,d1,e1,d2,b0,b1 under `prefix`.
template <typename T>
void add_encoder(ParamStore<T>& ps, const std::string& prefix, int cin, int c0, int c1, int c2) {
    add_conv_block(ps, prefix + "/e0", cin, c0);
    add_conv_block(ps, prefix + "/d1", c0, c1);
    add_conv_block(ps, prefix + "/e1", c1, c1);
    add_conv_block(ps, prefix + "/d2", c1, c2);
    add_conv_block(ps, prefix + "/b0", c2, c2);
    add_conv_block(ps, prefix + "/b1", c2, c2);
}

// Decoder blocks m0,m1,f0,f1 under `prefix`.
template <typename T>
void add_decoder(ParamStore<T>& ps, const std::string& prefix, int c0, int c1, int c2) {
    add_conv_block(ps, prefix + "/m0", c1 + c2, c1);
    add_conv_block(ps, prefix + "/m1", c1, c1);
    add_conv_block(ps, prefix + "/f0", c0 + c1, c0);
    add_conv_block(ps, prefix + "/f1", c0, c0);
}

template <typename T>
void add_heads(ParamStore<T>& ps, const std::string& prefix, int c0, int c1, int c2, int out) {
    add_head(ps, prefix + "/head_coarse", c2, out);
    add_head(ps, prefix + "/head_mid", c1, out);
    add_head(ps, prefix + "/head_fine", c0, out);
}

}  // namespace net_detail

template <typename T>
Network<T> build(const ArchSpec& spec) {
    spec.validate();
    Network<T> net;
    net.spec = spec;
    ParamStore<T>& ps = net.params;
    const int c0 = spec.filters[0], c1 = spec.filters[1], c2 = spec.filters[2];
    const int K1 = spec.num_classes;
    using namespace net_detail;
    switch (spec.kind) {
        case ArchKind::seg:
            add_encoder(ps, "p0", spec.seg_in_channels(), c0, c1, c2);
            add_decoder(ps, "p0", c0, c1, c2);
            add_heads(ps, "p0/seg", c0, c1, c2, K1);
            break;
        case ArchKind::reg:
        case ArchKind::jrs_reg:
            add_encoder(ps, "p0", spec.reg_in_channels(), c0, c1, c2);
            add_decoder(ps, "p0", c0, c1, c2);
            add_heads(ps, "p0/reg", c0, c1, c2, 3);
            break;
        case ArchKind::dense:
            add_encoder(ps, "p0", spec.reg_in_channels(), c0, c1, c2);
            add_decoder(ps, "p0", c0, c1, c2);
            add_heads(ps, "p0/seg", c0, c1, c2, K1);
            add_heads(ps, "p0/reg", c0, c1, c2, 3);
            break;
        case ArchKind::sedd:
            add_encoder(ps, "enc", spec.reg_in_channels(), c0, c1, c2);
            add_decoder(ps, "dec_s", c0, c1, c2);
            add_heads(ps, "dec_s/seg", c0, c1, c2, K1);
            add_decoder(ps, "dec_r", c0, c1, c2);
            add_heads(ps, "dec_r/reg", c0, c1, c2, 3);
            break;
        case ArchKind::cross_stitch:
            add_encoder(ps, "seg", spec.seg_in_channels(), c0, c1, c2);
            add_decoder(ps, "seg", c0, c1, c2);
            add_heads(ps, "seg/seg", c0, c1, c2, K1);
            add_encoder(ps, "reg", spec.reg_in_channels(), c0, c1, c2);
            add_decoder(ps, "reg", c0, c1, c2);
            add_heads(ps, "reg/reg", c0, c1, c2, 3);
            // one unit after each downsampling layer and each upsampling layer
            ps.add("cs0/alpha", {c1, 4}, true);
            ps.add("cs1/alpha", {c2, 4}, true);
            ps.add("cs2/alpha", {c2, 4}, true);
            ps.add("cs3/alpha", {c1, 4}, true);
            break;
    }
    return net;
}

// Conv weights ~ N(0, 0.02^2); CS alphas ~ truncated normal(0.5, 0.25) in
// [0,1]; biases/beta zero; gamma one; running stats at (0,1).
template <typename T>
void init_params(Network<T>& net, uint64_t seed) {
    Rng rng(seed);
    net.spec.seed = seed;
    for (auto& [name, e] : net.params.entries) {
        auto ends_with = [&](const char* suf) {
            const std::string s(suf);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with("/alpha")) {
            for (auto& v : e.value.data)
                v = static_cast<T>(draw_truncated_normal(rng, 0.5, 0.25, 0.0, 1.0));
        } else if (ends_with("/w")) {
            for (auto& v : e.value.data) v = static_cast<T>(draw_normal(rng, 0.0, 0.02));
        } else if (ends_with("/gamma") || ends_with("/rvar")) {
            e.value.fill(T(1));
        } else {
            e.value.fill(T(0));  // biases, beta, rmean
        }
    }
}

template <typename T>
long long count_params(const Network<T>& net) {
    return net.params.trainable_count();
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

template <typename T>
using ParamVars = std::map<std::string, Var<T>>;

// Stages every parameter as a tape leaf (trainable ones flagged for grads).
template <typename T>
ParamVars<T> stage_params(Tape<T>& tp, Network<T>& net) {
    ParamVars<T> pv;
    for (auto& [name, e] : net.params.entries)
        if (e.trainable) pv[name] = tp.leaf(e.value, name, true);
    return pv;
}

template <typename T>
struct NetInputs {
    Tensor<T> fixed;                        // [D,H,W]
    std::optional<Tensor<T>> moving;        // [D,H,W]
    std::optional<Tensor<T>> moving_seg;    // [K+1,D,H,W] one-hot
};

template <typename T>
struct MultiResOutput {
    std::array<Var<T>, 3> seg;  // coarse, mid, fine logits (valid if seg head)
    std::array<Var<T>, 3> dvf;  // coarse, mid, fine displacements
    bool has_seg = false;
    bool has_reg = false;
};

namespace net_detail {

template <typename T>
struct Ctx {
    Tape<T>* tp;
    Network<T>* net;
    const ParamVars<T>* pv;
    ops::BnMode mode;
    double slope;

    Var<T> p(const std::string& name) const {
        auto it = pv->find(name);
        if (it == pv->end()) throw ConfigError("parameter not staged: " + name);
        return it->second;
    }

    Var<T> conv_block(const std::string& prefix, Var<T> x, int stride) const {
        Var<T> y = ops::conv3d(*tp, x, p(prefix + "/w"), p(prefix + "/b"), stride);
        y = ops::batch_norm(*tp, y, p(prefix + "/gamma"), p(prefix + "/beta"),
                            &net->params.at(prefix + "/rmean"), &net->params.at(prefix + "/rvar"),
                            mode);
        return ops::leaky_relu(*tp, y, slope);
    }

    Var<T> head(const std::string& prefix, Var<T> x) const {
        return ops::conv3d(*tp, x, p(prefix + "/w"), p(prefix + "/b"), 1);
    }
};

template <typename T>
struct EncOut {
    Var<T> skip0, skip1, bottom;
};

template <typename T>
EncOut<T> encode(const Ctx<T>& c, const std::string& prefix, Var<T> x) {
    Var<T> s0 = c.conv_block(prefix + "/e0", x, 1);
    Var<T> d1 = c.conv_block(prefix + "/d1", s0, 2);
    Var<T> s1 = c.conv_block(prefix + "/e1", d1, 1);
    Var<T> d2 = c.conv_block(prefix + "/d2", s1, 2);
    Var<T> b0 = c.conv_block(prefix + "/b0", d2, 1);
    Var<T> b1 = c.conv_block(prefix + "/b1", b0, 1);
    return {s0, s1, b1};
}

template <typename T>
struct DecOut {
    Var<T> coarse_feat, mid_feat, fine_feat;
};

template <typename T>
DecOut<T> decode(const Ctx<T>& c, const std::string& prefix, const EncOut<T>& e) {
    Var<T> up1 = ops::trilinear_upsample2x(*c.tp, e.bottom);
    Var<T> skip1 = ops::crop_center(*c.tp, e.skip1, c.tp->value(up1).dim(1));
    Var<T> m0 = c.conv_block(prefix + "/m0", ops::concat_c(*c.tp, skip1, up1), 1);
    Var<T> m1 = c.conv_block(prefix + "/m1", m0, 1);
    Var<T> up2 = ops::trilinear_upsample2x(*c.tp, m1);
    Var<T> skip0 = ops::crop_center(*c.tp, e.skip0, c.tp->value(up2).dim(1));
    Var<T> f0 = c.conv_block(prefix + "/f0", ops::concat_c(*c.tp, skip0, up2), 1);
    Var<T> f1 = c.conv_block(prefix + "/f1", f0, 1);
    return {e.bottom, m1, f1};
}

template <typename T>
Tensor<T> as_chw(const Tensor<T>& t) {
    if (t.rank() == 4) return t;
    Tensor<T> r = t;
    r.shape = {1, t.dim(0), t.dim(1), t.dim(2)};
    return r;
}

template <typename T>
Tensor<T> concat_plain(const std::vector<const Tensor<T>*>& parts) {
    int C = 0;
    for (auto* p : parts) C += p->dim(0);
    Tensor<T> out({C, parts[0]->dim(1), parts[0]->dim(2), parts[0]->dim(3)});
    long long off = 0;
    for (auto* p : parts) {
        std::copy(p->data.begin(), p->data.end(), out.data.begin() + off);
        off += p->size();
    }
    return out;
}

}  // namespace net_detail

template <typename T>
MultiResOutput<T> forward(Tape<T>& tp, Network<T>& net, const ParamVars<T>& pv,
                          const NetInputs<T>& in, ops::BnMode mode) {
    using namespace net_detail;
    const ArchSpec& spec = net.spec;
    const Tensor<T>& fx = in.fixed;
    if (fx.rank() != 3 || fx.dim(0) != fx.dim(1) || fx.dim(1) != fx.dim(2))
        throw ShapeError("forward expects a cubic [n,n,n] fixed patch");
    output_shapes(fx.dim(0));  // validates n >= 44, divisible by 4

    Ctx<T> c{&tp, &net, &pv, mode, spec.leaky_slope};

    auto need = [&](const std::optional<Tensor<T>>& t, const char* what) -> const Tensor<T>& {
        if (!t)
            throw ConfigError(std::string(arch_name(spec.kind)) + " requires " + what);
        return *t;
    };

    Tensor<T> fixed_c = as_chw(fx);
    MultiResOutput<T> out;
    out.has_seg = spec.has_seg_head();
    out.has_reg = spec.has_reg_head();

    auto reg_input = [&]() {
        std::vector<Tensor<T>> hold;
        hold.push_back(fixed_c);
        hold.push_back(as_chw(need(in.moving, "a moving image")));
        if (spec.kind != ArchKind::reg)
            hold.push_back(need(in.moving_seg, "a one-hot moving segmentation"));
        std::vector<const Tensor<T>*> parts;
        for (const auto& h : hold) parts.push_back(&h);
        return concat_plain(parts);
    };

    switch (spec.kind) {
        case ArchKind::seg: {
            Var<T> x = tp.leaf(std::move(fixed_c), "input");
            DecOut<T> d = decode(c, "p0", encode(c, "p0", x));
            out.seg = {c.head("p0/seg/head_coarse", d.coarse_feat),
                       c.head("p0/seg/head_mid", d.mid_feat),
                       c.head("p0/seg/head_fine", d.fine_feat)};
            break;
        }
        case ArchKind::reg:
        case ArchKind::jrs_reg: {
            Var<T> x = tp.leaf(reg_input(), "input");
            DecOut<T> d = decode(c, "p0", encode(c, "p0", x));
            out.dvf = {c.head("p0/reg/head_coarse", d.coarse_feat),
                       c.head("p0/reg/head_mid", d.mid_feat),
                       c.head("p0/reg/head_fine", d.fine_feat)};
            break;
        }
        case ArchKind::dense: {
            Var<T> x = tp.leaf(reg_input(), "input");
            DecOut<T> d = decode(c, "p0", encode(c, "p0", x));
            out.seg = {c.head("p0/seg/head_coarse", d.coarse_feat),
                       c.head("p0/seg/head_mid", d.mid_feat),
                       c.head("p0/seg/head_fine", d.fine_feat)};
            out.dvf = {c.head("p0/reg/head_coarse", d.coarse_feat),
                       c.head("p0/reg/head_mid", d.mid_feat),
                       c.head("p0/reg/head_fine", d.fine_feat)};
            break;
        }
        case ArchKind::sedd: {
            Var<T> x = tp.leaf(reg_input(), "input");
            EncOut<T> e = encode(c, "enc", x);
            DecOut<T> ds = decode(c, "dec_s", e);
            DecOut<T> dr = decode(c, "dec_r", e);
            out.seg = {c.head("dec_s/seg/head_coarse", ds.coarse_feat),
                       c.head("dec_s/seg/head_mid", ds.mid_feat),
                       c.head("dec_s/seg/head_fine", ds.fine_feat)};
            out.dvf = {c.head("dec_r/reg/head_coarse", dr.coarse_feat),
                       c.head("dec_r/reg/head_mid", dr.mid_feat),
                       c.head("dec_r/reg/head_fine", dr.fine_feat)};
            break;
        }
        case ArchKind::cross_stitch: {
            Var<T> xr = tp.leaf(reg_input(), "input_reg");
            Var<T> xs = tp.leaf(std::move(fixed_c), "input_seg");
            // interleaved encoders with CS units after each downsampling layer
            Var<T> s0s = c.conv_block("seg/e0", xs, 1);
            Var<T> s0r = c.conv_block("reg/e0", xr, 1);
            Var<T> d1s = c.conv_block("seg/d1", s0s, 2);
            Var<T> d1r = c.conv_block("reg/d1", s0r, 2);
            auto [m1s, m1r] = ops::cross_stitch_apply(tp, d1s, d1r, c.p("cs0/alpha"));
            Var<T> s1s = c.conv_block("seg/e1", m1s, 1);
            Var<T> s1r = c.conv_block("reg/e1", m1r, 1);
            Var<T> d2s = c.conv_block("seg/d2", s1s, 2);
            Var<T> d2r = c.conv_block("reg/d2", s1r, 2);
            auto [m2s, m2r] = ops::cross_stitch_apply(tp, d2s, d2r, c.p("cs1/alpha"));
            Var<T> b1s = c.conv_block("seg/b1", c.conv_block("seg/b0", m2s, 1), 1);
            Var<T> b1r = c.conv_block("reg/b1", c.conv_block("reg/b0", m2r, 1), 1);
            // decoders with CS units after each upsampling layer
            Var<T> u1s = ops::trilinear_upsample2x(tp, b1s);
            Var<T> u1r = ops::trilinear_upsample2x(tp, b1r);
            auto [w1s, w1r] = ops::cross_stitch_apply(tp, u1s, u1r, c.p("cs2/alpha"));
            const int me = tp.value(w1s).dim(1);
            Var<T> cs1 = ops::crop_center(tp, s1s, me);
            Var<T> cr1 = ops::crop_center(tp, s1r, me);
            Var<T> mm0s = c.conv_block("seg/m0", ops::concat_c(tp, cs1, w1s), 1);
            Var<T> mm0r = c.conv_block("reg/m0", ops::concat_c(tp, cr1, w1r), 1);
            Var<T> mm1s = c.conv_block("seg/m1", mm0s, 1);
            Var<T> mm1r = c.conv_block("reg/m1", mm0r, 1);
            Var<T> u2s = ops::trilinear_upsample2x(tp, mm1s);
            Var<T> u2r = ops::trilinear_upsample2x(tp, mm1r);
            auto [w2s, w2r] = ops::cross_stitch_apply(tp, u2s, u2r, c.p("cs3/alpha"));
            const int fe = tp.value(w2s).dim(1);
            Var<T> cs0 = ops::crop_center(tp, s0s, fe);
            Var<T> cr0 = ops::crop_center(tp, s0r, fe);
            Var<T> ff0s = c.conv_block("seg/f0", ops::concat_c(tp, cs0, w2s), 1);
            Var<T> ff0r = c.conv_block("reg/f0", ops::concat_c(tp, cr0, w2r), 1);
            Var<T> ff1s = c.conv_block("seg/f1", ff0s, 1);
            Var<T> ff1r = c.conv_block("reg/f1", ff0r, 1);
            out.seg = {c.head("seg/seg/head_coarse", b1s), c.head("seg/seg/head_mid", mm1s),
                       c.head("seg/seg/head_fine", ff1s)};
            out.dvf = {c.head("reg/reg/head_coarse", b1r), c.head("reg/reg/head_mid", mm1r),
                       c.head("reg/reg/head_fine", ff1r)};
            break;
        }
    }
    return out;
}

}  // namespace regseg
