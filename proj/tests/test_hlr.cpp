#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mela/hlr.hpp"
#include "test_util.hpp"

using namespace mela;

namespace {

HmmConfig small_cfg(int high = 2, int low = 2) {
    HmmConfig c;
    c.dim = 8;
    c.patch = 2;
    c.chunk = 2;
    c.high_cycles = high;
    c.low_cycles = low;
    c.h_blocks = 2;
    c.l_blocks = 1;
    c.heads = 2;
    return c;
}

Hmm make_hmm(const HmmConfig& cfg, ParamSet& ps, uint64_t seed = 5) {
    Rng rng(seed);
    return Hmm(cfg, "hmm", ps, rng);
}

}  // namespace

TEST_CASE("hlr H=1 L=1 runs one low and one high forward, gradient-tracked") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(1, 1), ps);
    Rng data(1);
    Tensor x_p = oracle::random_tensor({4, 8}, data);
    CycleTrace tr = hmm.hlr_run(x_p);
    CHECK(hmm.l_module().forward_calls == 1);
    CHECK(hmm.h_module().forward_calls == 1);
    CHECK(tr.z.size() == 1);
    // The single cycle is tracked: parameters receive gradients.
    GradMap g = grad(mean_all(square(tr.final_z())), ps);
    double total = 0;
    for (const auto& [k, v] : g)
        for (double x : v) total += std::abs(x);
    CHECK(total > 0.0);
}

TEST_CASE("hlr H=2 L=2 call sequence matches the recursion listing") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(2, 2), ps);
    Rng data(2);
    Tensor x_p = oracle::random_tensor({4, 8}, data);
    CycleTrace tr = hmm.hlr_run(x_p);
    // (L, L, H | barrier | L, L, H)
    CHECK(hmm.l_module().forward_calls == 4);
    CHECK(hmm.h_module().forward_calls == 2);
    CHECK(tr.z.size() == 2);
    // First cycle ran without gradients: its fusion output is a constant.
    CHECK(tr.z[0].node()->parents.empty());
    CHECK_FALSE(tr.z[0].requires_grad());
    // Final cycle is tracked.
    CHECK_FALSE(tr.z[1].node()->parents.empty());
}

TEST_CASE("hlr H=4 L=4 executes 16 low-module and 4 high-module forwards") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(4, 4), ps);
    Rng data(3);
    Tensor x_p = oracle::random_tensor({4, 8}, data);
    hmm.hlr_run(x_p);
    CHECK(hmm.l_module().forward_calls == 16);
    CHECK(hmm.h_module().forward_calls == 4);
    // Update-frequency ratio is exactly L.
    CHECK(hmm.l_module().forward_calls / hmm.h_module().forward_calls == 4);
}

TEST_CASE("fuse: zero inputs and zero biases give zero output") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(), ps);
    // Zero the fusion biases (weights can stay).
    for (auto& [name, t] : ps.mutable_map())
        if (name.find("fusion") != std::string::npos && name.find(".b") != std::string::npos)
            for (double& v : t.mutable_values()) v = 0.0;
    Tensor zero = Tensor::zeros({3, 8});
    Tensor z = hmm.fuse(zero, zero, 1);
    for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("fuse order matters and both inputs receive gradients") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(), ps);
    Rng data(4);
    Tensor l = oracle::random_tensor({3, 8}, data);
    Tensor h = oracle::random_tensor({3, 8}, data);
    Tensor z1 = hmm.fuse(l, h, 1);
    Tensor z2 = hmm.fuse(h, l, 1);
    CHECK(oracle::max_abs_diff(z1.values(), z2.values()) > 1e-6);

    Tensor lt = Tensor::from({3, 8}, l.values()).set_requires_grad(true);
    Tensor ht = Tensor::from({3, 8}, h.values()).set_requires_grad(true);
    auto grads = grad_wrt(mean_all(square(hmm.fuse(lt, ht, 1))), {lt, ht});
    double gl = 0, gh = 0;
    for (double v : grads[0]) gl += std::abs(v);
    for (double v : grads[1]) gh += std::abs(v);
    CHECK(gl > 0.0);
    CHECK(gh > 0.0);
}

TEST_CASE("fusion variants: h_only returns the h state, weighted_sum mixes") {
    ParamSet ps1;
    HmmConfig cfg = small_cfg();
    cfg.fusion = FusionImpl::h_only;
    Hmm hmm1 = make_hmm(cfg, ps1);
    Rng data(5);
    Tensor l = oracle::random_tensor({3, 8}, data);
    Tensor h = oracle::random_tensor({3, 8}, data);
    CHECK(oracle::max_abs_diff(hmm1.fuse(l, h, 1).values(), h.values()) == 0.0);

    ParamSet ps2;
    cfg.fusion = FusionImpl::weighted_sum;
    Hmm hmm2 = make_hmm(cfg, ps2);
    Tensor z = hmm2.fuse(l, h, 1);
    // Init weights are 0.5 each.
    for (std::size_t i = 0; i < z.values().size(); ++i)
        CHECK(z.values()[i] == doctest::Approx(0.5 * (l.values()[i] + h.values()[i])).epsilon(1e-12));
}

TEST_CASE("hmm forward: trace shape, length and non-degenerate consolidation") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(2, 2), ps);
    Rng data(6);
    Tensor emb = oracle::random_tensor({16, 8}, data);  // N=16, P=2 -> N_p=8
    CycleTrace tr = hmm.forward(emb);
    CHECK(tr.z.size() == 2);
    CHECK(tr.final_z().shape() == Shape{8, 8});
    // Consolidation is not a no-op.
    CHECK(oracle::max_abs_diff(tr.z[0].values(), tr.z[1].values()) > 1e-9);
}

TEST_CASE("hmm forward rejects lengths not divisible by patch*chunk") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(), ps);
    CHECK_THROWS(hmm.forward(Tensor::zeros({10, 8})));
}

TEST_CASE("H=1 trace has one entry") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(1, 2), ps);
    Rng data(7);
    CycleTrace tr = hmm.forward(oracle::random_tensor({8, 8}, data));
    CHECK(tr.z.size() == 1);
}

TEST_CASE("gradient locality: final-cycle grads match the barriered reference program") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(2, 2), ps, 11);
    Rng data(8);
    Tensor emb = oracle::random_tensor({8, 8}, data);

    CycleTrace tr = hmm.forward(emb);
    GradMap full = grad(mean_all(square(tr.final_z())), ps);

    // Reference: run the first H-1 cycles as plain values, feed them back in
    // as externally supplied constants, run only the final cycle.
    Tensor x_p = hmm.patch_embed().forward(emb);
    Tensor l_const, h_const;
    {
        NoGradScope ng;
        Tensor l = x_p, h = x_p;
        auto out = hmm.run_cycle(l, h, x_p, 1);
        l_const = Tensor::from(out.l.shape(), out.l.values());
        h_const = Tensor::from(out.h.shape(), out.h.values());
    }
    auto fin = hmm.run_cycle(l_const, h_const, x_p, 2);
    GradMap ref = grad(mean_all(square(fin.z)), ps);

    for (const auto& [name, gv] : full) {
        INFO(name);
        CHECK(gv == ref.at(name));  // bit-identical
    }
}

TEST_CASE("value equivalence: tracking the early cycles changes no values") {
    HmmConfig cfg = small_cfg(3, 2);
    ParamSet ps1, ps2;
    Hmm a = make_hmm(cfg, ps1, 21);
    cfg.track_all_cycles = true;
    Hmm b = make_hmm(cfg, ps2, 21);  // identical init stream
    Rng data(9);
    Tensor emb = oracle::random_tensor({8, 8}, data);
    CycleTrace ta = a.forward(emb);
    CycleTrace tb = b.forward(emb);
    for (std::size_t i = 0; i < ta.z.size(); ++i)
        CHECK(ta.z[i].values() == tb.z[i].values());
}

TEST_CASE("intermediate cycle representations contribute no parameter gradients") {
    ParamSet ps;
    Hmm hmm = make_hmm(small_cfg(3, 1), ps);
    Rng data(10);
    CycleTrace tr = hmm.forward(oracle::random_tensor({8, 8}, data));
    // Loss on an intermediate z only: all parameter gradients are zero.
    GradMap g = grad(mean_all(square(tr.z[0])), ps);
    for (const auto& [name, gv] : g)
        for (double v : gv) CHECK(v == 0.0);
}

TEST_CASE("single-step final cycle variant keeps the call budget") {
    HmmConfig cfg = small_cfg(2, 3);
    cfg.final_cycle_full = false;
    ParamSet ps;
    Hmm hmm = make_hmm(cfg, ps);
    Rng data(11);
    Tensor x_p = oracle::random_tensor({4, 8}, data);
    CycleTrace tr = hmm.hlr_run(x_p);
    // Same total low-module forwards; only the gradient boundary moves.
    CHECK(hmm.l_module().forward_calls == 6);
    CHECK(hmm.h_module().forward_calls == 2);
    CHECK(tr.z.size() == 2);
}

TEST_CASE("per-cycle fusion allocates one fusion layer per cycle") {
    HmmConfig cfg = small_cfg(3, 1);
    cfg.per_cycle_fusion = true;
    ParamSet ps;
    Hmm hmm = make_hmm(cfg, ps);
    CHECK(ps.has("hmm.fusion0.w1"));
    CHECK(ps.has("hmm.fusion1.w1"));
    CHECK(ps.has("hmm.fusion2.w1"));
    Rng data(12);
    CycleTrace tr = hmm.forward(oracle::random_tensor({8, 8}, data));
    CHECK(tr.z.size() == 3);
}

TEST_CASE("carried inner state survives across cycles when enabled") {
    HmmConfig cfg = small_cfg(2, 1);
    cfg.carry_inner_state = true;
    ParamSet ps1;
    Hmm carrying = make_hmm(cfg, ps1, 31);
    cfg.carry_inner_state = false;
    ParamSet ps2;
    Hmm fresh = make_hmm(cfg, ps2, 31);
    Rng data(13);
    Tensor x_p = oracle::random_tensor({4, 8}, data);
    CycleTrace t1 = carrying.hlr_run(x_p);
    CycleTrace t2 = fresh.hlr_run(x_p);
    // Different inner-loop trajectories after the first cycle.
    CHECK(oracle::max_abs_diff(t1.final_z().values(), t2.final_z().values()) > 1e-12);
}
