#include "mela/hlr.hpp"

#include <cmath>
#include <stdexcept>

namespace mela {

namespace {

Tensor init_matrix(Shape s, Rng& rng, double scale) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
    for (double& x : v) x = rng.normal() * scale;
    return Tensor::from(std::move(s), std::move(v)).set_requires_grad(true);
}

bool all_finite(const Tensor& t) {
    for (double x : t.values())
        if (!std::isfinite(x)) return false;
    return true;
}

BackboneConfig backbone_cfg(const HmmConfig& c, bool is_low) {
    BackboneConfig b;
    b.num_blocks = is_low ? c.l_blocks : c.h_blocks;
    b.dim = c.dim;
    b.heads = c.heads;
    b.takes_input_injection = is_low;
    b.use_attention = c.use_attention;
    b.use_memory = c.use_memory;
    b.use_gating = c.use_gating;
    b.rotary = c.rotary;
    b.input_fusion = c.input_fusion;
    b.mem.dim = c.dim;
    b.mem.chunk = c.chunk;
    b.mem.net_depth = c.mem_depth;
    b.mem.net_expansion = c.mem_expansion;
    b.mem.mode = c.mem_mode;
    b.mem.objective = c.mem_objective;
    b.mem.ns_steps = c.ns_steps;
    b.mem.ns_coeffs = c.ns_coeffs;
    return b;
}

}  // namespace

Hmm::Hmm(const HmmConfig& cfg, const std::string& prefix, ParamSet& params, Rng& rng)
    : cfg_(cfg) {
    if (cfg.high_cycles < 1 || cfg.low_cycles < 1)
        throw std::invalid_argument("hmm: cycles must be positive");
    patch_ = std::make_unique<PatchEmbed>(cfg.patch, cfg.dim, prefix + ".patch", params, rng);
    l_mod_ = std::make_unique<Backbone>(backbone_cfg(cfg, true), prefix + ".l", params, rng);
    h_mod_ = std::make_unique<Backbone>(backbone_cfg(cfg, false), prefix + ".h", params, rng);

    const int d = cfg.dim;
    const int n_fusion = cfg.per_cycle_fusion ? cfg.high_cycles : 1;
    for (int i = 0; i < n_fusion; ++i) {
        FusionParams f;
        const std::string fp =
            prefix + ".fusion" + (cfg.per_cycle_fusion ? std::to_string(i) : std::string());
        if (cfg.fusion == FusionImpl::mlp) {
            f.w1 = init_matrix({2 * d, 2 * d}, rng, 1.0 / std::sqrt(2.0 * d));
            f.b1 = Tensor::zeros({2 * d}).set_requires_grad(true);
            f.w2 = init_matrix({2 * d, d}, rng, 1.0 / std::sqrt(2.0 * d));
            f.b2 = Tensor::zeros({d}).set_requires_grad(true);
            params.add(fp + ".w1", f.w1);
            params.add(fp + ".b1", f.b1);
            params.add(fp + ".w2", f.w2);
            params.add(fp + ".b2", f.b2);
        } else if (cfg.fusion == FusionImpl::weighted_sum) {
            f.weight_l = Tensor::full({d}, 0.5).set_requires_grad(true);
            f.weight_h = Tensor::full({d}, 0.5).set_requires_grad(true);
            params.add(fp + ".weight_l", f.weight_l);
            params.add(fp + ".weight_h", f.weight_h);
        }
        fusion_.push_back(std::move(f));
    }
}

Tensor Hmm::fuse(const Tensor& l, const Tensor& h, int cycle) const {
    if (l.shape() != h.shape()) throw std::invalid_argument("fuse: shape mismatch");
    const FusionParams& f =
        fusion_[cfg_.per_cycle_fusion ? static_cast<std::size_t>(cycle - 1) : 0];
    switch (cfg_.fusion) {
        case FusionImpl::mlp: {
            Tensor cat = concat_last({h, l});  // h state first
            return add(matmul(silu(add(matmul(cat, f.w1), f.b1)), f.w2), f.b2);
        }
        case FusionImpl::weighted_sum:
            return add(mul(l, f.weight_l), mul(h, f.weight_h));
        case FusionImpl::h_only:
            return h;
    }
    throw std::invalid_argument("fuse: unknown fusion impl");
}

Hmm::CycleOut Hmm::run_cycle(const Tensor& l_in, const Tensor& h_in, const Tensor& x_p,
                             int cycle, std::vector<MemoryState>* l_states,
                             std::vector<MemoryState>* h_states) const {
    Tensor l = l_in, h = h_in;
    for (int j = 0; j < cfg_.low_cycles; ++j) l = l_mod_->module_forward(l, h, &x_p, l_states);
    h = h_mod_->module_forward(l, h, nullptr, h_states);
    return {l, h, fuse(l, h, cycle)};
}

CycleTrace Hmm::hlr_run(const Tensor& x_p) const {
    CycleTrace trace;
    Tensor l = x_p, h = x_p;
    std::vector<MemoryState> l_states, h_states;
    std::vector<MemoryState>* ls = cfg_.carry_inner_state ? &l_states : nullptr;
    std::vector<MemoryState>* hs = cfg_.carry_inner_state ? &h_states : nullptr;
    const int high = cfg_.high_cycles;

    for (int i = 1; i < high; ++i) {
        CycleOut out;
        if (cfg_.track_all_cycles) {
            out = run_cycle(l, h, x_p, i, ls, hs);
        } else {
            NoGradScope ng;
            out = run_cycle(l, h, x_p, i, ls, hs);
        }
        l = out.l;
        h = out.h;
        trace.z.push_back(out.z);
        if (!all_finite(l) || !all_finite(h))
            throw std::runtime_error("hlr: non-finite state after cycle " + std::to_string(i));
    }

    if (!cfg_.final_cycle_full && cfg_.low_cycles > 1) {
        // Original recursion listing: all but the last low step of the final
        // cycle also run without gradients.
        NoGradScope ng;
        for (int j = 0; j < cfg_.low_cycles - 1; ++j) l = l_mod_->module_forward(l, h, &x_p, ls);
    }
    l = barrier(l);
    h = barrier(h);
    CycleOut out;
    if (cfg_.final_cycle_full) {
        out = run_cycle(l, h, x_p, high, ls, hs);
    } else {
        Tensor lf = l_mod_->module_forward(l, h, &x_p, ls);
        Tensor hf = h_mod_->module_forward(lf, h, nullptr, hs);
        out = {lf, hf, fuse(lf, hf, high)};
    }
    trace.z.push_back(out.z);
    if (!all_finite(out.l) || !all_finite(out.h))
        throw std::runtime_error("hlr: non-finite state after cycle " + std::to_string(high));
    return trace;
}

CycleTrace Hmm::forward(const Tensor& token_embeds) const {
    const int n = token_embeds.shape()[0];
    if (n % (cfg_.patch * cfg_.chunk) != 0)
        throw std::invalid_argument("hmm: sequence length " + std::to_string(n) +
                                    " must be divisible by patch*chunk = " +
                                    std::to_string(cfg_.patch * cfg_.chunk));
    return hlr_run(patch_->forward(token_embeds));
}

}  // namespace mela
