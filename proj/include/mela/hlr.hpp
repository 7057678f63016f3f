#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mela/backbone.hpp"
#include "mela/tensor.hpp"

namespace mela {

enum class FusionImpl { mlp, weighted_sum, h_only };

struct HmmConfig {
    int dim = 0;
    int patch = 1;
    int chunk = 1;
    int high_cycles = 4;  // H
    int low_cycles = 4;   // L
    int h_blocks = 2;
    int l_blocks = 1;
    int heads = 1;
    FusionImpl fusion = FusionImpl::mlp;
    bool per_cycle_fusion = false;
    // Final tracked segment: a full cycle (L low steps + high step) or the
    // single low/high pair of the original recursion listing.
    bool final_cycle_full = true;
    bool carry_inner_state = false;
    bool track_all_cycles = false;  // diagnostics; gradients only, values unchanged
    bool use_attention = true;
    bool use_memory = true;
    bool use_gating = true;
    bool rotary = true;
    InputFusion input_fusion = InputFusion::mlp;
    int mem_depth = 2;
    int mem_expansion = 2;
    UpdateMode mem_mode = UpdateMode::forget_momentum_ns;
    MemObjective mem_objective = MemObjective::associative;
    int ns_steps = 5;
    NsCoeffs ns_coeffs = ns_quintic();
};

// Fused memory representation per high cycle; back() is the final one.
struct CycleTrace {
    std::vector<Tensor> z;
    const Tensor& final_z() const { return z.back(); }
};

// Hierarchical memory module: patchification, the H/L backbones, and the
// latent recursion that refines their states under gradient barriers.
class Hmm {
  public:
    Hmm(const HmmConfig& cfg, const std::string& prefix, ParamSet& params, Rng& rng);

    // Patchify token embeddings and run the recursion. N must be divisible
    // by patch * chunk.
    CycleTrace forward(const Tensor& token_embeds) const;

    CycleTrace hlr_run(const Tensor& x_p) const;

    // Dual memory fusion of the (h, l) pair for a given cycle (1-based).
    Tensor fuse(const Tensor& l, const Tensor& h, int cycle) const;

    // One full high cycle: L low refinements, one high refinement, fusion.
    // Exposed so a reference program can replay the final cycle from
    // externally supplied states.
    struct CycleOut {
        Tensor l, h, z;
    };
    CycleOut run_cycle(const Tensor& l, const Tensor& h, const Tensor& x_p, int cycle,
                       std::vector<MemoryState>* l_states = nullptr,
                       std::vector<MemoryState>* h_states = nullptr) const;

    const HmmConfig& config() const { return cfg_; }
    PatchEmbed& patch_embed() { return *patch_; }
    const Backbone& l_module() const { return *l_mod_; }
    const Backbone& h_module() const { return *h_mod_; }
    void reset_counters() const {
        l_mod_->forward_calls = h_mod_->forward_calls = 0;
        l_mod_->block_calls = h_mod_->block_calls = 0;
    }

  private:
    HmmConfig cfg_;
    std::unique_ptr<PatchEmbed> patch_;
    std::unique_ptr<Backbone> l_mod_;
    std::unique_ptr<Backbone> h_mod_;
    struct FusionParams {
        Tensor w1, b1, w2, b2;     // mlp
        Tensor weight_l, weight_h;  // weighted_sum
    };
    std::vector<FusionParams> fusion_;  // one entry, or H with per-cycle fusion
};

}  // namespace mela
