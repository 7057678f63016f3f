#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mela/memory.hpp"
#include "mela/rng.hpp"
#include "mela/tensor.hpp"

namespace mela {

enum class InputFusion { mlp, add };

struct BackboneConfig {
    int num_blocks = 1;
    int dim = 0;
    int heads = 1;
    bool takes_input_injection = false;  // true for the L-module
    bool use_attention = true;
    bool use_memory = true;
    bool use_gating = true;
    bool rotary = true;
    double rotary_base = 10000.0;
    InputFusion input_fusion = InputFusion::mlp;
    MemoryLayerConfig mem;
};

// Non-overlapping 1-D convolution with kernel length = stride = patch size.
// Trailing remainder tokens are dropped.
class PatchEmbed {
  public:
    PatchEmbed(int patch, int dim, const std::string& prefix, ParamSet& params, Rng& rng);
    Tensor forward(const Tensor& x) const;  // [N, d] -> [floor(N/P), d]
    int patch_size() const { return patch_; }

    Tensor weight;  // [P*d, d]
    Tensor bias;    // [d]

  private:
    int patch_;
    int dim_;
};

// Causal multi-head attention over patches whose output is modulated by a
// learned sigmoid gate before the output projection.
class GatedAttention {
  public:
    GatedAttention(const BackboneConfig& cfg, const std::string& prefix, ParamSet& params,
                   Rng& rng);
    Tensor forward(const Tensor& x) const;

    Tensor w_q, w_k, w_v, w_o;   // [d, d]
    Tensor w_gate, b_gate;       // [d, d], [d]

  private:
    int dim_, heads_, head_dim_;
    bool use_gating_, rotary_;
    double rotary_base_;
};

// Pre-norm residual block: gated attention then the neural memory layer.
class MemoryBlock {
  public:
    MemoryBlock(const BackboneConfig& cfg, const std::string& prefix, ParamSet& params,
                Rng& rng);
    Tensor forward(const Tensor& x, MemoryState* carried = nullptr) const;

    Tensor norm_attn, norm_mem;  // rmsnorm weights
    std::unique_ptr<GatedAttention> attn;
    std::unique_ptr<MemoryLayer> mem;

  private:
    bool use_attention_, use_memory_;
};

// The shared memory-module architecture: input fusion of the (l, h[, x])
// states followed by a stack of memory blocks. Instantiated twice, as
// H-module and L-module, with different depths.
class Backbone {
  public:
    Backbone(const BackboneConfig& cfg, const std::string& prefix, ParamSet& params, Rng& rng);

    // x_inj must be present iff the config takes input injection. `carried`
    // optionally resumes one inner memory state per block across calls.
    Tensor module_forward(const Tensor& l, const Tensor& h, const Tensor* x_inj = nullptr,
                          std::vector<MemoryState>* carried = nullptr) const;

    const BackboneConfig& config() const { return cfg_; }
    int num_blocks() const { return cfg_.num_blocks; }
    const MemoryBlock& block(int i) const { return *blocks_[static_cast<std::size_t>(i)]; }

    // Instrumentation for recursion-structure tests (atomic: forwards may
    // run on several worker threads).
    mutable std::atomic<int64_t> forward_calls{0};
    mutable std::atomic<int64_t> block_calls{0};

    Tensor fuse_w1, fuse_b1, fuse_w2, fuse_b2;  // input fusion MLP

  private:
    Tensor fuse_inputs(const Tensor& l, const Tensor& h, const Tensor* x_inj) const;

    BackboneConfig cfg_;
    std::vector<std::unique_ptr<MemoryBlock>> blocks_;
};

}  // namespace mela
