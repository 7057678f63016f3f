#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mela/decoder.hpp"
#include "mela/hlr.hpp"
#include "mela/tensor.hpp"

namespace mela {

struct ModelConfig {
    std::string kind = "mela";  // "mela" or "transformerpp"
    int vocab = 256;
    int dim = 64;      // HMM hidden size; embedding is shared with the decoder
    int dec_dim = 64;  // decoder hidden size (must match dim, see validate())
    int patch = 4;
    int chunk = 2;
    int high_cycles = 2;
    int low_cycles = 2;
    int h_blocks = 2;
    int l_blocks = 1;
    int dec_layers = 4;
    int heads = 4;
    int kv_heads = 2;
    int mlp_expansion = 4;
    int mem_depth = 2;
    int mem_expansion = 2;
    double rotary_base = 10000.0;

    // Ablation toggles; the all-default configuration is the full model.
    bool use_ns = true;
    bool use_memstack = true;
    bool use_gating = true;
    bool use_attention = true;
    bool use_memory = true;
    FusionImpl fusion = FusionImpl::mlp;
    InputFusion input_fusion = InputFusion::mlp;
    UpdateMode mem_mode = UpdateMode::forget_momentum_ns;  // derived from use_ns
    MemObjective mem_objective = MemObjective::associative;
    bool ns_cubic_coeffs = false;
    bool backbone_rotary = true;
    bool final_cycle_full = true;
    bool per_cycle_fusion = false;
    bool carry_inner_state = false;
    bool mem_positions_sequential = true;

    void validate() const;
};

// Common teacher-forced interface used by the trainer and the harness.
class LanguageModel {
  public:
    virtual ~LanguageModel() = default;

    // Mean next-token cross-entropy over a window of tokens (the final token
    // has no target and is ignored).
    virtual Tensor window_loss(const std::vector<int>& window) const = 0;

    // Positions contributing to the loss for a window of length n.
    virtual int loss_positions(int window_len) const { return window_len - 1; }

    virtual ParamSet& params() = 0;
    virtual const ModelConfig& config() const = 0;
};

// Targets for the interleaved sequence: text slot of token t predicts token
// t+1; memory slots and the final token are ignored.
std::vector<int> interleaved_targets(const std::vector<int>& window, const ChunkLayout& layout);

// Mean cross-entropy over non-ignored positions of an interleaved forward.
Tensor lm_loss(const Tensor& logits, const std::vector<int>& targets);

class MelaModel : public LanguageModel {
  public:
    MelaModel(const ModelConfig& cfg, uint64_t seed);

    Tensor window_loss(const std::vector<int>& window) const override;
    ParamSet& params() override { return params_; }
    const ModelConfig& config() const override { return cfg_; }

    // Full forward: logits over the interleaved sequence.
    Tensor logits(const std::vector<int>& tokens) const;

    // Diagnostics hook: replace every memory row (all chunks) with the given
    // constant block and disable MemStack, isolating the text-side channel.
    Tensor logits_with_frozen_memory(const std::vector<int>& tokens,
                                     const Tensor& frozen_rows) const;

    const Hmm& hmm() const { return *hmm_; }
    const Decoder& decoder() const { return *decoder_; }
    Tensor embedding;  // [vocab, dim], tied with the output projection
    Tensor mem_proj;   // [dim, dec_dim], shared by z^(H) and all z^(j)
    Tensor init_mem;   // [C, dec_dim], memory block of the first chunk

  private:
    Tensor decode(const std::vector<int>& tokens, const CycleTrace* trace,
                  const Tensor* frozen_rows) const;
    std::vector<int> positions_for(const ChunkLayout& layout) const;

    ModelConfig cfg_;
    ParamSet params_;
    std::unique_ptr<Hmm> hmm_;
    std::unique_ptr<Decoder> decoder_;
};

// The matched decoder-only baseline: plain causal mask, no memory tokens.
class TransformerPP : public LanguageModel {
  public:
    TransformerPP(const ModelConfig& cfg, uint64_t seed);

    Tensor window_loss(const std::vector<int>& window) const override;
    ParamSet& params() override { return params_; }
    const ModelConfig& config() const override { return cfg_; }

    Tensor logits(const std::vector<int>& tokens) const;

    const Decoder& decoder() const { return *decoder_; }
    Tensor embedding;

  private:
    ModelConfig cfg_;
    ParamSet params_;
    std::unique_ptr<Decoder> decoder_;
};

std::unique_ptr<LanguageModel> make_model(const ModelConfig& cfg, uint64_t seed);

}  // namespace mela
