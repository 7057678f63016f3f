#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mela/rng.hpp"
#include "mela/tensor.hpp"

namespace mela {

// Deterministic map from text-token indices to the interleaved memory+text
// sequence: each chunk of P*C text tokens is preceded by C memory slots.
struct ChunkLayout {
    int text_len = 0;    // N
    int patch = 1;       // P
    int chunk = 1;       // C
    int n_chunks = 0;    // N / (P*C)
    int total_len = 0;   // N (P+1) / P

    struct Slot {
        bool is_memory;
        int chunk_idx;
        int source;  // patch index for memory slots (-1 for the initial
                     // block), token index for text slots
    };
    std::vector<Slot> slots;        // size total_len
    std::vector<int> text_slot;     // token index -> slot index
    std::vector<int> memory_slots;  // all memory slot indices, in order
};

ChunkLayout build_chunk_layout(int text_len, int patch, int chunk);

// Boolean total_len x total_len matrix, row-major; mask[q][k] == true means
// query q may attend to key k. Text tokens see the memory slots of their own
// chunk plus preceding same-chunk text; memory slots attend causally among
// their own chunk's memory slots. Nothing crosses chunk boundaries.
std::vector<uint8_t> build_attention_mask(const ChunkLayout& layout);

// Additive attention bias (0 where allowed, -1e30 where masked).
Tensor mask_to_bias(const std::vector<uint8_t>& mask, int n);

// Interleave projected memory rows with text-token embeddings. Chunk j >= 1
// receives rows [(j-1)C, jC) of mem_rows (shift-by-one for strict
// causality); chunk 0 receives the learned initial block.
Tensor interleave_memory(const Tensor& mem_rows, const Tensor& text_embeds,
                         const ChunkLayout& layout, const Tensor& init_mem);

struct DecoderConfig {
    int layers = 4;
    int dim = 64;
    int heads = 4;
    int kv_heads = 4;
    int mlp_expansion = 4;
    double rotary_base = 10000.0;
};

// Pre-norm decoder block: grouped-query attention with rotary positions,
// then a SwiGLU MLP.
class DecoderBlock {
  public:
    DecoderBlock(const DecoderConfig& cfg, const std::string& prefix, ParamSet& params,
                 Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& mask_bias,
                   const std::vector<int>& positions) const;

    Tensor norm_attn, norm_mlp;
    Tensor w_q, w_k, w_v, w_o;
    Tensor w_gate_mlp, w_up, w_down;

  private:
    int dim_, heads_, kv_heads_, head_dim_;
    double rotary_base_;
};

// Decoder stack. MemStack injections (one tensor per early layer, one row
// per memory slot) are added to the hidden state at memory slots only.
class Decoder {
  public:
    Decoder(const DecoderConfig& cfg, const std::string& prefix, ParamSet& params, Rng& rng);

    Tensor forward(const Tensor& input, const Tensor& mask_bias,
                   const std::vector<int>& positions,
                   const std::vector<Tensor>* memstack = nullptr,
                   const std::vector<int>* memory_slots = nullptr) const;

    // Final norm then the tied output projection (logits = h E^T).
    Tensor project_out(const Tensor& hidden, const Tensor& embedding) const;

    const DecoderConfig& config() const { return cfg_; }
    const DecoderBlock& block(int i) const { return *blocks_[static_cast<std::size_t>(i)]; }

    Tensor norm_final;

  private:
    DecoderConfig cfg_;
    std::vector<std::unique_ptr<DecoderBlock>> blocks_;
};

}  // namespace mela
