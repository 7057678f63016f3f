#include "mela/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace mela {

namespace {

Tensor init_matrix(Shape s, Rng& rng, double scale) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
    for (double& x : v) x = rng.normal() * scale;
    return Tensor::from(std::move(s), std::move(v)).set_requires_grad(true);
}

}  // namespace

ChunkLayout build_chunk_layout(int text_len, int patch, int chunk) {
    if (text_len < 1 || patch < 1 || chunk < 1)
        throw std::invalid_argument("chunk layout: sizes must be positive");
    if (text_len % (patch * chunk) != 0)
        throw std::invalid_argument(
            "chunk layout: text length " + std::to_string(text_len) +
            " is not divisible by patch*chunk = " + std::to_string(patch * chunk) +
            "; pad or truncate the window to a multiple");
    ChunkLayout lo;
    lo.text_len = text_len;
    lo.patch = patch;
    lo.chunk = chunk;
    lo.n_chunks = text_len / (patch * chunk);
    lo.total_len = lo.n_chunks * chunk * (patch + 1);
    lo.slots.reserve(static_cast<std::size_t>(lo.total_len));
    lo.text_slot.resize(static_cast<std::size_t>(text_len));
    for (int j = 0; j < lo.n_chunks; ++j) {
        for (int c = 0; c < chunk; ++c) {
            // Memory of chunk j summarizes patch-chunk j-1; chunk 0 points at
            // the learned initial block.
            const int src = j >= 1 ? (j - 1) * chunk + c : -1;
            lo.memory_slots.push_back(static_cast<int>(lo.slots.size()));
            lo.slots.push_back({true, j, src});
        }
        for (int t = 0; t < patch * chunk; ++t) {
            const int tok = j * patch * chunk + t;
            lo.text_slot[static_cast<std::size_t>(tok)] = static_cast<int>(lo.slots.size());
            lo.slots.push_back({false, j, tok});
        }
    }
    return lo;
}

std::vector<uint8_t> build_attention_mask(const ChunkLayout& lo) {
    const int n = lo.total_len;
    std::vector<uint8_t> mask(static_cast<std::size_t>(n) * n, 0);
    for (int q = 0; q < n; ++q) {
        const auto& qs = lo.slots[static_cast<std::size_t>(q)];
        for (int k = 0; k < n; ++k) {
            const auto& ks = lo.slots[static_cast<std::size_t>(k)];
            if (qs.chunk_idx != ks.chunk_idx) continue;
            bool ok;
            if (qs.is_memory)
                ok = ks.is_memory && k <= q;
            else
                ok = ks.is_memory || k <= q;
            mask[static_cast<std::size_t>(q) * n + k] = ok ? 1 : 0;
        }
    }
    return mask;
}

Tensor mask_to_bias(const std::vector<uint8_t>& mask, int n) {
    std::vector<double> v(static_cast<std::size_t>(n) * n);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask[i] ? 0.0 : -1e30;
    return Tensor::from({n, n}, std::move(v));
}

Tensor interleave_memory(const Tensor& mem_rows, const Tensor& text_embeds,
                         const ChunkLayout& lo, const Tensor& init_mem) {
    if (mem_rows.shape()[0] != lo.text_len / lo.patch)
        throw std::invalid_argument("interleave: memory row count " +
                                    std::to_string(mem_rows.shape()[0]) + " != patch count " +
                                    std::to_string(lo.text_len / lo.patch));
    if (text_embeds.shape()[0] != lo.text_len)
        throw std::invalid_argument("interleave: text embedding count mismatch");
    if (init_mem.shape() != Shape{lo.chunk, mem_rows.shape()[1]})
        throw std::invalid_argument("interleave: init block must be [C, d]");
    std::vector<Tensor> parts;
    parts.reserve(static_cast<std::size_t>(2 * lo.n_chunks));
    for (int j = 0; j < lo.n_chunks; ++j) {
        parts.push_back(j == 0 ? init_mem : slice_rows(mem_rows, (j - 1) * lo.chunk, lo.chunk));
        parts.push_back(slice_rows(text_embeds, j * lo.patch * lo.chunk, lo.patch * lo.chunk));
    }
    return concat_rows(parts);
}

DecoderBlock::DecoderBlock(const DecoderConfig& cfg, const std::string& prefix, ParamSet& params,
                           Rng& rng)
    : dim_(cfg.dim),
      heads_(cfg.heads),
      kv_heads_(cfg.kv_heads),
      head_dim_(cfg.dim / cfg.heads),
      rotary_base_(cfg.rotary_base) {
    if (cfg.heads < 1 || cfg.dim % cfg.heads != 0)
        throw std::invalid_argument("decoder: heads must divide dim");
    if (cfg.kv_heads < 1 || cfg.heads % cfg.kv_heads != 0)
        throw std::invalid_argument("decoder: kv_heads must divide heads");
    if (head_dim_ % 2 != 0) throw std::invalid_argument("decoder: head_dim must be even");
    const double s = 1.0 / std::sqrt(static_cast<double>(dim_));
    const double so = s / std::sqrt(2.0 * cfg.layers);
    const int kv_dim = kv_heads_ * head_dim_;
    const int hidden = cfg.mlp_expansion * cfg.dim;
    norm_attn = Tensor::full({dim_}, 1.0).set_requires_grad(true);
    norm_mlp = Tensor::full({dim_}, 1.0).set_requires_grad(true);
    w_q = init_matrix({dim_, dim_}, rng, s);
    w_k = init_matrix({kv_dim, dim_}, rng, s);
    w_v = init_matrix({kv_dim, dim_}, rng, s);
    w_o = init_matrix({dim_, dim_}, rng, so);
    w_gate_mlp = init_matrix({dim_, hidden}, rng, s);
    w_up = init_matrix({dim_, hidden}, rng, s);
    w_down = init_matrix({hidden, dim_}, rng,
                         so / std::sqrt(static_cast<double>(cfg.mlp_expansion)));
    params.add(prefix + ".norm_attn", norm_attn);
    params.add(prefix + ".norm_mlp", norm_mlp);
    params.add(prefix + ".w_q", w_q);
    params.add(prefix + ".w_k", w_k);
    params.add(prefix + ".w_v", w_v);
    params.add(prefix + ".w_o", w_o);
    params.add(prefix + ".w_gate_mlp", w_gate_mlp);
    params.add(prefix + ".w_up", w_up);
    params.add(prefix + ".w_down", w_down);
}

Tensor DecoderBlock::forward(const Tensor& x, const Tensor& mask_bias,
                             const std::vector<int>& positions) const {
    Tensor h = x;
    {
        Tensor n = rmsnorm(h, norm_attn);
        Tensor q = rope(matmul(n, w_q, false, true), head_dim_, positions, rotary_base_);
        Tensor k = rope(matmul(n, w_k, false, true), head_dim_, positions, rotary_base_);
        Tensor v = matmul(n, w_v, false, true);
        std::vector<int> q_sizes(static_cast<std::size_t>(heads_), head_dim_);
        std::vector<int> kv_sizes(static_cast<std::size_t>(kv_heads_), head_dim_);
        auto qh = split_last(q, q_sizes);
        auto kh = split_last(k, kv_sizes);
        auto vh = split_last(v, kv_sizes);
        const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
        const int group = heads_ / kv_heads_;
        std::vector<Tensor> outs;
        outs.reserve(static_cast<std::size_t>(heads_));
        for (int hd = 0; hd < heads_; ++hd) {
            const std::size_t kv = static_cast<std::size_t>(hd / group);
            Tensor scores =
                add(mul_const(matmul(qh[static_cast<std::size_t>(hd)], kh[kv], false, true), scale), mask_bias);
            outs.push_back(matmul(softmax_last(scores), vh[kv]));
        }
        h = add(h, matmul(concat_last(outs), w_o, false, true));
    }
    {
        Tensor n = rmsnorm(h, norm_mlp);
        Tensor gated = mul(silu(matmul(n, w_gate_mlp)), matmul(n, w_up));
        h = add(h, matmul(gated, w_down));
    }
    return h;
}

Decoder::Decoder(const DecoderConfig& cfg, const std::string& prefix, ParamSet& params, Rng& rng)
    : cfg_(cfg) {
    if (cfg.layers < 1) throw std::invalid_argument("decoder: needs at least one layer");
    for (int i = 0; i < cfg.layers; ++i)
        blocks_.push_back(std::make_unique<DecoderBlock>(
            cfg, prefix + ".block" + std::to_string(i), params, rng));
    norm_final = Tensor::full({cfg.dim}, 1.0).set_requires_grad(true);
    params.add(prefix + ".norm_final", norm_final);
}

Tensor Decoder::forward(const Tensor& input, const Tensor& mask_bias,
                        const std::vector<int>& positions, const std::vector<Tensor>* memstack,
                        const std::vector<int>* memory_slots) const {
    if (memstack && !memstack->empty()) {
        if (!memory_slots)
            throw std::invalid_argument("decoder: memstack requires memory slot indices");
        if (static_cast<int>(memstack->size()) > cfg_.layers - 1)
            throw std::invalid_argument("decoder: " + std::to_string(memstack->size()) +
                                        " memstack injections exceed the " +
                                        std::to_string(cfg_.layers - 1) + " available layers");
    }
    Tensor h = input;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        h = blocks_[i]->forward(h, mask_bias, positions);
        if (memstack && i < memstack->size())
            h = rows_add_at(h, (*memstack)[i], *memory_slots);
    }
    return h;
}

Tensor Decoder::project_out(const Tensor& hidden, const Tensor& embedding) const {
    return matmul(rmsnorm(hidden, norm_final), embedding, false, true);
}

}  // namespace mela
