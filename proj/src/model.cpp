#include "mela/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mela {

void ModelConfig::validate() const {
    if (kind != "mela" && kind != "transformerpp")
        throw std::invalid_argument("config: unknown model kind '" + kind + "'");
    if (vocab < 2) throw std::invalid_argument("config: vocab must be >= 2");
    if (dim < 2 || patch < 1 || chunk < 1) throw std::invalid_argument("config: bad dimensions");
    if (dec_dim != dim)
        throw std::invalid_argument(
            "config: dec_dim must equal dim at this scale (the embedding table is shared "
            "between the memory module and the decoder)");
    if (heads < 1 || dim % heads != 0) throw std::invalid_argument("config: heads must divide dim");
    if (kv_heads < 1 || heads % kv_heads != 0)
        throw std::invalid_argument("config: kv_heads must divide heads");
    if (high_cycles < 1 || low_cycles < 1) throw std::invalid_argument("config: cycles must be >= 1");
    if (use_memstack && dec_layers < high_cycles)
        throw std::invalid_argument("config: MemStack needs dec_layers >= high_cycles, got " +
                                    std::to_string(dec_layers) + " < " +
                                    std::to_string(high_cycles));
}

namespace {

Tensor init_embedding(int vocab, int dim, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(vocab) * dim);
    for (double& x : v) x = rng.normal() * 0.02;
    return Tensor::from({vocab, dim}, std::move(v)).set_requires_grad(true);
}

HmmConfig hmm_cfg(const ModelConfig& c) {
    HmmConfig h;
    h.dim = c.dim;
    h.patch = c.patch;
    h.chunk = c.chunk;
    h.high_cycles = c.high_cycles;
    h.low_cycles = c.low_cycles;
    h.h_blocks = c.h_blocks;
    h.l_blocks = c.l_blocks;
    h.heads = c.heads;
    h.fusion = c.fusion;
    h.per_cycle_fusion = c.per_cycle_fusion;
    h.final_cycle_full = c.final_cycle_full;
    h.carry_inner_state = c.carry_inner_state;
    h.use_attention = c.use_attention;
    h.use_memory = c.use_memory;
    h.use_gating = c.use_gating;
    h.rotary = c.backbone_rotary;
    h.input_fusion = c.input_fusion;
    h.mem_depth = c.mem_depth;
    h.mem_expansion = c.mem_expansion;
    h.mem_mode = c.use_ns ? c.mem_mode : UpdateMode::forget_momentum;
    h.mem_objective = c.mem_objective;
    h.ns_coeffs = c.ns_cubic_coeffs ? ns_cubic() : ns_quintic();
    return h;
}

DecoderConfig dec_cfg(const ModelConfig& c) {
    DecoderConfig d;
    d.layers = c.dec_layers;
    d.dim = c.dec_dim;
    d.heads = c.heads;
    d.kv_heads = c.kv_heads;
    d.mlp_expansion = c.mlp_expansion;
    d.rotary_base = c.rotary_base;
    return d;
}

std::vector<int> plain_positions(int n) {
    std::vector<int> pos(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pos[static_cast<std::size_t>(i)] = i;
    return pos;
}

Tensor causal_bias_tensor(int n) {
    std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) v[static_cast<std::size_t>(i) * n + j] = -1e30;
    return Tensor::from({n, n}, std::move(v));
}

void check_tokens(const std::vector<int>& tokens, int vocab) {
    if (tokens.empty()) throw std::invalid_argument("model: empty token window");
    for (int t : tokens)
        if (t < 0 || t >= vocab) throw std::invalid_argument("model: token out of range");
}

}  // namespace

std::vector<int> interleaved_targets(const std::vector<int>& window, const ChunkLayout& lo) {
    std::vector<int> targets(static_cast<std::size_t>(lo.total_len), kIgnoreTarget);
    for (int t = 0; t + 1 < lo.text_len; ++t)
        targets[static_cast<std::size_t>(lo.text_slot[static_cast<std::size_t>(t)])] =
            window[static_cast<std::size_t>(t + 1)];
    return targets;
}

Tensor lm_loss(const Tensor& logits, const std::vector<int>& targets) {
    return cross_entropy(logits, targets);
}

MelaModel::MelaModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "init"));
    embedding = init_embedding(cfg.vocab, cfg.dim, rng);
    params_.add("embedding", embedding);
    hmm_ = std::make_unique<Hmm>(hmm_cfg(cfg), "hmm", params_, rng);
    decoder_ = std::make_unique<Decoder>(dec_cfg(cfg), "dec", params_, rng);
    mem_proj = Tensor::zeros({cfg.dim, cfg.dec_dim}).set_requires_grad(true);
    {
        std::vector<double> v(static_cast<std::size_t>(cfg.dim) * cfg.dec_dim);
        const double s = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
        for (double& x : v) x = rng.normal() * s;
        mem_proj.mutable_values() = v;
    }
    params_.add("mem_proj", mem_proj);
    {
        std::vector<double> v(static_cast<std::size_t>(cfg.chunk) * cfg.dec_dim);
        for (double& x : v) x = rng.normal() * 0.02;
        init_mem = Tensor::from({cfg.chunk, cfg.dec_dim}, std::move(v)).set_requires_grad(true);
    }
    params_.add("init_mem", init_mem);
}

std::vector<int> MelaModel::positions_for(const ChunkLayout& lo) const {
    std::vector<int> pos(static_cast<std::size_t>(lo.total_len));
    if (cfg_.mem_positions_sequential) {
        for (int i = 0; i < lo.total_len; ++i) pos[static_cast<std::size_t>(i)] = i;
    } else {
        // Memory slots share the position of their chunk's first text slot.
        for (int i = 0; i < lo.total_len; ++i) {
            const auto& s = lo.slots[static_cast<std::size_t>(i)];
            pos[static_cast<std::size_t>(i)] =
                s.is_memory ? lo.text_slot[static_cast<std::size_t>(s.chunk_idx * lo.patch * lo.chunk)]
                            : i;
        }
    }
    return pos;
}

Tensor MelaModel::decode(const std::vector<int>& tokens, const CycleTrace* trace,
                         const Tensor* frozen_rows) const {
    const int n = static_cast<int>(tokens.size());
    ChunkLayout lo = build_chunk_layout(n, cfg_.patch, cfg_.chunk);
    Tensor text_embeds = row_gather(embedding, tokens);

    Tensor interleaved;
    if (frozen_rows) {
        std::vector<Tensor> parts;
        for (int j = 0; j < lo.n_chunks; ++j) {
            parts.push_back(*frozen_rows);
            parts.push_back(slice_rows(text_embeds, j * lo.patch * lo.chunk, lo.patch * lo.chunk));
        }
        interleaved = concat_rows(parts);
    } else {
        Tensor mem_rows = matmul(trace->final_z(), mem_proj);
        interleaved = interleave_memory(mem_rows, text_embeds, lo, init_mem);
    }

    Tensor bias = mask_to_bias(build_attention_mask(lo), lo.total_len);
    std::vector<int> pos = positions_for(lo);

    std::vector<Tensor> memstack;
    if (!frozen_rows && cfg_.use_memstack && cfg_.high_cycles > 1) {
        // Intermediate representations, projected and chunk-shifted; the
        // first chunk has no predecessor so its rows stay zero.
        for (std::size_t j = 0; j + 1 < trace->z.size(); ++j) {
            Tensor proj = matmul(trace->z[j], mem_proj);
            Tensor shifted = concat_rows(
                {Tensor::zeros({lo.chunk, cfg_.dec_dim}),
                 slice_rows(proj, 0, (lo.n_chunks - 1) * lo.chunk)});
            memstack.push_back(shifted);
        }
    }
    Tensor hidden = decoder_->forward(interleaved, bias, pos,
                                      memstack.empty() ? nullptr : &memstack,
                                      memstack.empty() ? nullptr : &lo.memory_slots);
    return decoder_->project_out(hidden, embedding);
}

Tensor MelaModel::logits(const std::vector<int>& tokens) const {
    check_tokens(tokens, cfg_.vocab);
    CycleTrace trace = hmm_->forward(row_gather(embedding, tokens));
    return decode(tokens, &trace, nullptr);
}

Tensor MelaModel::logits_with_frozen_memory(const std::vector<int>& tokens,
                                            const Tensor& frozen_rows) const {
    check_tokens(tokens, cfg_.vocab);
    return decode(tokens, nullptr, &frozen_rows);
}

Tensor MelaModel::window_loss(const std::vector<int>& window) const {
    Tensor lg = logits(window);
    ChunkLayout lo = build_chunk_layout(static_cast<int>(window.size()), cfg_.patch, cfg_.chunk);
    return lm_loss(lg, interleaved_targets(window, lo));
}

TransformerPP::TransformerPP(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "init"));
    embedding = init_embedding(cfg.vocab, cfg.dim, rng);
    params_.add("embedding", embedding);
    decoder_ = std::make_unique<Decoder>(dec_cfg(cfg), "dec", params_, rng);
}

Tensor TransformerPP::logits(const std::vector<int>& tokens) const {
    check_tokens(tokens, cfg_.vocab);
    const int n = static_cast<int>(tokens.size());
    Tensor x = row_gather(embedding, tokens);
    Tensor hidden = decoder_->forward(x, causal_bias_tensor(n), plain_positions(n));
    return decoder_->project_out(hidden, embedding);
}

Tensor TransformerPP::window_loss(const std::vector<int>& window) const {
    Tensor lg = logits(window);
    std::vector<int> targets(window.size(), kIgnoreTarget);
    for (std::size_t t = 0; t + 1 < window.size(); ++t) targets[t] = window[t + 1];
    return lm_loss(lg, targets);
}

std::unique_ptr<LanguageModel> make_model(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.kind == "transformerpp") return std::make_unique<TransformerPP>(cfg, seed);
    return std::make_unique<MelaModel>(cfg, seed);
}

}  // namespace mela
