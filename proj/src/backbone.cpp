#include "mela/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace mela {

namespace {

Tensor init_matrix(Shape s, Rng& rng, double scale) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
    for (double& x : v) x = rng.normal() * scale;
    return Tensor::from(std::move(s), std::move(v)).set_requires_grad(true);
}

Tensor init_ones(int n) { return Tensor::full({n}, 1.0).set_requires_grad(true); }

Tensor init_zeros(Shape s) { return Tensor::zeros(std::move(s)).set_requires_grad(true); }

// Additive causal bias: position i may attend to positions <= i.
Tensor causal_bias(int n) {
    std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) v[static_cast<std::size_t>(i) * n + j] = -1e30;
    return Tensor::from({n, n}, std::move(v));
}

}  // namespace

PatchEmbed::PatchEmbed(int patch, int dim, const std::string& prefix, ParamSet& params, Rng& rng)
    : patch_(patch), dim_(dim) {
    if (patch < 1 || dim < 1) throw std::invalid_argument("patch embed: bad config");
    weight = init_matrix({patch * dim, dim}, rng, 1.0 / std::sqrt(static_cast<double>(patch * dim)));
    bias = init_zeros({dim});
    params.add(prefix + ".weight", weight);
    params.add(prefix + ".bias", bias);
}

Tensor PatchEmbed::forward(const Tensor& x) const {
    if (x.shape().size() != 2 || x.shape()[1] != dim_)
        throw std::invalid_argument("patch embed: expected [N, d]");
    const int n = x.shape()[0];
    if (n < patch_)
        throw std::invalid_argument("patch embed: sequence length " + std::to_string(n) +
                                    " shorter than patch size " + std::to_string(patch_));
    const int n_patches = n / patch_;
    Tensor trimmed = n_patches * patch_ == n ? x : slice_rows(x, 0, n_patches * patch_);
    // Stride = kernel = P, so patchification is a reshape followed by one
    // matmul against the [P*d, d] kernel.
    Tensor flat = reshape(trimmed, {n_patches, patch_ * dim_});
    return add(matmul(flat, weight), bias);
}

GatedAttention::GatedAttention(const BackboneConfig& cfg, const std::string& prefix,
                               ParamSet& params, Rng& rng)
    : dim_(cfg.dim),
      heads_(cfg.heads),
      head_dim_(cfg.dim / cfg.heads),
      use_gating_(cfg.use_gating),
      rotary_(cfg.rotary),
      rotary_base_(cfg.rotary_base) {
    if (cfg.heads < 1 || cfg.dim % cfg.heads != 0)
        throw std::invalid_argument("gated attention: heads must divide dim");
    if (head_dim_ % 2 != 0 && cfg.rotary)
        throw std::invalid_argument("gated attention: rotary needs an even head_dim");
    const double s = 1.0 / std::sqrt(static_cast<double>(dim_));
    w_q = init_matrix({dim_, dim_}, rng, s);
    w_k = init_matrix({dim_, dim_}, rng, s);
    w_v = init_matrix({dim_, dim_}, rng, s);
    w_o = init_matrix({dim_, dim_}, rng, s * 0.5);
    w_gate = init_matrix({dim_, dim_}, rng, 0.02);
    b_gate = init_zeros({dim_});
    params.add(prefix + ".w_q", w_q);
    params.add(prefix + ".w_k", w_k);
    params.add(prefix + ".w_v", w_v);
    params.add(prefix + ".w_o", w_o);
    params.add(prefix + ".w_gate", w_gate);
    params.add(prefix + ".b_gate", b_gate);
}

Tensor GatedAttention::forward(const Tensor& x) const {
    const int t = x.shape()[0];
    Tensor q = matmul(x, w_q, false, true);
    Tensor k = matmul(x, w_k, false, true);
    Tensor v = matmul(x, w_v, false, true);
    if (rotary_) {
        std::vector<int> pos(static_cast<std::size_t>(t));
        for (int i = 0; i < t; ++i) pos[static_cast<std::size_t>(i)] = i;
        q = rope(q, head_dim_, pos, rotary_base_);
        k = rope(k, head_dim_, pos, rotary_base_);
    }
    Tensor bias = causal_bias(t);
    std::vector<int> sizes(static_cast<std::size_t>(heads_), head_dim_);
    auto qh = split_last(q, sizes);
    auto kh = split_last(k, sizes);
    auto vh = split_last(v, sizes);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(heads_));
    for (int h = 0; h < heads_; ++h) {
        Tensor scores = add(mul_const(matmul(qh[static_cast<std::size_t>(h)], kh[static_cast<std::size_t>(h)], false, true), scale), bias);
        outs.push_back(matmul(softmax_last(scores), vh[static_cast<std::size_t>(h)]));
    }
    Tensor merged = concat_last(outs);
    if (use_gating_) {
        Tensor gate = sigmoid(add(matmul(x, w_gate, false, true), b_gate));
        merged = mul(merged, gate);
    }
    return matmul(merged, w_o, false, true);
}

MemoryBlock::MemoryBlock(const BackboneConfig& cfg, const std::string& prefix, ParamSet& params,
                         Rng& rng)
    : use_attention_(cfg.use_attention), use_memory_(cfg.use_memory) {
    norm_attn = init_ones(cfg.dim);
    norm_mem = init_ones(cfg.dim);
    if (use_attention_) {
        params.add(prefix + ".norm_attn", norm_attn);
        attn = std::make_unique<GatedAttention>(cfg, prefix + ".attn", params, rng);
    }
    if (use_memory_) {
        params.add(prefix + ".norm_mem", norm_mem);
        MemoryLayerConfig mc = cfg.mem;
        mc.dim = cfg.dim;
        mem = std::make_unique<MemoryLayer>(mc, prefix + ".mem", params, rng);
    }
}

Tensor MemoryBlock::forward(const Tensor& x, MemoryState* carried) const {
    Tensor h = x;
    if (use_attention_) h = add(h, attn->forward(rmsnorm(h, norm_attn)));
    if (use_memory_) h = add(h, mem->forward(rmsnorm(h, norm_mem), carried));
    return h;
}

Backbone::Backbone(const BackboneConfig& cfg, const std::string& prefix, ParamSet& params,
                   Rng& rng)
    : cfg_(cfg) {
    if (cfg.num_blocks < 1) throw std::invalid_argument("backbone: needs at least one block");
    const int d = cfg.dim;
    const int in = cfg.takes_input_injection ? 3 * d : 2 * d;
    if (cfg.input_fusion == InputFusion::mlp) {
        fuse_w1 = init_matrix({in, 2 * d}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        fuse_b1 = init_zeros({2 * d});
        fuse_w2 = init_matrix({2 * d, d}, rng, 1.0 / std::sqrt(2.0 * d));
        fuse_b2 = init_zeros({d});
        params.add(prefix + ".fuse_w1", fuse_w1);
        params.add(prefix + ".fuse_b1", fuse_b1);
        params.add(prefix + ".fuse_w2", fuse_w2);
        params.add(prefix + ".fuse_b2", fuse_b2);
    }
    for (int b = 0; b < cfg.num_blocks; ++b)
        blocks_.push_back(std::make_unique<MemoryBlock>(cfg, prefix + ".block" + std::to_string(b),
                                                        params, rng));
}

Tensor Backbone::fuse_inputs(const Tensor& l, const Tensor& h, const Tensor* x_inj) const {
    if (cfg_.input_fusion == InputFusion::add) {
        Tensor s = add(l, h);
        return x_inj ? add(s, *x_inj) : s;
    }
    std::vector<Tensor> parts{l, h};
    if (x_inj) parts.push_back(*x_inj);
    Tensor hidden = silu(add(matmul(concat_last(parts), fuse_w1), fuse_b1));
    return add(matmul(hidden, fuse_w2), fuse_b2);
}

Tensor Backbone::module_forward(const Tensor& l, const Tensor& h, const Tensor* x_inj,
                                std::vector<MemoryState>* carried) const {
    if (cfg_.takes_input_injection != (x_inj != nullptr))
        throw std::invalid_argument(cfg_.takes_input_injection
                                        ? "backbone: missing input injection"
                                        : "backbone: unexpected input injection");
    if (l.shape() != h.shape()) throw std::invalid_argument("backbone: l/h shape mismatch");
    if (carried && carried->empty()) carried->resize(blocks_.size());
    ++forward_calls;
    Tensor x = fuse_inputs(l, h, x_inj);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        ++block_calls;
        x = blocks_[i]->forward(x, carried ? &(*carried)[i] : nullptr);
    }
    return x;
}

}  // namespace mela
