#include "mela/memory.hpp"

#include <cmath>
#include <stdexcept>

namespace mela {

namespace {

Tensor init_matrix(Shape s, Rng& rng, double scale) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
    for (double& x : v) x = rng.normal() * scale;
    return Tensor::from(std::move(s), std::move(v)).set_requires_grad(true);
}

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace

MemoryLayer::MemoryLayer(const MemoryLayerConfig& cfg, const std::string& prefix,
                         ParamSet& params, Rng& rng)
    : cfg_(cfg) {
    if (cfg.dim <= 0 || cfg.chunk <= 0) throw std::invalid_argument("memory layer: bad dims");
    if (cfg.net_depth != 1 && cfg.net_depth != 2)
        throw std::invalid_argument("memory layer: net depth must be 1 or 2");
    shape_.depth = cfg.net_depth;
    shape_.in_dim = cfg.dim;
    shape_.out_dim = cfg.dim;
    shape_.hidden_dim = cfg.net_depth == 2 ? cfg.net_expansion * cfg.dim : 0;

    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    w_key = init_matrix({cfg.dim, cfg.dim}, rng, proj_scale);
    w_value = init_matrix({cfg.dim, cfg.dim}, rng, proj_scale);
    w_query = init_matrix({cfg.dim, cfg.dim}, rng, proj_scale);
    params.add(prefix + ".w_key", w_key);
    params.add(prefix + ".w_value", w_value);
    params.add(prefix + ".w_query", w_query);

    gate_alpha_w = init_matrix({cfg.dim, 1}, rng, 0.02);
    gate_eta_w = init_matrix({cfg.dim, 1}, rng, 0.02);
    gate_theta_w = init_matrix({cfg.dim, 1}, rng, 0.02);
    // Bias init: retain memory (alpha ~ 0.98), strong momentum (eta ~ 0.88),
    // small inner step (theta ~ 0.13).
    gate_alpha_b = Tensor::full({1}, 4.0).set_requires_grad(true);
    gate_eta_b = Tensor::full({1}, 2.0).set_requires_grad(true);
    gate_theta_b = Tensor::full({1}, -2.0).set_requires_grad(true);
    params.add(prefix + ".gate_alpha_w", gate_alpha_w);
    params.add(prefix + ".gate_alpha_b", gate_alpha_b);
    params.add(prefix + ".gate_eta_w", gate_eta_w);
    params.add(prefix + ".gate_eta_b", gate_eta_b);
    params.add(prefix + ".gate_theta_w", gate_theta_w);
    params.add(prefix + ".gate_theta_b", gate_theta_b);

    if (shape_.depth == 1) {
        initial_m.push_back(init_matrix({shape_.in_dim, shape_.out_dim}, rng, proj_scale));
        params.add(prefix + ".m0.0", initial_m[0]);
    } else {
        initial_m.push_back(init_matrix({shape_.in_dim, shape_.hidden_dim}, rng, proj_scale));
        initial_m.push_back(
            init_matrix({shape_.hidden_dim, shape_.out_dim}, rng,
                        1.0 / std::sqrt(static_cast<double>(shape_.hidden_dim))));
        params.add(prefix + ".m0.0", initial_m[0]);
        params.add(prefix + ".m0.1", initial_m[1]);
    }
}

MemoryLayer::KVQ MemoryLayer::project_kvq(const Tensor& x) const {
    if (x.shape().size() != 2 || x.shape()[1] != cfg_.dim)
        throw std::invalid_argument("project_kvq: expected [*, " + std::to_string(cfg_.dim) +
                                    "], got " + shape_str(x.shape()));
    return {matmul(x, w_key, false, true), matmul(x, w_value, false, true),
            matmul(x, w_query, false, true)};
}

MemoryGates MemoryLayer::gates_for(const Tensor& x_chunk) const {
    Tensor m = reshape(mean_axis0(x_chunk), {1, cfg_.dim});
    MemoryGates g;
    g.alpha = reshape(sigmoid(add(matmul(m, gate_alpha_w), gate_alpha_b)), {1});
    g.eta = reshape(sigmoid(add(matmul(m, gate_eta_w), gate_eta_b)), {1});
    g.theta = reshape(softplus(add(matmul(m, gate_theta_w), gate_theta_b)), {1});
    return g;
}

MemoryState MemoryLayer::initial_state() const {
    MemoryState st;
    for (const Tensor& m : initial_m) {
        st.M.push_back(m);
        st.S.push_back(Tensor::zeros(m.shape()));
    }
    return st;
}

Tensor MemoryLayer::retrieve(const MemoryNetShape& shape, const std::vector<Tensor>& M,
                             const Tensor& q) {
    if (shape.depth == 1) return matmul(q, M[0]);
    return matmul(silu(matmul(q, M[0])), M[1]);
}

std::pair<Tensor, std::vector<Tensor>> MemoryLayer::objective_grad(const MemoryNetShape& shape,
                                                                   const std::vector<Tensor>& M,
                                                                   const Tensor& input,
                                                                   const Tensor& target) {
    const int items = input.shape()[0];
    const double inv = 2.0 / items;
    if (shape.depth == 1) {
        Tensor residual = sub(matmul(input, M[0]), target);
        Tensor loss = mul_const(sum_all(square(residual)), 1.0 / items);
        Tensor d_m0 = mul_const(matmul(input, residual, true, false), inv);
        return {loss, {d_m0}};
    }
    Tensor pre = matmul(input, M[0]);
    Tensor hidden = silu(pre);
    Tensor residual = sub(matmul(hidden, M[1]), target);
    Tensor loss = mul_const(sum_all(square(residual)), 1.0 / items);
    Tensor d_m1 = mul_const(matmul(hidden, residual, true, false), inv);
    // silu'(pre) = s (1 + pre (1 - s)) with s = sigmoid(pre)
    Tensor s = sigmoid(pre);
    Tensor dsilu = mul(s, add_const(mul(pre, sub(Tensor::full(s.shape(), 1.0), s)), 1.0));
    Tensor d_pre = mul(matmul(residual, M[1], false, true), dsilu);
    Tensor d_m0 = mul_const(matmul(input, d_pre, true, false), inv);
    return {loss, {d_m0, d_m1}};
}

MemoryState MemoryLayer::update(const MemoryState& state, const std::vector<Tensor>& grads,
                                const MemoryGates& gates, UpdateMode mode, int ns_steps,
                                NsCoeffs coeffs) {
    MemoryState out;
    for (std::size_t i = 0; i < state.M.size(); ++i) {
        Tensor step = mul(grads[i], gates.theta);
        if (mode == UpdateMode::plain) {
            out.M.push_back(sub(state.M[i], step));
            out.S.push_back(state.S[i]);
            continue;
        }
        Tensor s_new = sub(mul(state.S[i], gates.eta), step);
        out.S.push_back(s_new);
        switch (mode) {
            case UpdateMode::momentum:
                out.M.push_back(add(state.M[i], s_new));
                break;
            case UpdateMode::forget_momentum:
                out.M.push_back(add(mul(state.M[i], gates.alpha), s_new));
                break;
            case UpdateMode::forget_momentum_ns:
                out.M.push_back(add(mul(state.M[i], gates.alpha),
                                    newton_schulz(s_new, ns_steps, coeffs)));
                break;
            default:
                throw std::invalid_argument("memory update: unknown mode");
        }
    }
    return out;
}

Tensor MemoryLayer::forward(const Tensor& x, MemoryState* carried) const {
    if (x.shape().size() != 2 || x.shape()[1] != cfg_.dim)
        throw std::invalid_argument("memory layer: expected [N_p, d] input");
    const int n_patches = x.shape()[0];
    if (n_patches % cfg_.chunk != 0)
        throw std::invalid_argument("memory layer: patch count " + std::to_string(n_patches) +
                                    " not divisible by chunk size " + std::to_string(cfg_.chunk));
    const int n_chunks = n_patches / cfg_.chunk;

    KVQ kvq = project_kvq(x);
    const bool reconstruct = cfg_.objective == MemObjective::reconstruction;

    MemoryState state =
        (carried && !carried->M.empty()) ? *carried : initial_state();
    std::vector<Tensor> outputs;
    outputs.reserve(static_cast<std::size_t>(n_chunks));
    for (int c = 0; c < n_chunks; ++c) {
        const int row0 = c * cfg_.chunk;
        Tensor x_c = slice_rows(x, row0, cfg_.chunk);
        Tensor q_c = slice_rows(kvq.q, row0, cfg_.chunk);
        MemoryGates gates = gates_for(x_c);

        // Retrieval reads the pre-update state of this chunk.
        outputs.push_back(retrieve(shape_, state.M, q_c));

        Tensor in_c = reconstruct ? x_c : slice_rows(kvq.k, row0, cfg_.chunk);
        Tensor tg_c = reconstruct ? x_c : slice_rows(kvq.v, row0, cfg_.chunk);
        auto [loss, grads] = objective_grad(shape_, state.M, in_c, tg_c);
        (void)loss;
        for (const Tensor& g : grads)
            if (!all_finite(g.values()))
                throw std::runtime_error("memory layer: non-finite inner gradient at chunk " +
                                         std::to_string(c));
        state = update(state, grads, gates, cfg_.mode, cfg_.ns_steps, cfg_.ns_coeffs);
        for (const Tensor& m : state.M)
            if (!all_finite(m.values()))
                throw std::runtime_error("memory layer: non-finite state at chunk " +
                                         std::to_string(c));
    }
    if (carried) *carried = state;
    return concat_rows(outputs);
}

}  // namespace mela
