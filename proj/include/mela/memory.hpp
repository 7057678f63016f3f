#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mela/rng.hpp"
#include "mela/tensor.hpp"

namespace mela {

// Shape of the fast-weight network that stores the memory.
struct MemoryNetShape {
    int depth = 2;  // 1 or 2
    int in_dim = 0;
    int hidden_dim = 0;
    int out_dim = 0;
};

// Per-sequence inner-loop state: fast weights M and momentum S (same shapes).
struct MemoryState {
    std::vector<Tensor> M;
    std::vector<Tensor> S;
};

enum class UpdateMode { plain, momentum, forget_momentum, forget_momentum_ns };
enum class MemObjective { associative, reconstruction };

struct MemoryLayerConfig {
    int dim = 0;
    int chunk = 1;
    int net_depth = 2;
    int net_expansion = 2;
    UpdateMode mode = UpdateMode::forget_momentum_ns;
    MemObjective objective = MemObjective::associative;
    int ns_steps = 5;
    NsCoeffs ns_coeffs = ns_quintic();
};

// Per-chunk update gates; scalars in their constructive ranges
// (alpha, eta in (0,1) via sigmoid; theta > 0 via softplus).
struct MemoryGates {
    Tensor alpha;
    Tensor eta;
    Tensor theta;
};

// Test-time-training memory layer: key/value/query projections, chunked
// inner-loop updates with momentum, forgetting and Newton-Schulz
// orthogonalization, and retrieval through the fast-weight net.
class MemoryLayer {
  public:
    MemoryLayer(const MemoryLayerConfig& cfg, const std::string& prefix, ParamSet& params,
                Rng& rng);

    // Chunked inner loop over all patches: retrieval uses the pre-update
    // state of each chunk. x is [N_p, d] with N_p divisible by chunk size.
    // When `carried` is given, a non-empty state is resumed instead of the
    // M0 template and the final state is written back.
    Tensor forward(const Tensor& x_patches, MemoryState* carried = nullptr) const;

    // k/v/q = x W^T; linear, bias-free.
    struct KVQ {
        Tensor k, v, q;
    };
    KVQ project_kvq(const Tensor& x_chunk) const;

    MemoryGates gates_for(const Tensor& x_chunk) const;
    MemoryState initial_state() const;
    const MemoryNetShape& net_shape() const { return shape_; }
    const MemoryLayerConfig& config() const { return cfg_; }

    // Forward pass of the fast-weight net on q; no state mutation.
    static Tensor retrieve(const MemoryNetShape& shape, const std::vector<Tensor>& M,
                           const Tensor& q);

    // Mean over the chunk's items of the squared error, with the exact
    // gradient w.r.t. M written out as tensor expressions so the outer
    // autodiff can differentiate through the inner loop.
    static std::pair<Tensor, std::vector<Tensor>> objective_grad(const MemoryNetShape& shape,
                                                                 const std::vector<Tensor>& M,
                                                                 const Tensor& input,
                                                                 const Tensor& target);

    // One chunk update under the selected rule.
    static MemoryState update(const MemoryState& state, const std::vector<Tensor>& grads,
                              const MemoryGates& gates, UpdateMode mode, int ns_steps,
                              NsCoeffs coeffs);

    Tensor w_key, w_value, w_query;     // [d, d]
    Tensor gate_alpha_w, gate_alpha_b;  // [d,1], [1]
    Tensor gate_eta_w, gate_eta_b;
    Tensor gate_theta_w, gate_theta_b;
    std::vector<Tensor> initial_m;  // learned M0 template

  private:
    MemoryLayerConfig cfg_;
    MemoryNetShape shape_;
};

}  // namespace mela
