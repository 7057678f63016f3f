#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mela/model.hpp"
#include "mela/tensor.hpp"

namespace mela {

struct TrainConfig {
    double peak_lr = 1e-3;
    double min_lr_fraction = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    int warmup_steps = -1;  // < 0: 2% of total_steps
    double clip_norm = 1.0;
    int total_steps = 1000;
    int batch_tokens = 8192;
    int context = 256;
    uint64_t seed = 0;
    std::string dtype = "f64";  // f64 | f32
    int workers = 2;

    void validate() const;
    int effective_warmup() const;
};

// Linear warmup to peak_lr, then cosine decay to min_lr_fraction * peak_lr
// at total_steps.
double cosine_schedule(int step, const TrainConfig& cfg);

struct AdamState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    int64_t step = 0;
};

// Global-norm clip, decoupled weight decay, bias-corrected moments.
// Non-finite gradients skip the step (returns false); non-finite parameters
// after the update abort with the parameter name.
bool outer_step(ParamSet& params, const GradMap& grads, AdamState& state,
                const TrainConfig& cfg, int step);

// ---- checkpoint file format (little-endian, versioned) ----

uint64_t fnv1a(const std::string& s);

using TensorTable = std::map<std::string, std::pair<Shape, std::vector<double>>>;

struct Checkpoint {
    std::string config_json;
    uint64_t config_hash = 0;
    int64_t step = 0;
    TensorTable tensors;
};

void save_checkpoint(const std::string& path, const std::string& config_json, int64_t step,
                     const TensorTable& tensors);
Checkpoint load_checkpoint(const std::string& path);

// Convenience bundle: model params + optimizer state.
TensorTable snapshot_state(const ParamSet& params, const AdamState& opt);
void restore_state(const Checkpoint& ck, ParamSet& params, AdamState& opt);

// ---- training loop ----

struct StepStats {
    int step = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
    bool skipped = false;
};

class Trainer {
  public:
    Trainer(LanguageModel& model, const TrainConfig& cfg, std::vector<int> corpus_tokens);

    StepStats step();
    std::vector<StepStats> run(int n_steps, std::ostream* log = nullptr, int log_every = 50);

    const AdamState& opt_state() const { return opt_; }
    AdamState& opt_state() { return opt_; }
    int steps_done() const { return steps_done_; }
    void set_steps_done(int s) { steps_done_ = s; }
    int skipped_steps() const { return skipped_; }

  private:
    LanguageModel& model_;
    TrainConfig cfg_;
    std::vector<int> corpus_;
    AdamState opt_;
    Rng data_rng_;
    int steps_done_ = 0;
    int skipped_ = 0;
};

}  // namespace mela
