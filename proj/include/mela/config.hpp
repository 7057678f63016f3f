#pragma once

#include <string>

#include "mela/model.hpp"
#include "mela/trainer.hpp"

namespace mela {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string corpus_path;
    double eval_fraction = 0.1;  // held-out tail of the corpus
};

// Strict JSON parsing: unknown keys and unsupported enum values are errors.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Canonical serialization (sorted keys, defaults materialized); this string
// is embedded in checkpoints and hashed.
std::string canonical_json(const RunConfig& cfg);

// Rebuild a config from the canonical form stored in a checkpoint.
RunConfig run_config_from_canonical(const std::string& json_text);

struct EvalSpec {
    std::vector<int> context_lengths;
    int64_t budget_tokens = 0;  // evaluated token budget per context length
    std::string corpus_path;

    void validate() const;
};

EvalSpec parse_eval_spec(const std::string& json_text);
EvalSpec load_eval_spec(const std::string& path);

}  // namespace mela
