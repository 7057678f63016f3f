#include "mela/config.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>

namespace mela {

namespace {

using nlohmann::json;

[[noreturn]] void cfg_fail(const std::string& msg) {
    throw std::invalid_argument("config: " + msg);
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) cfg_fail("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

FusionImpl parse_fusion(const std::string& s) {
    if (s == "mlp") return FusionImpl::mlp;
    if (s == "weighted_sum") return FusionImpl::weighted_sum;
    if (s == "h_only") return FusionImpl::h_only;
    cfg_fail("fusion must be one of mlp|weighted_sum|h_only, got '" + s + "'");
}

std::string fusion_name(FusionImpl f) {
    switch (f) {
        case FusionImpl::mlp: return "mlp";
        case FusionImpl::weighted_sum: return "weighted_sum";
        case FusionImpl::h_only: return "h_only";
    }
    return "mlp";
}

MemObjective parse_objective(const std::string& s) {
    if (s == "associative") return MemObjective::associative;
    if (s == "reconstruction") return MemObjective::reconstruction;
    if (s == "lp" || s == "huber" || s == "elastic_net")
        cfg_fail("memory objective '" + s +
                 "' is not supported; only associative and reconstruction are implemented");
    cfg_fail("objective must be associative|reconstruction, got '" + s + "'");
}

UpdateMode parse_mode(const std::string& s) {
    if (s == "plain") return UpdateMode::plain;
    if (s == "momentum") return UpdateMode::momentum;
    if (s == "forget_momentum") return UpdateMode::forget_momentum;
    if (s == "ns") return UpdateMode::forget_momentum_ns;
    cfg_fail("update mode must be plain|momentum|forget_momentum|ns, got '" + s + "'");
}

std::string mode_name(UpdateMode m) {
    switch (m) {
        case UpdateMode::plain: return "plain";
        case UpdateMode::momentum: return "momentum";
        case UpdateMode::forget_momentum: return "forget_momentum";
        case UpdateMode::forget_momentum_ns: return "ns";
    }
    return "ns";
}

ModelConfig parse_model(const json& j) {
    ModelConfig m;
    check_keys(j, {"kind", "vocab", "dim", "dec_dim", "patch", "chunk", "high_cycles",
                   "low_cycles", "h_blocks", "l_blocks", "dec_layers", "heads", "kv_heads",
                   "mlp_expansion", "mem_depth", "mem_expansion", "rotary_base", "use_ns",
                   "use_memstack", "use_gating", "use_attention", "use_memory", "fusion",
                   "input_fusion", "objective", "mem_mode", "ns_coeffs", "backbone_rotary",
                   "final_cycle", "per_cycle_fusion", "carry_inner_state", "mem_positions"},
               "model");
    get_if(j, "kind", m.kind);
    get_if(j, "vocab", m.vocab);
    get_if(j, "dim", m.dim);
    m.dec_dim = m.dim;
    get_if(j, "dec_dim", m.dec_dim);
    get_if(j, "patch", m.patch);
    get_if(j, "chunk", m.chunk);
    get_if(j, "high_cycles", m.high_cycles);
    get_if(j, "low_cycles", m.low_cycles);
    get_if(j, "h_blocks", m.h_blocks);
    get_if(j, "l_blocks", m.l_blocks);
    get_if(j, "dec_layers", m.dec_layers);
    get_if(j, "heads", m.heads);
    get_if(j, "kv_heads", m.kv_heads);
    get_if(j, "mlp_expansion", m.mlp_expansion);
    get_if(j, "mem_depth", m.mem_depth);
    get_if(j, "mem_expansion", m.mem_expansion);
    get_if(j, "rotary_base", m.rotary_base);
    get_if(j, "use_ns", m.use_ns);
    get_if(j, "use_memstack", m.use_memstack);
    get_if(j, "use_gating", m.use_gating);
    get_if(j, "use_attention", m.use_attention);
    get_if(j, "use_memory", m.use_memory);
    if (j.contains("fusion")) m.fusion = parse_fusion(j.at("fusion").get<std::string>());
    if (j.contains("input_fusion")) {
        const std::string s = j.at("input_fusion").get<std::string>();
        if (s == "mlp")
            m.input_fusion = InputFusion::mlp;
        else if (s == "add")
            m.input_fusion = InputFusion::add;
        else
            cfg_fail("input_fusion must be mlp|add, got '" + s + "'");
    }
    if (j.contains("objective"))
        m.mem_objective = parse_objective(j.at("objective").get<std::string>());
    if (j.contains("mem_mode")) m.mem_mode = parse_mode(j.at("mem_mode").get<std::string>());
    if (j.contains("ns_coeffs")) {
        const std::string s = j.at("ns_coeffs").get<std::string>();
        if (s == "quintic")
            m.ns_cubic_coeffs = false;
        else if (s == "cubic")
            m.ns_cubic_coeffs = true;
        else
            cfg_fail("ns_coeffs must be quintic|cubic, got '" + s + "'");
    }
    get_if(j, "backbone_rotary", m.backbone_rotary);
    if (j.contains("final_cycle")) {
        const std::string s = j.at("final_cycle").get<std::string>();
        if (s == "full")
            m.final_cycle_full = true;
        else if (s == "single")
            m.final_cycle_full = false;
        else
            cfg_fail("final_cycle must be full|single, got '" + s + "'");
    }
    get_if(j, "per_cycle_fusion", m.per_cycle_fusion);
    get_if(j, "carry_inner_state", m.carry_inner_state);
    if (j.contains("mem_positions")) {
        const std::string s = j.at("mem_positions").get<std::string>();
        if (s == "sequential")
            m.mem_positions_sequential = true;
        else if (s == "chunk_start")
            m.mem_positions_sequential = false;
        else
            cfg_fail("mem_positions must be sequential|chunk_start, got '" + s + "'");
    }
    return m;
}

TrainConfig parse_train(const json& j) {
    TrainConfig t;
    check_keys(j, {"peak_lr", "min_lr_fraction", "beta1", "beta2", "weight_decay",
                   "warmup_steps", "clip_norm", "total_steps", "batch_tokens", "context",
                   "seed", "dtype", "workers"},
               "train");
    get_if(j, "peak_lr", t.peak_lr);
    get_if(j, "min_lr_fraction", t.min_lr_fraction);
    get_if(j, "beta1", t.beta1);
    get_if(j, "beta2", t.beta2);
    get_if(j, "weight_decay", t.weight_decay);
    get_if(j, "warmup_steps", t.warmup_steps);
    get_if(j, "clip_norm", t.clip_norm);
    get_if(j, "total_steps", t.total_steps);
    get_if(j, "batch_tokens", t.batch_tokens);
    get_if(j, "context", t.context);
    get_if(j, "seed", t.seed);
    get_if(j, "dtype", t.dtype);
    get_if(j, "workers", t.workers);
    return t;
}

RunConfig parse_impl(const json& j) {
    check_keys(j, {"model", "train", "data"}, "top level");
    RunConfig rc;
    if (j.contains("model")) rc.model = parse_model(j.at("model"));
    if (j.contains("train")) rc.train = parse_train(j.at("train"));
    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, {"corpus", "eval_fraction"}, "data");
        get_if(d, "corpus", rc.corpus_path);
        get_if(d, "eval_fraction", rc.eval_fraction);
        if (rc.eval_fraction < 0 || rc.eval_fraction >= 1)
            cfg_fail("eval_fraction must be in [0, 1)");
    }
    if (const char* env = std::getenv("MELA_SEED")) {
        try {
            rc.train.seed = std::stoull(env);
        } catch (...) {
            cfg_fail("MELA_SEED must be an integer, got '" + std::string(env) + "'");
        }
    }
    rc.model.validate();
    rc.train.validate();
    return rc;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        cfg_fail(std::string("invalid JSON: ") + e.what());
    }
    return parse_impl(j);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) cfg_fail("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

std::string canonical_json(const RunConfig& rc) {
    json m{
        {"kind", rc.model.kind},
        {"vocab", rc.model.vocab},
        {"dim", rc.model.dim},
        {"dec_dim", rc.model.dec_dim},
        {"patch", rc.model.patch},
        {"chunk", rc.model.chunk},
        {"high_cycles", rc.model.high_cycles},
        {"low_cycles", rc.model.low_cycles},
        {"h_blocks", rc.model.h_blocks},
        {"l_blocks", rc.model.l_blocks},
        {"dec_layers", rc.model.dec_layers},
        {"heads", rc.model.heads},
        {"kv_heads", rc.model.kv_heads},
        {"mlp_expansion", rc.model.mlp_expansion},
        {"mem_depth", rc.model.mem_depth},
        {"mem_expansion", rc.model.mem_expansion},
        {"rotary_base", rc.model.rotary_base},
        {"use_ns", rc.model.use_ns},
        {"use_memstack", rc.model.use_memstack},
        {"use_gating", rc.model.use_gating},
        {"use_attention", rc.model.use_attention},
        {"use_memory", rc.model.use_memory},
        {"fusion", fusion_name(rc.model.fusion)},
        {"input_fusion", rc.model.input_fusion == InputFusion::mlp ? "mlp" : "add"},
        {"objective",
         rc.model.mem_objective == MemObjective::associative ? "associative" : "reconstruction"},
        {"mem_mode", mode_name(rc.model.mem_mode)},
        {"ns_coeffs", rc.model.ns_cubic_coeffs ? "cubic" : "quintic"},
        {"backbone_rotary", rc.model.backbone_rotary},
        {"final_cycle", rc.model.final_cycle_full ? "full" : "single"},
        {"per_cycle_fusion", rc.model.per_cycle_fusion},
        {"carry_inner_state", rc.model.carry_inner_state},
        {"mem_positions", rc.model.mem_positions_sequential ? "sequential" : "chunk_start"},
    };
    json t{
        {"peak_lr", rc.train.peak_lr},
        {"min_lr_fraction", rc.train.min_lr_fraction},
        {"beta1", rc.train.beta1},
        {"beta2", rc.train.beta2},
        {"weight_decay", rc.train.weight_decay},
        {"warmup_steps", rc.train.warmup_steps},
        {"clip_norm", rc.train.clip_norm},
        {"total_steps", rc.train.total_steps},
        {"batch_tokens", rc.train.batch_tokens},
        {"context", rc.train.context},
        {"seed", rc.train.seed},
        {"dtype", rc.train.dtype},
        {"workers", rc.train.workers},
    };
    json j{{"model", m}, {"train", t},
           {"data", json{{"corpus", rc.corpus_path}, {"eval_fraction", rc.eval_fraction}}}};
    return j.dump();
}

RunConfig run_config_from_canonical(const std::string& text) {
    // The canonical form is a valid config file; MELA_SEED must not rewrite
    // a stored checkpoint config, so shield it.
    json j = json::parse(text);
    RunConfig rc;
    rc.model = parse_model(j.at("model"));
    rc.train = parse_train(j.at("train"));
    rc.corpus_path = j.at("data").at("corpus").get<std::string>();
    rc.eval_fraction = j.at("data").at("eval_fraction").get<double>();
    rc.model.validate();
    rc.train.validate();
    return rc;
}

void EvalSpec::validate() const {
    if (context_lengths.empty()) throw std::invalid_argument("eval spec: no context lengths");
    int mx = 0;
    for (int c : context_lengths) {
        if (c < 2) throw std::invalid_argument("eval spec: context lengths must be >= 2");
        mx = std::max(mx, c);
    }
    if (budget_tokens < mx)
        throw std::invalid_argument("eval spec: budget must be at least the longest context");
}

EvalSpec parse_eval_spec(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        cfg_fail(std::string("invalid eval spec JSON: ") + e.what());
    }
    check_keys(j, {"context_lengths", "budget_tokens", "corpus"}, "eval spec");
    EvalSpec s;
    if (j.contains("context_lengths"))
        s.context_lengths = j.at("context_lengths").get<std::vector<int>>();
    get_if(j, "budget_tokens", s.budget_tokens);
    get_if(j, "corpus", s.corpus_path);
    s.validate();
    return s;
}

EvalSpec load_eval_spec(const std::string& path) {
    std::ifstream f(path);
    if (!f) cfg_fail("cannot open eval spec " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_eval_spec(text);
}

}  // namespace mela
