#include "mela/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace mela {

void TrainConfig::validate() const {
    if (peak_lr <= 0) throw std::invalid_argument("train config: peak_lr must be positive");
    if (min_lr_fraction <= 0 || min_lr_fraction > 1)
        throw std::invalid_argument("train config: min_lr_fraction must be in (0, 1]");
    if (clip_norm <= 0) throw std::invalid_argument("train config: clip_norm must be positive");
    if (total_steps < 1 || batch_tokens < 1 || context < 1)
        throw std::invalid_argument("train config: steps/batch/context must be positive");
    if (batch_tokens % context != 0)
        throw std::invalid_argument("train config: batch_tokens must be a multiple of context");
    if (dtype != "f64" && dtype != "f32")
        throw std::invalid_argument("train config: dtype must be f64 or f32");
    if (workers < 1) throw std::invalid_argument("train config: workers must be >= 1");
}

int TrainConfig::effective_warmup() const {
    if (warmup_steps >= 0) return warmup_steps;
    return std::max(1, total_steps / 50);
}

double cosine_schedule(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps)
        throw std::invalid_argument("cosine_schedule: step out of range");
    const int warm = cfg.effective_warmup();
    if (step < warm) return cfg.peak_lr * step / warm;
    const double min_lr = cfg.min_lr_fraction * cfg.peak_lr;
    if (cfg.total_steps == warm) return step == warm ? cfg.peak_lr : min_lr;
    const double progress = static_cast<double>(step - warm) / (cfg.total_steps - warm);
    return min_lr + (cfg.peak_lr - min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

bool outer_step(ParamSet& params, const GradMap& grads, AdamState& state,
                const TrainConfig& cfg, int step) {
    double sq = 0;
    for (const auto& [name, g] : grads) {
        for (double x : g) {
            if (!std::isfinite(x)) return false;
            sq += x * x;
        }
    }
    const double norm = std::sqrt(sq);
    const double scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    const double lr = cosine_schedule(step, cfg);

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    constexpr double eps = 1e-8;

    for (auto& [name, t] : params.mutable_map()) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const auto& g = git->second;
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        auto& w = t.mutable_values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= lr * (mh / (std::sqrt(vh) + eps) + cfg.weight_decay * w[i]);
            if (!std::isfinite(w[i]))
                throw std::runtime_error("outer_step: non-finite parameter after update: " + name);
        }
    }
    return true;
}

// ------------------------------------------------------------- checkpoints

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

namespace {

constexpr char kMagic[5] = {'M', 'E', 'L', 'A', '1'};
constexpr uint8_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 0;

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& off, const char* what) {
    if (off + sizeof(T) > in.size())
        throw std::runtime_error("checkpoint: truncated " + std::string(what) + " at offset " +
                                 std::to_string(off));
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_json, int64_t step,
                     const TensorTable& tensors) {
    std::string head;
    head.append(kMagic, sizeof(kMagic));
    put<uint8_t>(head, kVersion);
    put<uint32_t>(head, static_cast<uint32_t>(config_json.size()));
    head += config_json;
    put<uint64_t>(head, fnv1a(config_json));
    put<int64_t>(head, step);
    put<uint32_t>(head, static_cast<uint32_t>(tensors.size()));

    // Table size is computable up front, so data offsets are absolute.
    std::size_t table_bytes = 0;
    for (const auto& [name, sv] : tensors)
        table_bytes += 2 + name.size() + 1 + 1 + 4 * sv.first.size() + 8 + 8;
    uint64_t offset = head.size() + table_bytes;
    std::string table, data;
    for (const auto& [name, sv] : tensors) {
        const auto& [shape, vals] = sv;
        put<uint16_t>(table, static_cast<uint16_t>(name.size()));
        table += name;
        put<uint8_t>(table, kDtypeF64);
        put<uint8_t>(table, static_cast<uint8_t>(shape.size()));
        for (int d : shape) put<int32_t>(table, d);
        put<uint64_t>(table, offset);
        const uint64_t nbytes = vals.size() * sizeof(double);
        put<uint64_t>(table, nbytes);
        data.append(reinterpret_cast<const char*>(vals.data()), nbytes);
        offset += nbytes;
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f << head << table << data;
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t off = 0;
    if (blob.size() < sizeof(kMagic) || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic at offset 0 in " + path);
    off = sizeof(kMagic);
    const uint8_t version = take<uint8_t>(blob, off, "version");
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t cfg_len = take<uint32_t>(blob, off, "config length");
    if (off + cfg_len > blob.size())
        throw std::runtime_error("checkpoint: truncated config at offset " + std::to_string(off));
    Checkpoint ck;
    ck.config_json = blob.substr(off, cfg_len);
    off += cfg_len;
    const uint64_t stored_hash = take<uint64_t>(blob, off, "config hash");
    if (stored_hash != fnv1a(ck.config_json))
        throw std::runtime_error("checkpoint: config hash mismatch in " + path);
    ck.config_hash = stored_hash;
    ck.step = take<int64_t>(blob, off, "step");
    const uint32_t n_tensors = take<uint32_t>(blob, off, "tensor count");

    uint64_t prev_end = 0;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const uint16_t name_len = take<uint16_t>(blob, off, "name length");
        if (off + name_len > blob.size())
            throw std::runtime_error("checkpoint: truncated name at offset " + std::to_string(off));
        std::string name = blob.substr(off, name_len);
        off += name_len;
        const uint8_t dtype = take<uint8_t>(blob, off, "dtype tag");
        if (dtype != kDtypeF64)
            throw std::runtime_error("checkpoint: unsupported dtype tag for " + name);
        const uint8_t ndim = take<uint8_t>(blob, off, "rank");
        Shape shape(ndim);
        int64_t count = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            shape[d] = take<int32_t>(blob, off, "dim");
            count *= shape[d];
        }
        const uint64_t data_off = take<uint64_t>(blob, off, "data offset");
        const uint64_t nbytes = take<uint64_t>(blob, off, "data size");
        if (nbytes != static_cast<uint64_t>(count) * sizeof(double))
            throw std::runtime_error("checkpoint: size mismatch for " + name);
        if (data_off < prev_end)
            throw std::runtime_error("checkpoint: overlapping tensor data for " + name);
        if (data_off + nbytes > blob.size())
            throw std::runtime_error("checkpoint: tensor data for " + name +
                                     " exceeds file length (offset " + std::to_string(data_off) +
                                     ")");
        prev_end = data_off + nbytes;
        std::vector<double> vals(static_cast<std::size_t>(count));
        std::memcpy(vals.data(), blob.data() + data_off, nbytes);
        ck.tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(vals)));
    }
    return ck;
}

TensorTable snapshot_state(const ParamSet& params, const AdamState& opt) {
    TensorTable t;
    for (const auto& [name, p] : params.map()) t["param." + name] = {p.shape(), p.values()};
    for (const auto& [name, m] : opt.m)
        t["opt.m." + name] = {Shape{static_cast<int>(m.size())}, m};
    for (const auto& [name, v] : opt.v)
        t["opt.v." + name] = {Shape{static_cast<int>(v.size())}, v};
    t["opt.step"] = {Shape{1}, {static_cast<double>(opt.step)}};
    return t;
}

void restore_state(const Checkpoint& ck, ParamSet& params, AdamState& opt) {
    for (auto& [name, p] : params.mutable_map()) {
        auto it = ck.tensors.find("param." + name);
        if (it == ck.tensors.end())
            throw std::runtime_error("checkpoint: missing parameter " + name);
        if (it->second.first != p.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        p.mutable_values() = it->second.second;
    }
    opt.m.clear();
    opt.v.clear();
    for (const auto& [name, sv] : ck.tensors) {
        if (name.rfind("opt.m.", 0) == 0) opt.m[name.substr(6)] = sv.second;
        if (name.rfind("opt.v.", 0) == 0) opt.v[name.substr(6)] = sv.second;
    }
    auto it = ck.tensors.find("opt.step");
    opt.step = it != ck.tensors.end() ? static_cast<int64_t>(it->second.second[0]) : 0;
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(LanguageModel& model, const TrainConfig& cfg, std::vector<int> corpus_tokens)
    : model_(model),
      cfg_(cfg),
      corpus_(std::move(corpus_tokens)),
      data_rng_(derive_seed(cfg.seed, "data")) {
    cfg_.validate();
    if (static_cast<int>(corpus_.size()) < cfg_.context + 1)
        throw std::invalid_argument("trainer: corpus shorter than one context window");
    set_compute_dtype(cfg_.dtype == "f32" ? Dtype::f32 : Dtype::f64);
}

StepStats Trainer::step() {
    const int n_seqs = cfg_.batch_tokens / cfg_.context;
    const uint64_t max_start = corpus_.size() - static_cast<std::size_t>(cfg_.context);

    std::vector<std::vector<int>> windows;
    windows.reserve(static_cast<std::size_t>(n_seqs));
    for (int s = 0; s < n_seqs; ++s) {
        const std::size_t start = static_cast<std::size_t>(data_rng_.below(max_start + 1));
        windows.emplace_back(corpus_.begin() + static_cast<long>(start),
                             corpus_.begin() + static_cast<long>(start) + cfg_.context);
    }

    const int n_workers = std::min(cfg_.workers, n_seqs);
    std::vector<GradMap> partial(static_cast<std::size_t>(n_workers));
    std::vector<double> losses(static_cast<std::size_t>(n_seqs), 0.0);
    std::vector<std::string> errors(static_cast<std::size_t>(n_workers));

    auto work = [&](int w) {
        try {
            for (int s = w; s < n_seqs; s += n_workers) {
                Tensor loss = model_.window_loss(windows[static_cast<std::size_t>(s)]);
                losses[static_cast<std::size_t>(s)] = loss.item();
                GradMap g = grad(loss, model_.params());
                GradMap& acc = partial[static_cast<std::size_t>(w)];
                if (acc.empty()) {
                    acc = std::move(g);
                } else {
                    for (auto& [name, vec] : g) {
                        auto& dst = acc[name];
                        for (std::size_t i = 0; i < vec.size(); ++i) dst[i] += vec[i];
                    }
                }
            }
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(w)] = e.what();
        }
    };
    if (n_workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < n_workers; ++w) threads.emplace_back(work, w);
        for (auto& t : threads) t.join();
    }
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error("trainer: " + e);

    // Deterministic merge: partial sums in worker order, then 1/n scaling.
    GradMap grads = std::move(partial[0]);
    for (int w = 1; w < n_workers; ++w)
        for (auto& [name, vec] : partial[static_cast<std::size_t>(w)]) {
            auto& dst = grads[name];
            for (std::size_t i = 0; i < vec.size(); ++i) dst[i] += vec[i];
        }
    const double inv = 1.0 / n_seqs;
    double sq = 0;
    for (auto& [name, vec] : grads)
        for (double& x : vec) {
            x *= inv;
            sq += x * x;
        }

    StepStats st;
    st.step = steps_done_;
    st.lr = cosine_schedule(steps_done_, cfg_);
    st.grad_norm = std::sqrt(sq);
    double total = 0;
    for (double l : losses) total += l;
    st.loss = total * inv;

    if (!outer_step(model_.params(), grads, opt_, cfg_, steps_done_)) {
        ++skipped_;
        st.skipped = true;
        std::fprintf(stderr, "trainer: skipped step %d (non-finite gradients, %d skipped so far)\n",
                     steps_done_, skipped_);
    }
    ++steps_done_;
    return st;
}

std::vector<StepStats> Trainer::run(int n_steps, std::ostream* log, int log_every) {
    std::vector<StepStats> out;
    out.reserve(static_cast<std::size_t>(n_steps));
    for (int i = 0; i < n_steps; ++i) {
        out.push_back(step());
        if (log && (i % log_every == 0 || i + 1 == n_steps)) {
            const StepStats& s = out.back();
            (*log) << "step " << s.step << " loss " << s.loss << " lr " << s.lr << " gnorm "
                   << s.grad_norm << (s.skipped ? " SKIPPED" : "") << "\n";
            log->flush();
        }
    }
    return out;
}

}  // namespace mela
