#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mela/trainer.hpp"
#include "test_util.hpp"

using namespace mela;

namespace {

ModelConfig micro_model() {
    ModelConfig c;
    c.vocab = 32;
    c.dim = 16;
    c.dec_dim = 16;
    c.patch = 2;
    c.chunk = 2;
    c.high_cycles = 2;
    c.low_cycles = 1;
    c.h_blocks = 1;
    c.l_blocks = 1;
    c.dec_layers = 2;
    c.heads = 2;
    c.kv_heads = 1;
    c.mlp_expansion = 2;
    return c;
}

std::vector<int> markov_corpus(int n, uint64_t seed, int vocab = 32) {
    Rng rng(seed);
    std::vector<int> out(static_cast<std::size_t>(n));
    int state = 0;
    for (int i = 0; i < n; ++i) {
        state = (state * 5 + 1 + static_cast<int>(rng.below(4))) % vocab;
        out[static_cast<std::size_t>(i)] = state;
    }
    return out;
}

std::string tmp_path(const char* stem) {
    return std::string("/tmp/mela_test_") + stem + "_" + std::to_string(getpid()) + ".bin";
}

}  // namespace

TEST_CASE("cosine schedule endpoints") {
    TrainConfig cfg;
    cfg.peak_lr = 2e-3;
    cfg.total_steps = 1000;
    cfg.warmup_steps = 100;
    CHECK(cosine_schedule(0, cfg) == 0.0);
    CHECK(cosine_schedule(100, cfg) == doctest::Approx(2e-3).epsilon(1e-12));
    CHECK(cosine_schedule(1000, cfg) == doctest::Approx(2e-4).epsilon(1e-9));
    // Monotone decay after warmup.
    CHECK(cosine_schedule(400, cfg) > cosine_schedule(700, cfg));
    // Default warmup is 2% of the budget.
    TrainConfig d;
    d.total_steps = 1000;
    CHECK(d.effective_warmup() == 20);
}

TEST_CASE("outer_step: zero grads and zero decay leave params unchanged") {
    ParamSet ps;
    ps.add("w", Tensor::from({3}, {1.0, -2.0, 0.5}).set_requires_grad(true));
    GradMap g{{"w", {0.0, 0.0, 0.0}}};
    AdamState st;
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.warmup_steps = 0;
    CHECK(outer_step(ps, g, st, cfg, 10));
    CHECK(ps.at("w").values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("outer_step: global-norm clipping scales the update direction") {
    // Single weight with grad 10 and clip 1.0: effective grad 1.0.
    ParamSet ps;
    ps.add("w", Tensor::from({1}, {0.0}).set_requires_grad(true));
    AdamState st;
    TrainConfig cfg;
    cfg.peak_lr = 0.1;
    cfg.warmup_steps = 0;
    cfg.total_steps = 1;
    cfg.weight_decay = 0.0;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    GradMap g{{"w", {10.0}}};
    CHECK(outer_step(ps, g, st, cfg, 0));
    // Bias-corrected m^ = v^ = 1 (from the clipped grad 1.0) -> update -0.1.
    CHECK(ps.at("w").values()[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("outer_step: single Adam step with unit gradient moves by -lr") {
    ParamSet ps;
    ps.add("w", Tensor::from({1}, {0.0}).set_requires_grad(true));
    AdamState st;
    TrainConfig cfg;
    cfg.peak_lr = 0.1;
    cfg.warmup_steps = 0;
    cfg.total_steps = 1;
    cfg.weight_decay = 0.0;
    GradMap g{{"w", {1.0}}};
    CHECK(outer_step(ps, g, st, cfg, 0));
    CHECK(ps.at("w").values()[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("outer_step: non-finite gradients skip the step") {
    ParamSet ps;
    ps.add("w", Tensor::from({1}, {1.0}).set_requires_grad(true));
    AdamState st;
    TrainConfig cfg;
    GradMap g{{"w", {std::nan("")}}};
    CHECK_FALSE(outer_step(ps, g, st, cfg, 0));
    CHECK(ps.at("w").values()[0] == 1.0);
}

TEST_CASE("optimizer state shapes mirror parameter shapes") {
    ParamSet ps;
    ps.add("a", Tensor::zeros({2, 3}).set_requires_grad(true));
    ps.add("b", Tensor::zeros({5}).set_requires_grad(true));
    AdamState st;
    TrainConfig cfg;
    cfg.warmup_steps = 0;
    GradMap g{{"a", std::vector<double>(6, 0.1)}, {"b", std::vector<double>(5, 0.1)}};
    outer_step(ps, g, st, cfg, 1);
    CHECK(st.m["a"].size() == 6);
    CHECK(st.v["b"].size() == 5);
}

TEST_CASE("checkpoint: save-load-save is byte identical") {
    Rng rng(3);
    TensorTable t;
    t["param.w"] = {Shape{2, 2}, oracle::random_vec(4, rng)};
    t["param.b"] = {Shape{3}, oracle::random_vec(3, rng)};
    t["opt.step"] = {Shape{1}, {42.0}};
    const std::string p1 = tmp_path("ck1"), p2 = tmp_path("ck2");
    save_checkpoint(p1, "{\"k\":1}", 42, t);
    Checkpoint ck = load_checkpoint(p1);
    CHECK(ck.step == 42);
    CHECK(ck.config_json == "{\"k\":1}");
    save_checkpoint(p2, ck.config_json, ck.step, ck.tensors);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("checkpoint: corrupted config bytes are rejected via the hash") {
    Rng rng(4);
    TensorTable t;
    t["param.w"] = {Shape{2}, oracle::random_vec(2, rng)};
    const std::string p = tmp_path("ck3");
    save_checkpoint(p, "{\"model\":\"mela\"}", 7, t);
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(12);  // inside the embedded config json
    f.put('X');
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("hash"), std::runtime_error);
    std::remove(p.c_str());
}

TEST_CASE("checkpoint: truncated files fail with an offset in the message") {
    Rng rng(5);
    TensorTable t;
    t["param.w"] = {Shape{4, 4}, oracle::random_vec(16, rng)};
    t["param.q"] = {Shape{8}, oracle::random_vec(8, rng)};
    const std::string p = tmp_path("ck4");
    save_checkpoint(p, "{}", 1, t);
    std::ifstream f(p, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    f.close();
    // Fuzz a spread of truncation points.
    for (std::size_t cut : {std::size_t(3), std::size_t(8), std::size_t(20), std::size_t(40),
                            blob.size() / 2, blob.size() - 5}) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out << blob.substr(0, cut);
        out.close();
        CHECK_THROWS_AS(load_checkpoint(p), std::runtime_error);
    }
    std::remove(p.c_str());
}

TEST_CASE("model state round-trips through a checkpoint") {
    ModelConfig mc = micro_model();
    MelaModel model(mc, 11);
    AdamState opt;
    TrainConfig tc;
    tc.warmup_steps = 0;
    tc.context = 8;
    tc.batch_tokens = 16;
    tc.total_steps = 4;
    Trainer tr(model, tc, markov_corpus(512, 1));
    tr.run(2);

    const std::string p = tmp_path("ck5");
    save_checkpoint(p, "{}", tr.steps_done(), snapshot_state(model.params(), tr.opt_state()));

    MelaModel model2(mc, 999);  // different init
    AdamState opt2;
    Checkpoint ck = load_checkpoint(p);
    restore_state(ck, model2.params(), opt2);
    for (const auto& [name, t] : model.params().map())
        CHECK(t.values() == model2.params().at(name).values());
    CHECK(opt2.step == tr.opt_state().step);
    std::remove(p.c_str());
}

TEST_CASE("training is deterministic given the seed") {
    ModelConfig mc = micro_model();
    TrainConfig tc;
    tc.context = 8;
    tc.batch_tokens = 32;
    tc.total_steps = 10;
    tc.peak_lr = 3e-3;
    tc.seed = 7;
    auto corpus = markov_corpus(2048, 2);

    MelaModel m1(mc, 7);
    Trainer t1(m1, tc, corpus);
    auto s1 = t1.run(10);

    MelaModel m2(mc, 7);
    Trainer t2(m2, tc, corpus);
    auto s2 = t2.run(10);

    for (int i = 0; i < 10; ++i) {
        CHECK(s1[static_cast<std::size_t>(i)].loss == s2[static_cast<std::size_t>(i)].loss);  // bit-identical
        CHECK(s1[static_cast<std::size_t>(i)].grad_norm == s2[static_cast<std::size_t>(i)].grad_norm);
    }
    for (const auto& [name, t] : m1.params().map())
        CHECK(t.values() == m2.params().at(name).values());
}

TEST_CASE("memorization: loss collapses on a tiny overfit set") {
    ModelConfig mc = micro_model();
    MelaModel model(mc, 13);
    TrainConfig tc;
    tc.context = 16;
    tc.batch_tokens = 64;
    tc.total_steps = 300;
    tc.peak_lr = 5e-3;
    tc.seed = 3;
    // A 64-token corpus: four windows that repeat forever.
    auto corpus = markov_corpus(64, 9);
    Trainer tr(model, tc, corpus);
    auto stats = tr.run(300);
    const double bar = 0.1 * std::log(32.0);
    CHECK(stats.back().loss < bar);
}

TEST_CASE("f32 training mode runs and stays finite") {
    ModelConfig mc = micro_model();
    MelaModel model(mc, 17);
    TrainConfig tc;
    tc.context = 8;
    tc.batch_tokens = 16;
    tc.total_steps = 5;
    tc.dtype = "f32";
    Trainer tr(model, tc, markov_corpus(512, 4));
    auto stats = tr.run(5);
    for (const auto& s : stats) CHECK(std::isfinite(s.loss));
    set_compute_dtype(Dtype::f64);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    tc.batch_tokens = 100;
    tc.context = 64;
    CHECK_THROWS(tc.validate());  // not a multiple
    TrainConfig tc2;
    tc2.dtype = "bf16";
    CHECK_THROWS(tc2.validate());
    TrainConfig tc3;
    tc3.clip_norm = 0.0;
    CHECK_THROWS(tc3.validate());
}
