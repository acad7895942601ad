#include "doctest.h"

#include <chrono>
#include <cmath>
#include <filesystem>

#include "chainflow/flow.hpp"

using namespace chainflow;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.horizon = 2;
  cfg.l_max = 6;
  cfg.n_recent = 2;
  cfg.n_distant = 2;
  cfg.d_state = 5;
  cfg.d_action = 2;
  cfg.d_pool = 4;
  cfg.d_txt = 4;
  return cfg;
}

Chunk random_chunk(int horizon, int d_a, int d_s, Rng& rng) {
  Chunk c = chunk_like(horizon, d_a, d_s);
  for (auto& row : c.actions)
    for (auto& v : row) v = rng.normal();
  for (auto& row : c.states)
    for (auto& v : row) v = rng.normal();
  return c;
}

std::vector<WindowSample> micro_windows(const ModelConfig& cfg, int count, Rng& rng) {
  std::vector<WindowSample> out;
  for (int i = 0; i < count; ++i) {
    WindowSample w;
    w.instruction_id = i % 16;
    w.history.assign(static_cast<size_t>(cfg.l_max),
                     std::vector<double>(static_cast<size_t>(cfg.d_state), 0.0));
    for (auto& row : w.history)
      for (auto& v : row) v = rng.normal();
    w.target_states.assign(static_cast<size_t>(cfg.horizon),
                           std::vector<double>(static_cast<size_t>(cfg.d_state), 0.0));
    w.target_actions.assign(static_cast<size_t>(cfg.horizon),
                            std::vector<double>(static_cast<size_t>(cfg.d_action), 0.0));
    for (auto& row : w.target_states)
      for (auto& v : row) v = rng.normal();
    for (auto& row : w.target_actions)
      for (auto& v : row) v = rng.normal();
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

TEST_CASE("fm pair: tau boundaries and midpoint interpolation") {
  Rng rng(1);
  Chunk x1 = random_chunk(2, 2, 3, rng);

  SUBCASE("tau = 0: x_tau is the noise, u = x1 - x0") {
    FlowSample fs = make_fm_pair_at(x1, 0.0, rng);
    for (size_t t = 0; t < 2; ++t)
      for (size_t i = 0; i < 3; ++i) {
        CHECK(fs.x_tau.states[t][i] == fs.x0.states[t][i]);
        CHECK(fs.u.states[t][i] == fs.x1.states[t][i] - fs.x0.states[t][i]);
      }
  }
  SUBCASE("tau = 1: x_tau is the clean chunk") {
    FlowSample fs = make_fm_pair_at(x1, 1.0, rng);
    for (size_t t = 0; t < 2; ++t)
      for (size_t i = 0; i < 2; ++i)
        CHECK(fs.x_tau.actions[t][i] == doctest::Approx(fs.x1.actions[t][i]));
  }
  SUBCASE("tau = 0.5 with x0 = 0 and x1 = 2c gives x_tau = c and u = 2c") {
    Chunk doubled = x1;
    for (auto& row : doubled.states)
      for (auto& v : row) v *= 2.0;
    Rng rz(2);
    FlowSample fs = make_fm_pair_at(doubled, 0.5, rz);
    // overwrite noise with zero and recompute the invariant fields by hand
    for (size_t t = 0; t < fs.x0.states.size(); ++t)
      for (size_t i = 0; i < fs.x0.states[t].size(); ++i) {
        const double c = x1.states[t][i];
        const double x_tau = 0.5 * 0.0 + 0.5 * 2.0 * c;
        CHECK(x_tau == doctest::Approx(c));
      }
  }
  SUBCASE("invariants hold for random tau") {
    for (int i = 0; i < 20; ++i) {
      FlowSample fs = make_fm_pair(x1, rng);
      for (size_t t = 0; t < fs.x0.actions.size(); ++t)
        for (size_t k = 0; k < fs.x0.actions[t].size(); ++k) {
          CHECK(fs.x_tau.actions[t][k] ==
                doctest::Approx((1 - fs.tau) * fs.x0.actions[t][k] + fs.tau * fs.x1.actions[t][k]));
          CHECK(fs.u.actions[t][k] ==
                doctest::Approx(fs.x1.actions[t][k] - fs.x0.actions[t][k]));
        }
    }
  }
}

TEST_CASE("cfg_dropout boundaries and empirical rate") {
  Rng rng(7);
  CHECK(cfg_dropout("wave tip fast", 0.0, rng) == "wave tip fast");
  CHECK(cfg_dropout("wave tip fast", 1.0, rng).empty());
  CHECK_THROWS(cfg_dropout("x", -0.1, rng));
  int dropped = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i)
    if (cfg_dropout("wave tip fast", 0.10, rng).empty()) ++dropped;
  const double rate = static_cast<double>(dropped) / n;
  CHECK(rate >= 0.095);
  CHECK(rate <= 0.105);
}

TEST_CASE("zero-init model: fm loss equals the mean squared target velocity") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, /*seed=*/3);
  Rng rng(5);
  auto windows = micro_windows(cfg, 8, rng);
  std::vector<const WindowSample*> ptrs;
  for (auto& w : windows) ptrs.push_back(&w);
  Rng br(11);
  const auto batch = make_fm_batch(ptrs, policy, 0.0, br);
  const double loss = fm_loss(policy.net, batch).item();
  double u_sq = 0.0;
  for (double v : batch.target_vel_actions.data()) u_sq += v * v;
  for (double v : batch.target_vel_states.data()) u_sq += v * v;
  u_sq /= static_cast<double>(batch.target_vel_actions.numel() + batch.target_vel_states.numel());
  CHECK(loss == doctest::Approx(u_sq).epsilon(1e-12));
}

TEST_CASE("fm loss is zero when targets equal the model output") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 3);  // zero-init => output 0
  Rng rng(5);
  auto windows = micro_windows(cfg, 4, rng);
  std::vector<const WindowSample*> ptrs;
  for (auto& w : windows) ptrs.push_back(&w);
  Rng br(11);
  auto batch = make_fm_batch(ptrs, policy, 0.0, br);
  batch.target_vel_actions = Tensor<double>::zeros(batch.target_vel_actions.shape());
  batch.target_vel_states = Tensor<double>::zeros(batch.target_vel_states.shape());
  CHECK(fm_loss(policy.net, batch).item() == doctest::Approx(0.0));
}

TEST_CASE("full policy + fm loss passes the finite-difference gradient check") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 17);
  // move away from the zero-init saddle so every path carries gradient
  Rng pr(23);
  for (auto& p : policy.store.params())
    for (auto& v : p.tensor.data()) v += pr.normal(0.0, 0.05);
  Rng wr(29);
  auto windows = micro_windows(cfg, 2, wr);
  std::vector<const WindowSample*> ptrs;
  for (auto& w : windows) ptrs.push_back(&w);
  const auto t0 = std::chrono::steady_clock::now();
  // the batch is rebuilt deterministically inside f so parameter
  // perturbations propagate through the text-encoder path as well
  const double err = grad_check<double>(
      [&] {
        Rng br(31);
        const auto batch = make_fm_batch(ptrs, policy, 0.0, br);
        return fm_loss(policy.net, batch);
      },
      policy.store, 1e-5);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("micro-config grad check: max rel err = ", err, " in ", seconds, " s over ",
          policy.store.total_count(), " params");
  CHECK(err < 1e-5);
  CHECK(seconds < 120.0);
}

TEST_CASE("euler_sample integrates a constant field: x_K = x_0 + c") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 3);
  // zero-init model with a head bias emits a constant velocity c
  const double c_a = 0.75, c_s = -0.4;
  for (auto& p : policy.store.params()) {
    if (p.name == "net.final.head_a.bias")
      std::fill(p.tensor.data().begin(), p.tensor.data().end(), c_a);
    if (p.name == "net.final.head_s.bias")
      std::fill(p.tensor.data().begin(), p.tensor.data().end(), c_s);
  }
  std::vector<HistorySample> hists(1);
  Rng hr(41);
  std::vector<std::vector<double>> buffer(
      static_cast<size_t>(cfg.l_max), std::vector<double>(static_cast<size_t>(cfg.d_state), 0.1));
  hists[0] = sample_history(buffer, cfg, hr);
  const auto ctx = make_sample_context(policy, {"wave tip fast"}, hists);
  for (int k_steps : {1, 4}) {
    Rng sr(55);
    auto [xa, xs] = euler_sample(policy, ctx, 1, k_steps, 1.0, sr);
    // reconstruct x0 from the same stream
    Rng sr2(55);
    Tensor<double> x0a = Tensor<double>::randn({1, cfg.horizon, cfg.d_action}, sr2);
    Tensor<double> x0s = Tensor<double>::randn({1, cfg.horizon, cfg.d_state}, sr2);
    for (int64_t i = 0; i < xa.numel(); ++i)
      CHECK(xa.data()[i] == doctest::Approx(x0a.data()[i] + c_a).epsilon(1e-12));
    for (int64_t i = 0; i < xs.numel(); ++i)
      CHECK(xs.data()[i] == doctest::Approx(x0s.data()[i] + c_s).epsilon(1e-12));
  }
}

TEST_CASE("guidance w = 0 ignores the conditional instruction entirely") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 19);
  Rng pr(21);
  for (auto& p : policy.store.params()) pr.fill_normal(p.tensor.data(), 0.0, 0.1);
  std::vector<std::vector<double>> buffer(
      static_cast<size_t>(cfg.l_max), std::vector<double>(static_cast<size_t>(cfg.d_state), 0.2));
  Rng hr(1);
  std::vector<HistorySample> h1{sample_history(buffer, cfg, hr)};
  const auto ctx1 = make_sample_context(policy, {"wave tip fast"}, h1);
  const auto ctx2 = make_sample_context(policy, {"bend base slow"}, h1);
  Rng s1(9), s2(9);
  auto [a1, st1] = euler_sample(policy, ctx1, 1, 3, 0.0, s1);
  auto [a2, st2] = euler_sample(policy, ctx2, 1, 3, 0.0, s2);
  for (int64_t i = 0; i < a1.numel(); ++i) CHECK(a1.data()[i] == a2.data()[i]);
  for (int64_t i = 0; i < st1.numel(); ++i) CHECK(st1.data()[i] == st2.data()[i]);
}

TEST_CASE("ema boundaries: decay 0 copies, decay 1 freezes, geometric convergence") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 3);

  EmaState<double> copy_all(policy.store, /*decay=*/0.0, /*warmup=*/0);
  for (auto& p : policy.store.params())
    for (auto& v : p.tensor.data()) v += 1.0;
  copy_all.update(policy.store, 1);
  CHECK(copy_all.shadow()[0][0] == doctest::Approx(policy.store.params()[0].tensor.data()[0]));

  EmaState<double> frozen(policy.store, 1.0, 0);
  const double before = frozen.shadow()[0][0];
  for (auto& p : policy.store.params())
    for (auto& v : p.tensor.data()) v += 5.0;
  frozen.update(policy.store, 1);
  CHECK(frozen.shadow()[0][0] == doctest::Approx(before));

  // constant params p*: shadow error shrinks by d each step
  const double d = 0.9;
  EmaState<double> ema(policy.store, d, 0);
  const double target = policy.store.params()[0].tensor.data()[0];
  const double err0 = ema.shadow()[0][0] - target;  // zero here, so shift the shadow
  (void)err0;
  // displace params once, then hold them constant
  for (auto& p : policy.store.params())
    for (auto& v : p.tensor.data()) v += 2.0;
  const double p_star = policy.store.params()[0].tensor.data()[0];
  double prev_gap = std::abs(ema.shadow()[0][0] - p_star);
  for (int n = 1; n <= 10; ++n) {
    ema.update(policy.store, n);
    const double gap = std::abs(ema.shadow()[0][0] - p_star);
    CHECK(gap == doctest::Approx(prev_gap * d).epsilon(1e-9));
    prev_gap = gap;
  }
}

TEST_CASE("ema warmup copies parameters until the threshold") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 3);
  EmaState<double> ema(policy.store, 0.5, /*warmup=*/3);
  for (int step = 1; step <= 3; ++step) {
    for (auto& p : policy.store.params())
      for (auto& v : p.tensor.data()) v += 1.0;
    ema.update(policy.store, step);
    CHECK(ema.shadow()[0][0] == doctest::Approx(policy.store.params()[0].tensor.data()[0]));
  }
  const double at_warmup = ema.shadow()[0][0];
  for (auto& p : policy.store.params())
    for (auto& v : p.tensor.data()) v += 1.0;
  ema.update(policy.store, 4);
  CHECK(ema.shadow()[0][0] == doctest::Approx(0.5 * at_warmup + 0.5 * (at_warmup + 1.0)));
}

TEST_CASE("closed-loop rollout: t_max = 1 performs exactly one env step") {
  EnvConfig env_cfg;
  ModelConfig cfg = micro_config();
  cfg.d_state = state_dim(env_cfg);
  cfg.d_action = action_dim(env_cfg);
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 3);
  RolloutOptions opt;
  opt.t_max = 1;
  opt.guidance = 1.0;
  Rng rng(77);
  const auto results =
      rollout_closed_loop(policy, env_cfg, {"hold base slow"}, {initial_state(env_cfg)}, opt, rng);
  REQUIRE(results.size() == 1);
  CHECK(results[0].traj.states.size() == 1);
}

TEST_CASE("closed-loop rollout in zero gravity from high altitude never falls") {
  EnvConfig env_cfg;
  env_cfg.gravity = 0.0;
  ModelConfig cfg = micro_config();
  cfg.d_state = state_dim(env_cfg);
  cfg.d_action = action_dim(env_cfg);
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 3);
  EnvState start = initial_state(env_cfg);
  start.root_z = 3.0;  // out of contact range for any pose
  RolloutOptions opt;
  opt.t_max = 60;
  opt.guidance = 1.0;
  Rng rng(78);
  const auto results =
      rollout_closed_loop(policy, env_cfg, {"wave tip fast"}, {start}, opt, rng);
  CHECK_FALSE(results[0].fell);
  CHECK(results[0].valid_frames == 60);
}

TEST_CASE("stage-I trainer runs, logs, and is deterministic given the seed") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Rng rng(101);
  auto train = micro_windows(cfg, 32, rng);
  auto val = micro_windows(cfg, 8, rng);
  Stage1Config tc;
  tc.steps = 25;
  tc.batch_size = 8;
  tc.warmup_steps = 5;
  tc.val_interval = 25;
  tc.log_interval = 5;
  tc.val_batches = 2;
  auto run_once = [&](const std::string& log) {
    Policy<double> policy(cfg, vocab, 55);
    Stage1Trainer<double> trainer(policy, train, val, tc, 999);
    const auto report = trainer.run(log);
    return std::make_pair(report, policy.store.params()[0].tensor.data()[0]);
  };
  const auto [r1, w1] = run_once("/tmp/chainflow_s1_a.csv");
  const auto [r2, w2] = run_once("/tmp/chainflow_s1_b.csv");
  CHECK(r1.init_val_loss == r2.init_val_loss);
  CHECK(r1.final_val_loss == r2.final_val_loss);
  CHECK(w1 == w2);
  CHECK(r1.init_val_loss > 0.0);
  CHECK(std::filesystem::exists("/tmp/chainflow_s1_a.csv"));
  // a few steps on a small set should already reduce validation loss
  CHECK(r1.final_val_loss < r1.init_val_loss);
}

TEST_CASE("policy checkpoints round-trip parameters and EMA shadows") {
  ModelConfig cfg = micro_config();
  Vocabulary vocab;
  Policy<double> policy(cfg, vocab, 5);
  Rng pr(6);
  for (auto& p : policy.store.params()) pr.fill_normal(p.tensor.data(), 0.0, 0.3);
  EmaState<double> ema(policy.store, 0.9, 0);
  for (auto& p : policy.store.params())
    for (auto& v : p.tensor.data()) v += 0.25;
  ema.update(policy.store, 1);
  const std::string path = "/tmp/chainflow_policy_ck.bin";
  save_policy_checkpoint(path, policy, ema, "confhash", 42, "test");
  Policy<double> raw = load_policy_checkpoint<double>(path, /*use_ema=*/false);
  Policy<double> shadow = load_policy_checkpoint<double>(path, /*use_ema=*/true);
  REQUIRE(raw.store.size() == policy.store.size());
  for (size_t i = 0; i < policy.store.size(); ++i) {
    CHECK(raw.store.params()[i].tensor.data() == policy.store.params()[i].tensor.data());
    for (size_t j = 0; j < ema.shadow()[i].size(); ++j)
      CHECK(shadow.store.params()[i].tensor.data()[j] == doctest::Approx(ema.shadow()[i][j]));
  }
  CHECK(raw.vocab.verbs == vocab.verbs);
  CHECK(raw.cfg.d_model == cfg.d_model);
}
