#pragma once

// Stage-I behavior cloning with conditional flow matching: linear
// interpolation pairs, classifier-free-guidance dropout, the training loop
// with warmup + EMA, guided Euler sampling, and receding-horizon closed-loop
// rollout against the simulator.

#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "chainflow/curation.hpp"
#include "chainflow/env.hpp"
#include "chainflow/expert.hpp"
#include "chainflow/nn.hpp"
#include "chainflow/policy.hpp"

namespace chainflow {

// One chunk of the flow: H action rows and H state rows.
struct Chunk {
  std::vector<std::vector<double>> actions;
  std::vector<std::vector<double>> states;
};

struct FlowSample {
  Chunk x0;     // noise
  Chunk x1;     // clean chunk
  double tau = 0.0;
  Chunk x_tau;  // (1 - tau) x0 + tau x1
  Chunk u;      // x1 - x0
};

inline Chunk chunk_like(int horizon, int d_a, int d_s) {
  Chunk c;
  c.actions.assign(static_cast<size_t>(horizon), std::vector<double>(static_cast<size_t>(d_a), 0.0));
  c.states.assign(static_cast<size_t>(horizon), std::vector<double>(static_cast<size_t>(d_s), 0.0));
  return c;
}

inline FlowSample make_fm_pair_at(const Chunk& x1, double tau, Rng& rng) {
  FlowSample fs;
  fs.x1 = x1;
  fs.tau = tau;
  const int horizon = static_cast<int>(x1.actions.size());
  const int d_a = static_cast<int>(x1.actions[0].size());
  const int d_s = static_cast<int>(x1.states[0].size());
  fs.x0 = chunk_like(horizon, d_a, d_s);
  fs.x_tau = chunk_like(horizon, d_a, d_s);
  fs.u = chunk_like(horizon, d_a, d_s);
  auto fill = [&](std::vector<std::vector<double>>& x0, const std::vector<std::vector<double>>& x1v,
                  std::vector<std::vector<double>>& xt, std::vector<std::vector<double>>& u) {
    for (size_t t = 0; t < x0.size(); ++t)
      for (size_t i = 0; i < x0[t].size(); ++i) {
        x0[t][i] = rng.normal();
        xt[t][i] = (1.0 - fs.tau) * x0[t][i] + fs.tau * x1v[t][i];
        u[t][i] = x1v[t][i] - x0[t][i];
      }
  };
  fill(fs.x0.actions, fs.x1.actions, fs.x_tau.actions, fs.u.actions);
  fill(fs.x0.states, fs.x1.states, fs.x_tau.states, fs.u.states);
  return fs;
}

inline FlowSample make_fm_pair(const Chunk& x1, Rng& rng) {
  return make_fm_pair_at(x1, rng.uniform(), rng);
}

// With probability p the condition is replaced by the null (empty-string)
// instruction. Returns the chosen text.
inline std::string cfg_dropout(const std::string& text, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("cfg_dropout: p must lie in [0,1]");
  return rng.uniform() < p ? std::string() : text;
}

// ---------------------------------------------------------------------------
// batched training inputs
// ---------------------------------------------------------------------------

template <typename T>
struct FmBatch {
  PolicyInput<T> input;
  Tensor<T> target_vel_actions;  // [B, H, d_a]
  Tensor<T> target_vel_states;   // [B, H, d_s]
};

template <typename T>
FmBatch<T> make_fm_batch(const std::vector<const WindowSample*>& samples, const Policy<T>& policy,
                         double cfg_dropout_p, Rng& rng) {
  const ModelConfig& cfg = policy.cfg;
  const int64_t batch = static_cast<int64_t>(samples.size());
  FmBatch<T> out;
  std::vector<std::vector<std::vector<double>>> x_tau_a, x_tau_s, u_a, u_s, rec, dist;
  std::vector<std::string> texts;
  out.input.tau.reserve(static_cast<size_t>(batch));
  for (const WindowSample* w : samples) {
    Chunk x1;
    x1.actions = w->target_actions;
    x1.states = w->target_states;
    const FlowSample fs = make_fm_pair(x1, rng);
    out.input.tau.push_back(fs.tau);
    x_tau_a.push_back(fs.x_tau.actions);
    x_tau_s.push_back(fs.x_tau.states);
    u_a.push_back(fs.u.actions);
    u_s.push_back(fs.u.states);
    const HistorySample h = sample_history(w->history, cfg, rng);
    rec.push_back(h.recent);
    dist.push_back(h.distant);
    for (double o : h.recent_offsets) out.input.recent_offsets.push_back(o);
    for (double o : h.distant_offsets) out.input.distant_offsets.push_back(o);
    texts.push_back(
        cfg_dropout(policy.vocab.instruction_text(w->instruction_id), cfg_dropout_p, rng));
  }
  out.input.noisy_actions = stack_batches<T>(x_tau_a);
  out.input.noisy_states = stack_batches<T>(x_tau_s);
  out.input.hist_recent = stack_batches<T>(rec);
  out.input.hist_distant = stack_batches<T>(dist);
  const auto cond = policy.encoder.encode_batch(texts);
  out.input.c_txt = cond.c_txt;
  out.input.c_pool = cond.c_pool;
  out.input.text_mask = cond.token_mask;
  out.target_vel_actions = stack_batches<T>(u_a);
  out.target_vel_states = stack_batches<T>(u_s);
  return out;
}

// Mean squared error between predicted and target velocities over every chunk
// entry (action and state channels jointly).
template <typename T>
Tensor<T> fm_loss(const PolicyNet<T>& net, const FmBatch<T>& batch) {
  const auto out = net.forward(batch.input);
  const Tensor<T> ea = sub(out.velocity_actions, batch.target_vel_actions);
  const Tensor<T> es = sub(out.velocity_states, batch.target_vel_states);
  const Tensor<T> total = add(sum_all(square(ea)), sum_all(square(es)));
  const int64_t n = batch.target_vel_actions.numel() + batch.target_vel_states.numel();
  return mul_scalar(total, static_cast<T>(1.0 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// guided Euler sampling
// ---------------------------------------------------------------------------

// Everything a sampling step needs besides the evolving chunk; conditional
// and null conditions are kept side by side for classifier-free guidance.
template <typename T>
struct SampleContext {
  Tensor<T> c_txt, c_pool;
  std::vector<uint8_t> text_mask;
  Tensor<T> c_txt_null, c_pool_null;
  std::vector<uint8_t> text_mask_null;
  Tensor<T> hist_recent, hist_distant;
  std::vector<double> recent_offsets, distant_offsets;
};

template <typename T>
SampleContext<T> make_sample_context(const Policy<T>& policy,
                                     const std::vector<std::string>& texts,
                                     const std::vector<HistorySample>& histories) {
  SampleContext<T> ctx;
  const auto cond = policy.encoder.encode_batch(texts);
  ctx.c_txt = cond.c_txt;
  ctx.c_pool = cond.c_pool;
  ctx.text_mask = cond.token_mask;
  const std::vector<std::string> nulls(texts.size(), std::string());
  const auto null_cond = policy.encoder.encode_batch(nulls);
  ctx.c_txt_null = null_cond.c_txt;
  ctx.c_pool_null = null_cond.c_pool;
  ctx.text_mask_null = null_cond.token_mask;
  std::vector<std::vector<std::vector<double>>> rec, dist;
  for (const auto& h : histories) {
    rec.push_back(h.recent);
    dist.push_back(h.distant);
    for (double o : h.recent_offsets) ctx.recent_offsets.push_back(o);
    for (double o : h.distant_offsets) ctx.distant_offsets.push_back(o);
  }
  ctx.hist_recent = stack_batches<T>(rec);
  ctx.hist_distant = stack_batches<T>(dist);
  return ctx;
}

// Deterministic Euler integration of the learned velocity field from Gaussian
// noise, with classifier-free guidance w (w = 1 uses the conditional pass
// only). Returns the final chunk as [B, H, d_a] and [B, H, d_s].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> euler_sample(const Policy<T>& policy, const SampleContext<T>& ctx,
                                             int64_t batch, int k_steps, double guidance,
                                             Rng& rng) {
  if (k_steps < 1) throw std::invalid_argument("euler_sample: k_steps must be >= 1");
  NoGradGuard ng;
  const ModelConfig& cfg = policy.cfg;
  Tensor<T> xa = Tensor<T>::randn({batch, cfg.horizon, cfg.d_action}, rng);
  Tensor<T> xs = Tensor<T>::randn({batch, cfg.horizon, cfg.d_state}, rng);
  const double dtau = 1.0 / static_cast<double>(k_steps);
  for (int k = 0; k < k_steps; ++k) {
    const double tau_k = static_cast<double>(k) * dtau;
    PolicyInput<T> in;
    in.noisy_actions = xa;
    in.noisy_states = xs;
    in.tau.assign(static_cast<size_t>(batch), tau_k);
    in.c_txt = ctx.c_txt;
    in.c_pool = ctx.c_pool;
    in.text_mask = ctx.text_mask;
    in.hist_recent = ctx.hist_recent;
    in.hist_distant = ctx.hist_distant;
    in.recent_offsets = ctx.recent_offsets;
    in.distant_offsets = ctx.distant_offsets;
    auto out = policy.net.forward(in);
    Tensor<T> va = out.velocity_actions;
    Tensor<T> vs = out.velocity_states;
    if (guidance != 1.0) {
      PolicyInput<T> null_in = in;
      null_in.c_txt = ctx.c_txt_null;
      null_in.c_pool = ctx.c_pool_null;
      null_in.text_mask = ctx.text_mask_null;
      const auto base = policy.net.forward(null_in);
      const T w = static_cast<T>(guidance);
      va = add(base.velocity_actions, mul_scalar(sub(va, base.velocity_actions), w));
      vs = add(base.velocity_states, mul_scalar(sub(vs, base.velocity_states), w));
    }
    xa = add(xa, mul_scalar(va, static_cast<T>(dtau)));
    xs = add(xs, mul_scalar(vs, static_cast<T>(dtau)));
  }
  return {xa, xs};
}

// ---------------------------------------------------------------------------
// receding-horizon closed-loop rollout
// ---------------------------------------------------------------------------

struct RolloutOptions {
  int t_max = 240;
  int k_steps = 5;
  double guidance = 2.0;
};

struct RolloutResult {
  TrackedTrajectory traj;
  bool fell = false;
  int valid_frames = 0;  // frames survived before the fall (or t_max)
};

// Batched rollout of several environments; each runs its own instruction,
// initial state, and RNG stream. The history buffer starts as first-frame
// padding; only the first predicted action executes per step; history indices
// are resampled every step.
template <typename T>
std::vector<RolloutResult> rollout_closed_loop(const Policy<T>& policy, const EnvConfig& env_cfg,
                                               const std::vector<std::string>& instructions,
                                               const std::vector<EnvState>& starts,
                                               const RolloutOptions& opt, Rng& rng) {
  NoGradGuard ng;
  const size_t n_env = instructions.size();
  const ModelConfig& cfg = policy.cfg;
  std::vector<RolloutResult> results(n_env);
  std::vector<EnvState> states = starts;
  std::vector<std::vector<std::vector<double>>> buffers(n_env);
  std::vector<Rng> env_rngs;
  for (size_t i = 0; i < n_env; ++i) {
    env_rngs.push_back(rng.fork(static_cast<uint64_t>(i)));
    const auto s0 = to_state_vector(states[i], env_cfg);
    buffers[i].assign(static_cast<size_t>(cfg.l_max), s0);
    results[i].traj.instruction_id =
        instruction_id(policy.vocab, parse_instruction(policy.vocab, instructions[i]));
  }
  std::vector<bool> done(n_env, false);
  for (int t = 0; t < opt.t_max; ++t) {
    std::vector<size_t> active;
    for (size_t i = 0; i < n_env; ++i)
      if (!done[i]) active.push_back(i);
    if (active.empty()) break;
    std::vector<std::string> texts;
    std::vector<HistorySample> hists;
    for (size_t i : active) {
      texts.push_back(instructions[i]);
      hists.push_back(sample_history(buffers[i], cfg, env_rngs[i]));
    }
    const auto ctx = make_sample_context(policy, texts, hists);
    // one shared chunk-noise stream per step keeps the draw order stable
    auto [xa, xs] = euler_sample(policy, ctx, static_cast<int64_t>(active.size()), opt.k_steps,
                                 opt.guidance, rng);
    for (size_t bi = 0; bi < active.size(); ++bi) {
      const size_t i = active[bi];
      Action act;
      act.target_angles.resize(static_cast<size_t>(cfg.d_action));
      for (int j = 0; j < cfg.d_action; ++j)
        act.target_angles[static_cast<size_t>(j)] = static_cast<double>(
            xa.data()[(bi * cfg.horizon + 0) * cfg.d_action + static_cast<size_t>(j)]);
      states[i] = step(states[i], act, env_cfg);
      const auto sv = to_state_vector(states[i], env_cfg);
      auto& tr = results[i].traj;
      tr.states.push_back(sv);
      tr.actions.push_back(act.target_angles);
      tr.sites.push_back(forward_kinematics(states[i], env_cfg));
      tr.joint_angles.push_back(states[i].joint_angles);
      buffers[i].erase(buffers[i].begin());
      buffers[i].push_back(sv);
      if (is_fallen(states[i], env_cfg)) {
        done[i] = true;
        results[i].fell = true;
      } else {
        results[i].valid_frames = t + 1;
      }
    }
  }
  return results;
}

// ---------------------------------------------------------------------------
// stage-I trainer
// ---------------------------------------------------------------------------

struct Stage1Config {
  int64_t steps = 20000;
  int batch_size = 64;
  double lr = 1e-4;
  int64_t warmup_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double cfg_dropout_p = 0.10;
  double ema_decay = 0.9999;
  int64_t ema_warmup_steps = 1000;
  int64_t log_interval = 100;
  int64_t val_interval = 1000;
  int val_batches = 4;
};

struct Stage1Report {
  double init_val_loss = 0.0;
  double final_val_loss = 0.0;
  int64_t steps = 0;
};

template <typename T>
class Stage1Trainer {
 public:
  Stage1Trainer(Policy<T>& policy, std::vector<WindowSample> train, std::vector<WindowSample> val,
                const Stage1Config& cfg, uint64_t seed)
      : policy_(policy),
        train_(std::move(train)),
        val_(std::move(val)),
        cfg_(cfg),
        rng_(Rng(seed).fork("stage1")),
        val_seed_(Rng(seed).fork("stage1-val").next_u64()),
        ema_(policy.store, cfg.ema_decay, cfg.ema_warmup_steps) {
    if (train_.empty()) throw std::invalid_argument("Stage1Trainer: empty training set");
    if (val_.empty()) throw std::invalid_argument("Stage1Trainer: empty validation set");
  }

  // Validation uses a fixed seed each call so losses are comparable across
  // training steps.
  double validation_loss() {
    NoGradGuard ng;
    Rng vr(val_seed_);
    double acc = 0.0;
    int batches = 0;
    for (int b = 0; b < cfg_.val_batches; ++b) {
      std::vector<const WindowSample*> samples;
      for (int i = 0; i < cfg_.batch_size; ++i)
        samples.push_back(&val_[static_cast<size_t>(vr.uniform_index(val_.size()))]);
      const auto batch = make_fm_batch(samples, policy_, /*cfg_dropout_p=*/0.0, vr);
      acc += static_cast<double>(fm_loss(policy_.net, batch).item());
      ++batches;
    }
    return acc / batches;
  }

  Stage1Report run(const std::string& log_csv_path) {
    std::ofstream log(log_csv_path);
    log << "step,fm_loss,val_loss,lr\n";
    Stage1Report report;
    report.init_val_loss = validation_loss();
    log << 0 << ",," << report.init_val_loss << "," << 0.0 << "\n";
    AdamWConfig opt_cfg;
    opt_cfg.lr = cfg_.lr;
    opt_cfg.beta1 = cfg_.beta1;
    opt_cfg.beta2 = cfg_.beta2;
    opt_cfg.weight_decay = cfg_.weight_decay;
    AdamW<T> opt(policy_.store, opt_cfg);
    for (int64_t step = 1; step <= cfg_.steps; ++step) {
      std::vector<const WindowSample*> samples;
      for (int i = 0; i < cfg_.batch_size; ++i)
        samples.push_back(&train_[static_cast<size_t>(rng_.uniform_index(train_.size()))]);
      const auto batch = make_fm_batch(samples, policy_, cfg_.cfg_dropout_p, rng_);
      policy_.store.zero_grad();
      Tensor<T> loss = fm_loss(policy_.net, batch);
      backward(loss);
      const double lr = warmup_constant_lr(step - 1, cfg_.lr, cfg_.warmup_steps);
      opt.step(lr);
      ema_.update(policy_.store, step);
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw std::runtime_error("stage1: non-finite training loss at step " + std::to_string(step));
      if (step % cfg_.log_interval == 0 || step == cfg_.steps) {
        const bool do_val = step % cfg_.val_interval == 0 || step == cfg_.steps;
        const double vl = do_val ? validation_loss() : std::numeric_limits<double>::quiet_NaN();
        log << step << "," << static_cast<double>(loss.item()) << ",";
        if (do_val) log << vl;
        log << "," << lr << "\n";
        log.flush();
        if (do_val) report.final_val_loss = vl;
      }
    }
    report.steps = cfg_.steps;
    return report;
  }

  const EmaState<T>& ema() const { return ema_; }

 private:
  Policy<T>& policy_;
  std::vector<WindowSample> train_;
  std::vector<WindowSample> val_;
  Stage1Config cfg_;
  Rng rng_;
  uint64_t val_seed_;
  EmaState<T> ema_;
};

}  // namespace chainflow
