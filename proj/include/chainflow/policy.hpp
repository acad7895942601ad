#pragma once

// Policy bundle: instruction encoder plus velocity network sharing one
// parameter store, with checkpoint save/load (parameters, EMA shadows, model
// config, vocabulary, and a reproducibility stamp).

#include <sstream>
#include <string>
#include <vector>

#include "chainflow/instruction.hpp"
#include "chainflow/model.hpp"
#include "chainflow/serialize.hpp"

namespace chainflow {

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

template <typename T>
struct Policy {
  ModelConfig cfg;
  Vocabulary vocab;
  ParamStore<T> store;
  InstructionEncoder<T> encoder;
  PolicyNet<T> net;

  Policy(const ModelConfig& model_cfg, const Vocabulary& v, uint64_t init_seed)
      : cfg(model_cfg), vocab(v) {
    Rng rng(init_seed);
    encoder = InstructionEncoder<T>(vocab, cfg.d_txt, cfg.d_pool, store, rng);
    net = PolicyNet<T>(cfg, store, rng);
  }
};

// Exponential moving average of the parameter store. Until the warmup step
// count is reached the shadow tracks the raw parameters exactly.
template <typename T>
class EmaState {
 public:
  EmaState() = default;
  EmaState(const ParamStore<T>& store, double decay = 0.9999, int64_t warmup_steps = 1000)
      : decay_(decay), warmup_(warmup_steps) {
    for (const auto& p : store.params())
      shadow_.push_back(std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
  }

  void update(const ParamStore<T>& store, int64_t optimizer_steps) {
    for (size_t i = 0; i < shadow_.size(); ++i) {
      const auto& w = store.params()[i].tensor.data();
      auto& s = shadow_[i];
      if (optimizer_steps <= warmup_) {
        for (size_t j = 0; j < s.size(); ++j) s[j] = static_cast<double>(w[j]);
      } else {
        for (size_t j = 0; j < s.size(); ++j)
          s[j] = decay_ * s[j] + (1.0 - decay_) * static_cast<double>(w[j]);
      }
    }
  }

  void copy_to(ParamStore<T>& store) const {
    for (size_t i = 0; i < shadow_.size(); ++i) {
      auto& w = store.params()[i].tensor.data();
      for (size_t j = 0; j < w.size(); ++j) w[j] = static_cast<T>(shadow_[i][j]);
    }
  }

  const std::vector<std::vector<double>>& shadow() const { return shadow_; }
  double decay() const { return decay_; }
  int64_t warmup_steps() const { return warmup_; }

  bool finite() const {
    for (const auto& s : shadow_)
      for (double v : s)
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  double decay_ = 0.9999;
  int64_t warmup_ = 1000;
  std::vector<std::vector<double>> shadow_;
};

inline void checkpoint_put_model_config(Checkpoint& ck, const ModelConfig& cfg) {
  ck.put_int("cfg/n_layers", cfg.n_layers);
  ck.put_int("cfg/d_model", cfg.d_model);
  ck.put_int("cfg/n_heads", cfg.n_heads);
  ck.put_int("cfg/d_head", cfg.d_head);
  ck.put_int("cfg/horizon", cfg.horizon);
  ck.put_int("cfg/l_max", cfg.l_max);
  ck.put_int("cfg/n_recent", cfg.n_recent);
  ck.put_int("cfg/n_distant", cfg.n_distant);
  ck.put_real("cfg/alpha", cfg.alpha);
  ck.put_int("cfg/d_state", cfg.d_state);
  ck.put_int("cfg/d_action", cfg.d_action);
  ck.put_int("cfg/d_pool", cfg.d_pool);
  ck.put_int("cfg/d_txt", cfg.d_txt);
  ck.put_int("cfg/n_txt_tokens", cfg.n_txt_tokens);
  ck.put_int("cfg/mlp_ratio", cfg.mlp_ratio);
}

inline ModelConfig checkpoint_model_config(const Checkpoint& ck) {
  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(ck.integer("cfg/n_layers"));
  cfg.d_model = static_cast<int>(ck.integer("cfg/d_model"));
  cfg.n_heads = static_cast<int>(ck.integer("cfg/n_heads"));
  cfg.d_head = static_cast<int>(ck.integer("cfg/d_head"));
  cfg.horizon = static_cast<int>(ck.integer("cfg/horizon"));
  cfg.l_max = static_cast<int>(ck.integer("cfg/l_max"));
  cfg.n_recent = static_cast<int>(ck.integer("cfg/n_recent"));
  cfg.n_distant = static_cast<int>(ck.integer("cfg/n_distant"));
  cfg.alpha = ck.real("cfg/alpha");
  cfg.d_state = static_cast<int>(ck.integer("cfg/d_state"));
  cfg.d_action = static_cast<int>(ck.integer("cfg/d_action"));
  cfg.d_pool = static_cast<int>(ck.integer("cfg/d_pool"));
  cfg.d_txt = static_cast<int>(ck.integer("cfg/d_txt"));
  cfg.n_txt_tokens = static_cast<int>(ck.integer("cfg/n_txt_tokens"));
  cfg.mlp_ratio = static_cast<int>(ck.integer("cfg/mlp_ratio"));
  return cfg;
}

inline void checkpoint_put_vocab(Checkpoint& ck, const Vocabulary& v) {
  ck.put_str("cfg/vocab_verbs", join_words(v.verbs));
  ck.put_str("cfg/vocab_body_parts", join_words(v.body_parts));
  ck.put_str("cfg/vocab_speeds", join_words(v.speeds));
}

inline Vocabulary checkpoint_vocab(const Checkpoint& ck) {
  Vocabulary v;
  v.verbs = split_words(ck.str("cfg/vocab_verbs"));
  v.body_parts = split_words(ck.str("cfg/vocab_body_parts"));
  v.speeds = split_words(ck.str("cfg/vocab_speeds"));
  return v;
}

template <typename T>
void save_policy_checkpoint(const std::string& path, const Policy<T>& policy,
                            const EmaState<T>& ema, const std::string& config_hash,
                            uint64_t seed, const std::string& code_version) {
  Checkpoint ck;
  checkpoint_put_params(ck, policy.store, "param/");
  for (size_t i = 0; i < policy.store.size(); ++i)
    ck.put_array("ema/" + policy.store.params()[i].name,
                 policy.store.params()[i].tensor.shape(), ema.shadow()[i]);
  ck.put_real("ema/decay", ema.decay());
  ck.put_int("ema/warmup_steps", ema.warmup_steps());
  checkpoint_put_model_config(ck, policy.cfg);
  checkpoint_put_vocab(ck, policy.vocab);
  ck.put_str("stamp/config_hash", config_hash);
  ck.put_int("stamp/seed", static_cast<int64_t>(seed));
  ck.put_str("stamp/code_version", code_version);
  ck.save(path);
}

// Loads a policy with either the raw parameters or the EMA shadows.
template <typename T>
Policy<T> load_policy_checkpoint(const std::string& path, bool use_ema) {
  Checkpoint ck = Checkpoint::load(path);
  Policy<T> policy(checkpoint_model_config(ck), checkpoint_vocab(ck), /*init_seed=*/0);
  checkpoint_load_params(ck, policy.store, use_ema ? "ema/" : "param/");
  return policy;
}

}  // namespace chainflow
