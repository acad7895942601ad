#pragma once

// Three-stream (action/state/text) diffusion transformer predicting the flow
// velocity field over a future state-action chunk. Streams interact through
// joint self-attention with QK-normalized queries/keys; the action and state
// streams additionally cross-attend to sparsely sampled distant history and
// dense recent history. A global condition built from the flow time and the
// pooled text embedding modulates every sublayer AdaLN-Zero style, so the
// whole network is the identity (zero velocity) at initialization.

#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/nn.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_head = 16;
  int horizon = 4;   // H: chunk length in frames
  int l_max = 32;    // raw history window
  int n_recent = 8;  // dense recent history tokens
  int n_distant = 8; // sparse distant history tokens
  double alpha = 3.0;
  int d_state = 23;
  int d_action = 4;
  int d_pool = 64;
  int d_txt = 64;
  int n_txt_tokens = 3;
  int mlp_ratio = 4;

  int l_distant() const { return l_max - n_recent; }

  void validate() const {
    if (d_model != n_heads * d_head)
      throw std::invalid_argument("ModelConfig: d_model must equal n_heads * d_head");
    if (horizon < 1) throw std::invalid_argument("ModelConfig: horizon must be >= 1");
    if (n_recent + n_distant > l_max)
      throw std::invalid_argument("ModelConfig: n_recent + n_distant must be <= l_max");
    if (alpha <= 0.0) throw std::invalid_argument("ModelConfig: alpha must be > 0");
    if (n_layers < 1 || d_model < 1 || d_state < 1 || d_action < 1)
      throw std::invalid_argument("ModelConfig: sizes must be positive");
  }
};

// ---------------------------------------------------------------------------
// nonlinear history sampling
// ---------------------------------------------------------------------------

// Inverse-CDF index for one uniform draw, before clamping: u = 0 maps to
// l_distant (most recent end), u = 1 maps to 0 (oldest frame).
inline int64_t raw_history_index(double u, int l_distant, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("raw_history_index: alpha must be > 0");
  const double inner = 1.0 - u * (1.0 - std::exp(-alpha));
  return static_cast<int64_t>(
      std::floor(static_cast<double>(l_distant) * (1.0 + std::log(inner) / alpha)));
}

inline int clamped_history_index(double u, int l_distant, double alpha) {
  const int64_t raw = raw_history_index(u, l_distant, alpha);
  return static_cast<int>(std::clamp<int64_t>(raw, 0, l_distant - 1));
}

// N_l distinct distant indices in [0, l_distant), sorted ascending (oldest
// first). Floor collisions are resampled until the set is full.
inline std::vector<int> sample_history_indices(int l_max, int n_recent, int n_distant, double alpha,
                                               Rng& rng) {
  const int l_distant = l_max - n_recent;
  if (l_distant <= 0) throw std::invalid_argument("sample_history_indices: l_max - n_recent must be > 0");
  if (n_distant > l_distant)
    throw std::invalid_argument("sample_history_indices: n_distant exceeds the distant range");
  std::set<int> chosen;
  while (static_cast<int>(chosen.size()) < n_distant)
    chosen.insert(clamped_history_index(rng.uniform(), l_distant, alpha));
  return std::vector<int>(chosen.begin(), chosen.end());
}

// Exact bin probabilities of the clamped single-draw distribution; the test
// suite checks empirical histograms against these.
inline std::vector<double> history_index_pmf(int l_distant, double alpha) {
  auto tail = [&](double x) {  // P(raw index >= x)
    return (1.0 - std::exp(alpha * (x / l_distant - 1.0))) / (1.0 - std::exp(-alpha));
  };
  std::vector<double> pmf(static_cast<size_t>(l_distant));
  for (int i = 0; i < l_distant; ++i) {
    const double hi = i == l_distant - 1 ? 0.0 : tail(i + 1);
    pmf[static_cast<size_t>(i)] = tail(i) - hi;
  }
  return pmf;
}

// Sampled history of one rollout step: states plus their temporal offsets
// (frames back from now; recent offsets are N_s..1).
struct HistorySample {
  std::vector<std::vector<double>> recent;
  std::vector<std::vector<double>> distant;
  std::vector<double> recent_offsets;
  std::vector<double> distant_offsets;
};

// `buffer` holds the last l_max states, oldest first.
inline HistorySample sample_history(const std::vector<std::vector<double>>& buffer,
                                    const ModelConfig& cfg, Rng& rng) {
  if (static_cast<int>(buffer.size()) != cfg.l_max)
    throw std::invalid_argument("sample_history: buffer must hold exactly l_max states");
  HistorySample out;
  for (int i = 0; i < cfg.n_recent; ++i) {
    const int idx = cfg.l_max - cfg.n_recent + i;
    out.recent.push_back(buffer[static_cast<size_t>(idx)]);
    out.recent_offsets.push_back(static_cast<double>(cfg.l_max - idx));
  }
  if (cfg.n_distant > 0) {
    const auto ids = sample_history_indices(cfg.l_max, cfg.n_recent, cfg.n_distant, cfg.alpha, rng);
    for (int idx : ids) {
      out.distant.push_back(buffer[static_cast<size_t>(idx)]);
      out.distant_offsets.push_back(static_cast<double>(cfg.l_max - idx));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// batching helpers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> stack_rows(const std::vector<std::vector<double>>& rows) {
  const int64_t n = static_cast<int64_t>(rows.size());
  const int64_t d = n ? static_cast<int64_t>(rows[0].size()) : 0;
  std::vector<T> data;
  data.reserve(static_cast<size_t>(n * d));
  for (const auto& r : rows)
    for (double v : r) data.push_back(static_cast<T>(v));
  return Tensor<T>({n, d}, std::move(data));
}

// [B, T, d] from B matrices of T rows each.
template <typename T>
Tensor<T> stack_batches(const std::vector<std::vector<std::vector<double>>>& mats) {
  const int64_t b = static_cast<int64_t>(mats.size());
  const int64_t t = b ? static_cast<int64_t>(mats[0].size()) : 0;
  const int64_t d = t ? static_cast<int64_t>(mats[0][0].size()) : 0;
  std::vector<T> data;
  data.reserve(static_cast<size_t>(b * t * d));
  for (const auto& m : mats)
    for (const auto& r : m)
      for (double v : r) data.push_back(static_cast<T>(v));
  return Tensor<T>({b, t, d}, std::move(data));
}

// ---------------------------------------------------------------------------
// attention core
// ---------------------------------------------------------------------------

// q, k, v: [B, heads, T, d_head]; optional additive bias broadcastable to
// [B, heads, Tq, Tk]. Softmax row-wise over keys.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const Tensor<T>* bias = nullptr) {
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(-1))));
  Tensor<T> scores = mul_scalar(matmul(q, transpose(k)), scale);
  if (bias) scores = add(scores, *bias);
  return matmul(softmax(scores), v);
}

// ---------------------------------------------------------------------------
// the policy network
// ---------------------------------------------------------------------------

template <typename T>
struct PolicyInput {
  Tensor<T> noisy_actions;  // [B, H, d_a]
  Tensor<T> noisy_states;   // [B, H, d_s]
  std::vector<double> tau;  // B flow times in [0,1]
  Tensor<T> c_txt;          // [B, n_txt_tokens, d_txt]
  Tensor<T> c_pool;         // [B, d_pool]
  std::vector<uint8_t> text_mask;       // B * n_txt_tokens, 1 = valid
  Tensor<T> hist_recent;                // [B, N_s, d_s]
  Tensor<T> hist_distant;               // [B, N_l, d_s]
  std::vector<double> recent_offsets;   // B * N_s
  std::vector<double> distant_offsets;  // B * N_l
};

template <typename T>
struct PolicyOutput {
  Tensor<T> velocity_actions;  // [B, H, d_a]
  Tensor<T> velocity_states;   // [B, H, d_s]
};

template <typename T>
class PolicyNet {
 public:
  PolicyNet() = default;

  PolicyNet(const ModelConfig& cfg, ParamStore<T>& store, Rng& rng, const std::string& prefix = "net")
      : cfg_(cfg) {
    cfg_.validate();
    const int64_t d = cfg_.d_model;
    const int64_t hidden = static_cast<int64_t>(cfg_.mlp_ratio) * d;
    auto name = [&](const std::string& s) { return prefix + "." + s; };
    in_a_ = Linear<T>(name("in_a"), cfg_.d_action, d, store, rng);
    in_s_ = Linear<T>(name("in_s"), cfg_.d_state, d, store, rng);
    in_c_ = Linear<T>(name("in_c"), cfg_.d_txt, d, store, rng);
    in_h_ = Linear<T>(name("in_h"), cfg_.d_state, d, store, rng);
    tau_fc1_ = Linear<T>(name("cond.tau_fc1"), d, d, store, rng);
    tau_fc2_ = Linear<T>(name("cond.tau_fc2"), d, d, store, rng);
    pool_fc_ = Linear<T>(name("cond.pool_fc"), cfg_.d_pool, d, store, rng);
    blocks_.resize(static_cast<size_t>(cfg_.n_layers));
    for (int b = 0; b < cfg_.n_layers; ++b) {
      auto& blk = blocks_[static_cast<size_t>(b)];
      const std::string bp = prefix + ".block" + std::to_string(b);
      static const char* stream_tag[3] = {"a", "s", "c"};
      for (int s = 0; s < 3; ++s) {
        const std::string sp = bp + "." + stream_tag[s];
        const int n_mod = s == 2 ? 2 : 4;  // text stream: joint attn + mlp only
        blk.mod[s] = Linear<T>(sp + ".mod", d, 3 * n_mod * d, store, rng, /*zero_init=*/true);
        blk.joint[s].q = Linear<T>(sp + ".attn.q", d, d, store, rng);
        blk.joint[s].k = Linear<T>(sp + ".attn.k", d, d, store, rng);
        blk.joint[s].v = Linear<T>(sp + ".attn.v", d, d, store, rng);
        blk.joint[s].o = Linear<T>(sp + ".attn.o", d, d, store, rng);
        blk.mlp_gate[s] = Linear<T>(sp + ".mlp.gate", d, hidden, store, rng);
        blk.mlp_up[s] = Linear<T>(sp + ".mlp.up", d, hidden, store, rng);
        blk.mlp_down[s] = Linear<T>(sp + ".mlp.down", hidden, d, store, rng);
        if (s < 2) {
          if (cfg_.n_distant > 0) {
            blk.cross_d[s].q = Linear<T>(sp + ".cross_d.q", d, d, store, rng);
            blk.cross_d[s].k = Linear<T>(sp + ".cross_d.k", d, d, store, rng);
            blk.cross_d[s].v = Linear<T>(sp + ".cross_d.v", d, d, store, rng);
            blk.cross_d[s].o = Linear<T>(sp + ".cross_d.o", d, d, store, rng);
          }
          if (cfg_.n_recent > 0) {
            blk.cross_r[s].q = Linear<T>(sp + ".cross_r.q", d, d, store, rng);
            blk.cross_r[s].k = Linear<T>(sp + ".cross_r.k", d, d, store, rng);
            blk.cross_r[s].v = Linear<T>(sp + ".cross_r.v", d, d, store, rng);
            blk.cross_r[s].o = Linear<T>(sp + ".cross_r.o", d, d, store, rng);
          }
        }
      }
    }
    final_mod_a_ = Linear<T>(name("final.mod_a"), d, 2 * d, store, rng, true);
    final_mod_s_ = Linear<T>(name("final.mod_s"), d, 2 * d, store, rng, true);
    head_a_ = Linear<T>(name("final.head_a"), d, cfg_.d_action, store, rng, true);
    head_s_ = Linear<T>(name("final.head_s"), d, cfg_.d_state, store, rng, true);
  }

  const ModelConfig& config() const { return cfg_; }

  PolicyOutput<T> forward(const PolicyInput<T>& in) const {
    const int64_t batch = in.noisy_actions.dim(0);
    const int64_t d = cfg_.d_model;
    const int64_t h_tok = cfg_.horizon;
    const int64_t c_tok = cfg_.n_txt_tokens;

    // global condition from flow time and pooled text embedding
    std::vector<double> tau_scaled(in.tau);
    for (auto& t : tau_scaled) t *= 1000.0;
    Tensor<T> e = add(tau_fc2_(silu(tau_fc1_(sinusoidal_embedding<T>(tau_scaled, d)))),
                      pool_fc_(in.c_pool));
    Tensor<T> cond = reshape(silu(e), {batch, 1, d});

    // token embeddings with positional encodings
    std::vector<double> chunk_pos(static_cast<size_t>(h_tok));
    for (int64_t i = 0; i < h_tok; ++i) chunk_pos[static_cast<size_t>(i)] = static_cast<double>(i);
    Tensor<T> pe_chunk = sinusoidal_embedding<T>(chunk_pos, d);
    std::vector<double> txt_pos(static_cast<size_t>(c_tok));
    for (int64_t i = 0; i < c_tok; ++i) txt_pos[static_cast<size_t>(i)] = static_cast<double>(i);
    Tensor<T> pe_txt = sinusoidal_embedding<T>(txt_pos, d);

    Tensor<T> xa = add(in_a_(in.noisy_actions), pe_chunk);
    Tensor<T> xs = add(in_s_(in.noisy_states), pe_chunk);
    Tensor<T> xc = add(in_c_(in.c_txt), pe_txt);

    // history tokens carry their true temporal offsets as positions
    Tensor<T> hist_rec, hist_dist;
    if (cfg_.n_recent > 0)
      hist_rec = add(in_h_(in.hist_recent),
                     reshape(sinusoidal_embedding<T>(in.recent_offsets, d),
                             {batch, cfg_.n_recent, d}));
    if (cfg_.n_distant > 0)
      hist_dist = add(in_h_(in.hist_distant),
                      reshape(sinusoidal_embedding<T>(in.distant_offsets, d),
                              {batch, cfg_.n_distant, d}));

    // additive key bias masking padded text tokens
    const int64_t t_total = h_tok + h_tok + c_tok;
    std::vector<T> bias_data(static_cast<size_t>(batch * t_total), T(0));
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t i = 0; i < c_tok; ++i)
        if (!in.text_mask[static_cast<size_t>(b * c_tok + i)])
          bias_data[static_cast<size_t>(b * t_total + 2 * h_tok + i)] = T(-1e30);
    Tensor<T> key_bias({batch, 1, 1, t_total}, std::move(bias_data));

    for (const auto& blk : blocks_) {
      // per-stream modulation sets
      auto mods_a = mod_sets(blk.mod[0], cond, 4, batch, d);
      auto mods_s = mod_sets(blk.mod[1], cond, 4, batch, d);
      auto mods_c = mod_sets(blk.mod[2], cond, 2, batch, d);

      // joint attention over [A; S; C] with QK-Norm
      {
        Tensor<T> ha = modulate(xa, mods_a[0], mods_a[1]);
        Tensor<T> hs = modulate(xs, mods_s[0], mods_s[1]);
        Tensor<T> hc = modulate(xc, mods_c[0], mods_c[1]);
        const T qk_eps = T(1e-8);  // small enough to keep RMS scale invariance tight
        Tensor<T> q = concat<T>({rms_norm(heads(blk.joint[0].q(ha), h_tok), qk_eps),
                                 rms_norm(heads(blk.joint[1].q(hs), h_tok), qk_eps),
                                 rms_norm(heads(blk.joint[2].q(hc), c_tok), qk_eps)},
                                2);
        Tensor<T> k = concat<T>({rms_norm(heads(blk.joint[0].k(ha), h_tok), qk_eps),
                                 rms_norm(heads(blk.joint[1].k(hs), h_tok), qk_eps),
                                 rms_norm(heads(blk.joint[2].k(hc), c_tok), qk_eps)},
                                2);
        Tensor<T> v = concat<T>({heads(blk.joint[0].v(ha), h_tok), heads(blk.joint[1].v(hs), h_tok),
                                 heads(blk.joint[2].v(hc), c_tok)},
                                2);
        Tensor<T> out = merge_heads(scaled_dot_attention(q, k, v, &key_bias), t_total);
        auto parts = split(out, 1, {h_tok, h_tok, c_tok});
        xa = add(xa, mul(mods_a[2], blk.joint[0].o(parts[0])));
        xs = add(xs, mul(mods_s[2], blk.joint[1].o(parts[1])));
        xc = add(xc, mul(mods_c[2], blk.joint[2].o(parts[2])));
      }

      // distant-history cross-attention, then recent
      if (cfg_.n_distant > 0) {
        xa = cross_attend(xa, hist_dist, blk.cross_d[0], mods_a[3], mods_a[4], mods_a[5], h_tok,
                          cfg_.n_distant);
        xs = cross_attend(xs, hist_dist, blk.cross_d[1], mods_s[3], mods_s[4], mods_s[5], h_tok,
                          cfg_.n_distant);
      }
      if (cfg_.n_recent > 0) {
        xa = cross_attend(xa, hist_rec, blk.cross_r[0], mods_a[6], mods_a[7], mods_a[8], h_tok,
                          cfg_.n_recent);
        xs = cross_attend(xs, hist_rec, blk.cross_r[1], mods_s[6], mods_s[7], mods_s[8], h_tok,
                          cfg_.n_recent);
      }

      // gated MLPs
      xa = mlp(xa, blk, 0, mods_a[9], mods_a[10], mods_a[11]);
      xs = mlp(xs, blk, 1, mods_s[9], mods_s[10], mods_s[11]);
      xc = mlp(xc, blk, 2, mods_c[3], mods_c[4], mods_c[5]);
    }

    // final modulated projections; text tokens carry no velocity head
    PolicyOutput<T> out;
    {
      auto fm_a = mod_sets(final_mod_a_, cond, 1, batch, d, /*with_gate=*/false);
      auto fm_s = mod_sets(final_mod_s_, cond, 1, batch, d, /*with_gate=*/false);
      out.velocity_actions = head_a_(modulate(xa, fm_a[0], fm_a[1]));
      out.velocity_states = head_s_(modulate(xs, fm_s[0], fm_s[1]));
    }
    return out;
  }

  // analytic parameter count of this architecture for an arbitrary config
  static int64_t parameter_count(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t hidden = static_cast<int64_t>(cfg.mlp_ratio) * d;
    auto linear = [](int64_t in, int64_t out) { return in * out + out; };
    int64_t n = 0;
    n += linear(cfg.d_action, d) + linear(cfg.d_state, d) + linear(cfg.d_txt, d) +
         linear(cfg.d_state, d);
    n += linear(d, d) * 2 + linear(cfg.d_pool, d);
    int64_t per_block = 0;
    per_block += linear(d, 12 * d) * 2 + linear(d, 6 * d);  // modulation heads
    per_block += 3 * 4 * linear(d, d);                      // joint attention projections
    if (cfg.n_distant > 0) per_block += 2 * 4 * linear(d, d);
    if (cfg.n_recent > 0) per_block += 2 * 4 * linear(d, d);
    per_block += 3 * (2 * linear(d, hidden) + linear(hidden, d));  // gated MLPs
    n += per_block * cfg.n_layers;
    n += linear(d, 2 * d) * 2 + linear(d, cfg.d_action) + linear(d, cfg.d_state);
    return n;
  }

 private:
  struct StreamAttn {
    Linear<T> q, k, v, o;
  };
  struct Block {
    Linear<T> mod[3];
    StreamAttn joint[3];
    StreamAttn cross_d[2];
    StreamAttn cross_r[2];
    Linear<T> mlp_gate[3], mlp_up[3], mlp_down[3];
  };

  // [B, T, d] -> [B, heads, T, d_head] and back
  Tensor<T> heads(const Tensor<T>& x, int64_t t_len) const {
    return permute(reshape(x, {x.dim(0), t_len, cfg_.n_heads, cfg_.d_head}), {0, 2, 1, 3});
  }
  Tensor<T> merge_heads(const Tensor<T>& x, int64_t t_len) const {
    return reshape(permute(x, {0, 2, 1, 3}), {x.dim(0), t_len, cfg_.d_model});
  }

  static Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
    return add(mul(layer_norm(x), add_scalar(scale, T(1))), shift);
  }

  // n_sublayers sets of (scale, shift, gate) shaped [B, 1, d]; the final
  // projection uses (scale, shift) only.
  static std::vector<Tensor<T>> mod_sets(const Linear<T>& head, const Tensor<T>& cond,
                                         int n_sublayers, int64_t batch, int64_t d,
                                         bool with_gate = true) {
    const int per = with_gate ? 3 : 2;
    Tensor<T> all = head(cond);  // [B, 1, per*n*d]
    std::vector<int64_t> sizes(static_cast<size_t>(per * n_sublayers), d);
    auto parts = split(all, 2, sizes);
    (void)batch;
    return parts;
  }

  Tensor<T> cross_attend(const Tensor<T>& x, const Tensor<T>& hist, const StreamAttn& attn,
                         const Tensor<T>& scale, const Tensor<T>& shift, const Tensor<T>& gate,
                         int64_t t_q, int64_t t_kv) const {
    Tensor<T> hq = modulate(x, scale, shift);
    Tensor<T> q = heads(attn.q(hq), t_q);
    Tensor<T> k = heads(attn.k(hist), t_kv);
    Tensor<T> v = heads(attn.v(hist), t_kv);
    Tensor<T> out = merge_heads(scaled_dot_attention(q, k, v), t_q);
    return add(x, mul(gate, attn.o(out)));
  }

  Tensor<T> mlp(const Tensor<T>& x, const Block& blk, int stream, const Tensor<T>& scale,
                const Tensor<T>& shift, const Tensor<T>& gate) const {
    Tensor<T> h = modulate(x, scale, shift);
    Tensor<T> inner = mul(gelu(blk.mlp_gate[stream](h)), blk.mlp_up[stream](h));
    return add(x, mul(gate, blk.mlp_down[stream](inner)));
  }

  ModelConfig cfg_;
  Linear<T> in_a_, in_s_, in_c_, in_h_;
  Linear<T> tau_fc1_, tau_fc2_, pool_fc_;
  std::vector<Block> blocks_;
  Linear<T> final_mod_a_, final_mod_s_;
  Linear<T> head_a_, head_s_;
};

}  // namespace chainflow
