#pragma once

// Two-tower state-text contrastive model: a transformer state encoder with a
// learnable query token against a linear projection of cached pooled text
// embeddings, trained with symmetric InfoNCE and frozen afterwards for reward
// computation and evaluation.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/model.hpp"
#include "chainflow/nn.hpp"
#include "chainflow/serialize.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow {

struct AlignerConfig {
  int d_z = 32;          // shared latent dimension
  int n_layers = 2;
  int hidden = 64;
  int n_heads = 4;
  int ffn = 128;
  double dropout = 0.1;
  int max_len = 128;     // maximum encoded sequence length
  int window_len = 64;   // training slice length
  int window_stride = 16;
  int epochs = 100;
  int batch_size = 32;
  double lr = 1e-4;
  double lr_floor = 1e-7;
  double weight_decay = 1e-4;
  double temperature_init = 1.0 / 0.07;

  void validate() const {
    if (hidden % n_heads != 0)
      throw std::invalid_argument("AlignerConfig: hidden must be divisible by n_heads");
    if (d_z < 1 || n_layers < 1 || max_len < 1)
      throw std::invalid_argument("AlignerConfig: sizes must be positive");
  }
};

// Per-channel min-max map onto [-1, 1]; constant channels map to 0.
struct MinMaxNormalizer {
  std::vector<double> lo, hi;

  void fit(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw std::invalid_argument("MinMaxNormalizer: no data");
    lo = hi = rows[0];
    for (const auto& r : rows)
      for (size_t i = 0; i < r.size(); ++i) {
        lo[i] = std::min(lo[i], r[i]);
        hi[i] = std::max(hi[i], r[i]);
      }
  }
  std::vector<double> apply(const std::vector<double>& x) const {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
      const double span = hi[i] - lo[i];
      out[i] = span < 1e-12 ? 0.0 : 2.0 * (x[i] - lo[i]) / span - 1.0;
    }
    return out;
  }
};

// Inverted-dropout on a tensor; identity when not training.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0) return x;
  std::vector<T> mask(static_cast<size_t>(x.numel()));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

// Rows scaled to unit L2 norm.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  Tensor<T> norm = sqrt_op(add_scalar(sum_axis(square(x), -1, /*keepdim=*/true), T(1e-12)));
  return div(x, norm);
}

// S_ij = gamma * <z_s_i, z_t_j> for unit embeddings.
template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& z_s, const Tensor<T>& z_t, const Tensor<T>& gamma) {
  return mul(matmul(z_s, transpose(z_t)), gamma);
}

// Symmetric InfoNCE with identity pairing: 1/2 [CE(S) + CE(S^T)] where each
// row's target is its own index.
template <typename T>
Tensor<T> infonce_loss(const Tensor<T>& s) {
  const int64_t b = s.dim(0);
  if (s.dim(1) != b) op_error("infonce_loss", "similarity matrix must be square, got " +
                                                  shape_str(s.shape()));
  auto ce_rows = [&](const Tensor<T>& m) {
    Tensor<T> p = softmax(m);
    std::vector<int64_t> diag_idx(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) diag_idx[static_cast<size_t>(i)] = i * b + i;
    Tensor<T> flat = reshape(p, {b * b, 1});
    Tensor<T> diag = gather_rows(flat, diag_idx);
    return neg(mean_all(log_op(diag)));
  };
  return mul_scalar(add(ce_rows(s), ce_rows(transpose(s))), T(0.5));
}

template <typename T>
class Aligner {
 public:
  Aligner() = default;

  // `pool_table` caches the pooled text embedding of every instruction id.
  Aligner(const AlignerConfig& cfg, int d_state, int d_pool,
          const std::vector<std::vector<double>>& pool_table, MinMaxNormalizer normalizer,
          uint64_t init_seed)
      : cfg_(cfg), d_state_(d_state), d_pool_(d_pool), normalizer_(std::move(normalizer)) {
    cfg_.validate();
    Rng rng(init_seed);
    pool_table_ = stack_rows_const(pool_table);
    lift_ = Linear<T>("aligner.lift", d_state_, cfg_.hidden, store_, rng);
    query_ = store_.add_randn("aligner.query", {1, 1, cfg_.hidden}, rng, 0.02);
    blocks_.resize(static_cast<size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      auto& blk = blocks_[static_cast<size_t>(l)];
      const std::string bp = "aligner.block" + std::to_string(l);
      blk.ln1_w = store_.add(bp + ".ln1.weight", Tensor<T>::full({cfg_.hidden}, T(1)));
      blk.ln1_b = store_.add_zeros(bp + ".ln1.bias", {cfg_.hidden});
      blk.attn_q = Linear<T>(bp + ".attn.q", cfg_.hidden, cfg_.hidden, store_, rng);
      blk.attn_k = Linear<T>(bp + ".attn.k", cfg_.hidden, cfg_.hidden, store_, rng);
      blk.attn_v = Linear<T>(bp + ".attn.v", cfg_.hidden, cfg_.hidden, store_, rng);
      blk.attn_o = Linear<T>(bp + ".attn.o", cfg_.hidden, cfg_.hidden, store_, rng);
      blk.ln2_w = store_.add(bp + ".ln2.weight", Tensor<T>::full({cfg_.hidden}, T(1)));
      blk.ln2_b = store_.add_zeros(bp + ".ln2.bias", {cfg_.hidden});
      blk.fc1 = Linear<T>(bp + ".fc1", cfg_.hidden, cfg_.ffn, store_, rng);
      blk.fc2 = Linear<T>(bp + ".fc2", cfg_.ffn, cfg_.hidden, store_, rng);
    }
    out_proj_ = Linear<T>("aligner.out_proj", cfg_.hidden, cfg_.d_z, store_, rng);
    text_proj_ = Linear<T>("aligner.text_proj", d_pool_, cfg_.d_z, store_, rng);
    log_temp_ = store_.add("aligner.log_temperature",
                           Tensor<T>::scalar(static_cast<T>(std::log(cfg_.temperature_init))));
  }

  // Encodes same-length state sequences into unit embeddings [B, d_z].
  // Sequences longer than max_len are subsampled with a uniform stride.
  Tensor<T> encode_state_batch(const std::vector<std::vector<std::vector<double>>>& seqs,
                               bool training = false, Rng* rng = nullptr) const {
    if (seqs.empty() || seqs[0].empty())
      throw std::invalid_argument("encode_state_batch: empty sequence");
    const int64_t batch = static_cast<int64_t>(seqs.size());
    std::vector<std::vector<std::vector<double>>> prepared;
    for (const auto& s : seqs) {
      if (s.empty()) throw std::invalid_argument("encode_state_batch: empty sequence");
      if (s.size() != seqs[0].size())
        throw std::invalid_argument("encode_state_batch: all sequences must share one length");
      std::vector<std::vector<double>> rows;
      const auto idx = subsample_indices(static_cast<int>(s.size()));
      for (int i : idx) rows.push_back(normalizer_.apply(s[static_cast<size_t>(i)]));
      prepared.push_back(std::move(rows));
    }
    const int64_t t_len = static_cast<int64_t>(prepared[0].size());
    Tensor<T> x = lift_(stack_batches<T>(prepared));  // [B, T, hidden]
    std::vector<double> pos(static_cast<size_t>(t_len));
    for (int64_t i = 0; i < t_len; ++i) pos[static_cast<size_t>(i)] = static_cast<double>(i);
    x = add(x, sinusoidal_embedding<T>(pos, cfg_.hidden));
    // prepend the learnable query token
    Tensor<T> q_rep = query_;
    std::vector<Tensor<T>> q_copies(static_cast<size_t>(batch), q_rep);
    Tensor<T> tokens = concat<T>({concat(q_copies, 0), x}, 1);  // [B, 1+T, hidden]
    const int64_t tt = t_len + 1;
    Rng dummy(0);
    Rng& dr = rng ? *rng : dummy;
    for (const auto& blk : blocks_) {
      Tensor<T> h = affine_ln(tokens, blk.ln1_w, blk.ln1_b);
      Tensor<T> q = heads(blk.attn_q(h), tt);
      Tensor<T> k = heads(blk.attn_k(h), tt);
      Tensor<T> v = heads(blk.attn_v(h), tt);
      Tensor<T> att = merge_heads(scaled_dot_attention(q, k, v), tt);
      tokens = add(tokens, dropout(blk.attn_o(att), cfg_.dropout, training, dr));
      Tensor<T> h2 = affine_ln(tokens, blk.ln2_w, blk.ln2_b);
      Tensor<T> f = blk.fc2(dropout(gelu(blk.fc1(h2)), cfg_.dropout, training, dr));
      tokens = add(tokens, dropout(f, cfg_.dropout, training, dr));
    }
    auto parts = split(tokens, 1, {1, t_len});
    Tensor<T> pooled = reshape(parts[0], {batch, cfg_.hidden});
    return l2_normalize_rows(out_proj_(pooled));
  }

  // Unit text embeddings for a list of instruction ids.
  Tensor<T> embed_text_ids(const std::vector<int>& ids) const {
    std::vector<int64_t> rows(ids.begin(), ids.end());
    Tensor<T> pooled = gather_rows(pool_table_, rows);
    return l2_normalize_rows(text_proj_(pooled));
  }

  Tensor<T> temperature() const { return exp_op(log_temp_); }

  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  const AlignerConfig& config() const { return cfg_; }
  const MinMaxNormalizer& normalizer() const { return normalizer_; }
  int d_state() const { return d_state_; }
  int d_pool() const { return d_pool_; }
  int instruction_count() const { return static_cast<int>(pool_table_.dim(0)); }

  void save(const std::string& path, const std::string& config_hash, uint64_t seed,
            const std::string& code_version) const {
    Checkpoint ck;
    checkpoint_put_params(ck, store_, "param/");
    ck.put_tensor("pool_table", pool_table_);
    ck.put_array("norm/lo", {static_cast<int64_t>(normalizer_.lo.size())}, normalizer_.lo);
    ck.put_array("norm/hi", {static_cast<int64_t>(normalizer_.hi.size())}, normalizer_.hi);
    ck.put_int("cfg/d_z", cfg_.d_z);
    ck.put_int("cfg/n_layers", cfg_.n_layers);
    ck.put_int("cfg/hidden", cfg_.hidden);
    ck.put_int("cfg/n_heads", cfg_.n_heads);
    ck.put_int("cfg/ffn", cfg_.ffn);
    ck.put_real("cfg/dropout", cfg_.dropout);
    ck.put_int("cfg/max_len", cfg_.max_len);
    ck.put_int("cfg/window_len", cfg_.window_len);
    ck.put_int("cfg/d_state", d_state_);
    ck.put_int("cfg/d_pool", d_pool_);
    ck.put_str("stamp/config_hash", config_hash);
    ck.put_int("stamp/seed", static_cast<int64_t>(seed));
    ck.put_str("stamp/code_version", code_version);
    ck.save(path);
  }

  static Aligner load(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    AlignerConfig cfg;
    cfg.d_z = static_cast<int>(ck.integer("cfg/d_z"));
    cfg.n_layers = static_cast<int>(ck.integer("cfg/n_layers"));
    cfg.hidden = static_cast<int>(ck.integer("cfg/hidden"));
    cfg.n_heads = static_cast<int>(ck.integer("cfg/n_heads"));
    cfg.ffn = static_cast<int>(ck.integer("cfg/ffn"));
    cfg.dropout = ck.real("cfg/dropout");
    cfg.max_len = static_cast<int>(ck.integer("cfg/max_len"));
    cfg.window_len = static_cast<int>(ck.integer("cfg/window_len"));
    MinMaxNormalizer norm;
    norm.lo = ck.array("norm/lo").second;
    norm.hi = ck.array("norm/hi").second;
    const auto& [pool_shape, pool_data] = ck.array("pool_table");
    std::vector<std::vector<double>> pool_rows(static_cast<size_t>(pool_shape[0]));
    for (int64_t i = 0; i < pool_shape[0]; ++i)
      pool_rows[static_cast<size_t>(i)] =
          std::vector<double>(pool_data.begin() + i * pool_shape[1],
                              pool_data.begin() + (i + 1) * pool_shape[1]);
    Aligner a(cfg, static_cast<int>(ck.integer("cfg/d_state")),
              static_cast<int>(ck.integer("cfg/d_pool")), pool_rows, norm, /*init_seed=*/0);
    checkpoint_load_params(ck, a.store_, "param/");
    return a;
  }

 private:
  struct Block {
    Tensor<T> ln1_w, ln1_b, ln2_w, ln2_b;
    Linear<T> attn_q, attn_k, attn_v, attn_o;
    Linear<T> fc1, fc2;
  };

  static Tensor<T> stack_rows_const(const std::vector<std::vector<double>>& rows) {
    return stack_rows<T>(rows);
  }

  std::vector<int> subsample_indices(int t_len) const {
    std::vector<int> idx;
    if (t_len <= cfg_.max_len) {
      for (int i = 0; i < t_len; ++i) idx.push_back(i);
    } else {
      // uniform stride keeping the first and last frames
      for (int i = 0; i < cfg_.max_len; ++i)
        idx.push_back(static_cast<int>(static_cast<int64_t>(i) * (t_len - 1) / (cfg_.max_len - 1)));
    }
    return idx;
  }

  Tensor<T> affine_ln(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) const {
    return add(mul(layer_norm(x), w), b);
  }
  Tensor<T> heads(const Tensor<T>& x, int64_t t_len) const {
    const int64_t dh = cfg_.hidden / cfg_.n_heads;
    return permute(reshape(x, {x.dim(0), t_len, cfg_.n_heads, dh}), {0, 2, 1, 3});
  }
  Tensor<T> merge_heads(const Tensor<T>& x, int64_t t_len) const {
    return reshape(permute(x, {0, 2, 1, 3}), {x.dim(0), t_len, cfg_.hidden});
  }

  AlignerConfig cfg_;
  int d_state_ = 0;
  int d_pool_ = 0;
  MinMaxNormalizer normalizer_;
  Tensor<T> pool_table_;  // [M, d_pool], cached from the pretrained policy
  ParamStore<T> store_;
  Linear<T> lift_;
  Tensor<T> query_;
  std::vector<Block> blocks_;
  Linear<T> out_proj_;
  Linear<T> text_proj_;
  Tensor<T> log_temp_;
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct AlignerPair {
  std::vector<std::vector<double>> states;  // window_len x d_s
  int instruction_id = -1;
};

// Fixed-length state slices paired with their instruction.
inline std::vector<AlignerPair> make_aligner_pairs(const std::vector<TrackedTrajectory>& trajs,
                                                   int window_len, int stride) {
  std::vector<AlignerPair> pairs;
  for (const auto& tr : trajs) {
    const int t_len = static_cast<int>(tr.states.size());
    for (int start = 0; start + window_len <= t_len; start += stride) {
      AlignerPair p;
      p.instruction_id = tr.instruction_id;
      p.states.assign(tr.states.begin() + start, tr.states.begin() + start + window_len);
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

struct AlignerTrainReport {
  double first_epoch_loss = 0.0;
  double last_epoch_loss = 0.0;
};

template <typename T>
AlignerTrainReport train_aligner(Aligner<T>& aligner, const std::vector<AlignerPair>& pairs,
                                 uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("train_aligner: no pairs");
  const AlignerConfig& cfg = aligner.config();
  Rng rng = Rng(seed).fork("aligner");
  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  AdamW<T> opt(aligner.store(), oc);
  const int64_t steps_per_epoch =
      std::max<int64_t>(1, static_cast<int64_t>(pairs.size()) / cfg.batch_size);
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  AlignerTrainReport report;
  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t epoch_batches = 0;
    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<std::vector<std::vector<double>>> seqs;
      std::vector<int> ids;
      for (int i = 0; i < cfg.batch_size; ++i) {
        const auto& p = pairs[order[static_cast<size_t>((b * cfg.batch_size + i) % pairs.size())]];
        seqs.push_back(p.states);
        ids.push_back(p.instruction_id);
      }
      aligner.store().zero_grad();
      Tensor<T> z_s = aligner.encode_state_batch(seqs, /*training=*/true, &rng);
      Tensor<T> z_t = aligner.embed_text_ids(ids);
      Tensor<T> s = similarity_matrix(z_s, z_t, aligner.temperature());
      Tensor<T> loss = infonce_loss(s);
      backward(loss);
      opt.step(cosine_lr(step, cfg.lr, cfg.lr_floor, total_steps));
      epoch_loss += static_cast<double>(loss.item());
      ++epoch_batches;
      ++step;
    }
    epoch_loss /= static_cast<double>(epoch_batches);
    if (epoch == 0) report.first_epoch_loss = epoch_loss;
    report.last_epoch_loss = epoch_loss;
  }
  return report;
}

}  // namespace chainflow
