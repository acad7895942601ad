#pragma once

// Templated instruction grammar "<verb> <body_part> <speed>" and the
// trainable token-embedding encoder producing the pooled condition c_pool and
// token features c_txt. The empty string maps to a dedicated learned null
// embedding used for classifier-free guidance.

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/tensor.hpp"

namespace chainflow {

struct Vocabulary {
  std::vector<std::string> verbs = {"hold", "wave", "bend", "swing"};
  std::vector<std::string> body_parts = {"base", "tip"};
  std::vector<std::string> speeds = {"slow", "fast"};

  int size() const {
    return static_cast<int>(verbs.size() * body_parts.size() * speeds.size());
  }
  // Distinct words across all slots plus the null token; rows of the
  // embedding table.
  int token_count() const {
    return static_cast<int>(verbs.size() + body_parts.size() + speeds.size()) + 1;
  }
  int null_token() const { return token_count() - 1; }

  std::string instruction_text(int id) const {
    const int ns = static_cast<int>(speeds.size());
    const int nb = static_cast<int>(body_parts.size());
    if (id < 0 || id >= size()) throw std::invalid_argument("instruction id out of range");
    const int v = id / (nb * ns);
    const int b = (id / ns) % nb;
    const int s = id % ns;
    return verbs[static_cast<size_t>(v)] + " " + body_parts[static_cast<size_t>(b)] + " " +
           speeds[static_cast<size_t>(s)];
  }
};

struct ParsedInstruction {
  int verb = 0;
  int body_part = 0;
  int speed = 0;
};

inline int find_word(const std::vector<std::string>& words, const std::string& w) {
  for (size_t i = 0; i < words.size(); ++i)
    if (words[i] == w) return static_cast<int>(i);
  return -1;
}

inline std::string slot_list(const std::vector<std::string>& words) {
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) out += (i ? "|" : "") + words[i];
  return out;
}

inline ParsedInstruction parse_instruction(const Vocabulary& vocab, const std::string& text) {
  std::istringstream in(text);
  std::string v, b, s, extra;
  in >> v >> b >> s;
  const bool trailing = static_cast<bool>(in >> extra);
  ParsedInstruction p;
  p.verb = find_word(vocab.verbs, v);
  p.body_part = find_word(vocab.body_parts, b);
  p.speed = find_word(vocab.speeds, s);
  if (trailing || p.verb < 0 || p.body_part < 0 || p.speed < 0)
    throw std::invalid_argument(
        "cannot parse instruction \"" + text + "\"; expected \"<verb> <body_part> <speed>\" with "
        "verb in {" + slot_list(vocab.verbs) + "}, body_part in {" + slot_list(vocab.body_parts) +
        "}, speed in {" + slot_list(vocab.speeds) + "}");
  return p;
}

inline int instruction_id(const Vocabulary& vocab, const ParsedInstruction& p) {
  const int ns = static_cast<int>(vocab.speeds.size());
  const int nb = static_cast<int>(vocab.body_parts.size());
  return (p.verb * nb + p.body_part) * ns + p.speed;
}

// Condition for one instruction: token features plus pooled embedding. The
// padding mask marks valid tokens (all off for the null condition).
template <typename T>
struct InstructionCondition {
  Tensor<T> c_txt;                 // [n_tokens, d_txt]
  Tensor<T> c_pool;                // [d_pool]
  std::vector<uint8_t> token_mask; // 1 = valid token
};

// Embedding-table text encoder. Tokens are the three template slots; c_pool
// is the token mean through a trainable affine map.
template <typename T>
class InstructionEncoder {
 public:
  InstructionEncoder() = default;
  InstructionEncoder(const Vocabulary& vocab, int d_txt, int d_pool, ParamStore<T>& store,
                     Rng& rng)
      : vocab_(vocab), d_txt_(d_txt), d_pool_(d_pool) {
    table_ = store.add("text_enc.token_table",
                       Tensor<T>::randn({vocab.token_count(), d_txt}, rng, 0.02));
    pool_w_ = store.add_xavier("text_enc.pool.weight", d_txt, d_pool, rng);
    pool_b_ = store.add_zeros("text_enc.pool.bias", {d_pool});
  }

  static constexpr int kTokens = 3;

  InstructionCondition<T> encode(const std::string& text) const {
    InstructionCondition<T> out;
    std::vector<int64_t> token_ids;
    if (text.empty()) {
      token_ids.assign(kTokens, vocab_.null_token());
      out.token_mask.assign(kTokens, 0);
    } else {
      const ParsedInstruction p = parse_instruction(vocab_, text);
      token_ids = {p.verb,
                   static_cast<int64_t>(vocab_.verbs.size()) + p.body_part,
                   static_cast<int64_t>(vocab_.verbs.size() + vocab_.body_parts.size()) + p.speed};
      out.token_mask.assign(kTokens, 1);
    }
    out.c_txt = gather_rows(table_, token_ids);
    Tensor<T> pooled = mean_axis(out.c_txt, 0);  // [d_txt]
    out.c_pool = add(matmul(reshape(pooled, {1, d_txt_}), pool_w_), pool_b_);
    out.c_pool = reshape(out.c_pool, {d_pool_});
    return out;
  }

  // One gather for the whole batch: c_txt [B, 3, d_txt], c_pool [B, d_pool],
  // token_mask flattened row-major.
  struct BatchCondition {
    Tensor<T> c_txt;
    Tensor<T> c_pool;
    std::vector<uint8_t> token_mask;
  };

  BatchCondition encode_batch(const std::vector<std::string>& texts) const {
    const int64_t batch = static_cast<int64_t>(texts.size());
    std::vector<int64_t> ids;
    ids.reserve(static_cast<size_t>(batch * kTokens));
    BatchCondition out;
    out.token_mask.reserve(static_cast<size_t>(batch * kTokens));
    for (const auto& text : texts) {
      if (text.empty()) {
        for (int i = 0; i < kTokens; ++i) {
          ids.push_back(vocab_.null_token());
          out.token_mask.push_back(0);
        }
      } else {
        const ParsedInstruction p = parse_instruction(vocab_, text);
        ids.push_back(p.verb);
        ids.push_back(static_cast<int64_t>(vocab_.verbs.size()) + p.body_part);
        ids.push_back(static_cast<int64_t>(vocab_.verbs.size() + vocab_.body_parts.size()) +
                      p.speed);
        for (int i = 0; i < kTokens; ++i) out.token_mask.push_back(1);
      }
    }
    out.c_txt = reshape(gather_rows(table_, ids), {batch, kTokens, d_txt_});
    Tensor<T> pooled = mean_axis(out.c_txt, 1);  // [B, d_txt]
    out.c_pool = add(matmul(pooled, pool_w_), pool_b_);
    return out;
  }

  const Vocabulary& vocab() const { return vocab_; }
  int d_txt() const { return d_txt_; }
  int d_pool() const { return d_pool_; }

 private:
  Vocabulary vocab_;
  int d_txt_ = 0;
  int d_pool_ = 0;
  Tensor<T> table_;
  Tensor<T> pool_w_;
  Tensor<T> pool_b_;
};

}  // namespace chainflow
