#pragma once

// Decoder-only transformer with an exposed per-layer key/value cache.
//
// Pre-layer-norm residual blocks, learned positional embeddings, tied
// embedding/output head, exact-erf GELU. The cache stores post-projection
// K/V per position as [P x d] row-major matrices whose columns are head
// blocks; incremental decoding attends over those entries AS GIVEN, so a
// caller may hand in perturbed values and gradients flow back into them.
// That is the hook the guidance loop drives.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "capsteer/checkpoint.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/ops.hpp"
#include "capsteer/param_io.hpp"
#include "capsteer/rng.hpp"
#include "capsteer/tensor.hpp"
#include "capsteer/vocab.hpp"

namespace capsteer {

struct LMConfig {
  int vocab_size = 0;
  int model_dim = 64;
  int heads = 4;
  int layers = 2;
  int ff_dim = 256;
  int max_len = 48;
  double ln_eps = 1e-5;

  void validate() const {
    if (vocab_size < Vocabulary::kNumSpecials) {
      throw ConfigError("lm: vocab_size must cover the specials");
    }
    if (model_dim < 1 || heads < 1 || model_dim % heads != 0) {
      throw ConfigError("lm: model_dim must be a positive multiple of heads");
    }
    if (layers < 1 || ff_dim < 1 || max_len < 2) {
      throw ConfigError("lm: layers, ff_dim, max_len must be positive");
    }
    if (ln_eps <= 0.0) throw ConfigError("lm: ln_eps must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"model_dim", model_dim},
            {"heads", heads},           {"layers", layers},
            {"ff_dim", ff_dim},         {"max_len", max_len},
            {"ln_eps", ln_eps}};
  }

  static LMConfig from_json(const nlohmann::json& j) {
    LMConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.layers = j.at("layers").get<int>();
    c.ff_dim = j.at("ff_dim").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.ln_eps = j.at("ln_eps").get<double>();
    return c;
  }
};

template <class S>
struct LMParams {
  LMConfig cfg;
  Tensor<S> tok_emb;  // [V x d], also the output head (tied)
  Tensor<S> pos_emb;  // [max_len x d]
  struct Layer {
    Tensor<S> wq, wk, wv, wo;              // [d x d]
    Tensor<S> ff1_w;                       // [d x ff]
    Tensor<S> ff1_b;                       // [1 x ff]
    Tensor<S> ff2_w;                       // [ff x d]
    Tensor<S> ff2_b;                       // [1 x d]
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;  // [1 x d]
  };
  std::vector<Layer> layers;
  Tensor<S> lnf_g, lnf_b;  // [1 x d]

  std::vector<std::pair<std::string, Tensor<S>>> named() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      const Layer& l = layers[i];
      out.emplace_back(p + "wq", l.wq);
      out.emplace_back(p + "wk", l.wk);
      out.emplace_back(p + "wv", l.wv);
      out.emplace_back(p + "wo", l.wo);
      out.emplace_back(p + "ff1_w", l.ff1_w);
      out.emplace_back(p + "ff1_b", l.ff1_b);
      out.emplace_back(p + "ff2_w", l.ff2_w);
      out.emplace_back(p + "ff2_b", l.ff2_b);
      out.emplace_back(p + "ln1_g", l.ln1_g);
      out.emplace_back(p + "ln1_b", l.ln1_b);
      out.emplace_back(p + "ln2_g", l.ln2_g);
      out.emplace_back(p + "ln2_b", l.ln2_b);
    }
    out.emplace_back("lnf_g", lnf_g);
    out.emplace_back("lnf_b", lnf_b);
    return out;
  }

  std::vector<Tensor<S>> all_params() const {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  LMParams clone() const {
    LMParams c;
    c.cfg = cfg;
    c.tok_emb = Tensor<S>::param(tok_emb.value());
    c.pos_emb = Tensor<S>::param(pos_emb.value());
    c.layers.reserve(layers.size());
    for (const Layer& l : layers) {
      Layer cl;
      cl.wq = Tensor<S>::param(l.wq.value());
      cl.wk = Tensor<S>::param(l.wk.value());
      cl.wv = Tensor<S>::param(l.wv.value());
      cl.wo = Tensor<S>::param(l.wo.value());
      cl.ff1_w = Tensor<S>::param(l.ff1_w.value());
      cl.ff1_b = Tensor<S>::param(l.ff1_b.value());
      cl.ff2_w = Tensor<S>::param(l.ff2_w.value());
      cl.ff2_b = Tensor<S>::param(l.ff2_b.value());
      cl.ln1_g = Tensor<S>::param(l.ln1_g.value());
      cl.ln1_b = Tensor<S>::param(l.ln1_b.value());
      cl.ln2_g = Tensor<S>::param(l.ln2_g.value());
      cl.ln2_b = Tensor<S>::param(l.ln2_b.value());
      c.layers.push_back(std::move(cl));
    }
    c.lnf_g = Tensor<S>::param(lnf_g.value());
    c.lnf_b = Tensor<S>::param(lnf_b.value());
    return c;
  }
};

template <class S>
LMParams<S> init_lm_params(const LMConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.model_dim;
  auto normal_mat = [&rng](Eigen::Index r, Eigen::Index c, double std) {
    Mat<S> m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) {
        m(i, j) = static_cast<S>(rng.normal() * std);
      }
    }
    return m;
  };
  LMParams<S> p;
  p.cfg = cfg;
  p.tok_emb = Tensor<S>::param(normal_mat(cfg.vocab_size, d, 0.02));
  p.pos_emb = Tensor<S>::param(normal_mat(cfg.max_len, d, 0.02));
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& l : p.layers) {
    l.wq = Tensor<S>::param(normal_mat(d, d, 0.02));
    l.wk = Tensor<S>::param(normal_mat(d, d, 0.02));
    l.wv = Tensor<S>::param(normal_mat(d, d, 0.02));
    l.wo = Tensor<S>::param(normal_mat(d, d, 0.02));
    l.ff1_w = Tensor<S>::param(normal_mat(d, cfg.ff_dim, 0.02));
    l.ff1_b = Tensor<S>::param(Mat<S>::Zero(1, cfg.ff_dim));
    l.ff2_w = Tensor<S>::param(normal_mat(cfg.ff_dim, d, 0.02));
    l.ff2_b = Tensor<S>::param(Mat<S>::Zero(1, d));
    l.ln1_g = Tensor<S>::param(Mat<S>::Ones(1, d));
    l.ln1_b = Tensor<S>::param(Mat<S>::Zero(1, d));
    l.ln2_g = Tensor<S>::param(Mat<S>::Ones(1, d));
    l.ln2_b = Tensor<S>::param(Mat<S>::Zero(1, d));
  }
  p.lnf_g = Tensor<S>::param(Mat<S>::Ones(1, d));
  p.lnf_b = Tensor<S>::param(Mat<S>::Zero(1, d));
  return p;
}

// Per-layer key/value entries for all fully processed positions. Every
// layer always holds the same position count.
template <class S>
struct ContextCache {
  std::vector<Mat<S>> k, v;  // per layer, [P x d]

  static ContextCache empty(const LMConfig& cfg) {
    ContextCache c;
    c.k.resize(static_cast<std::size_t>(cfg.layers));
    c.v.resize(static_cast<std::size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
      c.k[static_cast<std::size_t>(l)] = Mat<S>(0, cfg.model_dim);
      c.v[static_cast<std::size_t>(l)] = Mat<S>(0, cfg.model_dim);
    }
    return c;
  }

  Eigen::Index positions() const { return k.empty() ? 0 : k[0].rows(); }

  void append_rows(const std::vector<Mat<S>>& k_rows,
                   const std::vector<Mat<S>>& v_rows) {
    for (std::size_t l = 0; l < k.size(); ++l) {
      k[l].conservativeResize(k[l].rows() + 1, Eigen::NoChange);
      k[l].row(k[l].rows() - 1) = k_rows[l].row(0);
      v[l].conservativeResize(v[l].rows() + 1, Eigen::NoChange);
      v[l].row(v[l].rows() - 1) = v_rows[l].row(0);
    }
  }
};

// Effective per-layer context handed to one decode step. Tensors may be
// graph nodes (cache constant + optimizable delta); undefined tensors
// mean an empty cache.
template <class S>
struct StepTensors {
  std::vector<Tensor<S>> k, v;
  Eigen::Index positions = 0;

  static StepTensors from_cache(const ContextCache<S>& c) {
    StepTensors s;
    s.positions = c.positions();
    s.k.resize(c.k.size());
    s.v.resize(c.v.size());
    if (s.positions > 0) {
      for (std::size_t l = 0; l < c.k.size(); ++l) {
        s.k[l] = Tensor<S>::constant(c.k[l]);
        s.v[l] = Tensor<S>::constant(c.v[l]);
      }
    }
    return s;
  }
};

template <class S>
struct StepResult {
  Tensor<S> logits;                       // [1 x V]
  std::vector<Tensor<S>> k_rows, v_rows;  // per layer, [1 x d]
};

// One decode step: runs `token` (sitting at position ctx.positions)
// against the provided context entries and returns next-token logits plus
// the token's fresh per-layer K/V rows. Differentiable end to end,
// including through ctx.k / ctx.v.
template <class S>
StepResult<S> lm_step(const LMParams<S>& p, int token,
                      const StepTensors<S>& ctx) {
  const LMConfig& cfg = p.cfg;
  if (token < 0 || token >= cfg.vocab_size) {
    throw ShapeError("lm_step: token id out of range");
  }
  if (ctx.positions + 1 > cfg.max_len) {
    throw CapacityError("lm_step: cache full at " +
                        std::to_string(ctx.positions) + " positions (max " +
                        std::to_string(cfg.max_len) + ")");
  }
  StepResult<S> out;
  Tensor<S> x = add(embedding_rows(p.tok_emb, {token}),
                    slice_rows(p.pos_emb, ctx.positions, 1));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lay = p.layers[l];
    Tensor<S> h = layer_norm_rows(x, lay.ln1_g, lay.ln1_b, cfg.ln_eps);
    Tensor<S> q = matmul(h, lay.wq);
    Tensor<S> k_row = matmul(h, lay.wk);
    Tensor<S> v_row = matmul(h, lay.wv);
    Tensor<S> k_all = ctx.positions > 0 ? concat_rows(ctx.k[l], k_row) : k_row;
    Tensor<S> v_all = ctx.positions > 0 ? concat_rows(ctx.v[l], v_row) : v_row;
    Tensor<S> attn = attend_step(q, k_all, v_all, cfg.heads);
    x = add(x, matmul(attn, lay.wo));
    Tensor<S> h2 = layer_norm_rows(x, lay.ln2_g, lay.ln2_b, cfg.ln_eps);
    Tensor<S> ff =
        matmul(gelu(add_rowvec(matmul(h2, lay.ff1_w), lay.ff1_b)), lay.ff2_w);
    x = add(x, add_rowvec(ff, lay.ff2_b));
    out.k_rows.push_back(k_row);
    out.v_rows.push_back(v_row);
  }
  Tensor<S> xf = layer_norm_rows(x, p.lnf_g, p.lnf_b, cfg.ln_eps);
  out.logits = matmul(xf, transpose(p.tok_emb));
  return out;
}

// Incremental inference step: appends the token's K/V to the cache and
// returns next-token logits. No graph is recorded.
template <class S>
Mat<S> forward_step(const LMParams<S>& p, int token, ContextCache<S>& cache) {
  NoGradGuard ng;
  StepResult<S> r = lm_step(p, token, StepTensors<S>::from_cache(cache));
  std::vector<Mat<S>> k_rows, v_rows;
  k_rows.reserve(r.k_rows.size());
  v_rows.reserve(r.v_rows.size());
  for (std::size_t l = 0; l < r.k_rows.size(); ++l) {
    k_rows.push_back(r.k_rows[l].value());
    v_rows.push_back(r.v_rows[l].value());
  }
  cache.append_rows(k_rows, v_rows);
  return r.logits.value();
}

template <class S>
struct BatchResult {
  Tensor<S> logits;  // [sum of lengths x V]
  std::vector<Eigen::Index> offsets;
};

// Batched teacher-forcing forward over a ragged batch of sequences.
template <class S>
BatchResult<S> forward_batch(const LMParams<S>& p,
                             const std::vector<std::vector<int>>& seqs) {
  const LMConfig& cfg = p.cfg;
  if (seqs.empty()) throw ShapeError("forward_batch: empty batch");
  std::vector<int> flat_ids, flat_pos;
  std::vector<Eigen::Index> offsets{0};
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& s = seqs[b];
    if (s.empty()) throw ShapeError("forward_batch: empty sequence");
    if (static_cast<int>(s.size()) > cfg.max_len) {
      throw ConfigError("forward_batch: sequence " + std::to_string(b) +
                        " has " + std::to_string(s.size()) +
                        " tokens, max length is " + std::to_string(cfg.max_len));
    }
    for (std::size_t t = 0; t < s.size(); ++t) {
      flat_ids.push_back(s[t]);
      flat_pos.push_back(static_cast<int>(t));
    }
    offsets.push_back(static_cast<Eigen::Index>(flat_ids.size()));
  }

  Tensor<S> x = add(embedding_rows(p.tok_emb, flat_ids),
                    embedding_rows(p.pos_emb, flat_pos));
  for (const auto& lay : p.layers) {
    Tensor<S> h = layer_norm_rows(x, lay.ln1_g, lay.ln1_b, cfg.ln_eps);
    Tensor<S> q = matmul(h, lay.wq);
    Tensor<S> k = matmul(h, lay.wk);
    Tensor<S> v = matmul(h, lay.wv);
    Tensor<S> a = causal_self_attention_ragged(q, k, v, offsets, cfg.heads);
    x = add(x, matmul(a, lay.wo));
    Tensor<S> h2 = layer_norm_rows(x, lay.ln2_g, lay.ln2_b, cfg.ln_eps);
    Tensor<S> ff =
        matmul(gelu(add_rowvec(matmul(h2, lay.ff1_w), lay.ff1_b)), lay.ff2_w);
    x = add(x, add_rowvec(ff, lay.ff2_b));
  }
  Tensor<S> xf = layer_norm_rows(x, p.lnf_g, p.lnf_b, cfg.ln_eps);
  BatchResult<S> out;
  out.logits = matmul(xf, transpose(p.tok_emb));
  out.offsets = std::move(offsets);
  return out;
}

// Next-token logits at every position of one sequence: [T x V].
template <class S>
Mat<S> forward_full(const LMParams<S>& p, const std::vector<int>& ids) {
  NoGradGuard ng;
  return forward_batch(p, std::vector<std::vector<int>>{ids}).logits.value();
}

template <class S>
std::vector<NamedTensor> to_named_tensors(const LMParams<S>& p) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : p.named()) {
    NamedTensor nt;
    nt.name = name;
    nt.dims = {static_cast<std::uint64_t>(t.rows()),
               static_cast<std::uint64_t>(t.cols())};
    nt.data.reserve(static_cast<std::size_t>(t.rows() * t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        nt.data.push_back(static_cast<float>(t.value()(r, c)));
      }
    }
    out.push_back(std::move(nt));
  }
  return out;
}

template <class S>
std::uint64_t lm_fingerprint(const LMParams<S>& p) {
  return fingerprint(to_named_tensors(p));
}

template <class S>
void save_lm_checkpoint(const std::string& path, const LMParams<S>& p,
                        const Vocabulary& vocab) {
  nlohmann::json header = {{"kind", "lm"},
                           {"config", p.cfg.to_json()},
                           {"vocab", vocab.tokens()}};
  write_checkpoint(path, header, to_named_tensors(p));
}

template <class S>
std::pair<LMParams<S>, Vocabulary> load_lm_checkpoint(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", "") != "lm") {
    throw FormatError(path + ": not an LM checkpoint");
  }
  LMConfig cfg = LMConfig::from_json(ck.header.at("config"));
  cfg.validate();
  Vocabulary vocab = Vocabulary::from_tokens(
      ck.header.at("vocab").get<std::vector<std::string>>());
  if (vocab.size() != cfg.vocab_size) {
    throw FormatError(path + ": embedded vocabulary size disagrees with config");
  }

  LMParams<S> p;
  p.cfg = cfg;
  auto get = [&](const std::string& name) {
    return detail::param_from_named<S>(detail::find_named(ck.tensors, name, path),
                                       path);
  };
  p.tok_emb = get("tok_emb");
  p.pos_emb = get("pos_emb");
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string pre = "layers." + std::to_string(i) + ".";
    auto& l = p.layers[static_cast<std::size_t>(i)];
    l.wq = get(pre + "wq");
    l.wk = get(pre + "wk");
    l.wv = get(pre + "wv");
    l.wo = get(pre + "wo");
    l.ff1_w = get(pre + "ff1_w");
    l.ff1_b = get(pre + "ff1_b");
    l.ff2_w = get(pre + "ff2_w");
    l.ff2_b = get(pre + "ff2_b");
    l.ln1_g = get(pre + "ln1_g");
    l.ln1_b = get(pre + "ln1_b");
    l.ln2_g = get(pre + "ln2_g");
    l.ln2_b = get(pre + "ln2_b");
  }
  p.lnf_g = get("lnf_g");
  p.lnf_b = get("lnf_b");

  for (const auto& [name, t] : p.named()) {
    if (name == "tok_emb" &&
        (t.rows() != cfg.vocab_size || t.cols() != cfg.model_dim)) {
      throw FormatError(path + ": tok_emb shape disagrees with config");
    }
  }
  return {std::move(p), std::move(vocab)};
}

}  // namespace capsteer
