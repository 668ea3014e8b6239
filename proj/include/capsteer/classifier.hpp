#pragma once

// Audibility classifier: token embeddings, mean pooling over the sequence,
// one hidden GELU layer, two output logits (class 1 = audible).
//
// Two input routes share every parameter. The hard route consumes token
// ids; the soft route consumes a row-stochastic matrix and pools expected
// embeddings. A one-hot soft input must match the hard route on the same
// ids, which is what lets the guidance loop differentiate the classifier
// score with respect to a predicted next-token distribution.

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

struct ClassifierConfig {
  int vocab_size = 0;
  int emb_dim = 32;
  int hidden_dim = 64;

  void validate() const {
    if (vocab_size < Vocabulary::kNumSpecials) {
      throw ConfigError("classifier: vocab_size must cover the specials");
    }
    if (emb_dim < 1 || hidden_dim < 1) {
      throw ConfigError("classifier: emb_dim and hidden_dim must be positive");
    }
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size},
            {"emb_dim", emb_dim},
            {"hidden_dim", hidden_dim}};
  }

  static ClassifierConfig from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.emb_dim = j.at("emb_dim").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    return c;
  }
};

template <class S>
struct ClassifierParams {
  ClassifierConfig cfg;
  Tensor<S> emb;     // [V x emb_dim]
  Tensor<S> w1, b1;  // [emb_dim x hidden], [1 x hidden]
  Tensor<S> w2, b2;  // [hidden x 2], [1 x 2]

  std::vector<std::pair<std::string, Tensor<S>>> named() const {
    return {{"emb", emb}, {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
  }

  std::vector<Tensor<S>> all_params() const {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  ClassifierParams clone() const {
    ClassifierParams c;
    c.cfg = cfg;
    c.emb = Tensor<S>::param(emb.value());
    c.w1 = Tensor<S>::param(w1.value());
    c.b1 = Tensor<S>::param(b1.value());
    c.w2 = Tensor<S>::param(w2.value());
    c.b2 = Tensor<S>::param(b2.value());
    return c;
  }
};

template <class S>
ClassifierParams<S> init_classifier_params(const ClassifierConfig& cfg,
                                           std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto normal_mat = [&rng](Eigen::Index r, Eigen::Index c, double std) {
    Mat<S> m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) {
        m(i, j) = static_cast<S>(rng.normal() * std);
      }
    }
    return m;
  };
  ClassifierParams<S> p;
  p.cfg = cfg;
  p.emb = Tensor<S>::param(normal_mat(cfg.vocab_size, cfg.emb_dim, 0.02));
  p.w1 = Tensor<S>::param(normal_mat(cfg.emb_dim, cfg.hidden_dim, 0.02));
  p.b1 = Tensor<S>::param(Mat<S>::Zero(1, cfg.hidden_dim));
  p.w2 = Tensor<S>::param(normal_mat(cfg.hidden_dim, 2, 0.02));
  p.b2 = Tensor<S>::param(Mat<S>::Zero(1, 2));
  return p;
}

// Segment-wise mean pooling: rows offsets[b]..offsets[b+1) of x average
// into output row b. Offsets must be strictly increasing (empty segments
// have no mean).
template <class S>
Tensor<S> segment_mean_rows(const Tensor<S>& x,
                            const std::vector<Eigen::Index>& offsets) {
  if (offsets.size() < 2 || offsets.front() != 0 ||
      offsets.back() != x.rows()) {
    throw ShapeError("segment_mean_rows: offsets must span all rows");
  }
  for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
    if (offsets[b + 1] <= offsets[b]) {
      throw ShapeError("segment_mean_rows: empty segment");
    }
  }
  const Eigen::Index n_seg = static_cast<Eigen::Index>(offsets.size()) - 1;
  Mat<S> out(n_seg, x.cols());
  for (Eigen::Index b = 0; b < n_seg; ++b) {
    const Eigen::Index lo = offsets[static_cast<std::size_t>(b)];
    const Eigen::Index len = offsets[static_cast<std::size_t>(b) + 1] - lo;
    Eigen::Matrix<double, 1, Eigen::Dynamic> acc =
        Eigen::Matrix<double, 1, Eigen::Dynamic>::Zero(1, x.cols());
    for (Eigen::Index r = 0; r < len; ++r) {
      acc += x.value().row(lo + r).template cast<double>();
    }
    out.row(b) = (acc / static_cast<double>(len)).template cast<S>();
  }
  auto offs = offsets;
  return make_op<S>(
      "segment_mean_rows", std::move(out), {x},
      [offs](TensorNode<S>& self) {
        const Mat<S>& g = self.grad;
        auto& xp = *self.parents[0];
        if (!xp.requires_grad) return;
        xp.ensure_grad();
        for (std::size_t b = 0; b + 1 < offs.size(); ++b) {
          const Eigen::Index lo = offs[b];
          const Eigen::Index len = offs[b + 1] - lo;
          const S inv = static_cast<S>(1.0 / static_cast<double>(len));
          for (Eigen::Index r = 0; r < len; ++r) {
            xp.grad.row(lo + r) +=
                g.row(static_cast<Eigen::Index>(b)) * inv;
          }
        }
      });
}

// Logits for one hard token-id sequence: [1 x 2].
template <class S>
Tensor<S> clf_logits_hard(const ClassifierParams<S>& p,
                          const std::vector<int>& ids) {
  if (ids.empty()) throw ShapeError("classifier: empty id sequence");
  Tensor<S> pooled = mean_rows(embedding_rows(p.emb, ids));
  Tensor<S> h = gelu(add_rowvec(matmul(pooled, p.w1), p.b1));
  return add_rowvec(matmul(h, p.w2), p.b2);
}

// Batched hard logits over a ragged batch: [B x 2].
template <class S>
Tensor<S> clf_logits_hard_batch(const ClassifierParams<S>& p,
                                const std::vector<std::vector<int>>& seqs) {
  if (seqs.empty()) throw ShapeError("classifier: empty batch");
  std::vector<int> flat;
  std::vector<Eigen::Index> offsets{0};
  for (const auto& s : seqs) {
    if (s.empty()) throw ShapeError("classifier: empty id sequence");
    flat.insert(flat.end(), s.begin(), s.end());
    offsets.push_back(static_cast<Eigen::Index>(flat.size()));
  }
  Tensor<S> pooled = segment_mean_rows(embedding_rows(p.emb, flat), offsets);
  Tensor<S> h = gelu(add_rowvec(matmul(pooled, p.w1), p.b1));
  return add_rowvec(matmul(h, p.w2), p.b2);
}

namespace detail {

template <class S>
void validate_soft_rows(const Mat<S>& probs, int vocab_size) {
  if (probs.rows() < 1) throw ShapeError("classifier: empty soft sequence");
  if (probs.cols() != vocab_size) {
    throw ShapeError("classifier: soft rows must have vocab_size columns");
  }
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      const double v = static_cast<double>(probs(r, c));
      if (v < -1e-9) {
        throw ConfigError("classifier: soft row " + std::to_string(r) +
                          " has a negative entry");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw ConfigError("classifier: soft row " + std::to_string(r) +
                        " sums to " + std::to_string(sum) + ", expected 1");
    }
  }
}

// Soft-route core without input validation; gradcheck needs to evaluate
// at perturbed rows that are not quite distributions.
template <class S>
Tensor<S> soft_logits_core(const ClassifierParams<S>& p,
                           const Tensor<S>& probs) {
  Tensor<S> pooled = mean_rows(matmul(probs, p.emb));
  Tensor<S> h = gelu(add_rowvec(matmul(pooled, p.w1), p.b1));
  return add_rowvec(matmul(h, p.w2), p.b2);
}

}  // namespace detail

// Logits for a soft sequence: each row of `probs` is a distribution over
// the vocabulary, pooled as its expected embedding. `probs` may be a graph
// node; gradients flow back into it.
template <class S>
Tensor<S> clf_logits_soft(const ClassifierParams<S>& p,
                          const Tensor<S>& probs) {
  detail::validate_soft_rows(probs.value(), p.cfg.vocab_size);
  return detail::soft_logits_core(p, probs);
}

// Class probabilities (no graph): [1 x 2] for hard ids.
template <class S>
Mat<S> clf_forward_hard(const ClassifierParams<S>& p,
                        const std::vector<int>& ids) {
  NoGradGuard ng;
  return detail::softmax_rows_value(clf_logits_hard(p, ids).value());
}

// Class probabilities (no graph): [1 x 2] for a soft sequence.
template <class S>
Mat<S> clf_forward_soft(const ClassifierParams<S>& p, const Mat<S>& probs) {
  NoGradGuard ng;
  return detail::softmax_rows_value(
      clf_logits_soft(p, Tensor<S>::constant(probs)).value());
}

// Guidance objective: negative log-probability of the audible class.
template <class S>
Tensor<S> classifier_nll_audible(const Tensor<S>& logits) {
  return cross_entropy_indices(logits, std::vector<int>{1});
}

template <class S>
std::vector<NamedTensor> to_named_tensors(const ClassifierParams<S>& p) {
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
std::uint64_t classifier_fingerprint(const ClassifierParams<S>& p) {
  return fingerprint(to_named_tensors(p));
}

template <class S>
void save_classifier_checkpoint(const std::string& path,
                                const ClassifierParams<S>& p,
                                const Vocabulary& vocab) {
  nlohmann::json header = {{"kind", "classifier"},
                           {"config", p.cfg.to_json()},
                           {"vocab", vocab.tokens()}};
  write_checkpoint(path, header, to_named_tensors(p));
}

template <class S>
std::pair<ClassifierParams<S>, Vocabulary> load_classifier_checkpoint(
    const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", "") != "classifier") {
    throw FormatError(path + ": not a classifier checkpoint");
  }
  ClassifierConfig cfg = ClassifierConfig::from_json(ck.header.at("config"));
  cfg.validate();
  Vocabulary vocab = Vocabulary::from_tokens(
      ck.header.at("vocab").get<std::vector<std::string>>());
  if (vocab.size() != cfg.vocab_size) {
    throw FormatError(path + ": embedded vocabulary size disagrees with config");
  }
  ClassifierParams<S> p;
  p.cfg = cfg;
  auto get = [&](const std::string& name) {
    return detail::param_from_named<S>(detail::find_named(ck.tensors, name, path),
                                       path);
  };
  p.emb = get("emb");
  p.w1 = get("w1");
  p.b1 = get("b1");
  p.w2 = get("w2");
  p.b2 = get("b2");
  if (p.emb.rows() != cfg.vocab_size || p.emb.cols() != cfg.emb_dim) {
    throw FormatError(path + ": emb shape disagrees with config");
  }
  return {std::move(p), std::move(vocab)};
}

}  // namespace capsteer
