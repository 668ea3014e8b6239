#pragma once

// Inference-time cache steering: the decode loop keeps two parallel
// key/value caches. The base cache is what the frozen LM would have
// produced on its own and defines the anchoring target distribution; the
// guided cache additionally carries an accumulated additive perturbation,
// re-optimized at every token under
//
//   L = lambda0 * CE(guided dist, base dist) + lambda1 * (-log h_audible)
//
// with normalized gradient steps on the perturbation and a backtracking
// line search. Model weights are never touched; a fingerprint equality
// check brackets every decode.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "capsteer/classifier.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/lm.hpp"
#include "capsteer/ops.hpp"
#include "capsteer/tensor.hpp"
#include "capsteer/vocab.hpp"

namespace capsteer {

struct GuidanceConfig {
  double lambda0 = 0.2;  // anchoring weight on CE(guided, base)
  double lambda1 = 0.6;  // classifier weight on -log h_audible
  int steps = 4;         // inner optimization steps per token
  double alpha = 0.02;   // step size along the normalized gradient
  int backtrack_max = 10;
  int topk = 64;    // candidate-set size at selection time
  int max_new = 30;
  int beam = 1;
  std::uint64_t seed = 0;
  // When true, only cache rows belonging to generated tokens are
  // optimized; prompt rows stay frozen. Default optimizes every row.
  bool restrict_to_generated = false;

  void validate() const {
    if (lambda0 < 0.0 || lambda1 < 0.0) {
      throw ConfigError("guidance: lambda0 and lambda1 must be >= 0");
    }
    if (steps < 0) throw ConfigError("guidance: steps must be >= 0");
    if (alpha <= 0.0) throw ConfigError("guidance: alpha must be > 0");
    if (backtrack_max < 0) throw ConfigError("guidance: backtrack_max must be >= 0");
    if (topk < 1) throw ConfigError("guidance: topk must be >= 1");
    if (max_new < 1) throw ConfigError("guidance: max_new must be >= 1");
    if (beam != 1) throw ConfigError("guidance: only beam width 1 is supported");
  }

  nlohmann::json to_json() const {
    return {{"lambda0", lambda0},
            {"lambda1", lambda1},
            {"steps", steps},
            {"alpha", alpha},
            {"backtrack_max", backtrack_max},
            {"topk", topk},
            {"max_new", max_new},
            {"beam", beam},
            {"seed", seed},
            {"restrict_to_generated", restrict_to_generated}};
  }
};

// Additive perturbation, shape-congruent with a ContextCache. Reset to
// zero at the start of every token.
template <class S>
struct CacheDelta {
  std::vector<Mat<S>> dk, dv;

  static CacheDelta zero_like(const ContextCache<S>& c) {
    CacheDelta d;
    d.dk.reserve(c.k.size());
    d.dv.reserve(c.v.size());
    for (std::size_t l = 0; l < c.k.size(); ++l) {
      d.dk.push_back(Mat<S>::Zero(c.k[l].rows(), c.k[l].cols()));
      d.dv.push_back(Mat<S>::Zero(c.v[l].rows(), c.v[l].cols()));
    }
    return d;
  }

  bool all_zero() const {
    for (const auto& m : dk) {
      if ((m.array() != S(0)).any()) return false;
    }
    for (const auto& m : dv) {
      if ((m.array() != S(0)).any()) return false;
    }
    return true;
  }
};

struct TokenTrace {
  double clf_initial = 0.0;  // -log h_audible before optimization
  double clf_final = 0.0;
  double ce_initial = 0.0;  // CE(guided, base), unweighted
  double ce_final = 0.0;
  // total_loss[0] is the pre-optimization loss; entry s+1 is the accepted
  // loss after inner step s. Non-increasing when backtracking is on.
  std::vector<double> total_loss;
  double kl_to_base = 0.0;  // KL(final guided dist || base dist)
  int chosen = -1;
  std::vector<int> halvings;  // per inner step

  nlohmann::json to_json() const {
    return {{"clf_initial", clf_initial}, {"clf_final", clf_final},
            {"ce_initial", ce_initial},   {"ce_final", ce_final},
            {"total_loss", total_loss},   {"kl_to_base", kl_to_base},
            {"chosen", chosen},           {"halvings", halvings}};
  }
};

struct GenerationTrace {
  int prompt_len = 0;
  std::vector<TokenTrace> tokens;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& t : tokens) rows.push_back(t.to_json());
    return {{"prompt_len", prompt_len}, {"tokens", rows}};
  }
};

// Everything one in-flight decode owns.
template <class S>
struct DecodeState {
  ContextCache<S> base, guided;
  int pending = -1;           // token processed by the next step
  std::vector<int> emitted;   // caption tokens emitted so far
  int prompt_len = 0;
};

namespace detail {

// Candidate ids with the k largest probabilities (ties by lower id),
// returned sorted by id ascending.
template <class S>
std::vector<int> topk_ids(const Mat<S>& probs, int k) {
  const int v = static_cast<int>(probs.cols());
  std::vector<int> ids(static_cast<std::size_t>(v));
  std::iota(ids.begin(), ids.end(), 0);
  const int kk = std::min(k, v);
  std::partial_sort(ids.begin(), ids.begin() + kk, ids.end(),
                    [&probs](int a, int b) {
                      const S pa = probs(0, a), pb = probs(0, b);
                      if (pa != pb) return pa > pb;
                      return a < b;
                    });
  ids.resize(static_cast<std::size_t>(kk));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Argmax over a candidate set sorted ascending; ties keep the lowest id.
template <class S>
int argmax_over(const std::vector<int>& candidates_asc, const Mat<S>& probs) {
  int best = candidates_asc.front();
  S best_p = probs(0, best);
  for (int id : candidates_asc) {
    if (probs(0, id) > best_p) {
      best = id;
      best_p = probs(0, id);
    }
  }
  return best;
}

template <class S>
double kl_from_logits(const Mat<S>& logits_p, const Mat<S>& logits_q) {
  const Mat<S> lp = log_softmax_rows_value(logits_p);
  const Mat<S> lq = log_softmax_rows_value(logits_q);
  double kl = 0.0;
  for (Eigen::Index c = 0; c < lp.cols(); ++c) {
    const double lpc = static_cast<double>(lp(0, c));
    kl += std::exp(lpc) * (lpc - static_cast<double>(lq(0, c)));
  }
  return kl;
}

template <class S>
Mat<S> onehot_rows(const std::vector<int>& ids, int vocab_size) {
  Mat<S> m = Mat<S>::Zero(static_cast<Eigen::Index>(ids.size()), vocab_size);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    m(static_cast<Eigen::Index>(i), ids[i]) = S(1);
  }
  return m;
}

// Feed all prompt tokens but the last through a cache; the last stays
// pending. Also checks the length budget for the whole decode.
template <class S>
DecodeState<S> start_decode(const LMParams<S>& lm,
                            const std::vector<int>& prompt, int max_new) {
  if (prompt.empty()) throw ConfigError("decode: empty prompt");
  if (static_cast<int>(prompt.size()) + max_new > lm.cfg.max_len) {
    throw ConfigError("decode: prompt length " + std::to_string(prompt.size()) +
                      " + max_new " + std::to_string(max_new) +
                      " exceeds max_len " + std::to_string(lm.cfg.max_len));
  }
  DecodeState<S> st;
  st.base = ContextCache<S>::empty(lm.cfg);
  st.prompt_len = static_cast<int>(prompt.size());
  for (std::size_t j = 0; j + 1 < prompt.size(); ++j) {
    forward_step(lm, prompt[j], st.base);
  }
  st.guided = st.base;  // identical until the first fold
  st.pending = prompt.back();
  return st;
}

// The per-token objective as a graph over the given effective context:
// weighted total plus unweighted term values. The same builder serves the
// optimization loop, the no-grad line-search evaluations, and the
// finite-difference tests, so the loss has exactly one definition.
template <class S>
struct LossGraph {
  Tensor<S> loss;    // lambda0 * ce + lambda1 * clf; undefined if both 0
  Tensor<S> logits;  // [1 x V] guided logits
  double ce = 0.0;   // unweighted term values
  double clf = 0.0;
};

template <class S>
LossGraph<S> build_loss_graph(const LMParams<S>& lm,
                              const ClassifierParams<S>& clf,
                              const DecodeState<S>& st,
                              const StepTensors<S>& ctx,
                              const Mat<S>& base_probs,
                              const GuidanceConfig& cfg) {
  StepResult<S> r = lm_step(lm, st.pending, ctx);
  LossGraph<S> out;
  out.logits = r.logits;
  if (cfg.lambda0 > 0.0) {
    Tensor<S> ce = cross_entropy_from_logits(r.logits, base_probs);
    out.ce = static_cast<double>(ce.item());
    out.loss = scale(ce, static_cast<S>(cfg.lambda0));
  }
  if (cfg.lambda1 > 0.0) {
    Tensor<S> p = softmax_rows(r.logits);
    Tensor<S> soft =
        st.emitted.empty()
            ? p
            : concat_rows(Tensor<S>::constant(
                              onehot_rows<S>(st.emitted, lm.cfg.vocab_size)),
                          p);
    Tensor<S> nll = classifier_nll_audible(clf_logits_soft(clf, soft));
    out.clf = static_cast<double>(nll.item());
    Tensor<S> w = scale(nll, static_cast<S>(cfg.lambda1));
    out.loss = out.loss.defined() ? add(out.loss, w) : w;
  }
  return out;
}

// Loss terms at a given perturbation, values only. Constants feed the
// same builder, so the arithmetic path matches the graph forward bit for
// bit.
template <class S>
struct LossEval {
  double ce = 0.0;
  double clf = 0.0;
  Mat<S> logits;
};

template <class S>
LossEval<S> eval_losses(const LMParams<S>& lm, const ClassifierParams<S>& clf,
                        const DecodeState<S>& st, const CacheDelta<S>* delta,
                        const Mat<S>& base_probs, const GuidanceConfig& cfg) {
  NoGradGuard ng;
  StepTensors<S> ctx = StepTensors<S>::from_cache(st.guided);
  if (delta != nullptr && ctx.positions > 0) {
    for (std::size_t l = 0; l < ctx.k.size(); ++l) {
      ctx.k[l] = add(ctx.k[l], Tensor<S>::constant(delta->dk[l]));
      ctx.v[l] = add(ctx.v[l], Tensor<S>::constant(delta->dv[l]));
    }
  }
  LossGraph<S> lg = build_loss_graph(lm, clf, st, ctx, base_probs, cfg);
  return {lg.ce, lg.clf, lg.logits.value()};
}

}  // namespace detail

template <class S>
std::uint64_t weights_fingerprint(const LMParams<S>& p) {
  return lm_fingerprint(p);
}

// One guided token: optimize a fresh perturbation of the guided cache,
// fold it in, pick the next token from the re-scored candidate set, then
// advance both caches past the pending token.
template <class S>
TokenTrace guided_step(const LMParams<S>& lm, const ClassifierParams<S>& clf,
                       DecodeState<S>& st, const GuidanceConfig& cfg) {
  cfg.validate();
  if (st.base.positions() != st.guided.positions()) {
    throw ShapeError("guided_step: caches are misaligned");
  }
  TokenTrace trace;

  // Anchoring target: the base model's next-token distribution, held
  // fixed for the whole inner loop.
  Mat<S> base_logits;
  {
    NoGradGuard ng;
    base_logits =
        lm_step(lm, st.pending, StepTensors<S>::from_cache(st.base))
            .logits.value();
  }
  const Mat<S> base_probs = detail::softmax_rows_value(base_logits);

  CacheDelta<S> delta = CacheDelta<S>::zero_like(st.guided);
  const bool optimizable = st.guided.positions() > 0 &&
                           (cfg.lambda0 > 0.0 || cfg.lambda1 > 0.0) &&
                           cfg.steps > 0;

  // Pre-optimization guided distribution: fixes the candidate set and the
  // initial loss terms.
  detail::LossEval<S> init =
      detail::eval_losses<S>(lm, clf, st, nullptr, base_probs, cfg);
  const Mat<S> init_probs = detail::softmax_rows_value(init.logits);
  trace.ce_initial = init.ce;
  trace.clf_initial = init.clf;
  double cur_loss = cfg.lambda0 * init.ce + cfg.lambda1 * init.clf;
  trace.total_loss.push_back(cur_loss);
  const std::vector<int> candidates = detail::topk_ids(init_probs, cfg.topk);

  if (optimizable) {
    const int frozen_rows =
        cfg.restrict_to_generated
            ? static_cast<int>(std::min<Eigen::Index>(st.prompt_len,
                                                      st.guided.positions()))
            : 0;
    for (int step = 0; step < cfg.steps; ++step) {
      // Differentiable forward at the current perturbation.
      std::vector<Tensor<S>> dk_t, dv_t;
      StepTensors<S> ctx = StepTensors<S>::from_cache(st.guided);
      for (std::size_t l = 0; l < ctx.k.size(); ++l) {
        dk_t.push_back(Tensor<S>::param(delta.dk[l]));
        dv_t.push_back(Tensor<S>::param(delta.dv[l]));
        ctx.k[l] = add(ctx.k[l], dk_t[l]);
        ctx.v[l] = add(ctx.v[l], dv_t[l]);
      }
      detail::LossGraph<S> lg =
          detail::build_loss_graph(lm, clf, st, ctx, base_probs, cfg);
      cur_loss = cfg.lambda0 * lg.ce + cfg.lambda1 * lg.clf;
      lg.loss.backward();

      // Joint normalized direction over every delta coordinate, with
      // prompt rows zeroed when restriction is on.
      std::vector<Mat<S>> gk, gv;
      double sq = 0.0;
      for (std::size_t l = 0; l < dk_t.size(); ++l) {
        Mat<S> g1 = dk_t[l].has_grad()
                        ? dk_t[l].grad()
                        : Mat<S>::Zero(delta.dk[l].rows(), delta.dk[l].cols());
        Mat<S> g2 = dv_t[l].has_grad()
                        ? dv_t[l].grad()
                        : Mat<S>::Zero(delta.dv[l].rows(), delta.dv[l].cols());
        if (frozen_rows > 0) {
          g1.topRows(frozen_rows).setZero();
          g2.topRows(frozen_rows).setZero();
        }
        sq += g1.template cast<double>().squaredNorm() +
              g2.template cast<double>().squaredNorm();
        gk.push_back(std::move(g1));
        gv.push_back(std::move(g2));
      }
      const double norm = std::sqrt(sq);
      if (norm == 0.0) {
        // Zero gradient: the step is exactly zero, keep the loss as is.
        trace.halvings.push_back(0);
        trace.total_loss.push_back(cur_loss);
        continue;
      }
      const double inv = 1.0 / (norm + 1e-8);

      // Backtracking line search on the full loss.
      int halvings = 0;
      bool accepted = false;
      for (; halvings <= cfg.backtrack_max; ++halvings) {
        const double s_eff = cfg.alpha / std::pow(2.0, halvings);
        CacheDelta<S> cand = delta;
        for (std::size_t l = 0; l < gk.size(); ++l) {
          cand.dk[l] -= (static_cast<S>(s_eff * inv) * gk[l]);
          cand.dv[l] -= (static_cast<S>(s_eff * inv) * gv[l]);
        }
        detail::LossEval<S> ev =
            detail::eval_losses(lm, clf, st, &cand, base_probs, cfg);
        const double cand_loss = cfg.lambda0 * ev.ce + cfg.lambda1 * ev.clf;
        if (cand_loss <= cur_loss) {
          delta = std::move(cand);
          cur_loss = cand_loss;
          accepted = true;
          break;
        }
      }
      trace.halvings.push_back(accepted ? halvings : cfg.backtrack_max);
      trace.total_loss.push_back(cur_loss);
    }
  }

  // Fold the perturbation into the guided cache for good. Skipped when it
  // is exactly zero so no-op runs leave the cache bit-identical.
  if (!delta.all_zero()) {
    for (std::size_t l = 0; l < st.guided.k.size(); ++l) {
      st.guided.k[l] += delta.dk[l];
      st.guided.v[l] += delta.dv[l];
    }
  }

  // Final guided distribution and trace terms.
  detail::LossEval<S> fin =
      detail::eval_losses<S>(lm, clf, st, nullptr, base_probs, cfg);
  const Mat<S> final_probs = detail::softmax_rows_value(fin.logits);
  trace.ce_final = fin.ce;
  trace.clf_final = fin.clf;
  trace.kl_to_base = detail::kl_from_logits(fin.logits, base_logits);
  trace.chosen = detail::argmax_over(candidates, final_probs);

  // Advance both caches past the pending token; the guided rows are
  // computed over the perturbed entries, the base rows over clean ones.
  forward_step(lm, st.pending, st.base);
  forward_step(lm, st.pending, st.guided);
  st.pending = trace.chosen;
  if (trace.chosen != Vocabulary::kEos) st.emitted.push_back(trace.chosen);
  return trace;
}

// Greedy decode restricted to the per-step top-k candidates; no cache
// perturbation. Trace rows carry only the chosen ids.
template <class S>
std::pair<std::vector<int>, GenerationTrace> baseline_decode(
    const LMParams<S>& lm, const std::vector<int>& prompt,
    const GuidanceConfig& cfg) {
  cfg.validate();
  const std::uint64_t fp = weights_fingerprint(lm);
  DecodeState<S> st = detail::start_decode(lm, prompt, cfg.max_new);
  GenerationTrace trace;
  trace.prompt_len = st.prompt_len;
  for (int i = 0; i < cfg.max_new; ++i) {
    const Mat<S> logits = forward_step(lm, st.pending, st.base);
    const Mat<S> probs = detail::softmax_rows_value(logits);
    const std::vector<int> candidates = detail::topk_ids(probs, cfg.topk);
    const int chosen = detail::argmax_over(candidates, probs);
    TokenTrace row;
    row.chosen = chosen;
    trace.tokens.push_back(row);
    if (chosen == Vocabulary::kEos) break;
    st.emitted.push_back(chosen);
    st.pending = chosen;
  }
  if (weights_fingerprint(lm) != fp) {
    throw std::logic_error("baseline_decode: weights changed during decode");
  }
  return {st.emitted, trace};
}

// Full guided decode: guided_step until EOS or the token budget runs out.
template <class S>
std::pair<std::vector<int>, GenerationTrace> guided_decode(
    const LMParams<S>& lm, const ClassifierParams<S>& clf,
    const std::vector<int>& prompt, const GuidanceConfig& cfg) {
  cfg.validate();
  const std::uint64_t lm_fp = weights_fingerprint(lm);
  const std::uint64_t clf_fp = classifier_fingerprint(clf);
  DecodeState<S> st = detail::start_decode(lm, prompt, cfg.max_new);
  GenerationTrace trace;
  trace.prompt_len = st.prompt_len;
  for (int i = 0; i < cfg.max_new; ++i) {
    TokenTrace row;
    try {
      row = guided_step(lm, clf, st, cfg);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (aborted at token " +
                         std::to_string(i) +
                         "; trace: " + trace.to_json().dump() + ")");
    }
    trace.tokens.push_back(row);
    if (row.chosen == Vocabulary::kEos) break;
  }
  if (weights_fingerprint(lm) != lm_fp ||
      classifier_fingerprint(clf) != clf_fp) {
    throw std::logic_error("guided_decode: weights changed during decode");
  }
  return {st.emitted, trace};
}

}  // namespace capsteer
