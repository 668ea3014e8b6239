#pragma once

// Training loops for the classifier and the language model.
//
// Both use AdamW with decoupled weight decay and a step learning-rate
// schedule (tenfold drop every 10 epochs). Model selection is by best
// validation metric; the returned params are the best-epoch snapshot, not
// the final epoch.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "capsteer/classifier.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/lm.hpp"
#include "capsteer/ops.hpp"
#include "capsteer/rng.hpp"
#include "capsteer/tensor.hpp"

namespace capsteer {

struct OptimConfig {
  double lr = 3e-4;
  int batch_size = 64;
  int epochs = 40;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr <= 0.0) throw ConfigError("optim: lr must be > 0");
    if (batch_size < 1) throw ConfigError("optim: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("optim: epochs must be >= 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ConfigError("optim: betas must lie in [0, 1)");
    }
    if (eps <= 0.0) throw ConfigError("optim: eps must be > 0");
    if (weight_decay < 0.0) throw ConfigError("optim: weight_decay must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"beta1", beta1},
            {"beta2", beta2},
            {"eps", eps},
            {"weight_decay", weight_decay},
            {"seed", seed}};
  }
};

// Epochs are 1-based; the rate drops tenfold after every 10 epochs, so
// epochs 1-10 run at base, 11-20 at base/10, and so on.
inline double lr_at_epoch(double base_lr, int epoch) {
  if (epoch < 1) throw ConfigError("lr_at_epoch: epochs are 1-based");
  return base_lr * std::pow(0.1, (epoch - 1) / 10);
}

template <class S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>> params, const OptimConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(Mat<S>::Zero(p.rows(), p.cols()));
      v_.push_back(Mat<S>::Zero(p.rows(), p.cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // One update at the given rate. Weight decay is decoupled: it scales the
  // raw parameter value, not the gradient. Params that received no
  // gradient this step are left untouched.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const Mat<S>& g = p.grad();
      m_[i] = static_cast<S>(cfg_.beta1) * m_[i] +
              static_cast<S>(1.0 - cfg_.beta1) * g;
      v_[i] = static_cast<S>(cfg_.beta2) * v_[i] +
              static_cast<S>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      Mat<S>& w = p.value_mut();
      const auto mhat = (m_[i] / static_cast<S>(bc1)).array();
      const auto vhat = (v_[i] / static_cast<S>(bc2)).array();
      w.array() -= static_cast<S>(lr) *
                   (mhat / (vhat.sqrt() + static_cast<S>(cfg_.eps)) +
                    static_cast<S>(cfg_.weight_decay) * w.array());
      if (!w.allFinite()) {
        throw NumericError("adamw: non-finite parameter after update");
      }
    }
  }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<Mat<S>> m_, v_;
  OptimConfig cfg_;
  long t_ = 0;
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_val = 0.0;
  std::string val_metric_name;
  nlohmann::json config;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json eps = nlohmann::json::array();
    for (const auto& e : epochs) {
      eps.push_back({{"epoch", e.epoch},
                     {"lr", e.lr},
                     {"train_loss", e.train_loss},
                     {"val_metric", e.val_metric}});
    }
    return {{"epochs", eps},
            {"best_epoch", best_epoch},
            {"best_val", best_val},
            {"val_metric", val_metric_name},
            {"config", config},
            {"seed", seed}};
  }
};

struct ClfExample {
  std::vector<int> ids;
  int label = 0;  // 0 = not audible, 1 = audible
};

template <class S>
double evaluate_classifier(const ClassifierParams<S>& p,
                           const std::vector<ClfExample>& data) {
  if (data.empty()) throw ConfigError("evaluate_classifier: empty dataset");
  NoGradGuard ng;
  std::size_t correct = 0;
  for (const auto& ex : data) {
    const Mat<S> logits = clf_logits_hard(p, ex.ids).value();
    const int pred = logits(0, 1) > logits(0, 0) ? 1 : 0;
    if (pred == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <class S>
TrainReport train_classifier(ClassifierParams<S>& params,
                             const std::vector<ClfExample>& train,
                             const std::vector<ClfExample>& val,
                             const OptimConfig& cfg) {
  cfg.validate();
  if (train.empty() || val.empty()) {
    throw ConfigError("train_classifier: train and val must be non-empty");
  }
  bool has0 = false, has1 = false;
  for (const auto& ex : train) {
    if (ex.label == 0) has0 = true;
    else if (ex.label == 1) has1 = true;
    else throw ConfigError("train_classifier: labels must be 0 or 1");
  }
  if (!has0 || !has1) {
    throw ConfigError("train_classifier: training set must contain both classes");
  }

  AdamW<S> opt(params.all_params(), cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  report.val_metric_name = "accuracy";
  report.config = cfg.to_json();
  report.seed = cfg.seed;
  ClassifierParams<S> best = params.clone();
  double best_val = -1.0;
  int best_epoch = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg.lr, epoch);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t n_seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<int>> seqs;
      std::vector<int> labels;
      seqs.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        seqs.push_back(train[order[i]].ids);
        labels.push_back(train[order[i]].label);
      }
      opt.zero_grad();
      Tensor<S> loss =
          cross_entropy_indices(clf_logits_hard_batch(params, seqs), labels);
      loss.backward();
      opt.step(lr);
      loss_sum += static_cast<double>(loss.item()) *
                  static_cast<double>(end - start);
      n_seen += end - start;
    }
    const double val_acc = evaluate_classifier(params, val);
    report.epochs.push_back(
        {epoch, lr, loss_sum / static_cast<double>(n_seen), val_acc});
    // Ties prefer the later epoch: accuracy saturates early on separable
    // data while the logit margins keep growing, and downstream guidance
    // differentiates through those margins.
    if (val_acc >= best_val) {
      best_val = val_acc;
      best_epoch = epoch;
      best = params.clone();
    }
  }

  report.best_epoch = best_epoch;
  report.best_val = best_val;
  params = best;
  return report;
}

// One LM training example: ids = BOS + prefix + separator + caption + EOS,
// prefix_len = word count of the prefix (not counting BOS or separator).
struct LMExample {
  std::vector<int> ids;
  int prefix_len = 0;
};

namespace detail {

// Targets for teacher forcing with the conditioning region masked out.
// Position p predicts ids[p+1]; only predictions of caption tokens and the
// closing EOS count, i.e. p >= prefix_len + 1 (BOS occupies position 0 and
// the separator sits right after the prefix).
inline std::vector<int> lm_targets(const LMExample& ex) {
  const int t = static_cast<int>(ex.ids.size());
  std::vector<int> targets(static_cast<std::size_t>(t), -1);
  for (int p = ex.prefix_len + 1; p + 1 < t; ++p) {
    targets[static_cast<std::size_t>(p)] = ex.ids[static_cast<std::size_t>(p) + 1];
  }
  return targets;
}

}  // namespace detail

// Mean negative log-likelihood per counted target position, in double.
template <class S>
double lm_validation_nll(const LMParams<S>& params,
                         const std::vector<LMExample>& data, int batch_size) {
  NoGradGuard ng;
  double nll_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < data.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::vector<int>> seqs;
    std::vector<int> targets;
    for (std::size_t i = start; i < end; ++i) {
      seqs.push_back(data[i].ids);
      const auto t = detail::lm_targets(data[i]);
      targets.insert(targets.end(), t.begin(), t.end());
    }
    BatchResult<S> out = forward_batch(params, seqs);
    const Mat<S> lp = detail::log_softmax_rows_value(out.logits.value());
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] < 0) continue;
      nll_sum -= static_cast<double>(
          lp(static_cast<Eigen::Index>(r), targets[r]));
      ++count;
    }
  }
  if (count == 0) throw ConfigError("lm_validation_nll: no counted positions");
  return nll_sum / static_cast<double>(count);
}

template <class S>
double lm_validation_perplexity(const LMParams<S>& params,
                                const std::vector<LMExample>& data,
                                int batch_size) {
  return std::exp(lm_validation_nll(params, data, batch_size));
}

template <class S>
TrainReport train_lm(LMParams<S>& params, const std::vector<LMExample>& train,
                     const std::vector<LMExample>& val,
                     const OptimConfig& cfg) {
  cfg.validate();
  if (train.empty() || val.empty()) {
    throw ConfigError("train_lm: train and val must be non-empty");
  }
  auto check = [&](const std::vector<LMExample>& data, const char* name) {
    std::string offenders;
    int shown = 0, total = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& ex = data[i];
      if (static_cast<int>(ex.ids.size()) > params.cfg.max_len) {
        ++total;
        if (shown < 10) {
          offenders += (shown ? ", " : "") + std::to_string(i) + " (" +
                       std::to_string(ex.ids.size()) + " tokens)";
          ++shown;
        }
      }
      if (ex.prefix_len < 0 ||
          ex.prefix_len + 2 >= static_cast<int>(ex.ids.size())) {
        throw ConfigError(std::string("train_lm: ") + name + " example " +
                          std::to_string(i) + " leaves no caption positions");
      }
    }
    if (total > 0) {
      if (total > shown) offenders += ", and " + std::to_string(total - shown) + " more";
      throw ConfigError(std::string("train_lm: ") + name + " examples exceed max_len " +
                        std::to_string(params.cfg.max_len) + ": " + offenders);
    }
  };
  check(train, "train");
  check(val, "val");

  AdamW<S> opt(params.all_params(), cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  report.val_metric_name = "perplexity";
  report.config = cfg.to_json();
  report.seed = cfg.seed;
  LMParams<S> best = params.clone();
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg.lr, epoch);
    rng.shuffle(order);
    double nll_weighted = 0.0;
    std::size_t n_counted = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<int>> seqs;
      std::vector<int> targets;
      std::size_t counted = 0;
      for (std::size_t i = start; i < end; ++i) {
        const LMExample& ex = train[order[i]];
        seqs.push_back(ex.ids);
        const auto t = detail::lm_targets(ex);
        for (int id : t) {
          if (id >= 0) ++counted;
        }
        targets.insert(targets.end(), t.begin(), t.end());
      }
      opt.zero_grad();
      Tensor<S> loss =
          cross_entropy_indices(forward_batch(params, seqs).logits, targets);
      loss.backward();
      opt.step(lr);
      nll_weighted += static_cast<double>(loss.item()) *
                      static_cast<double>(counted);
      n_counted += counted;
    }
    const double val_ppl = lm_validation_perplexity(params, val, cfg.batch_size);
    report.epochs.push_back(
        {epoch, lr, nll_weighted / static_cast<double>(n_counted), val_ppl});
    // Ties prefer the later epoch, matching the classifier snapshot rule.
    if (val_ppl <= best_val) {
      best_val = val_ppl;
      best_epoch = epoch;
      best = params.clone();
    }
  }

  report.best_epoch = best_epoch;
  report.best_val = best_val;
  params = best;
  return report;
}

}  // namespace capsteer
