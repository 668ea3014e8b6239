#pragma once

// Differentiable free functions over Tensor<S>. Reductions that feed
// normalizers or losses (softmax sums, layer-norm statistics, entropy
// terms) accumulate in double and cast once at the op boundary; this is
// what keeps softmax rows summing to 1 within 1e-6 at vocabulary scale
// in 32-bit mode.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "capsteer/errors.hpp"
#include "capsteer/tensor.hpp"

namespace capsteer {

namespace detail {

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b,
                        const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

// Numerically stable row softmax, shared by every op that needs a
// probability row so that identical logits give bitwise-identical
// probabilities everywhere (the no-op guidance invariants rely on this).
template <class S>
Mat<S> softmax_rows_value(const Mat<S>& x) {
  if (x.cols() < 1) throw ShapeError("softmax: empty last dim");
  Mat<S> p(x.rows(), x.cols());
  std::vector<double> e(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = static_cast<double>(x(r, 0));
    for (Eigen::Index c = 1; c < x.cols(); ++c) {
      m = std::max(m, static_cast<double>(x(r, c)));
    }
    double s = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double v = std::exp(static_cast<double>(x(r, c)) - m);
      e[static_cast<std::size_t>(c)] = v;
      s += v;
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      p(r, c) = static_cast<S>(e[static_cast<std::size_t>(c)] / s);
    }
  }
  return p;
}

template <class S>
Mat<S> log_softmax_rows_value(const Mat<S>& x) {
  if (x.cols() < 1) throw ShapeError("log_softmax: empty last dim");
  Mat<S> lp(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = static_cast<double>(x(r, 0));
    for (Eigen::Index c = 1; c < x.cols(); ++c) {
      m = std::max(m, static_cast<double>(x(r, c)));
    }
    double s = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      s += std::exp(static_cast<double>(x(r, c)) - m);
    }
    const double lse = m + std::log(s);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      lp(r, c) = static_cast<S>(static_cast<double>(x(r, c)) - lse);
    }
  }
  return lp;
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Mat<S> v = a.value() + b.value();
  return make_op<S>("add", std::move(v), {a, b}, [](TensorNode<S>& self) {
    accumulate_grad(*self.parents[0], self.grad);
    accumulate_grad(*self.parents[1], self.grad);
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Mat<S> v = a.value() - b.value();
  return make_op<S>("sub", std::move(v), {a, b}, [](TensorNode<S>& self) {
    accumulate_grad(*self.parents[0], self.grad);
    accumulate_grad(*self.parents[1], -self.grad);
  });
}

// Broadcast a [1 x d] row over every row of a.
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("add_rowvec: bias must be 1 x cols(a)");
  }
  Mat<S> v = a.value();
  v.rowwise() += b.value().row(0);
  return make_op<S>("add_rowvec", std::move(v), {a, b},
                    [](TensorNode<S>& self) {
                      accumulate_grad(*self.parents[0], self.grad);
                      accumulate_grad(*self.parents[1],
                                      self.grad.colwise().sum());
                    });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Mat<S> v = a.value().cwiseProduct(b.value());
  return make_op<S>("mul", std::move(v), {a, b}, [](TensorNode<S>& self) {
    accumulate_grad(*self.parents[0],
                    self.grad.cwiseProduct(self.parents[1]->value));
    accumulate_grad(*self.parents[1],
                    self.grad.cwiseProduct(self.parents[0]->value));
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Mat<S> v = a.value() * c;
  return make_op<S>("scale", std::move(v), {a}, [c](TensorNode<S>& self) {
    accumulate_grad(*self.parents[0], self.grad * c);
  });
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims disagree, " + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()));
  }
  Mat<S> v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return make_op<S>("matmul", std::move(v), {a, b}, [](TensorNode<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad.noalias() += self.grad * pb.value.transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad.noalias() += pa.value.transpose() * self.grad;
    }
  });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  Mat<S> v = a.value().transpose();
  return make_op<S>("transpose", std::move(v), {a}, [](TensorNode<S>& self) {
    accumulate_grad(*self.parents[0], self.grad.transpose());
  });
}

template <class S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column mismatch");
  Mat<S> v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.value();
  v.bottomRows(b.rows()) = b.value();
  const Eigen::Index ra = a.rows();
  const Eigen::Index rb = b.rows();
  return make_op<S>("concat_rows", std::move(v), {a, b},
                    [ra, rb](TensorNode<S>& self) {
                      accumulate_grad(*self.parents[0], self.grad.topRows(ra));
                      accumulate_grad(*self.parents[1],
                                      self.grad.bottomRows(rb));
                    });
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, Eigen::Index start,
                     Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  Mat<S> v = a.value().middleRows(start, count);
  return make_op<S>("slice_rows", std::move(v), {a},
                    [start, count](TensorNode<S>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      p.grad.middleRows(start, count) += self.grad;
                    });
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  Mat<S> v(1, 1);
  v(0, 0) = static_cast<S>(a.value().template cast<double>().sum());
  return make_op<S>("sum_all", std::move(v), {a}, [](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    accumulate_grad(
        p, Mat<S>::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  const double n = static_cast<double>(a.rows() * a.cols());
  Mat<S> v(1, 1);
  v(0, 0) = static_cast<S>(a.value().template cast<double>().sum() / n);
  return make_op<S>("mean_all", std::move(v), {a}, [n](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    accumulate_grad(
        p, Mat<S>::Constant(p.value.rows(), p.value.cols(),
                            static_cast<S>(self.grad(0, 0) / static_cast<S>(n))));
  });
}

// Mean over rows: [N x d] -> [1 x d].
template <class S>
Tensor<S> mean_rows(const Tensor<S>& a) {
  if (a.rows() < 1) throw ShapeError("mean_rows: empty input");
  const Eigen::Index n = a.rows();
  Mat<S> v = a.value().colwise().sum() / static_cast<S>(n);
  return make_op<S>("mean_rows", std::move(v), {a}, [n](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const Mat<S> share = self.grad / static_cast<S>(n);
    p.grad.rowwise() += share.row(0);
  });
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  Mat<S> p = detail::softmax_rows_value(a.value());
  Mat<S> saved = p;
  return make_op<S>("softmax_rows", std::move(p), {a},
                    [saved](TensorNode<S>& self) {
                      auto& parent = *self.parents[0];
                      if (!parent.requires_grad) return;
                      parent.ensure_grad();
                      for (Eigen::Index r = 0; r < saved.rows(); ++r) {
                        double dot = 0.0;
                        for (Eigen::Index c = 0; c < saved.cols(); ++c) {
                          dot += static_cast<double>(self.grad(r, c)) *
                                 static_cast<double>(saved(r, c));
                        }
                        for (Eigen::Index c = 0; c < saved.cols(); ++c) {
                          parent.grad(r, c) +=
                              saved(r, c) *
                              (self.grad(r, c) - static_cast<S>(dot));
                        }
                      }
                    });
}

template <class S>
Tensor<S> log_softmax_rows(const Tensor<S>& a) {
  Mat<S> lp = detail::log_softmax_rows_value(a.value());
  Mat<S> saved = lp;
  return make_op<S>("log_softmax_rows", std::move(lp), {a},
                    [saved](TensorNode<S>& self) {
                      auto& parent = *self.parents[0];
                      if (!parent.requires_grad) return;
                      parent.ensure_grad();
                      for (Eigen::Index r = 0; r < saved.rows(); ++r) {
                        double gsum = 0.0;
                        for (Eigen::Index c = 0; c < saved.cols(); ++c) {
                          gsum += static_cast<double>(self.grad(r, c));
                        }
                        for (Eigen::Index c = 0; c < saved.cols(); ++c) {
                          parent.grad(r, c) += static_cast<S>(
                              static_cast<double>(self.grad(r, c)) -
                              std::exp(static_cast<double>(saved(r, c))) * gsum);
                        }
                      }
                    });
}

// Per-row normalization with affine gain/bias, eps inside the sqrt.
template <class S>
Tensor<S> layer_norm_rows(const Tensor<S>& x, const Tensor<S>& gain,
                          const Tensor<S>& bias, double eps) {
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be > 0");
  const Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 ||
      bias.cols() != d) {
    throw ShapeError("layer_norm: gain/bias must be 1 x cols(x)");
  }
  Mat<S> xhat(x.rows(), d);
  std::vector<double> inv(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) mu += static_cast<double>(x.value()(r, c));
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double t = static_cast<double>(x.value()(r, c)) - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    const double iv = 1.0 / std::sqrt(var + eps);
    inv[static_cast<std::size_t>(r)] = iv;
    for (Eigen::Index c = 0; c < d; ++c) {
      xhat(r, c) =
          static_cast<S>((static_cast<double>(x.value()(r, c)) - mu) * iv);
    }
  }
  Mat<S> v(x.rows(), d);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < d; ++c) {
      v(r, c) = xhat(r, c) * gain.value()(0, c) + bias.value()(0, c);
    }
  }
  return make_op<S>(
      "layer_norm", std::move(v), {x, gain, bias},
      [xhat, inv, d](TensorNode<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const Mat<S>& gamma = pg.value;
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (Eigen::Index c = 0; c < d; ++c) {
            const double dxh = static_cast<double>(self.grad(r, c)) *
                               static_cast<double>(gamma(0, c));
            m1 += dxh;
            m2 += dxh * static_cast<double>(xhat(r, c));
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          const double iv = inv[static_cast<std::size_t>(r)];
          for (Eigen::Index c = 0; c < d; ++c) {
            if (px.requires_grad) {
              const double dxh = static_cast<double>(self.grad(r, c)) *
                                 static_cast<double>(gamma(0, c));
              px.grad(r, c) += static_cast<S>(
                  iv * (dxh - m1 - static_cast<double>(xhat(r, c)) * m2));
            }
            if (pg.requires_grad) {
              pg.grad(0, c) += self.grad(r, c) * xhat(r, c);
            }
            if (pb.requires_grad) {
              pb.grad(0, c) += self.grad(r, c);
            }
          }
        }
      });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  Mat<S> v(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      const double x = static_cast<double>(a.value()(r, c));
      v(r, c) = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
  }
  return make_op<S>("gelu", std::move(v), {a}, [](TensorNode<S>& self) {
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
        const double x = static_cast<double>(p.value(r, c));
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        p.grad(r, c) +=
            self.grad(r, c) * static_cast<S>(cdf + x * pdf);
      }
    }
  });
}

// Gather rows of an embedding table: output row i = table row ids[i].
template <class S>
Tensor<S> embedding_rows(const Tensor<S>& table, std::vector<int> ids) {
  if (ids.empty()) throw ShapeError("embedding_rows: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= table.rows()) {
      throw ShapeError("embedding_rows: id " + std::to_string(id) +
                       " out of range [0, " + std::to_string(table.rows()) +
                       ")");
    }
  }
  Mat<S> v(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return make_op<S>("embedding_rows", std::move(v), {table},
                    [ids](TensorNode<S>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (std::size_t i = 0; i < ids.size(); ++i) {
                        p.grad.row(ids[i]) +=
                            self.grad.row(static_cast<Eigen::Index>(i));
                      }
                    });
}

// Mean negative log-likelihood of integer targets; rows whose target is
// ignore_index contribute nothing (loss masking for condition prefixes).
template <class S>
Tensor<S> cross_entropy_indices(const Tensor<S>& logits,
                                std::vector<int> targets,
                                int ignore_index = -1) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy_indices: one target per logit row");
  }
  Mat<S> lp = detail::log_softmax_rows_value(logits.value());
  double total = 0.0;
  Eigen::Index counted = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= logits.cols()) {
      throw ShapeError("cross_entropy_indices: target out of range");
    }
    total -= static_cast<double>(lp(r, t));
    ++counted;
  }
  if (counted == 0) {
    throw ShapeError("cross_entropy_indices: all targets masked");
  }
  Mat<S> v(1, 1);
  v(0, 0) = static_cast<S>(total / static_cast<double>(counted));
  Mat<S> p = detail::softmax_rows_value(logits.value());
  return make_op<S>(
      "cross_entropy_indices", std::move(v), {logits},
      [p, targets, ignore_index, counted](TensorNode<S>& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        parent.ensure_grad();
        const S w = self.grad(0, 0) / static_cast<S>(counted);
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          const int t = targets[static_cast<std::size_t>(r)];
          if (t == ignore_index) continue;
          for (Eigen::Index c = 0; c < p.cols(); ++c) {
            S g = p(r, c);
            if (c == t) g -= S(1);
            parent.grad(r, c) += w * g;
          }
        }
      });
}

// Cross entropy of logits against a fixed target distribution, averaged
// over rows: -(1/N) sum_r sum_v target[v] log softmax(logits_r)[v].
// The gradient w.r.t. logits is the closed form (softmax - target) / N.
// Because the subtraction is exact when the target was produced by the
// same softmax on identical logits, a guided forward that matches the
// base forward yields an exactly zero gradient, which is what makes the
// lambda1 = 0 no-op equivalence exact rather than approximate.
template <class S>
Tensor<S> cross_entropy_from_logits(const Tensor<S>& logits,
                                    const Mat<S>& target_probs) {
  if (target_probs.rows() != logits.rows() ||
      target_probs.cols() != logits.cols()) {
    throw ShapeError("cross_entropy_from_logits: target shape mismatch");
  }
  for (Eigen::Index r = 0; r < target_probs.rows(); ++r) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < target_probs.cols(); ++c) {
      s += static_cast<double>(target_probs(r, c));
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw ConfigError("cross_entropy_from_logits: target row " +
                        std::to_string(r) + " sums to " + std::to_string(s) +
                        ", expected 1");
    }
  }
  const Eigen::Index n = logits.rows();
  Mat<S> lp = detail::log_softmax_rows_value(logits.value());
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      total -= static_cast<double>(target_probs(r, c)) *
               static_cast<double>(lp(r, c));
    }
  }
  Mat<S> v(1, 1);
  v(0, 0) = static_cast<S>(total / static_cast<double>(n));
  Mat<S> p = detail::softmax_rows_value(logits.value());
  Mat<S> target = target_probs;
  return make_op<S>("cross_entropy_from_logits", std::move(v), {logits},
                    [p, target, n](TensorNode<S>& self) {
                      auto& parent = *self.parents[0];
                      if (!parent.requires_grad) return;
                      parent.ensure_grad();
                      const S w = self.grad(0, 0) / static_cast<S>(n);
                      parent.grad += w * (p - target);
                    });
}

// Fused multi-head causal self attention over a ragged batch: rows of
// q/k/v are the concatenated positions of all sequences; offsets[b] ..
// offsets[b+1] delimit sequence b. Heads are contiguous column blocks.
// Position i attends to positions <= i of its own sequence.
template <class S>
Tensor<S> causal_self_attention_ragged(const Tensor<S>& q, const Tensor<S>& k,
                                       const Tensor<S>& v,
                                       std::vector<Eigen::Index> offsets,
                                       int heads) {
  detail::require_same_shape(q, k, "causal_attention");
  detail::require_same_shape(q, v, "causal_attention");
  const Eigen::Index d = q.cols();
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("causal_attention: head count must divide model dim");
  }
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != q.rows()) {
    throw ShapeError("causal_attention: bad offsets");
  }
  const Eigen::Index dh = d / heads;
  const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const std::size_t nseq = offsets.size() - 1;

  std::vector<Mat<S>> attn(nseq * static_cast<std::size_t>(heads));
  Mat<S> out = Mat<S>::Zero(q.rows(), d);
  std::vector<double> e;
  for (std::size_t b = 0; b < nseq; ++b) {
    const Eigen::Index o = offsets[b];
    const Eigen::Index t = offsets[b + 1] - o;
    if (t <= 0) throw ShapeError("causal_attention: empty sequence");
    for (int h = 0; h < heads; ++h) {
      auto qh = q.value().block(o, h * dh, t, dh);
      auto kh = k.value().block(o, h * dh, t, dh);
      auto vh = v.value().block(o, h * dh, t, dh);
      Mat<S> scores(t, t);
      scores.noalias() = qh * kh.transpose();
      scores *= att_scale;
      Mat<S> a = Mat<S>::Zero(t, t);
      e.resize(static_cast<std::size_t>(t));
      for (Eigen::Index i = 0; i < t; ++i) {
        double m = static_cast<double>(scores(i, 0));
        for (Eigen::Index j = 1; j <= i; ++j) {
          m = std::max(m, static_cast<double>(scores(i, j)));
        }
        double s = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double x = std::exp(static_cast<double>(scores(i, j)) - m);
          e[static_cast<std::size_t>(j)] = x;
          s += x;
        }
        for (Eigen::Index j = 0; j <= i; ++j) {
          a(i, j) = static_cast<S>(e[static_cast<std::size_t>(j)] / s);
        }
      }
      out.block(o, h * dh, t, dh).noalias() = a * vh;
      attn[b * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] =
          std::move(a);
    }
  }
  return make_op<S>(
      "causal_attention", std::move(out), {q, k, v},
      [offsets, heads, dh, att_scale, attn](TensorNode<S>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        if (pq.requires_grad) pq.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        const std::size_t nseq = offsets.size() - 1;
        for (std::size_t b = 0; b < nseq; ++b) {
          const Eigen::Index o = offsets[b];
          const Eigen::Index t = offsets[b + 1] - o;
          for (int h = 0; h < heads; ++h) {
            const Mat<S>& a =
                attn[b * static_cast<std::size_t>(heads) +
                     static_cast<std::size_t>(h)];
            auto gh = self.grad.block(o, h * dh, t, dh);
            auto qh = pq.value.block(o, h * dh, t, dh);
            auto kh = pk.value.block(o, h * dh, t, dh);
            auto vh = pv.value.block(o, h * dh, t, dh);
            Mat<S> da(t, t);
            da.noalias() = gh * vh.transpose();
            if (pv.requires_grad) {
              pv.grad.block(o, h * dh, t, dh).noalias() += a.transpose() * gh;
            }
            Mat<S> ds = Mat<S>::Zero(t, t);
            for (Eigen::Index i = 0; i < t; ++i) {
              double dot = 0.0;
              for (Eigen::Index j = 0; j <= i; ++j) {
                dot += static_cast<double>(da(i, j)) *
                       static_cast<double>(a(i, j));
              }
              for (Eigen::Index j = 0; j <= i; ++j) {
                ds(i, j) = a(i, j) * (da(i, j) - static_cast<S>(dot));
              }
            }
            ds *= att_scale;
            if (pq.requires_grad) {
              pq.grad.block(o, h * dh, t, dh).noalias() += ds * kh;
            }
            if (pk.requires_grad) {
              pk.grad.block(o, h * dh, t, dh).noalias() += ds.transpose() * qh;
            }
          }
        }
      });
}

// Multi-head attention for one query row over P context rows (no mask:
// every provided row is attendable). Used by incremental decoding, where
// k/v carry cached entries plus the pending token's fresh row.
template <class S>
Tensor<S> attend_step(const Tensor<S>& q, const Tensor<S>& k,
                      const Tensor<S>& v, int heads) {
  if (q.rows() != 1) throw ShapeError("attend_step: query must be one row");
  detail::require_same_shape(k, v, "attend_step");
  const Eigen::Index d = q.cols();
  if (k.cols() != d) throw ShapeError("attend_step: key width mismatch");
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("attend_step: head count must divide model dim");
  }
  const Eigen::Index p = k.rows();
  if (p < 1) throw ShapeError("attend_step: empty context");
  const Eigen::Index dh = d / heads;
  const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Mat<S> a(heads, p);  // row h = attention weights of head h
  Mat<S> out(1, d);
  for (int h = 0; h < heads; ++h) {
    Mat<S> s(1, p);
    s.noalias() = q.value().block(0, h * dh, 1, dh) *
                  k.value().block(0, h * dh, p, dh).transpose();
    s *= att_scale;
    a.row(h) = detail::softmax_rows_value(s).row(0);
    out.block(0, h * dh, 1, dh).noalias() =
        a.row(h) * v.value().block(0, h * dh, p, dh);
  }
  return make_op<S>(
      "attend_step", std::move(out), {q, k, v},
      [heads, dh, p, att_scale, a](TensorNode<S>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        if (pq.requires_grad) pq.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        for (int h = 0; h < heads; ++h) {
          auto gh = self.grad.block(0, h * dh, 1, dh);
          auto qh = pq.value.block(0, h * dh, 1, dh);
          auto kh = pk.value.block(0, h * dh, p, dh);
          auto vh = pv.value.block(0, h * dh, p, dh);
          Mat<S> da(1, p);
          da.noalias() = gh * vh.transpose();
          if (pv.requires_grad) {
            pv.grad.block(0, h * dh, p, dh).noalias() +=
                a.row(h).transpose() * gh;
          }
          double dot = 0.0;
          for (Eigen::Index j = 0; j < p; ++j) {
            dot += static_cast<double>(da(0, j)) *
                   static_cast<double>(a(h, j));
          }
          Mat<S> ds(1, p);
          for (Eigen::Index j = 0; j < p; ++j) {
            ds(0, j) = a(h, j) * (da(0, j) - static_cast<S>(dot)) * att_scale;
          }
          if (pq.requires_grad) {
            pq.grad.block(0, h * dh, 1, dh).noalias() += ds * kh;
          }
          if (pk.requires_grad) {
            pk.grad.block(0, h * dh, p, dh).noalias() +=
                ds.transpose() * qh;
          }
        }
      });
}

// Deterministic argmax over one row; ties resolve to the lowest index.
template <class S>
int argmax_row(const Mat<S>& m, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c) {
    if (m(row, c) > m(row, best)) best = static_cast<int>(c);
  }
  return best;
}

}  // namespace capsteer
