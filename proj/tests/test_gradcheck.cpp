// Finite-difference verification of every differentiable op, run in
// double where the checks are sharp (rtol 1e-5), plus one float composite
// at the 32-bit tolerance used by the acceptance gate.

#include <vector>

#include "capsteer/classifier.hpp"
#include "capsteer/gradcheck.hpp"
#include "capsteer/ops.hpp"
#include "capsteer/rng.hpp"
#include "doctest.h"

using namespace capsteer;

namespace {

template <class S>
Mat<S> randm(Rng& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      m(i, j) = static_cast<S>(rng.normal() * s);
    }
  }
  return m;
}

// Weighted sum makes the scalarization asymmetric so gradients are
// informative in every coordinate.
template <class S>
Tensor<S> pin(const Tensor<S>& t, const Mat<S>& w) {
  return sum_all(mul(t, Tensor<S>::constant(w)));
}

void expect_pass(const GradCheckReport& r) {
  INFO(r.op_name, ": max_rel_error=", r.max_rel_error,
       " sampled=", r.coordinates_sampled);
  CHECK(r.pass);
}

}  // namespace

TEST_CASE("double-precision gradcheck across all ops") {
  Rng rng(42);
  Rng sample_rng(43);
  const double eps = 1e-5;
  const double rtol = 1e-5;
  const int n_samples = 24;

  auto check = [&](const char* name, const std::function<Tensor<double>()>& f,
                   std::vector<Tensor<double>> params) {
    expect_pass(finite_diff_check<double>(name, f, std::move(params), eps,
                                          n_samples, sample_rng, rtol));
  };

  SUBCASE("add sub mul scale") {
    auto a = Tensor<double>::param(randm<double>(rng, 3, 4));
    auto b = Tensor<double>::param(randm<double>(rng, 3, 4));
    Mat<double> w = randm<double>(rng, 3, 4);
    check("add", [&] { return pin(add(a, b), w); }, {a, b});
    check("sub", [&] { return pin(sub(a, b), w); }, {a, b});
    check("mul", [&] { return pin(mul(a, b), w); }, {a, b});
    check("scale", [&] { return pin(scale(a, 2.5), w); }, {a});
  }

  SUBCASE("add_rowvec") {
    auto a = Tensor<double>::param(randm<double>(rng, 3, 4));
    auto b = Tensor<double>::param(randm<double>(rng, 1, 4));
    Mat<double> w = randm<double>(rng, 3, 4);
    check("add_rowvec", [&] { return pin(add_rowvec(a, b), w); }, {a, b});
  }

  SUBCASE("matmul and transpose") {
    auto a = Tensor<double>::param(randm<double>(rng, 3, 5));
    auto b = Tensor<double>::param(randm<double>(rng, 5, 2));
    Mat<double> w = randm<double>(rng, 3, 2);
    check("matmul", [&] { return pin(matmul(a, b), w); }, {a, b});
    Mat<double> wt = randm<double>(rng, 5, 3);
    check("transpose", [&] { return pin(transpose(a), wt); }, {a});
  }

  SUBCASE("concat and slice") {
    auto a = Tensor<double>::param(randm<double>(rng, 2, 3));
    auto b = Tensor<double>::param(randm<double>(rng, 3, 3));
    Mat<double> w = randm<double>(rng, 5, 3);
    check("concat_rows", [&] { return pin(concat_rows(a, b), w); }, {a, b});
    Mat<double> ws = randm<double>(rng, 2, 3);
    check("slice_rows", [&] { return pin(slice_rows(b, 1, 2), ws); }, {b});
  }

  SUBCASE("reductions") {
    auto a = Tensor<double>::param(randm<double>(rng, 3, 4));
    check("sum_all", [&] { return sum_all(a); }, {a});
    check("mean_all", [&] { return mean_all(a); }, {a});
    Mat<double> w = randm<double>(rng, 1, 4);
    check("mean_rows", [&] { return pin(mean_rows(a), w); }, {a});
  }

  SUBCASE("softmax and log-softmax") {
    auto a = Tensor<double>::param(randm<double>(rng, 2, 6));
    Mat<double> w = randm<double>(rng, 2, 6);
    check("softmax_rows", [&] { return pin(softmax_rows(a), w); }, {a});
    check("log_softmax_rows", [&] { return pin(log_softmax_rows(a), w); },
          {a});
  }

  SUBCASE("layer_norm_rows") {
    auto x = Tensor<double>::param(randm<double>(rng, 3, 6));
    auto g = Tensor<double>::param(randm<double>(rng, 1, 6, 0.5));
    auto b = Tensor<double>::param(randm<double>(rng, 1, 6, 0.5));
    Mat<double> w = randm<double>(rng, 3, 6);
    check("layer_norm_rows",
          [&] { return pin(layer_norm_rows(x, g, b, 1e-5), w); }, {x, g, b});
  }

  SUBCASE("gelu") {
    auto a = Tensor<double>::param(randm<double>(rng, 3, 4));
    Mat<double> w = randm<double>(rng, 3, 4);
    check("gelu", [&] { return pin(gelu(a), w); }, {a});
  }

  SUBCASE("embedding_rows") {
    auto table = Tensor<double>::param(randm<double>(rng, 6, 4));
    Mat<double> w = randm<double>(rng, 3, 4);
    check("embedding_rows",
          [&] { return pin(embedding_rows(table, std::vector<int>{4, 1, 4}), w); },
          {table});
  }

  SUBCASE("cross entropies") {
    auto logits = Tensor<double>::param(randm<double>(rng, 3, 5));
    check("cross_entropy_indices",
          [&] { return cross_entropy_indices(logits, {2, -1, 0}); }, {logits});
    Mat<double> target =
        detail::softmax_rows_value(randm<double>(rng, 3, 5));
    check("cross_entropy_from_logits",
          [&] { return cross_entropy_from_logits(logits, target); }, {logits});
  }

  SUBCASE("ragged causal attention") {
    auto q = Tensor<double>::param(randm<double>(rng, 5, 4));
    auto k = Tensor<double>::param(randm<double>(rng, 5, 4));
    auto v = Tensor<double>::param(randm<double>(rng, 5, 4));
    std::vector<Eigen::Index> offsets{0, 2, 5};
    Mat<double> w = randm<double>(rng, 5, 4);
    check("causal_self_attention_ragged",
          [&] {
            return pin(causal_self_attention_ragged(q, k, v, offsets, 2), w);
          },
          {q, k, v});
  }

  SUBCASE("attend_step") {
    auto q = Tensor<double>::param(randm<double>(rng, 1, 4));
    auto k = Tensor<double>::param(randm<double>(rng, 3, 4));
    auto v = Tensor<double>::param(randm<double>(rng, 3, 4));
    Mat<double> w = randm<double>(rng, 1, 4);
    check("attend_step", [&] { return pin(attend_step(q, k, v, 2), w); },
          {q, k, v});
  }

  SUBCASE("segment_mean_rows") {
    auto x = Tensor<double>::param(randm<double>(rng, 5, 3));
    std::vector<Eigen::Index> offsets{0, 2, 5};
    Mat<double> w = randm<double>(rng, 2, 3);
    check("segment_mean_rows",
          [&] { return pin(segment_mean_rows(x, offsets), w); }, {x});
  }

  SUBCASE("composite block") {
    auto x = Tensor<double>::param(randm<double>(rng, 4, 6));
    auto w1 = Tensor<double>::param(randm<double>(rng, 6, 6, 0.3));
    auto g = Tensor<double>::param(Mat<double>::Ones(1, 6));
    auto b = Tensor<double>::param(randm<double>(rng, 1, 6, 0.1));
    check("composite",
          [&] {
            auto h = layer_norm_rows(x, g, b, 1e-5);
            auto y = gelu(matmul(h, w1));
            return cross_entropy_indices(add(x, y), {1, 4, 0, 2});
          },
          {x, w1, g, b});
  }
}

TEST_CASE("float composite passes at the 32-bit tolerance") {
  // Central differences at eps 1e-3 in float resolve gradients only above
  // the rounding noise floor, so sampling is restricted to informative
  // coordinates; the double-precision suite above covers the rest.
  Rng rng(7);
  Rng sample_rng(8);
  auto x = Tensor<float>::param(randm<float>(rng, 3, 8));
  auto w1 = Tensor<float>::param(randm<float>(rng, 8, 8, 0.4));
  auto g = Tensor<float>::param(Mat<float>::Ones(1, 8));
  auto b = Tensor<float>::param(Mat<float>::Zero(1, 8));
  auto f = [&] {
    auto h = layer_norm_rows(x, g, b, 1e-5);
    auto y = gelu(matmul(h, w1));
    return cross_entropy_indices(add(x, y), {1, 6, 3});
  };
  auto rep = finite_diff_check<float>("float_composite", f, {x, w1, g, b},
                                      1e-3, 24, sample_rng, 1e-3, -1.0, 0.05);
  INFO("max_rel_error=", rep.max_rel_error);
  CHECK(rep.pass);
}
