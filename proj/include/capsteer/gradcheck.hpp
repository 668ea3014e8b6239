#pragma once

// Central-difference gradient verification.
//
// The relative error reported is |a - n| / max(|a|, |n|, 1e-8). A
// coordinate passes when |a - n| <= max(rtol * max(|a|, |n|), atol).
// The absolute term exists because a central difference of a function
// evaluated in scalar S carries rounding noise of order
// |f| * eps_S / (2 * eps): at eps = 1e-3 in float that is about 1e-4, so
// coordinates whose true gradient sits below that floor cannot be
// resolved by the quotient no matter how correct the analytic gradient
// is. atol < 0 selects that derived floor automatically; in double it is
// ~1e-12 and the check degenerates to the plain relative rule.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "capsteer/rng.hpp"
#include "capsteer/tensor.hpp"

namespace capsteer {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  int coordinates_sampled = 0;
  bool pass = false;
  double rtol = 0.0;
  double atol = 0.0;
};

// f rebuilds the scalar loss from the current values of params.
// min_grad restricts sampling to coordinates with |analytic| >= min_grad
// (0 samples everywhere); if the filter empties the pool, all
// coordinates become candidates again.
template <class S>
GradCheckReport finite_diff_check(const std::string& name,
                                  const std::function<Tensor<S>()>& f,
                                  std::vector<Tensor<S>> params, double eps,
                                  int samples, Rng& rng, double rtol = 1e-3,
                                  double atol = -1.0, double min_grad = 0.0) {
  if (eps <= 0.0) throw ConfigError("finite_diff_check: eps must be > 0");
  GradCheckReport report;
  report.op_name = name;
  report.rtol = rtol;

  for (auto& p : params) p.zero_grad();
  Tensor<S> loss = f();
  const double f0 = static_cast<double>(loss.item());
  loss.backward();

  std::vector<Mat<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.push_back(p.grad().template cast<double>());
    } else {
      analytic.push_back(Mat<double>::Zero(p.rows(), p.cols()));
    }
  }

  if (atol < 0.0) {
    const double ulp = static_cast<double>(std::numeric_limits<S>::epsilon());
    atol = 8.0 * std::max(1.0, std::abs(f0)) * ulp / (2.0 * eps);
  }
  report.atol = atol;

  struct Coord {
    std::size_t p;
    Eigen::Index r, c;
  };
  std::vector<Coord> pool;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (Eigen::Index r = 0; r < params[i].rows(); ++r) {
      for (Eigen::Index c = 0; c < params[i].cols(); ++c) {
        if (std::abs(analytic[i](r, c)) >= min_grad) pool.push_back({i, r, c});
      }
    }
  }
  if (pool.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (Eigen::Index r = 0; r < params[i].rows(); ++r) {
        for (Eigen::Index c = 0; c < params[i].cols(); ++c) {
          pool.push_back({i, r, c});
        }
      }
    }
  }

  rng.shuffle(pool);
  const std::size_t n =
      std::min(pool.size(), static_cast<std::size_t>(samples));

  bool all_pass = true;
  for (std::size_t s = 0; s < n; ++s) {
    const Coord& co = pool[s];
    Mat<S>& value = params[co.p].value_mut();
    const S orig = value(co.r, co.c);
    const S hi = orig + static_cast<S>(eps);
    const S lo = orig - static_cast<S>(eps);

    double fp, fm;
    {
      NoGradGuard ng;
      value(co.r, co.c) = hi;
      fp = static_cast<double>(f().item());
      value(co.r, co.c) = lo;
      fm = static_cast<double>(f().item());
      value(co.r, co.c) = orig;
    }
    // The realized step can differ from 2*eps after rounding to S; using
    // the actual difference removes that quantization from the quotient.
    const double denom = static_cast<double>(hi) - static_cast<double>(lo);
    const double numeric = (fp - fm) / denom;
    const double a = analytic[co.p](co.r, co.c);
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    report.max_rel_error = std::max(report.max_rel_error, rel);
    const double bound =
        std::max(rtol * std::max(std::abs(a), std::abs(numeric)), atol);
    if (std::abs(a - numeric) > bound) all_pass = false;
  }
  report.coordinates_sampled = static_cast<int>(n);
  report.pass = all_pass;
  return report;
}

}  // namespace capsteer
