#pragma once

// Central finite-difference gradient checking shared by the module tests and
// the acceptance suite. The loss closure must rebuild its graph from the
// current parameter values on every call.

#include "mufasa/support.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mufasa::testing {

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst;  // "name(i,j)"
};

// analytic: name -> gradient matrix (same shapes as the parameters).
// params: name -> matrix pointer; every entry is perturbed coordinate-wise.
inline FdReport finite_difference_check(
    const std::vector<std::pair<std::string, Mat*>>& params,
    const std::function<double()>& loss,
    const std::function<Mat(const std::string&)>& analytic_grad, double step = 1e-5) {
  FdReport report;
  for (const auto& [name, mat] : params) {
    const Mat grad = analytic_grad(name);
    for (Index i = 0; i < mat->rows(); ++i)
      for (Index j = 0; j < mat->cols(); ++j) {
        const double saved = (*mat)(i, j);
        (*mat)(i, j) = saved + step;
        const double up = loss();
        (*mat)(i, j) = saved - step;
        const double down = loss();
        (*mat)(i, j) = saved;
        const double fd = (up - down) / (2.0 * step);
        const double an = grad(i, j);
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        const double rel = std::abs(fd - an) / denom;
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst = name + "(" + std::to_string(i) + "," + std::to_string(j) + ")";
        }
      }
  }
  return report;
}

}  // namespace mufasa::testing
