#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

#include "diffmap/autograd.hpp"
#include "diffmap/ops.hpp"

namespace testutil {

namespace fs = std::filesystem;

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;  // "name[index] analytic vs numeric"
  std::size_t checked = 0;
};

// Compares backward() of the scalar `loss` against central differences over
// every element of `params`. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<diffmap::ag::Var()>& loss, const diffmap::ag::ParamList& params,
                                 double h = 1e-6, double floor = 1e-6, std::size_t stride = 1) {
  using namespace diffmap;
  ag::zero_grads(params);
  ag::backward(loss());
  std::vector<Tensor> analytic;
  for (const auto& [name, v] : params) analytic.push_back(v.grad());

  GradCheck out;
  ag::NoGradGuard guard;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& value = params[p].second.node()->value;
    for (std::size_t i = 0; i < value.numel(); i += stride) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = loss().value()[0];
      value[i] = saved - h;
      const double down = loss().value()[0];
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = params[p].first + "[" + std::to_string(i) + "] " + std::to_string(a) + " vs " +
                    std::to_string(numeric);
      }
    }
  }
  return out;
}

// Fresh empty directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("diffmap_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace testutil
