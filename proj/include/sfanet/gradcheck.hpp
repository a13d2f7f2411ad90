#ifndef SFANET_GRADCHECK_HPP
#define SFANET_GRADCHECK_HPP

#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>

#include "sfanet/tensor.hpp"

namespace sfanet {

template <typename T>
struct GradCheckReport {
  T max_rel_err = 0;
  std::string worst_param;
  int64_t worst_index = -1;
  T analytic = 0;
  T numeric = 0;
  int64_t probes = 0;
};

// Central-difference check of d(loss)/d(param) for every (or a sampled subset
// of) parameter element. `loss_fn` must rebuild the loss from the live param
// tensors on every call. Relative error is |a-n| / max(1, |a|, |n|).
template <typename T>
GradCheckReport<T> finite_difference_check(
    const std::vector<std::pair<std::string, Tensor<T>>>& params,
    const std::function<Tensor<T>()>& loss_fn, T epsilon,
    int64_t max_probes_per_tensor = -1, uint64_t probe_seed = 17) {
  for (const auto& [name, p] : params) {
    Tensor<T> param = p;  // cheap shared handle
    SFA_CHECK(param.requires_grad()) << "gradcheck param '" << name << "' does not require grad";
    param.zero_grad();
  }
  Tensor<T> loss = loss_fn();
  SFA_CHECK(loss.numel() == 1) << "gradcheck loss must be scalar, got " << shape_str(loss.shape());
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) {
    SFA_CHECK(p.has_grad()) << "gradcheck param '" << name << "' received no gradient";
    analytic.push_back(p.grad_vec());
  }

  GradCheckReport<T> report;
  std::mt19937_64 rng(probe_seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& name = params[pi].first;
    Tensor<T> p = params[pi].second;
    const int64_t n = p.numel();
    std::vector<int64_t> idx;
    if (max_probes_per_tensor > 0 && n > max_probes_per_tensor) {
      std::vector<int64_t> all(static_cast<size_t>(n));
      std::iota(all.begin(), all.end(), int64_t{0});
      std::sample(all.begin(), all.end(), std::back_inserter(idx),
                  static_cast<size_t>(max_probes_per_tensor), rng);
    } else {
      idx.resize(static_cast<size_t>(n));
      std::iota(idx.begin(), idx.end(), int64_t{0});
    }
    for (int64_t i : idx) {
      T* slot = p.data() + i;
      const T saved = *slot;
      NoGradGuard guard;
      *slot = saved + epsilon;
      const T up = loss_fn().item();
      *slot = saved - epsilon;
      const T down = loss_fn().item();
      *slot = saved;
      const T numeric = (up - down) / (T(2) * epsilon);
      const T a = analytic[pi][static_cast<size_t>(i)];
      const T rel = std::abs(a - numeric) / std::max({T(1), std::abs(a), std::abs(numeric)});
      ++report.probes;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace sfanet

#endif
