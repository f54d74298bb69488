#include "mlma/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mlma/rng.hpp"

MLMA_NAMESPACE_BEGIN

GradCheckResult gradient_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                               const GradCheckOptions& options) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  const double f0 = loss.item();
  loss = Tensor();

  std::vector<std::vector<Real>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  auto eval = [&] {
    NoGradGuard guard;
    return static_cast<double>(loss_fn().item());
  };

  Rng rng(options.seed);
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param > 0 && coords.size() > options.max_coords_per_param) {
      rng.shuffle(coords);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const Real saved = values[idx];
      auto at = [&](double offset) {
        values[idx] = static_cast<Real>(saved + offset);
        return eval();
      };
      const double h = options.eps;
      const double fp = at(h), fm = at(-h), fp2 = at(2 * h), fm2 = at(-2 * h);
      values[idx] = saved;

      // Richardson combination of the central differences at h and 2h cancels
      // their h^2 truncation term.
      const double central = (fp - fm) / (2.0 * h);
      const double central_far = (fp2 - fm2) / (4.0 * h);
      const double numeric = (4.0 * central - central_far) / 3.0;
      const double d2_near = (fp - 2 * f0 + fm) / (h * h);
      const double d2_far = (fp2 - 2 * f0 + fm2) / (4 * h * h);
      // A slope jump w at distance delta < h moves the central difference by
      // w (h - delta) / 2h and the second-difference gap by 3 w (h - delta) / 4h^2.
      const double kink_shift = std::abs(d2_near - d2_far) * (2.0 * h / 3.0);
      const double noise = 64.0 * std::numeric_limits<Real>::epsilon() * std::max(1.0, std::abs(f0)) / h;
      const double a = analytic[pi][idx];
      const double scale = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      if (kink_shift > std::max(noise, options.kink_tolerance * scale)) {
        ++result.unreliable;
        continue;
      }
      const double rel = std::abs(a - numeric) / scale;
      ++result.checked;
      if (rel > result.max_relative_error || result.checked == 1) {
        if (rel >= result.max_relative_error) {
          result.max_relative_error = rel;
          result.worst_param = pi;
          result.worst_index = idx;
          result.worst_analytic = a;
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

MLMA_NAMESPACE_END
