#include "mlma/crf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

MLMA_NAMESPACE_BEGIN

namespace {

struct Dims {
  std::size_t n;
  std::size_t t;
};

Dims check_inputs(const Tensor& emissions, const Tensor& transitions, const char* what) {
  if (emissions.rank() != 2 || emissions.rows() == 0 || emissions.cols() == 0) {
    throw DimensionError(std::string(what) + ": emissions must be a non-empty N x T matrix, got " +
                         shape_str(emissions.shape()));
  }
  const std::size_t t = emissions.cols();
  if (transitions.rank() != 2 || transitions.rows() != t + 2 || transitions.cols() != t + 2) {
    throw DimensionError(std::string(what) + ": transitions must be " + std::to_string(t + 2) + " x " +
                         std::to_string(t + 2) + ", got " + shape_str(transitions.shape()));
  }
  return {emissions.rows(), t};
}

void check_path(std::span<const std::size_t> path, Dims d, const char* what) {
  if (path.size() != d.n) {
    throw ContractError(std::string(what) + ": path length " + std::to_string(path.size()) + " differs from " +
                        std::to_string(d.n) + " tokens");
  }
  for (std::size_t y : path) {
    if (y >= d.t) throw ContractError(std::string(what) + ": tag index " + std::to_string(y) + " out of range");
  }
}

double log_sum_exp(const double* v, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

struct Lattice {
  std::size_t n, t;
  std::vector<double> emit;   // n x t
  std::vector<double> trans;  // (t+2) x (t+2)

  Lattice(const Tensor& emissions, const Tensor& transitions, Dims d) : n(d.n), t(d.t) {
    emit.assign(emissions.data().begin(), emissions.data().end());
    trans.assign(transitions.data().begin(), transitions.data().end());
  }
  double e(std::size_t k, std::size_t j) const { return emit[k * t + j]; }
  double tr(std::size_t i, std::size_t j) const { return trans[i * (t + 2) + j]; }

  // alpha[k][j]: log-sum of scores of prefixes ending in j at k.
  std::vector<double> forward() const {
    const std::size_t start = crf_start(t);
    std::vector<double> alpha(n * t);
    std::vector<double> buf(t);
    for (std::size_t j = 0; j < t; ++j) alpha[j] = tr(start, j) + e(0, j);
    for (std::size_t k = 1; k < n; ++k) {
      for (std::size_t j = 0; j < t; ++j) {
        for (std::size_t i = 0; i < t; ++i) buf[i] = alpha[(k - 1) * t + i] + tr(i, j);
        alpha[k * t + j] = log_sum_exp(buf.data(), t) + e(k, j);
      }
    }
    return alpha;
  }

  // beta[k][i]: log-sum of scores of suffixes after i at k (including STOP).
  std::vector<double> backward() const {
    const std::size_t stop = crf_stop(t);
    std::vector<double> beta(n * t);
    std::vector<double> buf(t);
    for (std::size_t i = 0; i < t; ++i) beta[(n - 1) * t + i] = tr(i, stop);
    for (std::size_t k = n - 1; k-- > 0;) {
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) buf[j] = tr(i, j) + e(k + 1, j) + beta[(k + 1) * t + j];
        beta[k * t + i] = log_sum_exp(buf.data(), t);
      }
    }
    return beta;
  }

  double log_z(const std::vector<double>& alpha) const {
    const std::size_t stop = crf_stop(t);
    std::vector<double> buf(t);
    for (std::size_t j = 0; j < t; ++j) buf[j] = alpha[(n - 1) * t + j] + tr(j, stop);
    return log_sum_exp(buf.data(), t);
  }

  double score(std::span<const std::size_t> path) const {
    double s = tr(crf_start(t), path[0]) + e(0, path[0]);
    for (std::size_t k = 1; k < n; ++k) s += tr(path[k - 1], path[k]) + e(k, path[k]);
    return s + tr(path[n - 1], crf_stop(t));
  }
};

}  // namespace

double crf_log_partition(const Tensor& emissions, const Tensor& transitions) {
  const Dims d = check_inputs(emissions, transitions, "crf_log_partition");
  const Lattice lat(emissions, transitions, d);
  return lat.log_z(lat.forward());
}

double crf_path_score(const Tensor& emissions, const Tensor& transitions, std::span<const std::size_t> path) {
  const Dims d = check_inputs(emissions, transitions, "crf_path_score");
  check_path(path, d, "crf_path_score");
  return Lattice(emissions, transitions, d).score(path);
}

Tensor crf_nll(const Tensor& emissions, const Tensor& transitions, std::span<const std::size_t> gold) {
  const Dims d = check_inputs(emissions, transitions, "crf_nll");
  check_path(gold, d, "crf_nll");
  auto lat = std::make_shared<Lattice>(emissions, transitions, d);
  const auto alpha = lat->forward();
  const double log_z = lat->log_z(alpha);
  if (!std::isfinite(log_z)) throw NumericError("crf_nll: partition function is not finite");
  // logZ >= score(gold) holds exactly; clamp the roundoff.
  const double value = std::max(0.0, log_z - lat->score(gold));
  std::vector<std::size_t> path(gold.begin(), gold.end());

  return detail::make_result(
      {1}, {static_cast<Real>(value)}, "crf_nll", {emissions, transitions},
      [lat, alpha, log_z, path](TensorNode& self) {
        const double g = static_cast<double>(self.grad[0]);
        const std::size_t n = lat->n, t = lat->t, w = t + 2;
        const std::size_t start = crf_start(t), stop = crf_stop(t);
        const auto beta = lat->backward();
        TensorNode& ein = *self.inputs[0];
        TensorNode& tin = *self.inputs[1];
        const bool want_e = ein.requires_grad, want_t = tin.requires_grad;
        std::vector<double> de(n * t, 0.0), dt(w * w, 0.0);
        for (std::size_t k = 0; k < n; ++k) {
          for (std::size_t j = 0; j < t; ++j) de[k * t + j] = std::exp(alpha[k * t + j] + beta[k * t + j] - log_z);
        }
        for (std::size_t j = 0; j < t; ++j) {
          dt[start * w + j] = de[j];
          dt[j * w + stop] = de[(n - 1) * t + j];
        }
        if (want_t) {
          for (std::size_t k = 1; k < n; ++k) {
            for (std::size_t i = 0; i < t; ++i) {
              const double a = alpha[(k - 1) * t + i] - log_z;
              for (std::size_t j = 0; j < t; ++j) {
                dt[i * w + j] += std::exp(a + lat->tr(i, j) + lat->e(k, j) + beta[k * t + j]);
              }
            }
          }
        }
        for (std::size_t k = 0; k < n; ++k) de[k * t + path[k]] -= 1.0;
        dt[start * w + path[0]] -= 1.0;
        dt[path[n - 1] * w + stop] -= 1.0;
        for (std::size_t k = 1; k < n; ++k) dt[path[k - 1] * w + path[k]] -= 1.0;
        if (want_e) {
          for (std::size_t i = 0; i < de.size(); ++i) ein.grad[i] += static_cast<Real>(g * de[i]);
        }
        if (want_t) {
          for (std::size_t i = 0; i < dt.size(); ++i) tin.grad[i] += static_cast<Real>(g * dt[i]);
        }
      });
}

ViterbiResult viterbi(const Tensor& emissions, const Tensor& transitions) {
  const Dims d = check_inputs(emissions, transitions, "viterbi");
  const Lattice lat(emissions, transitions, d);
  const std::size_t n = d.n, t = d.t;
  std::vector<double> delta(n * t);
  std::vector<std::size_t> back(n * t, 0);
  for (std::size_t j = 0; j < t; ++j) delta[j] = lat.tr(crf_start(t), j) + lat.e(0, j);
  for (std::size_t k = 1; k < n; ++k) {
    for (std::size_t j = 0; j < t; ++j) {
      std::size_t best = 0;
      double best_score = delta[(k - 1) * t] + lat.tr(0, j);
      for (std::size_t i = 1; i < t; ++i) {
        const double s = delta[(k - 1) * t + i] + lat.tr(i, j);
        if (s > best_score) {
          best_score = s;
          best = i;
        }
      }
      delta[k * t + j] = best_score + lat.e(k, j);
      back[k * t + j] = best;
    }
  }
  ViterbiResult r;
  std::size_t last = 0;
  double best_score = delta[(n - 1) * t] + lat.tr(0, crf_stop(t));
  for (std::size_t j = 1; j < t; ++j) {
    const double s = delta[(n - 1) * t + j] + lat.tr(j, crf_stop(t));
    if (s > best_score) {
      best_score = s;
      last = j;
    }
  }
  r.score = best_score;
  r.path.assign(n, 0);
  r.path[n - 1] = last;
  for (std::size_t k = n - 1; k > 0; --k) r.path[k - 1] = back[k * t + r.path[k]];
  return r;
}

MLMA_NAMESPACE_END
