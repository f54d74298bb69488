#include "mlma/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

MLMA_NAMESPACE_BEGIN

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct Dims {
  std::size_t rows;
  std::size_t cols;
};

Dims mat_dims(const Tensor& t) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw DimensionError("expected a matrix or vector, got " + shape_str(t.shape()));
}

ConstMatMap cmap(const Tensor& t) {
  auto d = mat_dims(t);
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(d.rows), static_cast<Eigen::Index>(d.cols));
}

MatMap gmap(TensorNode& n, std::size_t rows, std::size_t cols) {
  return MatMap(n.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMatMap gcmap(const TensorNode& n, std::size_t rows, std::size_t cols) {
  return ConstMatMap(n.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

TensorNode& input(TensorNode& self, std::size_t i) { return *self.inputs[i]; }

// ---------------------------------------------------------------------------
// Broadcasting for elementwise binaries.

enum class Bcast { Same, Row, Scalar };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.size() == 1) return Bcast::Scalar;
  auto da = mat_dims(a);
  if (b.size() == da.cols && (b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1))) return Bcast::Row;
  throw DimensionError(std::string(op) + ": cannot combine shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

inline std::size_t bidx(Bcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Bcast::Same: return i;
    case Bcast::Row: return i % cols;
    case Bcast::Scalar: return 0;
  }
  return 0;
}

template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da dfa, Db dfb) {
  const Bcast kind = broadcast_kind(a, b, op);
  const std::size_t cols = mat_dims(a).cols;
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[bidx(kind, i, cols)]);
  return detail::make_result(a.shape(), std::move(out), op, {a, b}, [kind, cols, dfa, dfb](TensorNode& self) {
    TensorNode& na = input(self, 0);
    TensorNode& nb = input(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t j = bidx(kind, i, cols);
      const Real g = self.grad[i];
      if (na.requires_grad) na.grad[i] += g * dfa(na.data[i], nb.data[j], self.data[i]);
      if (nb.requires_grad) nb.grad[j] += g * dfb(na.data[i], nb.data[j], self.data[i]);
    }
  });
}

template <typename Fwd, typename Dx>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Dx dfx) {
  const auto& ad = a.data();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
  return detail::make_result(a.shape(), std::move(out), op, {a}, [dfx](TensorNode& self) {
    TensorNode& na = input(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i] * dfx(na.data[i], self.data[i]);
  });
}

void require_finite(const Tensor& t, const char* op) {
  for (Real v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Transpose tb) {
  auto da = mat_dims(a);
  auto db = mat_dims(b);
  const bool bt = tb == Transpose::Yes;
  const std::size_t inner_b = bt ? db.cols : db.rows;
  const std::size_t n = bt ? db.rows : db.cols;
  if (da.cols != inner_b) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (bt ? " (b transposed)" : ""));
  }
  std::vector<Real> out(da.rows * n);
  MatMap c(out.data(), static_cast<Eigen::Index>(da.rows), static_cast<Eigen::Index>(n));
  if (bt) {
    c.noalias() = cmap(a) * cmap(b).transpose();
  } else {
    c.noalias() = cmap(a) * cmap(b);
  }
  return detail::make_result({da.rows, n}, std::move(out), "matmul", {a, b}, [da, db, n, bt](TensorNode& self) {
    TensorNode& na = input(self, 0);
    TensorNode& nb = input(self, 1);
    auto g = gcmap(self, da.rows, n);
    ConstMatMap am(na.data.data(), static_cast<Eigen::Index>(da.rows), static_cast<Eigen::Index>(da.cols));
    ConstMatMap bm(nb.data.data(), static_cast<Eigen::Index>(db.rows), static_cast<Eigen::Index>(db.cols));
    if (na.requires_grad) {
      auto ga = gmap(na, da.rows, da.cols);
      if (bt) {
        ga.noalias() += g * bm;
      } else {
        ga.noalias() += g * bm.transpose();
      }
    }
    if (nb.requires_grad) {
      auto gb = gmap(nb, db.rows, db.cols);
      if (bt) {
        gb.noalias() += g.transpose() * am;
      } else {
        gb.noalias() += am.transpose() * g;
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](Real x, Real y) { return x + y; }, [](Real, Real, Real) { return Real(1); },
      [](Real, Real, Real) { return Real(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](Real x, Real y) { return x - y; }, [](Real, Real, Real) { return Real(1); },
      [](Real, Real, Real) { return Real(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](Real x, Real y) { return x * y; }, [](Real, Real y, Real) { return y; },
      [](Real x, Real, Real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](Real x, Real y) { return x / y; }, [](Real, Real y, Real) { return Real(1) / y; },
      [](Real, Real y, Real out) { return -out / y; });
}

Tensor scale(const Tensor& a, Real c) {
  return unary(
      a, "scale", [c](Real x) { return c * x; }, [c](Real, Real) { return c; });
}

Tensor add_scalar(const Tensor& a, Real c) {
  return unary(
      a, "add_scalar", [c](Real x) { return x + c; }, [](Real, Real) { return Real(1); });
}

Tensor neg(const Tensor& a) { return scale(a, Real(-1)); }

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, "sqrt", [](Real x) { return std::sqrt(x); },
      [](Real, Real y) { return y > Real(0) ? Real(0.5) / y : Real(0); });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, "abs", [](Real x) { return std::abs(x); },
      [](Real x, Real) { return x > 0 ? Real(1) : (x < 0 ? Real(-1) : Real(0)); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid", [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](Real x) { return x > 0 ? x : Real(0); }, [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Tensor gelu(const Tensor& a) {
  constexpr Real inv_sqrt2 = Real(0.70710678118654752440);
  constexpr Real inv_sqrt2pi = Real(0.39894228040143267794);
  return unary(
      a, "gelu", [](Real x) { return Real(0.5) * x * (Real(1) + std::erf(x * inv_sqrt2)); },
      [](Real x, Real) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(Real(-0.5) * x * x);
      });
}

Tensor sum(const Tensor& a) {
  Real s = 0;
  for (Real v : a.data()) s += v;
  return detail::make_result({1}, {s}, "sum", {a}, [](TensorNode& self) {
    TensorNode& na = input(self, 0);
    const Real g = self.grad[0];
    for (auto& x : na.grad) x += g;
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), Real(1) / static_cast<Real>(a.size())); }

Tensor sum_rows(const Tensor& a) {
  auto d = mat_dims(a);
  std::vector<Real> out(d.cols, Real(0));
  const auto& ad = a.data();
  for (std::size_t r = 0; r < d.rows; ++r) {
    for (std::size_t c = 0; c < d.cols; ++c) out[c] += ad[r * d.cols + c];
  }
  return detail::make_result({1, d.cols}, std::move(out), "sum_rows", {a}, [d](TensorNode& self) {
    TensorNode& na = input(self, 0);
    for (std::size_t r = 0; r < d.rows; ++r) {
      for (std::size_t c = 0; c < d.cols; ++c) na.grad[r * d.cols + c] += self.grad[c];
    }
  });
}

Tensor mean_rows(const Tensor& a) { return scale(sum_rows(a), Real(1) / static_cast<Real>(mat_dims(a).rows)); }

Tensor l2_norm(const Tensor& a) {
  Real s = 0;
  for (Real v : a.data()) s += v * v;
  return detail::make_result({1}, {std::sqrt(s)}, "l2_norm", {a}, [](TensorNode& self) {
    TensorNode& na = input(self, 0);
    const Real n = self.data[0];
    if (n <= Real(0)) return;
    const Real g = self.grad[0] / n;
    for (std::size_t i = 0; i < na.data.size(); ++i) na.grad[i] += g * na.data[i];
  });
}

Tensor l1_norm(const Tensor& a) { return sum(abs(a)); }

Tensor row_norms(const Tensor& a) {
  auto d = mat_dims(a);
  std::vector<Real> out(d.rows);
  const auto& ad = a.data();
  for (std::size_t r = 0; r < d.rows; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < d.cols; ++c) s += ad[r * d.cols + c] * ad[r * d.cols + c];
    out[r] = std::sqrt(s);
  }
  return detail::make_result({d.rows, 1}, std::move(out), "row_norms", {a}, [d](TensorNode& self) {
    TensorNode& na = input(self, 0);
    for (std::size_t r = 0; r < d.rows; ++r) {
      const Real n = self.data[r];
      if (n <= Real(0)) continue;
      const Real g = self.grad[r] / n;
      for (std::size_t c = 0; c < d.cols; ++c) na.grad[r * d.cols + c] += g * na.data[r * d.cols + c];
    }
  });
}

Tensor softmax(const Tensor& a, int axis) {
  if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
  require_finite(a, "softmax");
  auto d = mat_dims(a);
  // Strided view: `lines` independent vectors of `len` entries each.
  const std::size_t lines = axis == 1 ? d.rows : d.cols;
  const std::size_t len = axis == 1 ? d.cols : d.rows;
  const std::size_t stride = axis == 1 ? 1 : d.cols;
  const std::size_t line_step = axis == 1 ? d.cols : 1;
  const auto& ad = a.data();
  std::vector<Real> out(a.size());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_step;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, ad[base + i * stride]);
    Real z = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const Real e = std::exp(ad[base + i * stride] - mx);
      out[base + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= z;
  }
  return detail::make_result(a.shape(), std::move(out), "softmax", {a},
                             [lines, len, stride, line_step](TensorNode& self) {
                               TensorNode& na = input(self, 0);
                               for (std::size_t l = 0; l < lines; ++l) {
                                 const std::size_t base = l * line_step;
                                 Real dot = 0;
                                 for (std::size_t i = 0; i < len; ++i) {
                                   const std::size_t j = base + i * stride;
                                   dot += self.grad[j] * self.data[j];
                                 }
                                 for (std::size_t i = 0; i < len; ++i) {
                                   const std::size_t j = base + i * stride;
                                   na.grad[j] += self.data[j] * (self.grad[j] - dot);
                                 }
                               }
                             });
}

Tensor log_softmax(const Tensor& a) {
  require_finite(a, "log_softmax");
  auto d = mat_dims(a);
  const auto& ad = a.data();
  std::vector<Real> out(a.size());
  for (std::size_t r = 0; r < d.rows; ++r) {
    const Real* x = ad.data() + r * d.cols;
    Real mx = *std::max_element(x, x + d.cols);
    Real z = 0;
    for (std::size_t c = 0; c < d.cols; ++c) z += std::exp(x[c] - mx);
    const Real lse = mx + std::log(z);
    for (std::size_t c = 0; c < d.cols; ++c) out[r * d.cols + c] = x[c] - lse;
  }
  return detail::make_result(a.shape(), std::move(out), "log_softmax", {a}, [d](TensorNode& self) {
    TensorNode& na = input(self, 0);
    for (std::size_t r = 0; r < d.rows; ++r) {
      Real gs = 0;
      for (std::size_t c = 0; c < d.cols; ++c) gs += self.grad[r * d.cols + c];
      for (std::size_t c = 0; c < d.cols; ++c) {
        const std::size_t j = r * d.cols + c;
        na.grad[j] += self.grad[j] - std::exp(self.data[j]) * gs;
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  auto d = mat_dims(logits);
  if (targets.size() != d.rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  require_finite(logits, "cross_entropy");
  const auto& ld = logits.data();
  // Softmax rows are kept for the backward pass.
  std::vector<Real> probs(logits.size());
  Real total = 0;
  for (std::size_t r = 0; r < d.rows; ++r) {
    const std::int64_t t = targets[r];
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= d.cols) {
      throw ContractError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(d.cols) +
                          ")");
    }
    const Real* x = ld.data() + r * d.cols;
    Real mx = *std::max_element(x, x + d.cols);
    Real z = 0;
    for (std::size_t c = 0; c < d.cols; ++c) {
      const Real e = std::exp(x[c] - mx);
      probs[r * d.cols + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < d.cols; ++c) probs[r * d.cols + c] /= z;
    total += -(x[t] - mx - std::log(z));
  }
  std::vector<std::int64_t> tg(targets.begin(), targets.end());
  return detail::make_result({1}, {total}, "cross_entropy", {logits},
                             [d, tg = std::move(tg), probs = std::move(probs)](TensorNode& self) {
                               TensorNode& nl = input(self, 0);
                               const Real g = self.grad[0];
                               for (std::size_t r = 0; r < d.rows; ++r) {
                                 if (tg[r] == kIgnoreTarget) continue;
                                 for (std::size_t c = 0; c < d.cols; ++c) {
                                   nl.grad[r * d.cols + c] += g * probs[r * d.cols + c];
                                 }
                                 nl.grad[r * d.cols + static_cast<std::size_t>(tg[r])] -= g;
                               }
                             });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  auto d = mat_dims(x);
  if (gamma.size() != d.cols || beta.size() != d.cols) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match " + shape_str(x.shape()));
  }
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  std::vector<Real> out(x.size());
  std::vector<Real> xhat(x.size());
  std::vector<Real> rstd(d.rows);
  for (std::size_t r = 0; r < d.rows; ++r) {
    const Real* row = xd.data() + r * d.cols;
    Real mu = 0;
    for (std::size_t c = 0; c < d.cols; ++c) mu += row[c];
    mu /= static_cast<Real>(d.cols);
    Real var = 0;
    for (std::size_t c = 0; c < d.cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<Real>(d.cols);
    rstd[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d.cols; ++c) {
      const std::size_t j = r * d.cols + c;
      xhat[j] = (row[c] - mu) * rstd[r];
      out[j] = xhat[j] * gd[c] + bd[c];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [d, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode& self) {
        TensorNode& nx = input(self, 0);
        TensorNode& ng = input(self, 1);
        TensorNode& nb = input(self, 2);
        const Real inv_n = Real(1) / static_cast<Real>(d.cols);
        for (std::size_t r = 0; r < d.rows; ++r) {
          Real mean_dxhat = 0;
          Real mean_dxhat_xhat = 0;
          for (std::size_t c = 0; c < d.cols; ++c) {
            const std::size_t j = r * d.cols + c;
            const Real g = self.grad[j];
            if (ng.requires_grad) ng.grad[c] += g * xhat[j];
            if (nb.requires_grad) nb.grad[c] += g;
            const Real dxh = g * ng.data[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[j];
          }
          if (!nx.requires_grad) continue;
          mean_dxhat *= inv_n;
          mean_dxhat_xhat *= inv_n;
          for (std::size_t c = 0; c < d.cols; ++c) {
            const std::size_t j = r * d.cols + c;
            const Real dxh = self.grad[j] * ng.data[c];
            nx.grad[j] += rstd[r] * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
          }
        }
      });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: rate must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const Real keep_scale = Real(1.0 / (1.0 - p));
  std::vector<Real> mask(x.size());
  std::vector<Real> out(x.size());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < p ? Real(0) : keep_scale;
    out[i] = xd[i] * mask[i];
  }
  return detail::make_result(x.shape(), std::move(out), "dropout", {x}, [mask = std::move(mask)](TensorNode& self) {
    TensorNode& nx = input(self, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) nx.grad[i] += self.grad[i] * mask[i];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = mat_dims(parts[0]).rows;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    auto d = mat_dims(p);
    if (d.rows != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    widths.push_back(d.cols);
    total += d.cols;
  }
  std::vector<Real> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pd = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pd.data() + r * widths[k], widths[k], out.data() + r * total + off);
    }
    off += widths[k];
  }
  std::vector<Tensor> ins(parts.begin(), parts.end());
  return detail::make_result({rows, total}, std::move(out), "concat_cols", std::move(ins),
                             [rows, total, widths](TensorNode& self) {
                               std::size_t o = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 TensorNode& n = input(self, k);
                                 if (n.requires_grad) {
                                   for (std::size_t r = 0; r < rows; ++r) {
                                     for (std::size_t c = 0; c < widths[k]; ++c) {
                                       n.grad[r * widths[k] + c] += self.grad[r * total + o + c];
                                     }
                                   }
                                 }
                                 o += widths[k];
                               }
                             });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = mat_dims(parts[0]).cols;
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    auto d = mat_dims(p);
    if (d.cols != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    sizes.push_back(p.size());
    rows += d.rows;
  }
  std::vector<Real> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<Tensor> ins(parts.begin(), parts.end());
  return detail::make_result({rows, cols}, std::move(out), "concat_rows", std::move(ins),
                             [sizes](TensorNode& self) {
                               std::size_t o = 0;
                               for (std::size_t k = 0; k < sizes.size(); ++k) {
                                 TensorNode& n = input(self, k);
                                 if (n.requires_grad) {
                                   for (std::size_t i = 0; i < sizes[k]; ++i) n.grad[i] += self.grad[o + i];
                                 }
                                 o += sizes[k];
                               }
                             });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  auto d = mat_dims(x);
  if (begin >= end || end > d.cols) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of " +
                         shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<Real> out(d.rows * w);
  const auto& xd = x.data();
  for (std::size_t r = 0; r < d.rows; ++r) std::copy_n(xd.data() + r * d.cols + begin, w, out.data() + r * w);
  return detail::make_result({d.rows, w}, std::move(out), "slice_cols", {x}, [d, begin, w](TensorNode& self) {
    TensorNode& nx = input(self, 0);
    for (std::size_t r = 0; r < d.rows; ++r) {
      for (std::size_t c = 0; c < w; ++c) nx.grad[r * d.cols + begin + c] += self.grad[r * w + c];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  auto d = mat_dims(x);
  if (begin >= end || end > d.rows) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of " +
                         shape_str(x.shape()));
  }
  std::vector<Real> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * d.cols),
                        x.data().begin() + static_cast<std::ptrdiff_t>(end * d.cols));
  return detail::make_result({end - begin, d.cols}, std::move(out), "slice_rows", {x},
                             [off = begin * d.cols](TensorNode& self) {
                               TensorNode& nx = input(self, 0);
                               for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[off + i] += self.grad[i];
                             });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  auto d = mat_dims(table);
  if (ids.empty()) throw ContractError("gather_rows: empty index list");
  std::vector<Real> out(ids.size() * d.cols);
  const auto& td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= d.rows) {
      throw ContractError("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                          std::to_string(d.rows) + " rows");
    }
    std::copy_n(td.data() + ids[i] * d.cols, d.cols, out.data() + i * d.cols);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return detail::make_result({ids.size(), d.cols}, std::move(out), "gather_rows", {table},
                             [cols = d.cols, idx = std::move(idx)](TensorNode& self) {
                               TensorNode& nt = input(self, 0);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 Real* dst = nt.grad.data() + idx[i] * cols;
                                 const Real* src = self.grad.data() + i * cols;
                                 for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                               }
                             });
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Segment> segments,
                        std::size_t heads, AttentionMask mask) {
  auto dq = mat_dims(q);
  if (mat_dims(k).rows != dq.rows || mat_dims(v).rows != dq.rows || k.size() != q.size() || v.size() != q.size()) {
    throw DimensionError("masked_attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t width = dq.cols;
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("masked_attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  std::size_t covered = 0;
  for (const auto& s : segments) {
    if (s.offset != covered || s.length == 0) throw ContractError("masked_attention: segments must tile the rows");
    covered += s.length;
  }
  if (covered != dq.rows) throw ContractError("masked_attention: segments do not cover all rows");

  const std::size_t hd = width / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  const bool causal = mask == AttentionMask::Causal;
  const auto& qd = q.data();
  const auto& kd = k.data();
  const auto& vd = v.data();

  // Attention probabilities, one len x len block per (segment, head).
  std::vector<Real> probs;
  std::vector<std::size_t> prob_offset(segments.size() * heads);
  {
    std::size_t total = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
      for (std::size_t h = 0; h < heads; ++h) {
        prob_offset[s * heads + h] = total;
        total += segments[s].length * segments[s].length;
      }
    }
    probs.assign(total, Real(0));
  }
  std::vector<Real> out(q.size(), Real(0));
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const std::size_t off = segments[s].offset;
    const std::size_t len = segments[s].length;
    for (std::size_t h = 0; h < heads; ++h) {
      Real* p = probs.data() + prob_offset[s * heads + h];
      const std::size_t co = h * hd;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t lo = causal ? 0 : i;
        const std::size_t hi = causal ? i + 1 : len;
        const Real* qi = qd.data() + (off + i) * width + co;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = lo; j < hi; ++j) {
          const Real* kj = kd.data() + (off + j) * width + co;
          Real dot = 0;
          for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
          p[i * len + j] = dot * scale;
          mx = std::max(mx, p[i * len + j]);
        }
        Real z = 0;
        for (std::size_t j = lo; j < hi; ++j) {
          p[i * len + j] = std::exp(p[i * len + j] - mx);
          z += p[i * len + j];
        }
        Real* oi = out.data() + (off + i) * width + co;
        for (std::size_t j = lo; j < hi; ++j) {
          p[i * len + j] /= z;
          const Real* vj = vd.data() + (off + j) * width + co;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += p[i * len + j] * vj[c];
        }
      }
    }
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return detail::make_result(
      q.shape(), std::move(out), "masked_attention", {q, k, v},
      [segs = std::move(segs), probs = std::move(probs), prob_offset = std::move(prob_offset), heads, hd, width, scale,
       causal](TensorNode& self) {
        TensorNode& nq = input(self, 0);
        TensorNode& nk = input(self, 1);
        TensorNode& nv = input(self, 2);
        std::vector<Real> dp;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const std::size_t off = segs[s].offset;
          const std::size_t len = segs[s].length;
          dp.assign(len * len, Real(0));
          for (std::size_t h = 0; h < heads; ++h) {
            const Real* p = probs.data() + prob_offset[s * heads + h];
            const std::size_t co = h * hd;
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t lo = causal ? 0 : i;
              const std::size_t hi = causal ? i + 1 : len;
              const Real* gi = self.grad.data() + (off + i) * width + co;
              // dP = dO V^T, dV += P^T dO
              Real rowdot = 0;
              for (std::size_t j = lo; j < hi; ++j) {
                const Real* vj = nv.data.data() + (off + j) * width + co;
                Real acc = 0;
                for (std::size_t c = 0; c < hd; ++c) acc += gi[c] * vj[c];
                dp[i * len + j] = acc;
                rowdot += acc * p[i * len + j];
                if (nv.requires_grad) {
                  Real* gvj = nv.grad.data() + (off + j) * width + co;
                  for (std::size_t c = 0; c < hd; ++c) gvj[c] += p[i * len + j] * gi[c];
                }
              }
              // dS = P (dP - rowdot); dQ = dS K * scale; dK += dS^T Q * scale
              const Real* qi = nq.data.data() + (off + i) * width + co;
              for (std::size_t j = lo; j < hi; ++j) {
                const Real ds = p[i * len + j] * (dp[i * len + j] - rowdot) * scale;
                if (nq.requires_grad) {
                  const Real* kj = nk.data.data() + (off + j) * width + co;
                  Real* gqi = nq.grad.data() + (off + i) * width + co;
                  for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
                }
                if (nk.requires_grad) {
                  Real* gkj = nk.grad.data() + (off + j) * width + co;
                  for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

namespace {

// Squared distance with independent partial sums so the compiler can
// vectorize without reassociating a single accumulator.
inline Real squared_distance(const Real* a, const Real* b, std::size_t n) {
  constexpr std::size_t kLanes = 8;
  Real acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) {
      const Real t = a[i + l] - b[i + l];
      acc[l] += t * t;
    }
  }
  Real s = 0;
  for (; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  for (std::size_t l = 0; l < kLanes; ++l) s += acc[l];
  return s;
}

}  // namespace

Tensor mean_pairwise_distance(const Tensor& x, const Tensor& y) {
  auto dx = mat_dims(x);
  auto dy = mat_dims(y);
  if (dx.cols != dy.cols) {
    throw DimensionError("mean_pairwise_distance: widths differ: " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
  }
  const std::size_t width = dx.cols;
  const auto& xd = x.data();
  const auto& yd = y.data();
  std::vector<Real> dist(dx.rows * dy.rows);
  Real total = 0;
  for (std::size_t i = 0; i < dx.rows; ++i) {
    for (std::size_t j = 0; j < dy.rows; ++j) {
      const Real dd = std::sqrt(squared_distance(xd.data() + i * width, yd.data() + j * width, width));
      dist[i * dy.rows + j] = dd;
      total += dd;
    }
  }
  const Real norm = Real(1) / static_cast<Real>(dx.rows * dy.rows);
  return detail::make_result({1}, {total * norm}, "mean_pairwise_distance", {x, y},
                             [dx, dy, width, norm, dist = std::move(dist)](TensorNode& self) {
                               TensorNode& nx = input(self, 0);
                               TensorNode& ny = input(self, 1);
                               const Real g = self.grad[0] * norm;
                               for (std::size_t i = 0; i < dx.rows; ++i) {
                                 const Real* xi = nx.data.data() + i * width;
                                 for (std::size_t j = 0; j < dy.rows; ++j) {
                                   const Real dd = dist[i * dy.rows + j];
                                   if (dd <= Real(0)) continue;
                                   const Real* yj = ny.data.data() + j * width;
                                   const Real f = g / dd;
                                   if (nx.requires_grad) {
                                     Real* gx = nx.grad.data() + i * width;
                                     for (std::size_t c = 0; c < width; ++c) gx[c] += f * (xi[c] - yj[c]);
                                   }
                                   if (ny.requires_grad) {
                                     Real* gy = ny.grad.data() + j * width;
                                     for (std::size_t c = 0; c < width; ++c) gy[c] -= f * (xi[c] - yj[c]);
                                   }
                                 }
                               }
                             });
}

Tensor weighted_layer_sum(const Tensor& weights, const Tensor& stack) {
  auto dw = mat_dims(weights);
  auto ds = mat_dims(stack);
  if (dw.rows != ds.rows || dw.cols == 0 || ds.cols % dw.cols != 0) {
    throw DimensionError("weighted_layer_sum: weights " + shape_str(weights.shape()) + " incompatible with stack " +
                         shape_str(stack.shape()));
  }
  const std::size_t n = ds.rows;
  const std::size_t layers = dw.cols;
  const std::size_t width = ds.cols / layers;
  const auto& wd = weights.data();
  const auto& sd = stack.data();
  std::vector<Real> out(n * width, Real(0));
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = 0; l < layers; ++l) {
      const Real w = wd[k * layers + l];
      const Real* src = sd.data() + k * ds.cols + l * width;
      Real* dst = out.data() + k * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += w * src[c];
    }
  }
  return detail::make_result({n, width}, std::move(out), "weighted_layer_sum", {weights, stack},
                             [n, layers, width](TensorNode& self) {
                               TensorNode& nw = input(self, 0);
                               TensorNode& ns = input(self, 1);
                               const std::size_t sc = layers * width;
                               for (std::size_t k = 0; k < n; ++k) {
                                 const Real* g = self.grad.data() + k * width;
                                 for (std::size_t l = 0; l < layers; ++l) {
                                   if (nw.requires_grad) {
                                     const Real* src = ns.data.data() + k * sc + l * width;
                                     Real acc = 0;
                                     for (std::size_t c = 0; c < width; ++c) acc += g[c] * src[c];
                                     nw.grad[k * layers + l] += acc;
                                   }
                                   if (ns.requires_grad) {
                                     const Real w = nw.data[k * layers + l];
                                     Real* gs = ns.grad.data() + k * sc + l * width;
                                     for (std::size_t c = 0; c < width; ++c) gs[c] += w * g[c];
                                   }
                                 }
                               }
                             });
}

Tensor dimwise_layer_sum(const Tensor& weights, const Tensor& stack) {
  auto dw = mat_dims(weights);
  auto ds = mat_dims(stack);
  if (dw.rows * dw.cols != ds.cols) {
    throw DimensionError("dimwise_layer_sum: weights " + shape_str(weights.shape()) + " incompatible with stack " +
                         shape_str(stack.shape()));
  }
  const std::size_t n = ds.rows;
  const std::size_t layers = dw.rows;
  const std::size_t width = dw.cols;
  const auto& wd = weights.data();
  const auto& sd = stack.data();
  std::vector<Real> out(n * width, Real(0));
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = 0; l < layers; ++l) {
      const Real* w = wd.data() + l * width;
      const Real* src = sd.data() + k * ds.cols + l * width;
      Real* dst = out.data() + k * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += w[c] * src[c];
    }
  }
  return detail::make_result({n, width}, std::move(out), "dimwise_layer_sum", {weights, stack},
                             [n, layers, width](TensorNode& self) {
                               TensorNode& nw = input(self, 0);
                               TensorNode& ns = input(self, 1);
                               const std::size_t sc = layers * width;
                               for (std::size_t k = 0; k < n; ++k) {
                                 const Real* g = self.grad.data() + k * width;
                                 for (std::size_t l = 0; l < layers; ++l) {
                                   const Real* src = ns.data.data() + k * sc + l * width;
                                   const Real* w = nw.data.data() + l * width;
                                   for (std::size_t c = 0; c < width; ++c) {
                                     if (nw.requires_grad) nw.grad[l * width + c] += g[c] * src[c];
                                     if (ns.requires_grad) ns.grad[k * sc + l * width + c] += w[c] * g[c];
                                   }
                                 }
                               }
                             });
}

Tensor lstm_cell(const Tensor& gates, const Tensor& c_prev) {
  auto dg = mat_dims(gates);
  auto dc = mat_dims(c_prev);
  if (dg.rows != dc.rows || dg.cols != 4 * dc.cols) {
    throw DimensionError("lstm_cell: gates " + shape_str(gates.shape()) + " incompatible with cell " +
                         shape_str(c_prev.shape()));
  }
  const std::size_t n = dg.rows;
  const std::size_t h = dc.cols;
  const auto& gd = gates.data();
  const auto& cd = c_prev.data();
  // Activated gates [i f g o] and tanh(c_next) kept for backward.
  std::vector<Real> act(gates.size());
  std::vector<Real> tc(n * h);
  std::vector<Real> out(n * 2 * h);
  auto sig = [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); };
  for (std::size_t r = 0; r < n; ++r) {
    const Real* g = gd.data() + r * 4 * h;
    Real* a = act.data() + r * 4 * h;
    for (std::size_t j = 0; j < h; ++j) {
      a[j] = sig(g[j]);
      a[h + j] = sig(g[h + j]);
      a[2 * h + j] = std::tanh(g[2 * h + j]);
      a[3 * h + j] = sig(g[3 * h + j]);
      const Real c = a[h + j] * cd[r * h + j] + a[j] * a[2 * h + j];
      tc[r * h + j] = std::tanh(c);
      out[r * 2 * h + j] = a[3 * h + j] * tc[r * h + j];
      out[r * 2 * h + h + j] = c;
    }
  }
  return detail::make_result({n, 2 * h}, std::move(out), "lstm_cell", {gates, c_prev},
                             [n, h, act = std::move(act), tc = std::move(tc)](TensorNode& self) {
                               TensorNode& ng = input(self, 0);
                               TensorNode& nc = input(self, 1);
                               for (std::size_t r = 0; r < n; ++r) {
                                 const Real* a = act.data() + r * 4 * h;
                                 for (std::size_t j = 0; j < h; ++j) {
                                   const Real dh = self.grad[r * 2 * h + j];
                                   const Real t = tc[r * h + j];
                                   const Real dc = self.grad[r * 2 * h + h + j] + dh * a[3 * h + j] * (Real(1) - t * t);
                                   if (ng.requires_grad) {
                                     Real* gg = ng.grad.data() + r * 4 * h;
                                     const Real i = a[j], f = a[h + j], cand = a[2 * h + j], o = a[3 * h + j];
                                     gg[j] += dc * cand * i * (Real(1) - i);
                                     gg[h + j] += dc * nc.data[r * h + j] * f * (Real(1) - f);
                                     gg[2 * h + j] += dc * i * (Real(1) - cand * cand);
                                     gg[3 * h + j] += dh * t * o * (Real(1) - o);
                                   }
                                   if (nc.requires_grad) nc.grad[r * h + j] += dc * a[h + j];
                                 }
                               }
                             });
}

MLMA_NAMESPACE_END
