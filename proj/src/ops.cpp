#include "sbat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "sbat/error.hpp"
#include "sbat/flops.hpp"

namespace sbat {

using detail::make_result;
using detail::Node;

namespace {

// C[m x n] += op(A) op(B). A is [m x k] or, transposed, [k x m];
// B is [k x n] or, transposed, [n x k].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      const double* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        if (av == 0.0) continue;
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* acol = a + p * m;
      const double* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = acol[i];
        if (av == 0.0) continue;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
  }
}

void count_product(std::size_t batches, std::size_t m, std::size_t n, std::size_t k) {
  auto& counter = flop_counter();
  if (!counter.enabled()) return;
  const std::uint64_t cells = static_cast<std::uint64_t>(batches) * m * n;
  counter.record(cells * k, k > 0 ? cells * (k - 1) : 0);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

std::size_t last_extent(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw DimensionError(std::string(op) + ": scalar operand");
  return x.shape().back();
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

// ---- Mask -----------------------------------------------------------------

Mask Mask::all(std::size_t width, std::size_t groups) {
  return Mask{groups, width, std::vector<std::uint8_t>(groups * width, 1)};
}

Mask Mask::from(std::size_t groups, std::size_t width, std::vector<std::uint8_t> valid) {
  if (valid.size() != groups * width) {
    throw DimensionError("mask of " + std::to_string(groups) + "x" + std::to_string(width) + " given " +
                         std::to_string(valid.size()) + " flags");
  }
  return Mask{groups, width, std::move(valid)};
}

std::size_t Mask::count(std::size_t group) const {
  return static_cast<std::size_t>(
      std::count_if(valid.begin() + group * width, valid.begin() + (group + 1) * width,
                    [](std::uint8_t v) { return v != 0; }));
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t k = a.shape().back();
  const std::size_t m = a.numel() / std::max<std::size_t>(k, 1);
  const std::size_t n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.data());
  count_product(1, m, n, k);
  Shape shape = a.shape();
  shape.back() = n;
  return make_result("matmul", std::move(shape), std::move(out), {a, b}, [m, n, k](Node& self) {
    const auto& an = *self.parents[0];
    const auto& bn = *self.parents[1];
    if (wants(self, 0)) gemm(false, true, m, k, n, self.grad.data(), bn.value.data(), self.parents[0]->ensure_grad().data());
    if (wants(self, 1)) gemm(true, false, k, n, m, an.value.data(), self.grad.data(), self.parents[1]->ensure_grad().data());
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    throw DimensionError(std::string("bmm: incompatible shapes ") + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<double> out(g * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < g; ++i) {
    gemm(false, transpose_b, m, n, k, av + i * m * k, bv + i * k * n, out.data() + i * m * n);
  }
  count_product(g, m, n, k);
  return make_result("bmm", {g, m, n}, std::move(out), {a, b}, [g, m, n, k, transpose_b](Node& self) {
    const double* gv = self.grad.data();
    const double* av = self.parents[0]->value.data();
    const double* bv = self.parents[1]->value.data();
    if (wants(self, 0)) {
      double* da = self.parents[0]->ensure_grad().data();
      for (std::size_t i = 0; i < g; ++i)
        gemm(false, !transpose_b, m, k, n, gv + i * m * n, bv + i * k * n, da + i * m * k);
    }
    if (wants(self, 1)) {
      double* db = self.parents[1]->ensure_grad().data();
      for (std::size_t i = 0; i < g; ++i) {
        if (transpose_b) {
          gemm(true, false, n, k, m, gv + i * m * n, av + i * m * k, db + i * k * n);
        } else {
          gemm(true, false, k, n, m, av + i * m * k, gv + i * m * n, db + i * k * n);
        }
      }
    }
  });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& g = self.parents[p]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_result("scale", a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kGeluC * v * v * v)));
  }
  return make_result("gelu", x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kSqrt2OverPi * (v + kGeluC * v * v * v));
      const double dt = (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluC * v * v);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result("sum", {}, {s}, {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mae_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape("mae_loss", pred, target);
  if (pred.numel() == 0) throw DimensionError("mae_loss of empty tensors");
  const auto pv = pred.values(), tv = target.values();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - tv[i]);
  const double inv = 1.0 / static_cast<double>(pv.size());
  return make_result("mae_loss", {}, {s * inv}, {pred, target}, [inv](Node& self) {
    const auto& pv = self.parents[0]->value;
    const auto& tv = self.parents[1]->value;
    const double g0 = self.grad[0] * inv;
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& g = self.parents[p]->ensure_grad();
      const double dir = p == 0 ? g0 : -g0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = pv[i] - tv[i];
        g[i] += d > 0.0 ? dir : (d < 0.0 ? -dir : 0.0);
      }
    }
  });
}

// ---- normalisation and attention pieces -----------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = last_extent(x, "layer_norm");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " with gamma " +
                         shape_string(gamma.shape()) + " and beta " + shape_string(beta.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  std::vector<double> out(x.numel());
  // Normalised values and inverse std are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [rows, d, xhat, inv_std](Node& self) {
                       const auto& gv = self.parents[1]->value;
                       const double* dy = self.grad.data();
                       if (wants(self, 1)) {
                         auto& dg = self.parents[1]->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * (*xhat)[r * d + j];
                       }
                       if (wants(self, 2)) {
                         auto& db = self.parents[2]->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
                       }
                       if (wants(self, 0)) {
                         auto& dx = self.parents[0]->ensure_grad();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = dy[r * d + j] * gv[j];
                             m1 += dh;
                             m2 += dh * (*xhat)[r * d + j];
                           }
                           m1 *= inv_d;
                           m2 *= inv_d;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = dy[r * d + j] * gv[j];
                             dx[r * d + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
                           }
                         }
                       }
                     });
}

Tensor masked_softmax(const Tensor& logits, const Mask& mask) {
  const std::size_t n = last_extent(logits, "masked_softmax");
  if (mask.width != n || mask.valid.size() != mask.groups * mask.width || mask.groups == 0) {
    throw DimensionError("masked_softmax: logits " + shape_string(logits.shape()) + " with mask " +
                         std::to_string(mask.groups) + "x" + std::to_string(mask.width));
  }
  const std::size_t rows = logits.numel() / std::max<std::size_t>(n, 1);
  if (rows % mask.groups != 0) {
    throw DimensionError("masked_softmax: " + std::to_string(rows) + " rows do not split into " +
                         std::to_string(mask.groups) + " mask groups");
  }
  const std::size_t per_group = rows / mask.groups;
  const auto lv = logits.values();
  std::vector<double> out(logits.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t grp = r / per_group;
    const double* in = lv.data() + r * n;
    double* o = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask.at(grp, j)) mx = std::max(mx, in[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw DegenerateError("masked_softmax: row " + std::to_string(r) + " has no unmasked position");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.at(grp, j)) continue;
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j)
      if (mask.at(grp, j)) o[j] *= inv;
  }
  return make_result("masked_softmax", logits.shape(), std::move(out), {logits},
                     [rows, n, per_group, mask](Node& self) {
                       const auto& y = self.value;
                       const double* dy = self.grad.data();
                       auto& dx = self.parents[0]->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t grp = r / per_group;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j)
                           if (mask.at(grp, j)) dot += y[r * n + j] * dy[r * n + j];
                         for (std::size_t j = 0; j < n; ++j)
                           if (mask.at(grp, j)) dx[r * n + j] += y[r * n + j] * (dy[r * n + j] - dot);
                       }
                     });
}

Tensor masked_mean(const Tensor& x, const Mask& mask) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("masked_mean: expected [M x D] or [G x M x D], got " + shape_string(x.shape()));
  }
  const std::size_t g = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t m = x.dim(x.rank() - 2);
  const std::size_t d = x.dim(x.rank() - 1);
  if (mask.groups != g || mask.width != m || mask.valid.size() != g * m) {
    throw DimensionError("masked_mean: input " + shape_string(x.shape()) + " with mask " +
                         std::to_string(mask.groups) + "x" + std::to_string(mask.width));
  }
  std::vector<double> counts(g);
  for (std::size_t i = 0; i < g; ++i) {
    counts[i] = static_cast<double>(mask.count(i));
    if (counts[i] == 0.0) throw DegenerateError("masked_mean: group " + std::to_string(i) + " has no valid row");
  }
  const auto xv = x.values();
  std::vector<double> out(g * d, 0.0);
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t r = 0; r < m; ++r) {
      if (!mask.at(i, r)) continue;
      const double* row = xv.data() + (i * m + r) * d;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= counts[i];
  }
  Shape shape = x.rank() == 3 ? Shape{g, d} : Shape{d};
  return make_result("masked_mean", std::move(shape), std::move(out), {x}, [g, m, d, mask, counts](Node& self) {
    auto& dx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t r = 0; r < m; ++r) {
        if (!mask.at(i, r)) continue;
        for (std::size_t j = 0; j < d; ++j) dx[(i * m + r) * d + j] += self.grad[i * d + j] / counts[i];
      }
  });
}

// ---- shape manipulation ---------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads: " + shape_string(x.shape()) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t g = x.dim(0), m = x.dim(1), d = x.dim(2), dh = d / heads;
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t e = 0; e < dh; ++e)
          out[((a * heads + h) * m + i) * dh + e] = xv[(a * m + i) * d + h * dh + e];
  return make_result("split_heads", {g, heads, m, dh}, std::move(out), {x}, [g, heads, m, d, dh](Node& self) {
    auto& dx = self.parents[0]->ensure_grad();
    for (std::size_t a = 0; a < g; ++a)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t e = 0; e < dh; ++e)
            dx[(a * m + i) * d + h * dh + e] += self.grad[((a * heads + h) * m + i) * dh + e];
  });
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads: expected rank 4, got " + shape_string(x.shape()));
  const std::size_t g = x.dim(0), heads = x.dim(1), m = x.dim(2), dh = x.dim(3), d = heads * dh;
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t e = 0; e < dh; ++e)
          out[(a * m + i) * d + h * dh + e] = xv[((a * heads + h) * m + i) * dh + e];
  return make_result("merge_heads", {g, m, d}, std::move(out), {x}, [g, heads, m, d, dh](Node& self) {
    auto& dx = self.parents[0]->ensure_grad();
    for (std::size_t a = 0; a < g; ++a)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t e = 0; e < dh; ++e)
            dx[((a * heads + h) * m + i) * dh + e] += self.grad[(a * m + i) * d + h * dh + e];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> index) {
  const std::size_t w = last_extent(x, "gather_rows");
  const std::size_t rows = x.numel() / std::max<std::size_t>(w, 1);
  std::vector<std::int64_t> idx(index.begin(), index.end());
  for (auto i : idx) {
    if (i < -1 || i >= static_cast<std::int64_t>(rows)) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " outside " + std::to_string(rows) + " rows");
    }
  }
  const auto xv = x.values();
  std::vector<double> out(idx.size() * w, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0) continue;
    std::copy_n(xv.data() + static_cast<std::size_t>(idx[r]) * w, w, out.data() + r * w);
  }
  Shape shape{idx.size(), w};
  return make_result("gather_rows", std::move(shape), std::move(out), {x}, [idx = std::move(idx), w](Node& self) {
    auto& dx = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0) continue;
      double* dst = dx.data() + static_cast<std::size_t>(idx[r]) * w;
      for (std::size_t j = 0; j < w; ++j) dst[j] += self.grad[r * w + j];
    }
  });
}

Tensor zero_rows(const Tensor& x, std::span<const std::uint8_t> keep) {
  const std::size_t w = last_extent(x, "zero_rows");
  const std::size_t rows = x.numel() / std::max<std::size_t>(w, 1);
  if (keep.size() != rows) {
    throw DimensionError("zero_rows: " + std::to_string(keep.size()) + " flags for " + shape_string(x.shape()));
  }
  std::vector<std::uint8_t> flags(keep.begin(), keep.end());
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < rows; ++r)
    if (!flags[r]) std::fill_n(out.data() + r * w, w, 0.0);
  return make_result("zero_rows", x.shape(), std::move(out), {x}, [flags = std::move(flags), w](Node& self) {
    auto& dx = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < flags.size(); ++r) {
      if (!flags[r]) continue;
      for (std::size_t j = 0; j < w; ++j) dx[r * w + j] += self.grad[r * w + j];
    }
  });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  const std::size_t wa = last_extent(a, "concat_last"), wb = last_extent(b, "concat_last");
  Shape la(a.shape().begin(), a.shape().end() - 1), lb(b.shape().begin(), b.shape().end() - 1);
  if (la != lb) {
    throw DimensionError("concat_last: leading axes differ " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t rows = shape_numel(la), w = wa + wb;
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * wa, wa, out.data() + r * w);
    std::copy_n(bv.data() + r * wb, wb, out.data() + r * w + wa);
  }
  Shape shape = la;
  shape.push_back(w);
  return make_result("concat_last", std::move(shape), std::move(out), {a, b}, [rows, wa, wb](Node& self) {
    const std::size_t w = wa + wb;
    if (wants(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < wa; ++j) g[r * wa + j] += self.grad[r * w + j];
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < wb; ++j) g[r * wb + j] += self.grad[r * w + wa + j];
    }
  });
}

Tensor repeat_rows(const Tensor& x, std::size_t m) {
  if (x.rank() != 2) throw DimensionError("repeat_rows: expected [g x d], got " + shape_string(x.shape()));
  const std::size_t g = x.dim(0), d = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(g * m * d);
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data() + a * d, d, out.data() + (a * m + i) * d);
  return make_result("repeat_rows", {g, m, d}, std::move(out), {x}, [g, m, d](Node& self) {
    auto& dx = self.parents[0]->ensure_grad();
    for (std::size_t a = 0; a < g; ++a)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) dx[a * d + j] += self.grad[(a * m + i) * d + j];
  });
}

}  // namespace sbat
