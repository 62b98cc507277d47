#pragma once

// Straightforward scalar-loop reference for a pre-norm transformer layer
// over a set of tokens. Shares nothing with the library beyond reading the
// parameter values out of tensors.

#include <cmath>
#include <vector>

#include "sbat/model.hpp"

namespace sbat::testing {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  static Mat of(const Tensor& t, std::size_t r, std::size_t c) {
    Mat m(r, c);
    for (std::size_t i = 0; i < r * c; ++i) m.v[i] = t[i];
    return m;
  }
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  return c;
}

inline Mat mat_add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < c.v.size(); ++i) c.v[i] += b.v[i];
  return c;
}

inline Mat ref_layer_norm(const Mat& x, const Tensor& gamma, const Tensor& beta) {
  Mat y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mu += x(i, j);
    mu /= static_cast<double>(x.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<double>(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) y(i, j) = gamma[j] * (x(i, j) - mu) / std::sqrt(var + 1e-5) + beta[j];
  }
  return y;
}

inline Mat ref_gelu(Mat x) {
  const double c = std::sqrt(2.0 / M_PI);
  for (auto& a : x.v) a = 0.5 * a * (1.0 + std::tanh(c * (a + 0.044715 * a * a * a)));
  return x;
}

/// Multi-head attention weights per head: alpha[h] is n x n.
inline std::vector<Mat> ref_attention_weights(const Mat& h, const SublayerParams& p, std::size_t heads) {
  const std::size_t n = h.rows, d = h.cols, dh = d / heads;
  const Mat q = mat_mul(h, Mat::of(p.wq, d, d));
  const Mat k = mat_mul(h, Mat::of(p.wk, d, d));
  std::vector<Mat> out;
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Mat a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += q(i, hd * dh + e) * k(j, hd * dh + e);
        a(i, j) = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, a(i, j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += (a(i, j) = std::exp(a(i, j) - mx));
      for (std::size_t j = 0; j < n; ++j) a(i, j) /= z;
    }
    out.push_back(a);
  }
  return out;
}

/// u = x + Attn(LN(x)); y = u + FFN(LN(u)) with every token attending to all.
inline Mat ref_sublayer(const Mat& x, const SublayerParams& p, std::size_t heads) {
  const std::size_t n = x.rows, d = x.cols, dh = d / heads;
  const Mat h = ref_layer_norm(x, p.ln1_gamma, p.ln1_beta);
  const Mat v = mat_mul(h, Mat::of(p.wv, d, d));
  const auto alpha = ref_attention_weights(h, p, heads);
  Mat ctx(n, d);
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < dh; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += alpha[hd](i, j) * v(j, hd * dh + e);
        ctx(i, hd * dh + e) = acc;
      }
  const Mat u = mat_add(x, ctx);
  const std::size_t hidden = p.ffn_in.dim(1);
  const Mat ff = mat_mul(ref_gelu(mat_mul(ref_layer_norm(u, p.ln2_gamma, p.ln2_beta), Mat::of(p.ffn_in, d, hidden))),
                         Mat::of(p.ffn_out, hidden, d));
  return mat_add(u, ff);
}

/// Single-subgraph block: dense intra layer, mean summary, inter layer on
/// that one token, fusion, residual.
inline Mat ref_dense_block(const Mat& x, const SbaBlockParams& p, std::size_t heads) {
  const std::size_t n = x.rows, d = x.cols;
  const Mat y = ref_sublayer(x, p.intra, heads);
  Mat s(1, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) s(0, j) += y(i, j) / static_cast<double>(n);
  const Mat s2 = ref_sublayer(s, p.inter, heads);
  Mat cat(n, 2 * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      cat(i, j) = y(i, j);
      cat(i, d + j) = s2(0, j);
    }
  return mat_add(mat_mul(cat, Mat::of(p.fuse, 2 * d, d)), x);
}

}  // namespace sbat::testing
