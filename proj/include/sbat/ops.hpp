#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sbat/tensor.hpp"

namespace sbat {

// Validity table for grouped masking: `groups` rows of `width` flags each.
// A single group broadcasts to every row of the masked operand.
struct Mask {
  std::size_t groups = 1;
  std::size_t width = 0;
  std::vector<std::uint8_t> valid;

  static Mask all(std::size_t width, std::size_t groups = 1);
  static Mask from(std::size_t groups, std::size_t width, std::vector<std::uint8_t> valid);
  bool at(std::size_t group, std::size_t j) const { return valid[group * width + j] != 0; }
  std::size_t count(std::size_t group) const;
};

// ---- linear algebra -------------------------------------------------------

/// a viewed as [rows x k] (all leading axes flattened) times b [k x n].
/// The result keeps a's leading axes and replaces the last with n.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Batched product over the leading axis: a [g x m x k] times b [g x k x n],
/// or b [g x n x k] when transpose_b is set.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor gelu(const Tensor& x);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Sum of |pred - target| divided by the element count.
Tensor mae_loss(const Tensor& pred, const Tensor& target);

// ---- normalisation and attention pieces -----------------------------------

/// Normalises over the last axis, then applies gamma/beta of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Softmax over the last axis restricted to valid positions. Rows of the
/// operand are split evenly over mask.groups; masked outputs are exactly 0.
Tensor masked_softmax(const Tensor& logits, const Mask& mask);

/// Mean over the second-to-last axis using only valid rows.
/// x [M x D] with one group gives [D]; x [G x M x D] gives [G x D].
Tensor masked_mean(const Tensor& x, const Mask& mask);

// ---- shape manipulation ---------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);

/// [g x m x (h*dh)] -> [g x h x m x dh]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [g x h x m x dh] -> [g x m x (h*dh)]
Tensor merge_heads(const Tensor& x);

/// Rows of x (last axis = row width) picked by index; -1 yields a zero row.
/// Result shape is [index.size() x width].
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> index);

/// Zeroes the rows (last axis = row width) whose flag is 0.
Tensor zero_rows(const Tensor& x, std::span<const std::uint8_t> keep);

/// Concatenation along the last axis; leading axes must agree.
Tensor concat_last(const Tensor& a, const Tensor& b);

/// [g x d] -> [g x m x d], each row replicated m times.
Tensor repeat_rows(const Tensor& x, std::size_t m);

}  // namespace sbat
