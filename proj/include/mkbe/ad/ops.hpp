#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mkbe/ad/tensor.hpp"

// Differentiable kernels. Every op validates shapes, rejects non-finite
// results, and records a backward closure on the active tape when any input
// requires grad. Matrices are 2-D row-major tensors.
namespace mkbe::ad {

enum class Padding { none, same };

// --- linear algebra -------------------------------------------------------

/// [m x k] * [k x n] -> [m x n]
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

/// [m x k] * [n x k]^T -> [m x n]. Scores query rows against candidate rows.
template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b);

// --- elementwise ----------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
/// scale * x + shift
template <class Real>
Tensor<Real> affine(const Tensor<Real>& x, Real scale, Real shift);
/// Adds a length-n vector to every row of an [m x n] matrix.
template <class Real>
Tensor<Real> add_row(const Tensor<Real>& m, const Tensor<Real>& row);
/// Adds bias[c] to every element of channel c of a [B x C x H x W] tensor.
template <class Real>
Tensor<Real> add_channel_bias(const Tensor<Real>& x, const Tensor<Real>& bias);

// --- activations ----------------------------------------------------------

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

template <class Real>
Tensor<Real> selu(const Tensor<Real>& x);
template <class Real>
Tensor<Real> relu(const Tensor<Real>& x);
template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x);
template <class Real>
Tensor<Real> tanh(const Tensor<Real>& x);
/// sign(x) * sqrt(|x|). The derivative is evaluated with |x| floored at eps.
template <class Real>
Tensor<Real> signed_sqrt(const Tensor<Real>& x, Real eps = Real(1e-12));
/// Divides each row of a matrix by max(||row||_2, eps).
template <class Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& x, Real eps = Real(1e-12));

// --- reductions -----------------------------------------------------------

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x);
template <class Real>
Tensor<Real> mean(const Tensor<Real>& x);
/// Max over rows of a [T x F] matrix -> [1 x F]. Ties resolve to the first row.
template <class Real>
Tensor<Real> max_over_rows(const Tensor<Real>& x);
/// Max over columns of an [m x n] matrix -> [m x 1]. Ties resolve to the first column.
template <class Real>
Tensor<Real> max_over_cols(const Tensor<Real>& x);

// --- structure ------------------------------------------------------------

/// Row gather from a [V x d] table; id -1 yields a zero row with no gradient.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, std::span<const std::int64_t> ids);
template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape);
template <class Real>
Tensor<Real> transpose(const Tensor<Real>& x);
template <class Real>
Tensor<Real> concat_cols(const Tensor<Real>& a, const Tensor<Real>& b);
template <class Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b);
template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t offset, std::size_t length);
/// Row-wise select: out[i] = mask[i] ? a[i] : b[i].
template <class Real>
Tensor<Real> where_rows(std::span<const std::uint8_t> mask, const Tensor<Real>& a, const Tensor<Real>& b);

// --- convolution and pooling ---------------------------------------------

/// Cross-correlation (no kernel flip) of [B x C x H x W] with [F x C x kh x kw].
/// Padding::same pads kh/2 rows and kw/2 columns of zeros on each side.
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernels, Padding padding = Padding::none);

/// result[k] = sum_j a[j] * b[(k - j) mod D], via radix-2 FFT. Accepts vectors
/// of length D or matrices [N x D] (row-wise). Lengths that are not a power of
/// two are zero-padded to the next power of two and the result truncated.
template <class Real>
Tensor<Real> circular_convolution(const Tensor<Real>& a, const Tensor<Real>& b);

/// out[h[j]] += sign[j] * x[j] for each row of x ([n] or [N x n]) -> [.. x D].
template <class Real>
Tensor<Real> count_sketch(const Tensor<Real>& x, std::span<const std::uint32_t> hash,
                          std::span<const std::int8_t> sign, std::size_t out_dim);

/// Inverted dropout with a fixed mask drawn from rng; rate 0 is the identity.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, double rate, std::mt19937_64& rng);

// --- losses -----------------------------------------------------------------

/// Mean over elements of -[t log sigmoid(s) + (1 - t) log(1 - sigmoid(s))],
/// computed from logits in a numerically stable form. `targets` are constants.
template <class Real>
Tensor<Real> bce_with_logits(const Tensor<Real>& scores, std::span<const Real> targets);

/// Mean softmax cross-entropy of [N x k] logits against class ids.
template <class Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const std::int64_t> classes);

/// Mean squared error against constant targets.
template <class Real>
Tensor<Real> mse(const Tensor<Real>& pred, std::span<const Real> targets);

}  // namespace mkbe::ad
