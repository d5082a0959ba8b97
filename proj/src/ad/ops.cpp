#include "mkbe/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mkbe/ad/fft.hpp"

namespace mkbe::ad {
namespace {

template <class Real>
void record(const Tensor<Real>& out, std::function<void()> backward) {
  if (out.requires_grad()) Tape<Real>::active()->record(out.op_name(), out, std::move(backward));
}

template <class Real>
void require_matrix(const Tensor<Real>& t, std::string_view op) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

template <class Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

// C[m x n] += A[m x k] * B[k x n]
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      if (av == Real(0)) continue;
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const Real* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real av = a[p * m + i];
      if (av == Real(0)) continue;
      Real* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class Real, class Fwd, class Deriv>
Tensor<Real> unary(std::string_view op, const Tensor<Real>& x, Fwd fwd, Deriv deriv) {
  const auto xs = x.data();
  std::vector<Real> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  auto y = make_result<Real>(op, x.shape(), std::move(out), {&x});
  record(y, [x, y, deriv]() mutable {
    if (!x.requires_grad()) return;
    const auto xs = x.data();
    const auto ys = y.data();
    const auto gy = y.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += gy[i] * deriv(xs[i], ys[i]);
  });
  return y;
}

template <class Real>
Real stable_sigmoid(Real v) {
  if (v >= 0) return Real(1) / (Real(1) + std::exp(-v));
  const Real e = std::exp(v);
  return e / (Real(1) + e);
}

}  // namespace

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<Real> out(m * n, Real(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto y = make_result<Real>("matmul", {m, n}, std::move(out), {&a, &b});
  record(y, [a, b, y, m, k, n]() mutable {
    if (a.requires_grad()) gemm_nt(y.grad().data(), b.data().data(), a.mutable_grad().data(), m, n, k);
    if (b.requires_grad()) gemm_tn(a.data().data(), y.grad().data(), b.mutable_grad().data(), m, k, n);
  });
  return y;
}

template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw std::invalid_argument("matmul_nt: shape mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  }
  std::vector<Real> out(m * n, Real(0));
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto y = make_result<Real>("matmul_nt", {m, n}, std::move(out), {&a, &b});
  record(y, [a, b, y, m, k, n]() mutable {
    if (a.requires_grad()) gemm_nn(y.grad().data(), b.data().data(), a.mutable_grad().data(), m, n, k);
    if (b.requires_grad()) gemm_tn(y.grad().data(), a.data().data(), b.mutable_grad().data(), m, n, k);
  });
  return y;
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "add");
  const auto as = a.data(), bs = b.data();
  std::vector<Real> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i];
  auto y = make_result<Real>("add", a.shape(), std::move(out), {&a, &b});
  record(y, [a, b, y]() mutable {
    const auto g = y.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "sub");
  const auto as = a.data(), bs = b.data();
  std::vector<Real> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] - bs[i];
  auto y = make_result<Real>("sub", a.shape(), std::move(out), {&a, &b});
  record(y, [a, b, y]() mutable {
    const auto g = y.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "mul");
  const auto as = a.data(), bs = b.data();
  std::vector<Real> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
  auto y = make_result<Real>("mul", a.shape(), std::move(out), {&a, &b});
  record(y, [a, b, y]() mutable {
    const auto g = y.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      const auto bs = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      const auto as = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as[i];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> affine(const Tensor<Real>& x, Real scale, Real shift) {
  return unary<Real>(
      "affine", x, [scale, shift](Real v) { return scale * v + shift; }, [scale](Real, Real) { return scale; });
}

template <class Real>
Tensor<Real> add_row(const Tensor<Real>& m, const Tensor<Real>& row) {
  require_matrix(m, "add_row");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  if (row.size() != cols) {
    throw std::invalid_argument("add_row: row of shape " + shape_str(row.shape()) + " does not fit " +
                                shape_str(m.shape()));
  }
  const auto ms = m.data(), rs = row.data();
  std::vector<Real> out(ms.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = ms[i * cols + j] + rs[j];
  auto y = make_result<Real>("add_row", m.shape(), std::move(out), {&m, &row});
  record(y, [m, row, y, rows, cols]() mutable {
    const auto g = y.grad();
    if (m.requires_grad()) {
      auto gm = m.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    }
    if (row.requires_grad()) {
      auto gr = row.mutable_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gr[j] += g[i * cols + j];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> add_channel_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  if (x.rank() != 4 || bias.size() != x.dim(1)) {
    throw std::invalid_argument("add_channel_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                                shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto xs = x.data(), bs = bias.data();
  std::vector<Real> out(xs.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (b * channels + c) * plane + p;
        out[i] = xs[i] + bs[c];
      }
  auto y = make_result<Real>("add_channel_bias", x.shape(), std::move(out), {&x, &bias});
  record(y, [x, bias, y, batch, channels, plane]() mutable {
    const auto g = y.grad();
    if (x.requires_grad()) {
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t p = 0; p < plane; ++p) gb[c] += g[(b * channels + c) * plane + p];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> selu(const Tensor<Real>& x) {
  const Real lambda = static_cast<Real>(kSeluLambda);
  const Real la = static_cast<Real>(kSeluLambda * kSeluAlpha);
  return unary<Real>(
      "selu", x, [=](Real v) { return v > 0 ? lambda * v : la * std::expm1(v); },
      [=](Real v, Real) { return v > 0 ? lambda : la * std::exp(v); });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return unary<Real>(
      "relu", x, [](Real v) { return v > 0 ? v : Real(0); }, [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  return unary<Real>(
      "sigmoid", x, [](Real v) { return stable_sigmoid(v); }, [](Real, Real s) { return s * (Real(1) - s); });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& x) {
  return unary<Real>(
      "tanh", x, [](Real v) { return std::tanh(v); }, [](Real, Real t) { return Real(1) - t * t; });
}

template <class Real>
Tensor<Real> signed_sqrt(const Tensor<Real>& x, Real eps) {
  return unary<Real>(
      "signed_sqrt", x,
      [](Real v) { return v >= 0 ? std::sqrt(v) : -std::sqrt(-v); },
      [eps](Real v, Real) { return Real(0.5) / std::sqrt(std::max(std::abs(v), eps)); });
}

template <class Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& x, Real eps) {
  const Tensor<Real> m = x.rank() == 1 ? reshape(x, {1, x.size()}) : x;
  require_matrix(m, "l2_normalize_rows");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  const auto xs = m.data();
  std::vector<Real> out(xs.size());
  std::vector<Real> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    Real sq = 0;
    for (std::size_t j = 0; j < cols; ++j) sq += xs[i * cols + j] * xs[i * cols + j];
    norms[i] = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = xs[i * cols + j] / norms[i];
  }
  auto y = make_result<Real>("l2_normalize_rows", m.shape(), std::move(out), {&m});
  record(y, [m, y, norms, rows, cols, eps]() mutable {
    if (!m.requires_grad()) return;
    const auto g = y.grad();
    const auto ys = y.data();
    auto gx = m.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i) {
      if (norms[i] <= eps) {
        for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[i * cols + j] / eps;
        continue;
      }
      Real dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += ys[i * cols + j] * g[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += (g[i * cols + j] - ys[i * cols + j] * dot) / norms[i];
    }
  });
  return x.rank() == 1 ? reshape(y, x.shape()) : y;
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  const auto xs = x.data();
  const Real total = std::accumulate(xs.begin(), xs.end(), Real(0));
  auto y = make_result<Real>("sum", {1}, {total}, {&x});
  record(y, [x, y]() mutable {
    if (!x.requires_grad()) return;
    const Real g = y.grad()[0];
    for (auto& v : x.mutable_grad()) v += g;
  });
  return y;
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  const auto xs = x.data();
  const Real n = static_cast<Real>(xs.size());
  auto y = make_result<Real>("mean", {1}, {std::accumulate(xs.begin(), xs.end(), Real(0)) / n}, {&x});
  record(y, [x, y, n]() mutable {
    if (!x.requires_grad()) return;
    const Real g = y.grad()[0] / n;
    for (auto& v : x.mutable_grad()) v += g;
  });
  return y;
}

template <class Real>
Tensor<Real> max_over_rows(const Tensor<Real>& x) {
  require_matrix(x, "max_over_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xs = x.data();
  std::vector<Real> out(xs.begin(), xs.begin() + cols);
  std::vector<std::size_t> arg(cols, 0);
  for (std::size_t i = 1; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      if (xs[i * cols + j] > out[j]) {
        out[j] = xs[i * cols + j];
        arg[j] = i;
      }
  auto y = make_result<Real>("max_over_rows", {1, cols}, std::move(out), {&x});
  record(y, [x, y, arg, cols]() mutable {
    if (!x.requires_grad()) return;
    const auto g = y.grad();
    auto gx = x.mutable_grad();
    for (std::size_t j = 0; j < cols; ++j) gx[arg[j] * cols + j] += g[j];
  });
  return y;
}

template <class Real>
Tensor<Real> max_over_cols(const Tensor<Real>& x) {
  require_matrix(x, "max_over_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xs = x.data();
  std::vector<Real> out(rows);
  std::vector<std::size_t> arg(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    out[i] = xs[i * cols];
    for (std::size_t j = 1; j < cols; ++j)
      if (xs[i * cols + j] > out[i]) {
        out[i] = xs[i * cols + j];
        arg[i] = j;
      }
  }
  auto y = make_result<Real>("max_over_cols", {rows, 1}, std::move(out), {&x});
  record(y, [x, y, arg, cols]() mutable {
    if (!x.requires_grad()) return;
    const auto g = y.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) gx[i * cols + arg[i]] += g[i];
  });
  return y;
}

template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, std::span<const std::int64_t> ids) {
  require_matrix(table, "gather_rows");
  if (ids.empty()) throw std::invalid_argument("gather_rows: empty id list");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  const auto ts = table.data();
  std::vector<Real> out(ids.size() * width, Real(0));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto id = ids[r];
    if (id == -1) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    std::copy_n(ts.begin() + static_cast<std::ptrdiff_t>(id * width), width, out.begin() + r * width);
  }
  std::vector<std::int64_t> kept(ids.begin(), ids.end());
  auto y = make_result<Real>("gather_rows", {ids.size(), width}, std::move(out), {&table});
  record(y, [table, y, kept = std::move(kept), width]() mutable {
    if (!table.requires_grad()) return;
    const auto g = y.grad();
    auto gt = table.mutable_grad();
    for (std::size_t r = 0; r < kept.size(); ++r) {
      if (kept[r] < 0) continue;
      Real* dst = gt.data() + kept[r] * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += g[r * width + j];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const auto xs = x.data();
  auto y = make_result<Real>("reshape", std::move(shape), std::vector<Real>(xs.begin(), xs.end()), {&x});
  record(y, [x, y]() mutable {
    if (!x.requires_grad()) return;
    const auto g = y.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return y;
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  require_matrix(x, "transpose");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xs = x.data();
  std::vector<Real> out(xs.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = xs[i * cols + j];
  auto y = make_result<Real>("transpose", {cols, rows}, std::move(out), {&x});
  record(y, [x, y, rows, cols]() mutable {
    if (!x.requires_grad()) return;
    const auto g = y.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[j * rows + i];
  });
  return y;
}

template <class Real>
Tensor<Real> concat_cols(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cols = ca + cb;
  const auto as = a.data(), bs = b.data();
  std::vector<Real> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(as.begin() + i * ca, ca, out.begin() + i * cols);
    std::copy_n(bs.begin() + i * cb, cb, out.begin() + i * cols + ca);
  }
  auto y = make_result<Real>("concat_cols", {rows, cols}, std::move(out), {&a, &b});
  record(y, [a, b, y, rows, ca, cb, cols]() mutable {
    const auto g = y.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * cols + j];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * cols + ca + j];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_matrix(a, "concat_rows");
  require_matrix(b, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const auto as = a.data(), bs = b.data();
  std::vector<Real> out(as.begin(), as.end());
  out.insert(out.end(), bs.begin(), bs.end());
  const std::size_t split = as.size();
  auto y = make_result<Real>("concat_rows", {a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {&a, &b});
  record(y, [a, b, y, split]() mutable {
    const auto g = y.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t offset, std::size_t length) {
  require_matrix(x, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (length == 0 || offset + length > cols) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(offset) + ", +" + std::to_string(length) +
                                ") outside " + shape_str(x.shape()));
  }
  const auto xs = x.data();
  std::vector<Real> out(rows * length);
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(xs.begin() + i * cols + offset, length, out.begin() + i * length);
  auto y = make_result<Real>("slice_cols", {rows, length}, std::move(out), {&x});
  record(y, [x, y, rows, cols, offset, length]() mutable {
    if (!x.requires_grad()) return;
    const auto g = y.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < length; ++j) gx[i * cols + offset + j] += g[i * length + j];
  });
  return y;
}

template <class Real>
Tensor<Real> where_rows(std::span<const std::uint8_t> mask, const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "where_rows");
  require_matrix(a, "where_rows");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (mask.size() != rows) {
    throw std::invalid_argument("where_rows: mask of " + std::to_string(mask.size()) + " rows for " +
                                shape_str(a.shape()));
  }
  const auto as = a.data(), bs = b.data();
  std::vector<Real> out(as.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const auto& src = mask[i] ? as : bs;
    std::copy_n(src.begin() + i * cols, cols, out.begin() + i * cols);
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  auto y = make_result<Real>("where_rows", a.shape(), std::move(out), {&a, &b});
  record(y, [a, b, y, m = std::move(m), cols]() mutable {
    const auto g = y.grad();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const Tensor<Real>& dst = m[i] ? a : b;
      if (!dst.requires_grad()) continue;
      auto gd = dst.mutable_grad();
      for (std::size_t j = 0; j < cols; ++j) gd[i * cols + j] += g[i * cols + j];
    }
  });
  return y;
}

template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& kernels, Padding padding) {
  if (input.rank() != 4 || kernels.rank() != 4 || input.dim(1) != kernels.dim(1)) {
    throw std::invalid_argument("conv2d: incompatible input " + shape_str(input.shape()) + " and kernels " +
                                shape_str(kernels.shape()));
  }
  const std::size_t batch = input.dim(0), chans = input.dim(1), height = input.dim(2), width = input.dim(3);
  const std::size_t filters = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  const std::size_t ph = padding == Padding::same ? kh / 2 : 0;
  const std::size_t pw = padding == Padding::same ? kw / 2 : 0;
  if (kh > height + 2 * ph || kw > width + 2 * pw) {
    throw std::invalid_argument("conv2d: kernel " + shape_str(kernels.shape()) + " larger than padded input " +
                                shape_str(input.shape()));
  }
  const std::size_t oh = height + 2 * ph - kh + 1, ow = width + 2 * pw - kw + 1;
  const auto in = input.data(), ker = kernels.data();

  // Visits every (output, kernel tap) pair whose input position is inside the
  // unpadded image; zero padding contributes nothing.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < filters; ++f)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const std::size_t o = ((b * filters + f) * oh + i) * ow + j;
            for (std::size_t c = 0; c < chans; ++c)
              for (std::size_t u = 0; u < kh; ++u) {
                const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i + u) - static_cast<std::ptrdiff_t>(ph);
                if (r < 0 || r >= static_cast<std::ptrdiff_t>(height)) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(j + v) - static_cast<std::ptrdiff_t>(pw);
                  if (s < 0 || s >= static_cast<std::ptrdiff_t>(width)) continue;
                  const std::size_t x = ((b * chans + c) * height + static_cast<std::size_t>(r)) * width +
                                        static_cast<std::size_t>(s);
                  const std::size_t k = ((f * chans + c) * kh + u) * kw + v;
                  fn(o, x, k);
                }
              }
          }
  };

  std::vector<Real> out(batch * filters * oh * ow, Real(0));
  for_each_tap([&](std::size_t o, std::size_t x, std::size_t k) { out[o] += in[x] * ker[k]; });
  auto y = make_result<Real>("conv2d", {batch, filters, oh, ow}, std::move(out), {&input, &kernels});
  record(y, [input, kernels, y, for_each_tap]() mutable {
    const auto g = y.grad();
    const auto in = input.data(), ker = kernels.data();
    if (input.requires_grad()) {
      auto gi = input.mutable_grad();
      for_each_tap([&](std::size_t o, std::size_t x, std::size_t k) { gi[x] += g[o] * ker[k]; });
    }
    if (kernels.requires_grad()) {
      auto gk = kernels.mutable_grad();
      for_each_tap([&](std::size_t o, std::size_t x, std::size_t k) { gk[k] += g[o] * in[x]; });
    }
  });
  return y;
}

template <class Real>
Tensor<Real> circular_convolution(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape() || a.rank() > 2) {
    throw std::invalid_argument("circular_convolution: length mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t len = a.shape().back();
  const std::size_t rows = a.size() / len;
  const std::size_t padded = next_pow2(len);
  auto row = [len, padded](std::span<const Real> src, std::size_t r) {
    std::vector<double> v(padded, 0.0);
    for (std::size_t j = 0; j < len; ++j) v[j] = static_cast<double>(src[r * len + j]);
    return v;
  };
  std::vector<Real> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto conv = fft_circular_convolve(row(a.data(), r), row(b.data(), r));
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = static_cast<Real>(conv[j]);
  }
  auto y = make_result<Real>("circular_convolution", a.shape(), std::move(out), {&a, &b});
  record(y, [a, b, y, len, rows, row]() mutable {
    for (std::size_t r = 0; r < rows; ++r) {
      const auto g = row(y.grad(), r);
      if (a.requires_grad()) {
        const auto da = fft_circular_correlate(g, row(b.data(), r));
        auto ga = a.mutable_grad();
        for (std::size_t j = 0; j < len; ++j) ga[r * len + j] += static_cast<Real>(da[j]);
      }
      if (b.requires_grad()) {
        const auto db = fft_circular_correlate(g, row(a.data(), r));
        auto gb = b.mutable_grad();
        for (std::size_t j = 0; j < len; ++j) gb[r * len + j] += static_cast<Real>(db[j]);
      }
    }
  });
  return y;
}

template <class Real>
Tensor<Real> count_sketch(const Tensor<Real>& x, std::span<const std::uint32_t> hash,
                          std::span<const std::int8_t> sign, std::size_t out_dim) {
  const std::size_t n = x.shape().back();
  if (x.rank() > 2 || hash.size() != n || sign.size() != n) {
    throw std::invalid_argument("count_sketch: input " + shape_str(x.shape()) + " does not match sketch tables of " +
                                std::to_string(hash.size()) + " entries");
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (hash[j] >= out_dim || (sign[j] != 1 && sign[j] != -1)) {
      throw std::invalid_argument("count_sketch: invalid table entry at " + std::to_string(j));
    }
  }
  const std::size_t rows = x.size() / n;
  const auto xs = x.data();
  std::vector<Real> out(rows * out_dim, Real(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * out_dim + hash[j]] += static_cast<Real>(sign[j]) * xs[r * n + j];
  Shape shape = x.rank() == 1 ? Shape{out_dim} : Shape{rows, out_dim};
  std::vector<std::uint32_t> h(hash.begin(), hash.end());
  std::vector<std::int8_t> s(sign.begin(), sign.end());
  auto y = make_result<Real>("count_sketch", std::move(shape), std::move(out), {&x});
  record(y, [x, y, h = std::move(h), s = std::move(s), rows, n, out_dim]() mutable {
    if (!x.requires_grad()) return;
    const auto g = y.grad();
    auto gx = x.mutable_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += static_cast<Real>(s[j]) * g[r * out_dim + h[j]];
  });
  return y;
}

template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const Real scale = static_cast<Real>(1.0 / (1.0 - rate));
  std::vector<Real> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? scale : Real(0);
  return mul(x, Tensor<Real>::from(x.shape(), std::move(mask)));
}

template <class Real>
Tensor<Real> bce_with_logits(const Tensor<Real>& scores, std::span<const Real> targets) {
  if (scores.size() != targets.size()) {
    throw std::invalid_argument("bce: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(targets.size()) + " labels");
  }
  const auto s = scores.data();
  const std::size_t n = s.size();
  Real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += std::max(s[i], Real(0)) - s[i] * targets[i] + std::log1p(std::exp(-std::abs(s[i])));
  }
  std::vector<Real> t(targets.begin(), targets.end());
  auto y = make_result<Real>("bce_with_logits", {1}, {total / static_cast<Real>(n)}, {&scores});
  record(y, [scores, y, t = std::move(t), n]() mutable {
    if (!scores.requires_grad()) return;
    const Real g = y.grad()[0] / static_cast<Real>(n);
    const auto s = scores.data();
    auto gs = scores.mutable_grad();
    for (std::size_t i = 0; i < n; ++i) gs[i] += g * (stable_sigmoid(s[i]) - t[i]);
  });
  return y;
}

template <class Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const std::int64_t> classes) {
  require_matrix(logits, "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (classes.size() != rows) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  const auto z = logits.data();
  std::vector<Real> probs(z.size());
  Real total = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= k) {
      throw std::out_of_range("softmax_cross_entropy: class " + std::to_string(classes[i]) + " out of range");
    }
    const Real peak = *std::max_element(z.begin() + i * k, z.begin() + (i + 1) * k);
    Real denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += (probs[i * k + j] = std::exp(z[i * k + j] - peak));
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= denom;
    total += peak + std::log(denom) - z[i * k + classes[i]];
  }
  std::vector<std::int64_t> cls(classes.begin(), classes.end());
  auto y = make_result<Real>("softmax_cross_entropy", {1}, {total / static_cast<Real>(rows)}, {&logits});
  record(y, [logits, y, probs = std::move(probs), cls = std::move(cls), rows, k]() mutable {
    if (!logits.requires_grad()) return;
    const Real g = y.grad()[0] / static_cast<Real>(rows);
    auto gz = logits.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < k; ++j)
        gz[i * k + j] += g * (probs[i * k + j] - (static_cast<std::int64_t>(j) == cls[i] ? Real(1) : Real(0)));
  });
  return y;
}

template <class Real>
Tensor<Real> mse(const Tensor<Real>& pred, std::span<const Real> targets) {
  if (pred.size() != targets.size()) throw std::invalid_argument("mse: size mismatch");
  const auto p = pred.data();
  Real total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - targets[i]) * (p[i] - targets[i]);
  const Real n = static_cast<Real>(p.size());
  std::vector<Real> t(targets.begin(), targets.end());
  auto y = make_result<Real>("mse", {1}, {total / n}, {&pred});
  record(y, [pred, y, t = std::move(t), n]() mutable {
    if (!pred.requires_grad()) return;
    const Real g = y.grad()[0] * Real(2) / n;
    const auto p = pred.data();
    auto gp = pred.mutable_grad();
    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * (p[i] - t[i]);
  });
  return y;
}

#define MKBE_INSTANTIATE_OPS(R)                                                                              \
  template Tensor<R> matmul(const Tensor<R>&, const Tensor<R>&);                                            \
  template Tensor<R> matmul_nt(const Tensor<R>&, const Tensor<R>&);                                         \
  template Tensor<R> add(const Tensor<R>&, const Tensor<R>&);                                               \
  template Tensor<R> sub(const Tensor<R>&, const Tensor<R>&);                                               \
  template Tensor<R> mul(const Tensor<R>&, const Tensor<R>&);                                               \
  template Tensor<R> affine(const Tensor<R>&, R, R);                                                        \
  template Tensor<R> add_row(const Tensor<R>&, const Tensor<R>&);                                           \
  template Tensor<R> add_channel_bias(const Tensor<R>&, const Tensor<R>&);                                  \
  template Tensor<R> selu(const Tensor<R>&);                                                                \
  template Tensor<R> relu(const Tensor<R>&);                                                                \
  template Tensor<R> sigmoid(const Tensor<R>&);                                                             \
  template Tensor<R> tanh(const Tensor<R>&);                                                                \
  template Tensor<R> signed_sqrt(const Tensor<R>&, R);                                                      \
  template Tensor<R> l2_normalize_rows(const Tensor<R>&, R);                                                \
  template Tensor<R> sum(const Tensor<R>&);                                                                 \
  template Tensor<R> mean(const Tensor<R>&);                                                                \
  template Tensor<R> max_over_rows(const Tensor<R>&);                                                       \
  template Tensor<R> max_over_cols(const Tensor<R>&);                                                       \
  template Tensor<R> gather_rows(const Tensor<R>&, std::span<const std::int64_t>);                         \
  template Tensor<R> reshape(const Tensor<R>&, Shape);                                                      \
  template Tensor<R> transpose(const Tensor<R>&);                                                           \
  template Tensor<R> concat_cols(const Tensor<R>&, const Tensor<R>&);                                       \
  template Tensor<R> concat_rows(const Tensor<R>&, const Tensor<R>&);                                       \
  template Tensor<R> slice_cols(const Tensor<R>&, std::size_t, std::size_t);                                \
  template Tensor<R> where_rows(std::span<const std::uint8_t>, const Tensor<R>&, const Tensor<R>&);         \
  template Tensor<R> conv2d(const Tensor<R>&, const Tensor<R>&, Padding);                                   \
  template Tensor<R> circular_convolution(const Tensor<R>&, const Tensor<R>&);                              \
  template Tensor<R> count_sketch(const Tensor<R>&, std::span<const std::uint32_t>,                         \
                                  std::span<const std::int8_t>, std::size_t);                               \
  template Tensor<R> dropout(const Tensor<R>&, double, std::mt19937_64&);                                   \
  template Tensor<R> bce_with_logits(const Tensor<R>&, std::span<const R>);                                 \
  template Tensor<R> softmax_cross_entropy(const Tensor<R>&, std::span<const std::int64_t>);                \
  template Tensor<R> mse(const Tensor<R>&, std::span<const R>);

MKBE_INSTANTIATE_OPS(float)
MKBE_INSTANTIATE_OPS(double)

#undef MKBE_INSTANTIATE_OPS

}  // namespace mkbe::ad
