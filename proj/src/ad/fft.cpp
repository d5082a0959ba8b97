#include "mkbe/ad/fft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mkbe::ad {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft(std::span<std::complex<double>> data, bool inverse) {
  const std::size_t n = data.size();
  if (n == 0 || (n & (n - 1)) != 0) {
    throw std::invalid_argument("fft length must be a power of two, got " + std::to_string(n));
  }
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i], data[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> step(std::cos(angle), std::sin(angle));
    for (std::size_t start = 0; start < n; start += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto even = data[start + k];
        const auto odd = data[start + k + len / 2] * w;
        data[start + k] = even + odd;
        data[start + k + len / 2] = even - odd;
        w *= step;
      }
    }
  }
  if (inverse) {
    for (auto& v : data) v /= static_cast<double>(n);
  }
}

namespace {

std::vector<std::complex<double>> forward_transform(std::span<const double> x) {
  std::vector<std::complex<double>> out(x.begin(), x.end());
  fft(out, false);
  return out;
}

void require_same_length(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("circular convolution length mismatch: " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
}

}  // namespace

std::vector<double> fft_circular_convolve(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b);
  auto fa = forward_transform(a);
  const auto fb = forward_transform(b);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  fft(fa, true);
  std::vector<double> out(fa.size());
  for (std::size_t i = 0; i < fa.size(); ++i) out[i] = fa[i].real();
  return out;
}

std::vector<double> fft_circular_correlate(std::span<const double> g, std::span<const double> b) {
  require_same_length(g, b);
  auto fg = forward_transform(g);
  const auto fb = forward_transform(b);
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] *= std::conj(fb[i]);
  fft(fg, true);
  std::vector<double> out(fg.size());
  for (std::size_t i = 0; i < fg.size(); ++i) out[i] = fg[i].real();
  return out;
}

}  // namespace mkbe::ad
