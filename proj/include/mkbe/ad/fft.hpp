#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace mkbe::ad {

std::size_t next_pow2(std::size_t n);

/// In-place iterative radix-2 Cooley-Tukey transform. The inverse transform
/// includes the 1/N scale. Size must be a power of two.
void fft(std::span<std::complex<double>> data, bool inverse);

/// Circular convolution of two equal-length real sequences of power-of-two
/// length, computed as inverse-FFT(FFT(a) * FFT(b)).
std::vector<double> fft_circular_convolve(std::span<const double> a, std::span<const double> b);

/// Circular cross-correlation: out[j] = sum_k g[k] * b[(k - j) mod N].
std::vector<double> fft_circular_correlate(std::span<const double> g, std::span<const double> b);

}  // namespace mkbe::ad
