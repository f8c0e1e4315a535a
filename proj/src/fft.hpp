#ifndef LW_FFT_HPP
#define LW_FFT_HPP

#include <complex>
#include <vector>

#include "lattice.hpp"

namespace lw {

// 3D DFT with the unnormalized forward convention: X_k = sum_x x e^{-2 pi i k.x/N},
// inverse carries the 1/(d h w) factor, so Parseval reads |x|^2 = |X|^2 / (d h w).
// Power-of-two axes run a radix-2 FFT; other lengths fall back to a direct DFT.

// Multi-channel spectrum of a real grid. Channels transform independently;
// coefficients of a real input are Hermitian-symmetric.
struct SpectralLatent {
    GridDims dims;
    std::vector<std::complex<double>> coeff;  // dims.values() entries, channel-fastest

    size_t size() const { return coeff.size(); }
};

SpectralLatent fft3_forward(const DenseLatentGrid& x);
SpectralLatent fft3_forward(const std::vector<double>& x, const GridDims& dims);

// Real part of the normalized inverse transform.
DenseLatentGrid fft3_inverse(const SpectralLatent& spectrum);
std::vector<double> fft3_inverse_real(const SpectralLatent& spectrum);

// Largest |imaginary part| of the inverse transform; ~0 for Hermitian input.
double fft3_inverse_imag_max(const SpectralLatent& spectrum);

// Projects onto Hermitian symmetry: X_k <- (X_k + conj(X_{-k})) / 2.
void enforce_hermitian(SpectralLatent& spectrum);

// In-place 1D transform helper (exposed for tests); sign = -1 forward, +1 inverse
// (no normalization either way).
void dft_1d(std::complex<double>* data, size_t n, size_t stride, int sign);

}  // namespace lw

#endif
