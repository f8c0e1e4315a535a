#include "fft.hpp"

#include <cmath>

#include "util.hpp"

namespace lw {

namespace {

constexpr double kTau = 6.283185307179586;

bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// iterative radix-2 Cooley-Tukey over a strided line
void fft_radix2(std::complex<double>* data, size_t n, size_t stride, int sign) {
    // bit reversal
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) {
            j ^= bit;
        }
        j ^= bit;
        if (i < j) {
            std::swap(data[i * stride], data[j * stride]);
        }
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double angle = sign * kTau / static_cast<double>(len);
        std::complex<double> wlen(std::cos(angle), std::sin(angle));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double>& a = data[(i + k) * stride];
                std::complex<double>& b = data[(i + k + len / 2) * stride];
                std::complex<double> u = a;
                std::complex<double> v = b * w;
                a = u + v;
                b = u - v;
                w *= wlen;
            }
        }
    }
}

// direct O(n^2) transform for non-power-of-two lengths
void dft_direct(std::complex<double>* data, size_t n, size_t stride, int sign) {
    std::vector<std::complex<double>> out(n);
    for (size_t k = 0; k < n; ++k) {
        std::complex<double> acc(0.0, 0.0);
        for (size_t j = 0; j < n; ++j) {
            double angle = sign * kTau * static_cast<double>(k * j % n) / static_cast<double>(n);
            acc += data[j * stride] * std::complex<double>(std::cos(angle), std::sin(angle));
        }
        out[k] = acc;
    }
    for (size_t k = 0; k < n; ++k) {
        data[k * stride] = out[k];
    }
}

// transforms every axis-aligned line of one channel
void transform_axis(std::vector<std::complex<double>>& buf, const GridDims& dims, int channel,
                    int axis, int sign) {
    size_t extent = axis == 0 ? dims.w : axis == 1 ? dims.h : dims.d;
    size_t line_stride =
        (axis == 0 ? size_t{1} : axis == 1 ? static_cast<size_t>(dims.w)
                                           : static_cast<size_t>(dims.w) * dims.h) *
        dims.c;
    auto run_line = [&](size_t base) {
        std::complex<double>* line = buf.data() + base;
        if (is_pow2(extent)) {
            fft_radix2(line, extent, line_stride, sign);
        } else {
            dft_direct(line, extent, line_stride, sign);
        }
    };
    if (axis == 0) {
        for (int z = 0; z < dims.d; ++z) {
            for (int y = 0; y < dims.h; ++y) {
                run_line(voxel_index(dims, 0, y, z) * dims.c + channel);
            }
        }
    } else if (axis == 1) {
        for (int z = 0; z < dims.d; ++z) {
            for (int x = 0; x < dims.w; ++x) {
                run_line(voxel_index(dims, x, 0, z) * dims.c + channel);
            }
        }
    } else {
        for (int y = 0; y < dims.h; ++y) {
            for (int x = 0; x < dims.w; ++x) {
                run_line(voxel_index(dims, x, y, 0) * dims.c + channel);
            }
        }
    }
}

void transform_all(std::vector<std::complex<double>>& buf, const GridDims& dims, int sign) {
    for (int ch = 0; ch < dims.c; ++ch) {
        for (int axis = 0; axis < 3; ++axis) {
            transform_axis(buf, dims, ch, axis, sign);
        }
    }
}

}  // namespace

void dft_1d(std::complex<double>* data, size_t n, size_t stride, int sign) {
    if (is_pow2(n)) {
        fft_radix2(data, n, stride, sign);
    } else {
        dft_direct(data, n, stride, sign);
    }
}

SpectralLatent fft3_forward(const std::vector<double>& x, const GridDims& dims) {
    if (x.size() != dims.values()) {
        fail_data("fft3_forward size mismatch");
    }
    SpectralLatent out;
    out.dims = dims;
    out.coeff.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        out.coeff[i] = std::complex<double>(x[i], 0.0);
    }
    transform_all(out.coeff, dims, -1);
    return out;
}

SpectralLatent fft3_forward(const DenseLatentGrid& x) {
    std::vector<double> buf(x.data.begin(), x.data.end());
    return fft3_forward(buf, x.dims);
}

static std::vector<std::complex<double>> inverse_complex(const SpectralLatent& spectrum) {
    std::vector<std::complex<double>> buf = spectrum.coeff;
    transform_all(buf, spectrum.dims, +1);
    double norm = 1.0 / static_cast<double>(spectrum.dims.voxels());
    for (auto& v : buf) {
        v *= norm;
    }
    return buf;
}

std::vector<double> fft3_inverse_real(const SpectralLatent& spectrum) {
    std::vector<std::complex<double>> buf = inverse_complex(spectrum);
    std::vector<double> out(buf.size());
    for (size_t i = 0; i < buf.size(); ++i) {
        out[i] = buf[i].real();
    }
    return out;
}

DenseLatentGrid fft3_inverse(const SpectralLatent& spectrum) {
    std::vector<double> real = fft3_inverse_real(spectrum);
    DenseLatentGrid out(spectrum.dims);
    for (size_t i = 0; i < real.size(); ++i) {
        out.data[i] = static_cast<float>(real[i]);
    }
    return out;
}

double fft3_inverse_imag_max(const SpectralLatent& spectrum) {
    std::vector<std::complex<double>> buf = inverse_complex(spectrum);
    double worst = 0.0;
    for (const auto& v : buf) {
        worst = std::max(worst, std::fabs(v.imag()));
    }
    return worst;
}

void enforce_hermitian(SpectralLatent& spectrum) {
    const GridDims& dims = spectrum.dims;
    for (int ch = 0; ch < dims.c; ++ch) {
        for (int z = 0; z < dims.d; ++z) {
            int mz = (dims.d - z) % dims.d;
            for (int y = 0; y < dims.h; ++y) {
                int my = (dims.h - y) % dims.h;
                for (int x = 0; x < dims.w; ++x) {
                    int mx = (dims.w - x) % dims.w;
                    size_t a = voxel_index(dims, x, y, z) * dims.c + ch;
                    size_t b = voxel_index(dims, mx, my, mz) * dims.c + ch;
                    if (a > b) {
                        continue;
                    }
                    std::complex<double> va = spectrum.coeff[a];
                    std::complex<double> vb = spectrum.coeff[b];
                    std::complex<double> sym = 0.5 * (va + std::conj(vb));
                    spectrum.coeff[a] = sym;
                    spectrum.coeff[b] = std::conj(sym);
                }
            }
        }
    }
}

}  // namespace lw
