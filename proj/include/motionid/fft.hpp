#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "motionid/error.hpp"

namespace motionid::num {

// Split-storage complex vector; re/im always have equal length.
template <typename T>
struct ComplexVector {
    std::vector<T> re;
    std::vector<T> im;

    ComplexVector() = default;
    explicit ComplexVector(std::size_t n) : re(n, T(0)), im(n, T(0)) {}
    ComplexVector(std::vector<T> r, std::vector<T> i) : re(std::move(r)), im(std::move(i)) {
        if (re.size() != im.size())
            throw ShapeError("complex vector re/im lengths differ: " + std::to_string(re.size()) +
                             " vs " + std::to_string(im.size()));
    }

    std::size_t size() const { return re.size(); }
};

inline bool is_pow2(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

namespace detail {

// Iterative radix-2 Cooley-Tukey, in place. sign = -1 forward, +1 inverse.
template <typename T>
void fft_radix2(T* re, T* im, std::size_t n, int sign) {
    if (!is_pow2(n))
        throw NumericError("fft length " + std::to_string(n) + " is not a power of two");
    // bit reversal permutation
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * M_PI / static_cast<double>(len);
        const T wr = static_cast<T>(std::cos(ang));
        const T wi = static_cast<T>(std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            T cr = 1, ci = 0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::size_t a = i + k, b = i + k + len / 2;
                const T tr = re[b] * cr - im[b] * ci;
                const T ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const T ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

}  // namespace detail

template <typename T>
ComplexVector<T> fft(ComplexVector<T> x) {
    detail::fft_radix2(x.re.data(), x.im.data(), x.size(), -1);
    return x;
}

template <typename T>
ComplexVector<T> ifft(ComplexVector<T> x) {
    detail::fft_radix2(x.re.data(), x.im.data(), x.size(), +1);
    const T inv = T(1) / static_cast<T>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        x.re[i] *= inv;
        x.im[i] *= inv;
    }
    return x;
}

// Causal convolution y[t] = sum_{s<=t} kernel[s] * signal[t-s], both length L,
// via zero padding to the next power of two >= 2L. The fft_scratch overload
// lets batched callers reuse a transformed kernel.
template <typename T>
std::vector<T> causal_conv_fft(const std::vector<T>& signal, const std::vector<T>& kernel) {
    if (signal.size() != kernel.size())
        throw ShapeError("causal_conv_fft length mismatch: signal [" + std::to_string(signal.size()) +
                         "] vs kernel [" + std::to_string(kernel.size()) + "]");
    const std::size_t L = signal.size();
    if (L == 0) return {};
    const std::size_t n = next_pow2(2 * L);
    ComplexVector<T> a(n), b(n);
    std::copy(signal.begin(), signal.end(), a.re.begin());
    std::copy(kernel.begin(), kernel.end(), b.re.begin());
    a = fft(std::move(a));
    b = fft(std::move(b));
    for (std::size_t i = 0; i < n; ++i) {
        const T rr = a.re[i] * b.re[i] - a.im[i] * b.im[i];
        const T ii = a.re[i] * b.im[i] + a.im[i] * b.re[i];
        a.re[i] = rr;
        a.im[i] = ii;
    }
    a = ifft(std::move(a));
    return std::vector<T>(a.re.begin(), a.re.begin() + static_cast<std::ptrdiff_t>(L));
}

}  // namespace motionid::num
