// AVX2+FMA variants of the hot loops. Compiled with -mavx2 -mfma in its
// own translation unit; only reached after a runtime cpuid check.

#include "projprobe/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define PROJPROBE_X86 1
#else
#define PROJPROBE_X86 0
#endif

#if PROJPROBE_X86

#include <immintrin.h>

#include <cmath>

namespace projprobe::kernels {

namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_avx2(double a, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d yv = _mm256_loadu_pd(y + i);
        yv = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yv);
        _mm256_storeu_pd(y + i, yv);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void mm_acc_avx2(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        std::size_t p = 0;
        // two rows of B per pass amortizes the loads of crow
        for (; p + 2 <= k; p += 2) {
            const __m256d a0 = _mm256_set1_pd(arow[p]);
            const __m256d a1 = _mm256_set1_pd(arow[p + 1]);
            const double* b0 = b + p * n;
            const double* b1 = b0 + n;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4) {
                __m256d cv = _mm256_loadu_pd(crow + j);
                cv = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j), cv);
                cv = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + j), cv);
                _mm256_storeu_pd(crow + j, cv);
            }
            for (; j < n; ++j) crow[j] += arow[p] * b0[j] + arow[p + 1] * b1[j];
        }
        for (; p < k; ++p) {
            const __m256d a0 = _mm256_set1_pd(arow[p]);
            const double* b0 = b + p * n;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4) {
                __m256d cv = _mm256_loadu_pd(crow + j);
                cv = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j), cv);
                _mm256_storeu_pd(crow + j, cv);
            }
            for (; j < n; ++j) crow[j] += arow[p] * b0[j];
        }
    }
}

double sq_diff_sum_avx2(const double* x, const double* y, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

// erf has no cheap AVX2 form worth maintaining here; the elementwise GELU
// loops stay scalar in both tables.
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void gelu_plain(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
}

void gelu_grad_plain(const double* x, const double* gy, double* gx, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
        gx[i] += gy[i] * (cdf + x[i] * pdf);
    }
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops ops{dot_avx2, axpy_avx2, mm_acc_avx2,
                         sq_diff_sum_avx2, gelu_plain, gelu_grad_plain};
    return ops;
}

bool avx2_available() { return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"); }

}  // namespace projprobe::kernels

#else

namespace projprobe::kernels {

const Ops& avx2_ops() { return scalar_ops(); }
bool avx2_available() { return false; }

}  // namespace projprobe::kernels

#endif
