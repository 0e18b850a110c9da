#pragma once

#include <cstddef>
#include <string>

namespace projprobe::kernels {

// Arithmetic inner loops used by the tensor layer. Every entry has a
// scalar reference implementation and, on x86-64 with AVX2, a vectorized
// variant selected once at startup. The two are equivalence-tested; small
// rounding differences from FMA are allowed by those tests.
struct Ops {
    // sum_i x[i]*y[i]
    double (*dot)(const double* x, const double* y, std::size_t n);
    // y[i] += a * x[i]
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    // C(m x n) += A(m x k) * B(k x n), row-major
    void (*mm_acc)(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);
    // sum_i (x[i]-y[i])^2
    double (*sq_diff_sum)(const double* x, const double* y, std::size_t n);
    // y[i] = 0.5*x[i]*(1+erf(x[i]/sqrt(2)))
    void (*gelu)(const double* x, double* y, std::size_t n);
    // gx[i] += gy[i] * d gelu / dx at x[i]
    void (*gelu_grad)(const double* x, const double* gy, double* gx, std::size_t n);
};

enum class Isa { scalar, avx2 };

const Ops& scalar_ops();
const Ops& avx2_ops();   // valid only if avx2_available()
bool avx2_available();

// Active table: AVX2 when available, overridable via PROJPROBE_KERNELS=scalar|avx2.
const Ops& active();
Isa active_isa();
std::string isa_name(Isa isa);

}  // namespace projprobe::kernels
