#include "projprobe/mat.hpp"

#include <cmath>

#include "projprobe/kernels.hpp"

namespace projprobe {

bool Mat::all_finite() const {
    for (double v : d_)
        if (!std::isfinite(v)) return false;
    return true;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Mat c(a.rows(), b.cols());
    kernels::active().mm_acc(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

Mat transpose(const Mat& a) {
    Mat t(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

}  // namespace projprobe
