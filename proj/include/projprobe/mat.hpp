#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace projprobe {

// Dense row-major matrix of doubles. All model tensors are 2-D; the batch
// dimension is handled by looping at the model layer.
class Mat {
public:
    Mat() = default;
    Mat(int rows, int cols) : rows_(rows), cols_(cols), d_(static_cast<std::size_t>(rows) * cols, 0.0) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("Mat: negative shape");
    }
    Mat(int rows, int cols, std::vector<double> data) : rows_(rows), cols_(cols), d_(std::move(data)) {
        if (d_.size() != static_cast<std::size_t>(rows) * cols)
            throw std::invalid_argument("Mat: data size does not match shape");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return d_.size(); }
    bool empty() const { return d_.empty(); }

    double& operator()(int r, int c) { return d_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return d_[static_cast<std::size_t>(r) * cols_ + c]; }

    double* data() { return d_.data(); }
    const double* data() const { return d_.data(); }
    double* row(int r) { return d_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row(int r) const { return d_.data() + static_cast<std::size_t>(r) * cols_; }

    std::vector<double>& vec() { return d_; }
    const std::vector<double>& vec() const { return d_; }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    void fill(double v) { std::fill(d_.begin(), d_.end(), v); }

    bool all_finite() const;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> d_;
};

// C = A * B
Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);

}  // namespace projprobe
