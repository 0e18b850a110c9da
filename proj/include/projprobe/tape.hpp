#pragma once

#include <functional>
#include <vector>

#include "projprobe/mat.hpp"

namespace projprobe {

// Reverse-mode autodiff over Mat values. A Tape is built per forward pass;
// ops append nodes and backward() replays them in reverse. Leaves carry
// requires_grad; gradient work for subtrees without grad-requiring leaves
// is skipped.
class Tape {
public:
    int leaf(Mat value, bool requires_grad = false);

    const Mat& value(int id) const { return nodes_[id].value; }
    const Mat& grad(int id) const { return nodes_[id].grad; }
    bool requires_grad(int id) const { return nodes_[id].needs; }
    std::size_t node_count() const { return nodes_.size(); }

    // Seeds grad(root) = 1 (root must be 1x1) and accumulates leaf grads.
    void backward(int root);

    int matmul(int a, int b);
    int add(int a, int b);           // same shape
    int add_rowvec(int a, int b);    // b: 1 x C, broadcast over rows of a
    int sub(int a, int b);
    int scale(int a, double s);
    int hadamard(int a, int b);
    int gelu(int a);
    int softmax_rows(int a);
    int log_softmax_rows(int a);
    int layernorm_rows(int a, int gain, int bias, double eps = 1e-5);
    int concat_rows(const std::vector<int>& parts);
    int concat_cols(const std::vector<int>& parts);
    int slice_cols(int a, int c0, int c1);
    int transpose_op(int a);
    int mean_rows(int a);            // 1 x C
    int mean_all(int a);             // 1 x 1
    int mse(int a, int b);           // 1 x 1: mean squared difference over all entries
    int normalize_rows(int a, double eps = 1e-8);
    // tokens laid out row-major on a side x side grid; averages factor x factor blocks
    int mean_pool_grid(int a, int factor);
    int gather_rows(int table, std::vector<int> ids);
    // mean over rows of -logsoft[i, target[i]]; input must be log_softmax output
    int nll_rows(int logsoft, std::vector<int> targets);

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs = false;
        std::function<void(Tape&, int)> back;  // (tape, self id)
    };

    int push(Mat value, bool needs, std::function<void(Tape&, int)> back);
    Mat& grad_mut(int id) { return nodes_[id].grad; }

    std::vector<Node> nodes_;
};

}  // namespace projprobe
