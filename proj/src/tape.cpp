#include "projprobe/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "projprobe/kernels.hpp"

namespace projprobe {

namespace {
const kernels::Ops& K() { return kernels::active(); }
}

int Tape::push(Mat value, bool needs, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.needs = needs;
    if (needs) n.grad = Mat(n.value.rows(), n.value.cols());
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Mat value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

void Tape::backward(int root) {
    Node& r = nodes_[root];
    if (r.value.rows() != 1 || r.value.cols() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    if (!r.needs) return;
    r.grad(0, 0) = 1.0;
    for (int id = root; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.needs && n.back) n.back(*this, id);
    }
}

int Tape::matmul(int a, int b) {
    const Mat& A = nodes_[a].value;
    const Mat& B = nodes_[b].value;
    if (A.cols() != B.rows()) throw std::invalid_argument("tape matmul: inner dimension mismatch");
    Mat C(A.rows(), B.cols());
    K().mm_acc(A.data(), B.data(), C.data(), A.rows(), A.cols(), B.cols());
    bool req = nodes_[a].needs || nodes_[b].needs;
    return push(std::move(C), req, [a, b](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        const Mat& A = t.nodes_[a].value;
        const Mat& B = t.nodes_[b].value;
        if (t.nodes_[a].needs) {
            // dA += G * B^T, via row dot products
            Mat& dA = t.grad_mut(a);
            for (int i = 0; i < G.rows(); ++i)
                for (int j = 0; j < B.rows(); ++j)
                    dA(i, j) += K().dot(G.row(i), B.row(j), static_cast<std::size_t>(G.cols()));
        }
        if (t.nodes_[b].needs) {
            // dB += A^T * G
            Mat& dB = t.grad_mut(b);
            for (int i = 0; i < A.rows(); ++i)
                for (int j = 0; j < A.cols(); ++j)
                    K().axpy(A(i, j), G.row(i), dB.row(j), static_cast<std::size_t>(G.cols()));
        }
    });
}

int Tape::add(int a, int b) {
    const Mat& A = nodes_[a].value;
    const Mat& B = nodes_[b].value;
    if (!A.same_shape(B)) throw std::invalid_argument("tape add: shape mismatch");
    Mat C = A;
    K().axpy(1.0, B.data(), C.data(), C.size());
    bool req = nodes_[a].needs || nodes_[b].needs;
    return push(std::move(C), req, [a, b](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        if (t.nodes_[a].needs) K().axpy(1.0, G.data(), t.grad_mut(a).data(), G.size());
        if (t.nodes_[b].needs) K().axpy(1.0, G.data(), t.grad_mut(b).data(), G.size());
    });
}

int Tape::add_rowvec(int a, int b) {
    const Mat& A = nodes_[a].value;
    const Mat& B = nodes_[b].value;
    if (B.rows() != 1 || B.cols() != A.cols())
        throw std::invalid_argument("tape add_rowvec: expected 1 x cols(a)");
    Mat C = A;
    for (int i = 0; i < C.rows(); ++i) K().axpy(1.0, B.data(), C.row(i), C.cols());
    bool req = nodes_[a].needs || nodes_[b].needs;
    return push(std::move(C), req, [a, b](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        if (t.nodes_[a].needs) K().axpy(1.0, G.data(), t.grad_mut(a).data(), G.size());
        if (t.nodes_[b].needs) {
            Mat& dB = t.grad_mut(b);
            for (int i = 0; i < G.rows(); ++i) K().axpy(1.0, G.row(i), dB.data(), G.cols());
        }
    });
}

int Tape::sub(int a, int b) {
    const Mat& A = nodes_[a].value;
    const Mat& B = nodes_[b].value;
    if (!A.same_shape(B)) throw std::invalid_argument("tape sub: shape mismatch");
    Mat C = A;
    K().axpy(-1.0, B.data(), C.data(), C.size());
    bool req = nodes_[a].needs || nodes_[b].needs;
    return push(std::move(C), req, [a, b](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        if (t.nodes_[a].needs) K().axpy(1.0, G.data(), t.grad_mut(a).data(), G.size());
        if (t.nodes_[b].needs) K().axpy(-1.0, G.data(), t.grad_mut(b).data(), G.size());
    });
}

int Tape::scale(int a, double s) {
    Mat C = nodes_[a].value;
    for (double& v : C.vec()) v *= s;
    return push(std::move(C), nodes_[a].needs, [a, s](Tape& t, int self) {
        if (t.nodes_[a].needs)
            K().axpy(s, t.nodes_[self].grad.data(), t.grad_mut(a).data(), t.nodes_[self].grad.size());
    });
}

int Tape::hadamard(int a, int b) {
    const Mat& A = nodes_[a].value;
    const Mat& B = nodes_[b].value;
    if (!A.same_shape(B)) throw std::invalid_argument("tape hadamard: shape mismatch");
    Mat C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C.vec()[i] *= B.vec()[i];
    bool req = nodes_[a].needs || nodes_[b].needs;
    return push(std::move(C), req, [a, b](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        if (t.nodes_[a].needs) {
            Mat& dA = t.grad_mut(a);
            const Mat& B = t.nodes_[b].value;
            for (std::size_t i = 0; i < G.size(); ++i) dA.vec()[i] += G.vec()[i] * B.vec()[i];
        }
        if (t.nodes_[b].needs) {
            Mat& dB = t.grad_mut(b);
            const Mat& A = t.nodes_[a].value;
            for (std::size_t i = 0; i < G.size(); ++i) dB.vec()[i] += G.vec()[i] * A.vec()[i];
        }
    });
}

int Tape::gelu(int a) {
    const Mat& A = nodes_[a].value;
    Mat C(A.rows(), A.cols());
    K().gelu(A.data(), C.data(), A.size());
    return push(std::move(C), nodes_[a].needs, [a](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        const Mat& A = t.nodes_[a].value;
        K().gelu_grad(A.data(), G.data(), t.grad_mut(a).data(), A.size());
    });
}

int Tape::softmax_rows(int a) {
    const Mat& A = nodes_[a].value;
    Mat C(A.rows(), A.cols());
    for (int i = 0; i < A.rows(); ++i) {
        double mx = A(i, 0);
        for (int j = 1; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
        double z = 0.0;
        for (int j = 0; j < A.cols(); ++j) z += (C(i, j) = std::exp(A(i, j) - mx));
        for (int j = 0; j < A.cols(); ++j) C(i, j) /= z;
    }
    return push(std::move(C), nodes_[a].needs, [a](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        const Mat& Y = t.nodes_[self].value;
        Mat& dA = t.grad_mut(a);
        for (int i = 0; i < Y.rows(); ++i) {
            const double gy = K().dot(G.row(i), Y.row(i), static_cast<std::size_t>(Y.cols()));
            for (int j = 0; j < Y.cols(); ++j) dA(i, j) += Y(i, j) * (G(i, j) - gy);
        }
    });
}

int Tape::log_softmax_rows(int a) {
    const Mat& A = nodes_[a].value;
    Mat C(A.rows(), A.cols());
    for (int i = 0; i < A.rows(); ++i) {
        double mx = A(i, 0);
        for (int j = 1; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
        double z = 0.0;
        for (int j = 0; j < A.cols(); ++j) z += std::exp(A(i, j) - mx);
        const double lz = mx + std::log(z);
        for (int j = 0; j < A.cols(); ++j) C(i, j) = A(i, j) - lz;
    }
    return push(std::move(C), nodes_[a].needs, [a](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        const Mat& L = t.nodes_[self].value;
        Mat& dA = t.grad_mut(a);
        for (int i = 0; i < L.rows(); ++i) {
            double gs = 0.0;
            for (int j = 0; j < L.cols(); ++j) gs += G(i, j);
            for (int j = 0; j < L.cols(); ++j) dA(i, j) += G(i, j) - std::exp(L(i, j)) * gs;
        }
    });
}

int Tape::layernorm_rows(int a, int gain, int bias, double eps) {
    const Mat& A = nodes_[a].value;
    const Mat& g = nodes_[gain].value;
    const Mat& b = nodes_[bias].value;
    if (g.rows() != 1 || g.cols() != A.cols() || b.rows() != 1 || b.cols() != A.cols())
        throw std::invalid_argument("tape layernorm: gain/bias must be 1 x cols(a)");
    const int C = A.cols();
    Mat y(A.rows(), C);
    Mat xhat(A.rows(), C);       // cached for backward
    Mat inv_sigma(A.rows(), 1);  // cached for backward
    for (int i = 0; i < A.rows(); ++i) {
        double mu = 0.0;
        for (int j = 0; j < C; ++j) mu += A(i, j);
        mu /= C;
        double var = 0.0;
        for (int j = 0; j < C; ++j) {
            const double d = A(i, j) - mu;
            var += d * d;
        }
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(i, 0) = is;
        for (int j = 0; j < C; ++j) {
            xhat(i, j) = (A(i, j) - mu) * is;
            y(i, j) = xhat(i, j) * g(0, j) + b(0, j);
        }
    }
    bool req = nodes_[a].needs || nodes_[gain].needs || nodes_[bias].needs;
    return push(std::move(y), req,
                [a, gain, bias, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma)](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        const Mat& g = t.nodes_[gain].value;
        const int C = G.cols();
        if (t.nodes_[gain].needs) {
            Mat& dg = t.grad_mut(gain);
            for (int i = 0; i < G.rows(); ++i)
                for (int j = 0; j < C; ++j) dg(0, j) += G(i, j) * xhat(i, j);
        }
        if (t.nodes_[bias].needs) {
            Mat& db = t.grad_mut(bias);
            for (int i = 0; i < G.rows(); ++i)
                for (int j = 0; j < C; ++j) db(0, j) += G(i, j);
        }
        if (t.nodes_[a].needs) {
            Mat& dA = t.grad_mut(a);
            for (int i = 0; i < G.rows(); ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < C; ++j) {
                    const double gg = G(i, j) * g(0, j);
                    m1 += gg;
                    m2 += gg * xhat(i, j);
                }
                m1 /= C;
                m2 /= C;
                const double is = inv_sigma(i, 0);
                for (int j = 0; j < C; ++j)
                    dA(i, j) += (G(i, j) * g(0, j) - m1 - xhat(i, j) * m2) * is;
            }
        }
    });
}

int Tape::concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("tape concat_rows: empty");
    const int cols = nodes_[parts[0]].value.cols();
    int rows = 0;
    bool req = false;
    for (int p : parts) {
        if (nodes_[p].value.cols() != cols)
            throw std::invalid_argument("tape concat_rows: column mismatch");
        rows += nodes_[p].value.rows();
        req = req || nodes_[p].needs;
    }
    Mat C(rows, cols);
    int r = 0;
    for (int p : parts) {
        const Mat& P = nodes_[p].value;
        std::copy(P.data(), P.data() + P.size(), C.row(r));
        r += P.rows();
    }
    return push(std::move(C), req, [parts](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        int r = 0;
        for (int p : parts) {
            const int pr = t.nodes_[p].value.rows();
            if (t.nodes_[p].needs)
                K().axpy(1.0, G.row(r), t.grad_mut(p).data(),
                         static_cast<std::size_t>(pr) * G.cols());
            r += pr;
        }
    });
}

int Tape::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("tape concat_cols: empty");
    const int rows = nodes_[parts[0]].value.rows();
    int cols = 0;
    bool req = false;
    for (int p : parts) {
        if (nodes_[p].value.rows() != rows)
            throw std::invalid_argument("tape concat_cols: row mismatch");
        cols += nodes_[p].value.cols();
        req = req || nodes_[p].needs;
    }
    Mat C(rows, cols);
    int c = 0;
    for (int p : parts) {
        const Mat& P = nodes_[p].value;
        for (int i = 0; i < rows; ++i)
            std::copy(P.row(i), P.row(i) + P.cols(), C.row(i) + c);
        c += P.cols();
    }
    return push(std::move(C), req, [parts](Tape& t, int self) {
        const Mat& G = t.nodes_[self].grad;
        int c = 0;
        for (int p : parts) {
            const int pc = t.nodes_[p].value.cols();
            if (t.nodes_[p].needs) {
                Mat& dP = t.grad_mut(p);
                for (int i = 0; i < G.rows(); ++i)
                    K().axpy(1.0, G.row(i) + c, dP.row(i), pc);
            }
            c += pc;
        }
    });
}

int Tape::slice_cols(int a, int c0, int c1) {
    const Mat& A = nodes_[a].value;
    if (c0 < 0 || c1 > A.cols() || c0 >= c1)
        throw std::invalid_argument("tape slice_cols: bad range");
    Mat C(A.rows(), c1 - c0);
    for (int i = 0; i < A.rows(); ++i)
        std::copy(A.row(i) + c0, A.row(i) + c1, C.row(i));
    return push(std::move(C), nodes_[a].needs, [a, c0](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        Mat& dA = t.grad_mut(a);
        for (int i = 0; i < G.rows(); ++i)
            K().axpy(1.0, G.row(i), dA.row(i) + c0, G.cols());
    });
}

int Tape::transpose_op(int a) {
    Mat C = transpose(nodes_[a].value);
    return push(std::move(C), nodes_[a].needs, [a](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        Mat& dA = t.grad_mut(a);
        for (int i = 0; i < G.rows(); ++i)
            for (int j = 0; j < G.cols(); ++j) dA(j, i) += G(i, j);
    });
}

int Tape::mean_rows(int a) {
    const Mat& A = nodes_[a].value;
    Mat C(1, A.cols());
    for (int i = 0; i < A.rows(); ++i) K().axpy(1.0 / A.rows(), A.row(i), C.data(), A.cols());
    return push(std::move(C), nodes_[a].needs, [a](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        Mat& dA = t.grad_mut(a);
        const double inv = 1.0 / dA.rows();
        for (int i = 0; i < dA.rows(); ++i) K().axpy(inv, G.data(), dA.row(i), G.cols());
    });
}

int Tape::mean_all(int a) {
    const Mat& A = nodes_[a].value;
    if (A.empty()) throw std::invalid_argument("tape mean_all: empty input");
    double s = 0.0;
    for (double v : A.vec()) s += v;
    Mat C(1, 1);
    C(0, 0) = s / static_cast<double>(A.size());
    return push(std::move(C), nodes_[a].needs, [a](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        Mat& dA = t.grad_mut(a);
        const double g = t.nodes_[self].grad(0, 0) / static_cast<double>(dA.size());
        for (double& v : dA.vec()) v += g;
    });
}

int Tape::mse(int a, int b) {
    const Mat& A = nodes_[a].value;
    const Mat& B = nodes_[b].value;
    if (!A.same_shape(B)) throw std::invalid_argument("tape mse: shape mismatch");
    if (A.empty()) throw std::invalid_argument("tape mse: empty input");
    Mat C(1, 1);
    C(0, 0) = K().sq_diff_sum(A.data(), B.data(), A.size()) / static_cast<double>(A.size());
    bool req = nodes_[a].needs || nodes_[b].needs;
    return push(std::move(C), req, [a, b](Tape& t, int self) {
        const Mat& A = t.nodes_[a].value;
        const Mat& B = t.nodes_[b].value;
        const double g = 2.0 * t.nodes_[self].grad(0, 0) / static_cast<double>(A.size());
        if (t.nodes_[a].needs) {
            Mat& dA = t.grad_mut(a);
            for (std::size_t i = 0; i < A.size(); ++i)
                dA.vec()[i] += g * (A.vec()[i] - B.vec()[i]);
        }
        if (t.nodes_[b].needs) {
            Mat& dB = t.grad_mut(b);
            for (std::size_t i = 0; i < A.size(); ++i)
                dB.vec()[i] -= g * (A.vec()[i] - B.vec()[i]);
        }
    });
}

int Tape::normalize_rows(int a, double eps) {
    const Mat& A = nodes_[a].value;
    Mat C(A.rows(), A.cols());
    Mat inv_norm(A.rows(), 1);
    for (int i = 0; i < A.rows(); ++i) {
        const double n2 = K().dot(A.row(i), A.row(i), static_cast<std::size_t>(A.cols()));
        const double in = 1.0 / std::sqrt(n2 + eps);
        inv_norm(i, 0) = in;
        for (int j = 0; j < A.cols(); ++j) C(i, j) = A(i, j) * in;
    }
    return push(std::move(C), nodes_[a].needs,
                [a, inv_norm = std::move(inv_norm)](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        const Mat& A = t.nodes_[a].value;
        Mat& dA = t.grad_mut(a);
        for (int i = 0; i < A.rows(); ++i) {
            const double in = inv_norm(i, 0);
            const double xg = K().dot(A.row(i), G.row(i), static_cast<std::size_t>(A.cols()));
            for (int j = 0; j < A.cols(); ++j)
                dA(i, j) += G(i, j) * in - A(i, j) * xg * in * in * in;
        }
    });
}

int Tape::mean_pool_grid(int a, int factor) {
    const Mat& A = nodes_[a].value;
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(A.rows()))));
    if (side * side != A.rows())
        throw std::invalid_argument("mean_pool_grid: token count is not a perfect square");
    if (factor < 1 || side % factor != 0)
        throw std::invalid_argument("mean_pool_grid: grid side not divisible by factor");
    const int oside = side / factor;
    Mat C(oside * oside, A.cols());
    const double inv = 1.0 / (factor * factor);
    for (int oy = 0; oy < oside; ++oy)
        for (int ox = 0; ox < oside; ++ox) {
            double* out = C.row(oy * oside + ox);
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx) {
                    const int iy = oy * factor + dy, ix = ox * factor + dx;
                    K().axpy(inv, A.row(iy * side + ix), out, A.cols());
                }
        }
    return push(std::move(C), nodes_[a].needs, [a, side, factor](Tape& t, int self) {
        if (!t.nodes_[a].needs) return;
        const Mat& G = t.nodes_[self].grad;
        Mat& dA = t.grad_mut(a);
        const int oside = side / factor;
        const double inv = 1.0 / (factor * factor);
        for (int oy = 0; oy < oside; ++oy)
            for (int ox = 0; ox < oside; ++ox) {
                const double* g = G.row(oy * oside + ox);
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) {
                        const int iy = oy * factor + dy, ix = ox * factor + dx;
                        K().axpy(inv, g, dA.row(iy * side + ix), G.cols());
                    }
            }
    });
}

int Tape::gather_rows(int table, std::vector<int> ids) {
    const Mat& T = nodes_[table].value;
    Mat C(static_cast<int>(ids.size()), T.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= T.rows())
            throw std::invalid_argument("gather_rows: id out of range");
        std::copy(T.row(ids[i]), T.row(ids[i]) + T.cols(), C.row(static_cast<int>(i)));
    }
    return push(std::move(C), nodes_[table].needs,
                [table, ids = std::move(ids)](Tape& t, int self) {
        if (!t.nodes_[table].needs) return;
        const Mat& G = t.nodes_[self].grad;
        Mat& dT = t.grad_mut(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
            K().axpy(1.0, G.row(static_cast<int>(i)), dT.row(ids[i]), G.cols());
    });
}

int Tape::nll_rows(int logsoft, std::vector<int> targets) {
    const Mat& L = nodes_[logsoft].value;
    if (static_cast<int>(targets.size()) != L.rows())
        throw std::invalid_argument("nll_rows: target count mismatch");
    double s = 0.0;
    for (int i = 0; i < L.rows(); ++i) {
        if (targets[i] < 0 || targets[i] >= L.cols())
            throw std::invalid_argument("nll_rows: target out of range");
        s -= L(i, targets[i]);
    }
    Mat C(1, 1);
    C(0, 0) = s / L.rows();
    return push(std::move(C), nodes_[logsoft].needs,
                [logsoft, targets = std::move(targets)](Tape& t, int self) {
        if (!t.nodes_[logsoft].needs) return;
        Mat& dL = t.grad_mut(logsoft);
        const double g = t.nodes_[self].grad(0, 0) / dL.rows();
        for (int i = 0; i < dL.rows(); ++i) dL(i, targets[i]) -= g;
    });
}

}  // namespace projprobe
