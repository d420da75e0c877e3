#include "cop/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>

namespace cop::ad {

Var Tape::push(Mat v, std::function<void()> back) {
    nodes_.push_back(Node{std::move(v), Mat(), std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::g(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
}

Var Tape::constant(Mat v) { return push(std::move(v)); }

Var Tape::param(const Mat& value, Mat* grad_sink) {
    Var v = push(value);
    if (grad_sink) sinks_.emplace_back(v.id, grad_sink);
    return v;
}

Var Tape::matmul(Var a, Var b) {
    const Mat& A = nodes_[a.id].val;
    const Mat& B = nodes_[b.id].val;
    if (A.cols() != B.rows()) throw std::invalid_argument("matmul: inner dims disagree");
    Var out = push(A * B);
    int ai = a.id, bi = b.id, oi = out.id;
    nodes_[oi].back = [this, ai, bi, oi] {
        const Mat& G = g(oi);
        g(ai).noalias() += G * nodes_[bi].val.transpose();
        g(bi).noalias() += nodes_[ai].val.transpose() * G;
    };
    return out;
}

Var Tape::transpose(Var a) {
    Var out = push(nodes_[a.id].val.transpose());
    int ai = a.id, oi = out.id;
    nodes_[oi].back = [this, ai, oi] { g(ai) += g(oi).transpose(); };
    return out;
}

Var Tape::add(Var a, Var b) {
    const Mat& A = nodes_[a.id].val;
    const Mat& B = nodes_[b.id].val;
    if (A.rows() != B.rows() || A.cols() != B.cols())
        throw std::invalid_argument("add: shape mismatch");
    Var out = push(A + B);
    int ai = a.id, bi = b.id, oi = out.id;
    nodes_[oi].back = [this, ai, bi, oi] {
        g(ai) += g(oi);
        g(bi) += g(oi);
    };
    return out;
}

Var Tape::sub(Var a, Var b) {
    const Mat& A = nodes_[a.id].val;
    const Mat& B = nodes_[b.id].val;
    if (A.rows() != B.rows() || A.cols() != B.cols())
        throw std::invalid_argument("sub: shape mismatch");
    Var out = push(A - B);
    int ai = a.id, bi = b.id, oi = out.id;
    nodes_[oi].back = [this, ai, bi, oi] {
        g(ai) += g(oi);
        g(bi) -= g(oi);
    };
    return out;
}

Var Tape::add_rowvec(Var a, Var r) {
    const Mat& A = nodes_[a.id].val;
    const Mat& R = nodes_[r.id].val;
    if (R.rows() != 1 || R.cols() != A.cols())
        throw std::invalid_argument("add_rowvec: need 1×cols row vector");
    Var out = push(A.rowwise() + R.row(0));
    int ai = a.id, ri = r.id, oi = out.id;
    nodes_[oi].back = [this, ai, ri, oi] {
        g(ai) += g(oi);
        g(ri) += g(oi).colwise().sum();
    };
    return out;
}

Var Tape::mul_rowvec(Var a, Var r) {
    const Mat& A = nodes_[a.id].val;
    const Mat& R = nodes_[r.id].val;
    if (R.rows() != 1 || R.cols() != A.cols())
        throw std::invalid_argument("mul_rowvec: need 1×cols row vector");
    Mat out = A.array().rowwise() * R.row(0).array();
    Var o = push(std::move(out));
    int ai = a.id, ri = r.id, oi = o.id;
    nodes_[oi].back = [this, ai, ri, oi] {
        const Mat& G = g(oi);
        g(ai).array() += G.array().rowwise() * nodes_[ri].val.row(0).array();
        g(ri) += (G.array() * nodes_[ai].val.array()).colwise().sum().matrix();
    };
    return o;
}

Var Tape::hadamard(Var a, Var b) {
    const Mat& A = nodes_[a.id].val;
    const Mat& B = nodes_[b.id].val;
    if (A.rows() != B.rows() || A.cols() != B.cols())
        throw std::invalid_argument("hadamard: shape mismatch");
    Var out = push(A.cwiseProduct(B));
    int ai = a.id, bi = b.id, oi = out.id;
    nodes_[oi].back = [this, ai, bi, oi] {
        g(ai) += g(oi).cwiseProduct(nodes_[bi].val);
        g(bi) += g(oi).cwiseProduct(nodes_[ai].val);
    };
    return out;
}

Var Tape::scale(Var a, double s) {
    Var out = push(nodes_[a.id].val * s);
    int ai = a.id, oi = out.id;
    nodes_[oi].back = [this, ai, oi, s] { g(ai) += g(oi) * s; };
    return out;
}

Var Tape::add_const(Var a, const Mat& c) {
    const Mat& A = nodes_[a.id].val;
    if (A.rows() != c.rows() || A.cols() != c.cols())
        throw std::invalid_argument("add_const: shape mismatch");
    Var out = push(A + c);
    int ai = a.id, oi = out.id;
    nodes_[oi].back = [this, ai, oi] { g(ai) += g(oi); };
    return out;
}

Var Tape::concat_cols(Var a, Var b) {
    const Mat& A = nodes_[a.id].val;
    const Mat& B = nodes_[b.id].val;
    if (A.rows() != B.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    // read the sizes before push(): it can reallocate and invalidate A/B
    const int ac = static_cast<int>(A.cols()), bc = static_cast<int>(B.cols());
    Mat out(A.rows(), ac + bc);
    out << A, B;
    Var o = push(std::move(out));
    int ai = a.id, bi = b.id, oi = o.id;
    nodes_[oi].back = [this, ai, bi, oi, ac, bc] {
        const Mat& G = g(oi);
        g(ai) += G.leftCols(ac);
        g(bi) += G.rightCols(bc);
    };
    return o;
}

Var Tape::slice_cols(Var a, int start, int n) {
    const Mat& A = nodes_[a.id].val;
    if (start < 0 || n < 1 || start + n > A.cols())
        throw std::invalid_argument("slice_cols: out of range");
    Var out = push(A.middleCols(start, n));
    int ai = a.id, oi = out.id;
    nodes_[oi].back = [this, ai, oi, start, n] {
        g(ai).middleCols(start, n) += g(oi);
    };
    return out;
}

Var Tape::concat_rows(Var a, Var b) {
    const Mat& A = nodes_[a.id].val;
    const Mat& B = nodes_[b.id].val;
    if (A.cols() != B.cols()) throw std::invalid_argument("concat_rows: col mismatch");
    const int ar = static_cast<int>(A.rows()), br = static_cast<int>(B.rows());
    Mat out(ar + br, A.cols());
    out << A, B;
    Var o = push(std::move(out));
    int ai = a.id, bi = b.id, oi = o.id;
    nodes_[oi].back = [this, ai, bi, oi, ar, br] {
        const Mat& G = g(oi);
        g(ai) += G.topRows(ar);
        g(bi) += G.bottomRows(br);
    };
    return o;
}

Var Tape::slice_rows(Var a, int start, int n) {
    const Mat& A = nodes_[a.id].val;
    if (start < 0 || n < 1 || start + n > A.rows())
        throw std::invalid_argument("slice_rows: out of range");
    Var out = push(A.middleRows(start, n));
    int ai = a.id, oi = out.id;
    nodes_[oi].back = [this, ai, oi, start, n] {
        g(ai).middleRows(start, n) += g(oi);
    };
    return out;
}

Var Tape::softmax_rows(Var a) {
    const Mat& A = nodes_[a.id].val;
    Mat out(A.rows(), A.cols());
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
        const double m = A.row(r).maxCoeff();
        Eigen::RowVectorXd e = (A.row(r).array() - m).exp();
        out.row(r) = e / e.sum();
    }
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        const Mat& Y = nodes_[oi].val;
        const Mat& G = g(oi);
        Mat& GA = g(ai);
        for (Eigen::Index r = 0; r < Y.rows(); ++r) {
            const double dot = G.row(r).dot(Y.row(r));
            GA.row(r).array() += Y.row(r).array() * (G.row(r).array() - dot);
        }
    };
    return o;
}

Var Tape::logsumexp_rows(Var a) {
    const Mat& A = nodes_[a.id].val;
    Mat out(A.rows(), 1);
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
        const double m = A.row(r).maxCoeff();
        out(r, 0) = m + std::log((A.row(r).array() - m).exp().sum());
    }
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        const Mat& A2 = nodes_[ai].val;
        const Mat& L = nodes_[oi].val;
        const Mat& G = g(oi);
        Mat& GA = g(ai);
        for (Eigen::Index r = 0; r < A2.rows(); ++r)
            GA.row(r).array() += G(r, 0) * (A2.row(r).array() - L(r, 0)).exp();
    };
    return o;
}

Var Tape::layernorm_rows(Var a, double eps) {
    const Mat& A = nodes_[a.id].val;
    const auto n = static_cast<double>(A.cols());
    Mat out(A.rows(), A.cols());
    Eigen::VectorXd inv_sigma(A.rows());
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
        const double mu = A.row(r).mean();
        const double var = (A.row(r).array() - mu).square().sum() / n;
        inv_sigma(r) = 1.0 / std::sqrt(var + eps);
        out.row(r) = (A.row(r).array() - mu) * inv_sigma(r);
    }
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi, inv_sigma, n] {
        const Mat& Y = nodes_[oi].val;
        const Mat& G = g(oi);
        Mat& GA = g(ai);
        for (Eigen::Index r = 0; r < Y.rows(); ++r) {
            const double mg = G.row(r).mean();
            const double mgy = G.row(r).cwiseProduct(Y.row(r)).mean();
            GA.row(r).array() +=
                inv_sigma(r) * (G.row(r).array() - mg - Y.row(r).array() * mgy);
        }
        (void)n;
    };
    return o;
}

Var Tape::gelu(Var a) {
    const Mat& A = nodes_[a.id].val;
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    Mat out = A.unaryExpr([](double x) {
        return x * 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    });
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        const Mat& X = nodes_[ai].val;
        Mat d = X.unaryExpr([](double x) {
            const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            return phi + x * pdf;
        });
        g(ai).array() += g(oi).array() * d.array();
    };
    return o;
}

Var Tape::sigmoid(Var a) {
    const Mat& A = nodes_[a.id].val;
    Mat out = A.unaryExpr([](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        const auto& Y = nodes_[oi].val.array();
        g(ai).array() += g(oi).array() * Y * (1.0 - Y);
    };
    return o;
}

Var Tape::clamp01(Var a) {
    Var o = push(nodes_[a.id].val.cwiseMax(0.0).cwiseMin(1.0));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        const auto& X = nodes_[ai].val.array();
        g(ai).array() += g(oi).array() * (X > 0.0 && X < 1.0).cast<double>();
    };
    return o;
}

Var Tape::log(Var a) {
    Var o = push(nodes_[a.id].val.array().log().matrix());
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        g(ai).array() += g(oi).array() / nodes_[ai].val.array();
    };
    return o;
}

Var Tape::exp(Var a) {
    Var o = push(nodes_[a.id].val.array().exp().matrix());
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        g(ai).array() += g(oi).array() * nodes_[oi].val.array();
    };
    return o;
}

Var Tape::l2normalize_rows(Var a, double eps) {
    const Mat& A = nodes_[a.id].val;
    Eigen::VectorXd inv_norm(A.rows());
    Mat out(A.rows(), A.cols());
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
        inv_norm(r) = 1.0 / std::sqrt(A.row(r).squaredNorm() + eps);
        out.row(r) = A.row(r) * inv_norm(r);
    }
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi, inv_norm] {
        const Mat& Y = nodes_[oi].val;
        const Mat& G = g(oi);
        Mat& GA = g(ai);
        for (Eigen::Index r = 0; r < Y.rows(); ++r) {
            const double dot = G.row(r).dot(Y.row(r));
            GA.row(r) += inv_norm(r) * (G.row(r) - dot * Y.row(r));
        }
    };
    return o;
}

Var Tape::sum(Var a) {
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].val.sum();
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] { g(ai).array() += g(oi)(0, 0); };
    return o;
}

Var Tape::mean(Var a) {
    const double n = static_cast<double>(nodes_[a.id].val.size());
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].val.sum() / n;
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi, n] { g(ai).array() += g(oi)(0, 0) / n; };
    return o;
}

Var Tape::sum_sq(Var a) {
    Mat out(1, 1);
    out(0, 0) = nodes_[a.id].val.squaredNorm();
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        g(ai) += 2.0 * g(oi)(0, 0) * nodes_[ai].val;
    };
    return o;
}

Var Tape::softplus(Var a) {
    const Mat& A = nodes_[a.id].val;
    Mat out = A.unaryExpr([](double x) {
        return x > 30.0 ? x : std::log1p(std::exp(x));
    });
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi] {
        const auto& X = nodes_[ai].val.array();
        auto s = X.unaryExpr([](double x) {
            return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
        g(ai).array() += g(oi).array() * s;
    };
    return o;
}

Var Tape::gather_rows(Var a, const std::vector<long>& idx) {
    const Mat& A = nodes_[a.id].val;
    Mat out(static_cast<long>(idx.size()), A.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= A.rows())
            throw std::invalid_argument("gather_rows: index out of range");
        out.row(static_cast<long>(i)) = A.row(idx[i]);
    }
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi, idx] {
        const Mat& G = g(oi);
        Mat& GA = g(ai);
        for (size_t i = 0; i < idx.size(); ++i)
            GA.row(idx[i]) += G.row(static_cast<long>(i));
    };
    return o;
}

Var Tape::reshape(Var a, long rows, long cols) {
    const Mat& A = nodes_[a.id].val;
    if (rows * cols != A.rows() * A.cols())
        throw std::invalid_argument("reshape: element count mismatch");
    const long ac = A.cols();
    Mat out(rows, cols);
    for (long i = 0; i < rows * cols; ++i)
        out(i / cols, i % cols) = A(i / ac, i % ac);
    Var o = push(std::move(out));
    int ai = a.id, oi = o.id;
    nodes_[oi].back = [this, ai, oi, ac, cols] {
        const Mat& G = g(oi);
        Mat& GA = g(ai);
        const long n = G.rows() * G.cols();
        for (long i = 0; i < n; ++i)
            GA(i / ac, i % ac) += G(i / cols, i % cols);
    };
    return o;
}

void Tape::backward(Var loss) {
    if (!loss.valid()) throw std::invalid_argument("backward: invalid loss var");
    const Node& ln = nodes_[loss.id];
    if (ln.val.rows() != 1 || ln.val.cols() != 1)
        throw std::invalid_argument("backward: loss must be 1×1");
    g(loss.id)(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back && n.grad.size() != 0) n.back();
    }
    for (auto& [id, sink] : sinks_) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.size() == 0) continue;
        if (sink->size() == 0) *sink = Mat::Zero(n.val.rows(), n.val.cols());
        *sink += n.grad;
    }
}

} // namespace cop::ad
