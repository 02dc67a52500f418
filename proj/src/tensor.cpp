#include "selva/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <sstream>

namespace selva {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using Stride = Eigen::OuterStride<>;
using BlockMap = Eigen::Map<RowMat, 0, Stride>;
using CBlockMap = Eigen::Map<const RowMat, 0, Stride>;

int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_of(shape_) != int64_t(data_.size()))
        throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

bool Tensor::finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- tape ----

Var Tape::leaf(const Tensor& v, std::vector<double>* grad_sink) {
    nodes_.push_back(Node{v, true, {}, grad_sink, nullptr});
    return Var{int(nodes_.size()) - 1};
}

Var Tape::constant(Tensor v) {
    nodes_.push_back(Node{std::move(v), false, {}, nullptr, nullptr});
    return Var{int(nodes_.size()) - 1};
}

Var Tape::push(Tensor value, bool needs_grad, BackwardFn bw) {
    nodes_.push_back(Node{std::move(value), needs_grad, {}, nullptr,
                          needs_grad ? std::move(bw) : BackwardFn{}});
    return Var{int(nodes_.size()) - 1};
}

std::vector<double>& Tape::grad_buf(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.empty()) n.grad.assign(size_t(n.value.size()), 0.0);
    return n.grad;
}

const std::vector<double>& Tape::grad(Var x) const {
    if (!x.ok()) return empty_;
    const Node& n = nodes_[size_t(x.id)];
    return n.grad.empty() ? empty_ : n.grad;
}

void Tape::backward(Var root) {
    if (!root.ok()) throw ShapeError("backward on empty var");
    Node& r = nodes_[size_t(root.id)];
    if (r.value.size() != 1)
        throw ShapeError("backward root must be scalar, got " + shape_str(r.value.shape()));
    if (!r.needs_grad) return;
    grad_buf(root.id)[0] += 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[size_t(id)];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, id);
        if (n.sink) {
            if (n.sink->empty()) n.sink->assign(n.grad.size(), 0.0);
            for (size_t i = 0; i < n.grad.size(); ++i) (*n.sink)[i] += n.grad[i];
        }
    }
}

// ---- helpers ----

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Rows/cols view of a tensor flattened to [prod(leading), last].
std::pair<int64_t, int64_t> as_2d(const Tensor& x) {
    if (x.rank() == 0) throw ShapeError("op needs rank >= 1");
    int64_t cols = x.dim(x.rank() - 1);
    return {x.size() / cols, cols};
}

void axpy(std::vector<double>& dst, const std::vector<double>& src, double a = 1.0) {
    for (size_t i = 0; i < src.size(); ++i) dst[i] += a * src[i];
}

}  // namespace

// ---- elementwise ----

Var add(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    require_same_shape(A, B, "add");
    Tensor out = A;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += B[i];
    bool ng = t.tracked(a) || t.tracked(b);
    return t.push(std::move(out), ng, [a, b](Tape& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.tracked(a)) axpy(t.grad_buf(a.id), g);
        if (t.tracked(b)) axpy(t.grad_buf(b.id), g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    require_same_shape(A, B, "sub");
    Tensor out = A;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    bool ng = t.tracked(a) || t.tracked(b);
    return t.push(std::move(out), ng, [a, b](Tape& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.tracked(a)) axpy(t.grad_buf(a.id), g);
        if (t.tracked(b)) axpy(t.grad_buf(b.id), g, -1.0);
    });
}

Var mul(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    require_same_shape(A, B, "mul");
    Tensor out = A;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    bool ng = t.tracked(a) || t.tracked(b);
    return t.push(std::move(out), ng, [a, b](Tape& t, int self) {
        const auto& g = t.grad_buf(self);
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        if (t.tracked(a)) {
            auto& ga = t.grad_buf(a.id);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[int64_t(i)];
        }
        if (t.tracked(b)) {
            auto& gb = t.grad_buf(b.id);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[int64_t(i)];
        }
    });
}

Var scale(Tape& t, Var a, double s) {
    Tensor out = t.val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    return t.push(std::move(out), t.tracked(a), [a, s](Tape& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.tracked(a)) axpy(t.grad_buf(a.id), g, s);
    });
}

// ---- linear algebra ----

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
    Tensor out({a.dim(0), b.dim(1)});
    MatMap(out.data(), a.dim(0), b.dim(1)).noalias() =
        CMatMap(a.data(), a.dim(0), a.dim(1)) * CMatMap(b.data(), b.dim(0), b.dim(1));
    return out;
}

Tensor layer_norm(const Tensor& x, double eps) {
    auto [rows, cols] = as_2d(x);
    Tensor out = x;
    for (int64_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * cols;
        double mean = 0.0;
        for (int64_t c = 0; c < cols; ++c) mean += p[c];
        mean /= double(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) var += (p[c] - mean) * (p[c] - mean);
        var /= double(cols);
        double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t c = 0; c < cols; ++c) p[c] = (p[c] - mean) * inv;
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    auto [rows, cols] = as_2d(x);
    Tensor out = x;
    for (int64_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * cols;
        double mx = p[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, p[c]);
        double z = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            p[c] = std::exp(p[c] - mx);
            z += p[c];
        }
        for (int64_t c = 0; c < cols; ++c) p[c] /= z;
    }
    return out;
}

}  // namespace kernels

Var matmul(Tape& t, Var a, Var b) {
    Tensor out = kernels::matmul(t.val(a), t.val(b));
    bool ng = t.tracked(a) || t.tracked(b);
    return t.push(std::move(out), ng, [a, b](Tape& t, int self) {
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        const Tensor& O = t.val(Var{self});
        CMatMap g(t.grad_buf(self).data(), O.dim(0), O.dim(1));
        CMatMap ma(A.data(), A.dim(0), A.dim(1));
        CMatMap mb(B.data(), B.dim(0), B.dim(1));
        if (t.tracked(a))
            MatMap(t.grad_buf(a.id).data(), A.dim(0), A.dim(1)).noalias() += g * mb.transpose();
        if (t.tracked(b))
            MatMap(t.grad_buf(b.id).data(), B.dim(0), B.dim(1)).noalias() += ma.transpose() * g;
    });
}

Var add_rowvec(Tape& t, Var a, Var v) {
    const Tensor& A = t.val(a);
    const Tensor& V = t.val(v);
    auto [rows, cols] = as_2d(A);
    if (V.size() != cols)
        throw ShapeError("add_rowvec: vector " + shape_str(V.shape()) + " vs cols " +
                         std::to_string(cols));
    Tensor out = A;
    for (int64_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) p[c] += V[c];
    }
    bool ng = t.tracked(a) || t.tracked(v);
    return t.push(std::move(out), ng, [a, v, rows, cols](Tape& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.tracked(a)) axpy(t.grad_buf(a.id), g);
        if (t.tracked(v)) {
            auto& gv = t.grad_buf(v.id);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < cols; ++c) gv[size_t(c)] += g[size_t(r * cols + c)];
        }
    });
}

Var affine(Tape& t, Var x, Var w, Var b) { return add_rowvec(t, matmul(t, x, w), b); }

Var layer_norm(Tape& t, Var x, double eps) {
    const Tensor& X = t.val(x);
    auto [rows, cols] = as_2d(X);
    Tensor out = kernels::layer_norm(X, eps);
    // Cache inverse stddev per row for the backward pass.
    auto inv_std = std::make_shared<std::vector<double>>(size_t(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* p = X.data() + r * cols;
        double mean = 0.0;
        for (int64_t c = 0; c < cols; ++c) mean += p[c];
        mean /= double(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) var += (p[c] - mean) * (p[c] - mean);
        (*inv_std)[size_t(r)] = 1.0 / std::sqrt(var / double(cols) + eps);
    }
    return t.push(std::move(out), t.tracked(x), [x, rows, cols, inv_std](Tape& t, int self) {
        if (!t.tracked(x)) return;
        const auto& g = t.grad_buf(self);
        const Tensor& Y = t.val(Var{self});  // normalized values
        auto& gx = t.grad_buf(x.id);
        // dx = inv_std * (g - mean(g) - y * mean(g * y)) per row
        for (int64_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * cols;
            const double* yr = Y.data() + r * cols;
            double mg = 0.0, mgy = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
                mg += gr[c];
                mgy += gr[c] * yr[c];
            }
            mg /= double(cols);
            mgy /= double(cols);
            double inv = (*inv_std)[size_t(r)];
            double* dst = gx.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) dst[c] += inv * (gr[c] - mg - yr[c] * mgy);
        }
    });
}

Var gelu(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    Tensor out = X;
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = 0.5 * X[i] * (1.0 + std::erf(X[i] * inv_sqrt2));
    return t.push(std::move(out), t.tracked(x), [x](Tape& t, int self) {
        if (!t.tracked(x)) return;
        const auto& g = t.grad_buf(self);
        const Tensor& X = t.val(x);
        auto& gx = t.grad_buf(x.id);
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < g.size(); ++i) {
            double v = X[int64_t(i)];
            double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

Var softmax_rows(Tape& t, Var x) {
    Tensor out = kernels::softmax_rows(t.val(x));
    auto [rows, cols] = as_2d(out);
    return t.push(std::move(out), t.tracked(x), [x, rows, cols](Tape& t, int self) {
        if (!t.tracked(x)) return;
        const auto& g = t.grad_buf(self);
        const Tensor& P = t.val(Var{self});
        auto& gx = t.grad_buf(x.id);
        for (int64_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * cols;
            const double* pr = P.data() + r * cols;
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c) dot += gr[c] * pr[c];
            double* dst = gx.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) dst[c] += pr[c] * (gr[c] - dot);
        }
    });
}

// ---- reductions and shape ops ----

Var sum_all(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    double s = 0.0;
    for (int64_t i = 0; i < X.size(); ++i) s += X[i];
    return t.push(Tensor::scalar(s), t.tracked(x), [x](Tape& t, int self) {
        if (!t.tracked(x)) return;
        double g = t.grad_buf(self)[0];
        auto& gx = t.grad_buf(x.id);
        for (auto& v : gx) v += g;
    });
}

Var mean_all(Tape& t, Var x) { return scale(t, sum_all(t, x), 1.0 / double(t.val(x).size())); }

Var mean_rows(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    auto [rows, cols] = as_2d(X);
    Tensor out({int(cols)});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out[c] += X[r * cols + c];
    for (int64_t c = 0; c < cols; ++c) out[c] /= double(rows);
    return t.push(std::move(out), t.tracked(x), [x, rows, cols](Tape& t, int self) {
        if (!t.tracked(x)) return;
        const auto& g = t.grad_buf(self);
        auto& gx = t.grad_buf(x.id);
        double inv = 1.0 / double(rows);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) gx[size_t(r * cols + c)] += g[size_t(c)] * inv;
    });
}

Var concat_rows(Tape& t, Var a, Var b) {
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
        throw ShapeError("concat_rows: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    int n1 = A.dim(0), n2 = B.dim(0), d = A.dim(1);
    Tensor out({n1 + n2, d});
    std::copy(A.data(), A.data() + A.size(), out.data());
    std::copy(B.data(), B.data() + B.size(), out.data() + A.size());
    bool ng = t.tracked(a) || t.tracked(b);
    return t.push(std::move(out), ng, [a, b, n1, n2, d](Tape& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.tracked(a)) {
            auto& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < int64_t(n1) * d; ++i) ga[size_t(i)] += g[size_t(i)];
        }
        if (t.tracked(b)) {
            auto& gb = t.grad_buf(b.id);
            int64_t off = int64_t(n1) * d;
            for (int64_t i = 0; i < int64_t(n2) * d; ++i) gb[size_t(i)] += g[size_t(off + i)];
        }
    });
}

Var slice_rows(Tape& t, Var x, int begin, int end) {
    const Tensor& X = t.val(x);
    if (X.rank() < 2) throw ShapeError("slice_rows needs rank >= 2");
    int n = X.dim(0);
    if (begin < 0 || end > n || begin >= end)
        throw ShapeError("slice_rows: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + shape_str(X.shape()));
    int64_t row = X.size() / n;
    std::vector<int> shape = X.shape();
    shape[0] = end - begin;
    Tensor out(shape);
    std::copy(X.data() + begin * row, X.data() + end * row, out.data());
    return t.push(std::move(out), t.tracked(x), [x, begin, row](Tape& t, int self) {
        if (!t.tracked(x)) return;
        const auto& g = t.grad_buf(self);
        auto& gx = t.grad_buf(x.id);
        int64_t off = int64_t(begin) * row;
        for (size_t i = 0; i < g.size(); ++i) gx[size_t(off) + i] += g[i];
    });
}

Var slice_cols(Tape& t, Var x, int begin, int end) {
    const Tensor& X = t.val(x);
    auto [rows, cols] = as_2d(X);
    if (begin < 0 || end > cols || begin >= end)
        throw ShapeError("slice_cols: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + shape_str(X.shape()));
    std::vector<int> shape = X.shape();
    shape.back() = end - begin;
    Tensor out(shape);
    int w = end - begin;
    for (int64_t r = 0; r < rows; ++r)
        std::copy(X.data() + r * cols + begin, X.data() + r * cols + end, out.data() + r * w);
    return t.push(std::move(out), t.tracked(x), [x, begin, rows, cols, w](Tape& t, int self) {
        if (!t.tracked(x)) return;
        const auto& g = t.grad_buf(self);
        auto& gx = t.grad_buf(x.id);
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < w; ++c) gx[size_t(r * cols + begin + c)] += g[size_t(r * w + c)];
    });
}

Var gather_rows(Tape& t, Var x, std::vector<int> idx) {
    const Tensor& X = t.val(x);
    if (X.rank() < 2) throw ShapeError("gather_rows needs rank >= 2");
    int n = X.dim(0);
    int64_t row = X.size() / n;
    for (int i : idx)
        if (i < 0 || i >= n) throw ShapeError("gather_rows: index " + std::to_string(i));
    std::vector<int> shape = X.shape();
    shape[0] = int(idx.size());
    Tensor out(shape);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(X.data() + idx[r] * row, X.data() + (idx[r] + 1) * row, out.data() + r * row);
    auto ids = std::make_shared<std::vector<int>>(std::move(idx));
    return t.push(std::move(out), t.tracked(x), [x, ids, row](Tape& t, int self) {
        if (!t.tracked(x)) return;
        const auto& g = t.grad_buf(self);
        auto& gx = t.grad_buf(x.id);
        for (size_t r = 0; r < ids->size(); ++r) {
            int64_t off = int64_t((*ids)[r]) * row;
            for (int64_t c = 0; c < row; ++c) gx[size_t(off + c)] += g[size_t(r * row + c)];
        }
    });
}

Var broadcast_row(Tape& t, Var v, int n) {
    const Tensor& V = t.val(v);
    int d = int(V.size());
    Tensor out({n, d});
    for (int r = 0; r < n; ++r) std::copy(V.data(), V.data() + d, out.data() + int64_t(r) * d);
    return t.push(std::move(out), t.tracked(v), [v, n, d](Tape& t, int self) {
        if (!t.tracked(v)) return;
        const auto& g = t.grad_buf(self);
        auto& gv = t.grad_buf(v.id);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) gv[size_t(c)] += g[size_t(int64_t(r) * d + c)];
    });
}

Var reshape(Tape& t, Var x, std::vector<int> shape) {
    Tensor out = t.val(x).reshaped(std::move(shape));
    return t.push(std::move(out), t.tracked(x), [x](Tape& t, int self) {
        if (!t.tracked(x)) return;
        axpy(t.grad_buf(x.id), t.grad_buf(self));
    });
}

// ---- fused attention ----

namespace {

struct AttnDims {
    int batch, n_q, n_k, d_k, d_v, heads, dhk, dhv;
    bool squeeze;  // inputs were rank 2
};

AttnDims attn_dims(const Tensor& Q, const Tensor& K, const Tensor& V, int heads) {
    if (Q.rank() != K.rank() || K.rank() != V.rank())
        throw ShapeError("attention: mixed ranks");
    AttnDims d{};
    d.squeeze = (Q.rank() == 2);
    if (Q.rank() == 2) {
        d.batch = 1;
        d.n_q = Q.dim(0);
        d.d_k = Q.dim(1);
        d.n_k = K.dim(0);
        d.d_v = V.dim(1);
        if (K.dim(1) != d.d_k || V.dim(0) != d.n_k) throw ShapeError("attention: shape mismatch");
    } else if (Q.rank() == 3) {
        d.batch = Q.dim(0);
        d.n_q = Q.dim(1);
        d.d_k = Q.dim(2);
        d.n_k = K.dim(1);
        d.d_v = V.dim(2);
        if (K.dim(0) != d.batch || V.dim(0) != d.batch || K.dim(2) != d.d_k ||
            V.dim(1) != d.n_k)
            throw ShapeError("attention: shape mismatch");
    } else {
        throw ShapeError("attention: rank must be 2 or 3");
    }
    if (heads <= 0 || d.d_k % heads != 0 || d.d_v % heads != 0)
        throw ConfigError("attention: head count " + std::to_string(heads) +
                          " must divide d_k=" + std::to_string(d.d_k) +
                          " and d_v=" + std::to_string(d.d_v));
    d.heads = heads;
    d.dhk = d.d_k / heads;
    d.dhv = d.d_v / heads;
    return d;
}

// probs layout: [batch, heads, n_q, n_k]
Tensor attn_forward(const Tensor& Q, const Tensor& K, const Tensor& V, const AttnDims& d,
                    Tensor& probs) {
    std::vector<int> oshape =
        d.squeeze ? std::vector<int>{d.n_q, d.d_v} : std::vector<int>{d.batch, d.n_q, d.d_v};
    Tensor out(oshape);
    probs = Tensor({d.batch, d.heads, d.n_q, d.n_k});
    double inv = 1.0 / std::sqrt(double(d.dhk));
    for (int b = 0; b < d.batch; ++b) {
        const double* qb = Q.data() + int64_t(b) * d.n_q * d.d_k;
        const double* kb = K.data() + int64_t(b) * d.n_k * d.d_k;
        const double* vb = V.data() + int64_t(b) * d.n_k * d.d_v;
        double* ob = out.data() + int64_t(b) * d.n_q * d.d_v;
        for (int h = 0; h < d.heads; ++h) {
            CBlockMap qh(qb + h * d.dhk, d.n_q, d.dhk, Stride(d.d_k));
            CBlockMap kh(kb + h * d.dhk, d.n_k, d.dhk, Stride(d.d_k));
            CBlockMap vh(vb + h * d.dhv, d.n_k, d.dhv, Stride(d.d_v));
            double* pp = probs.data() + ((int64_t(b) * d.heads + h) * d.n_q) * d.n_k;
            MatMap ph(pp, d.n_q, d.n_k);
            ph.noalias() = qh * kh.transpose() * inv;
            for (int r = 0; r < d.n_q; ++r) {
                double* row = pp + int64_t(r) * d.n_k;
                double mx = row[0];
                for (int c = 1; c < d.n_k; ++c) mx = std::max(mx, row[c]);
                double z = 0.0;
                for (int c = 0; c < d.n_k; ++c) {
                    row[c] = std::exp(row[c] - mx);
                    z += row[c];
                }
                for (int c = 0; c < d.n_k; ++c) row[c] /= z;
            }
            BlockMap oh(ob + h * d.dhv, d.n_q, d.dhv, Stride(d.d_v));
            oh.noalias() = ph * vh;
        }
    }
    return out;
}

}  // namespace

Var attention(Tape& t, Var q, Var k, Var v, int heads, Tensor* probs_out) {
    const Tensor& Q = t.val(q);
    const Tensor& K = t.val(k);
    const Tensor& V = t.val(v);
    AttnDims d = attn_dims(Q, K, V, heads);
    auto probs = std::make_shared<Tensor>();
    Tensor out = attn_forward(Q, K, V, d, *probs);
    if (probs_out) *probs_out = *probs;
    bool ng = t.tracked(q) || t.tracked(k) || t.tracked(v);
    return t.push(std::move(out), ng, [q, k, v, d, probs](Tape& t, int self) {
        const Tensor& Q = t.val(q);
        const Tensor& K = t.val(k);
        const Tensor& V = t.val(v);
        const auto& go = t.grad_buf(self);
        bool tq = t.tracked(q), tk = t.tracked(k), tv = t.tracked(v);
        double* gq = tq ? t.grad_buf(q.id).data() : nullptr;
        double* gk = tk ? t.grad_buf(k.id).data() : nullptr;
        double* gv = tv ? t.grad_buf(v.id).data() : nullptr;
        double inv = 1.0 / std::sqrt(double(d.dhk));
        RowMat dP(d.n_q, d.n_k), dS(d.n_q, d.n_k);
        for (int b = 0; b < d.batch; ++b) {
            int64_t qo = int64_t(b) * d.n_q * d.d_k;
            int64_t ko = int64_t(b) * d.n_k * d.d_k;
            int64_t vo = int64_t(b) * d.n_k * d.d_v;
            const double* gob = go.data() + int64_t(b) * d.n_q * d.d_v;
            for (int h = 0; h < d.heads; ++h) {
                CBlockMap qh(Q.data() + qo + h * d.dhk, d.n_q, d.dhk, Stride(d.d_k));
                CBlockMap kh(K.data() + ko + h * d.dhk, d.n_k, d.dhk, Stride(d.d_k));
                CBlockMap vh(V.data() + vo + h * d.dhv, d.n_k, d.dhv, Stride(d.d_v));
                CBlockMap goh(gob + h * d.dhv, d.n_q, d.dhv, Stride(d.d_v));
                CMatMap ph(probs->data() + ((int64_t(b) * d.heads + h) * d.n_q) * d.n_k,
                           d.n_q, d.n_k);
                if (tv) {
                    BlockMap gvh(gv + vo + h * d.dhv, d.n_k, d.dhv, Stride(d.d_v));
                    gvh.noalias() += ph.transpose() * goh;
                }
                if (tq || tk) {
                    dP.noalias() = goh * vh.transpose();
                    // softmax backward: dS = P .* (dP - rowsum(dP .* P))
                    Eigen::VectorXd rs = (dP.array() * ph.array()).rowwise().sum();
                    dS = ph.array() * (dP.colwise() - rs).array();
                    dS *= inv;
                    if (tq) {
                        BlockMap gqh(gq + qo + h * d.dhk, d.n_q, d.dhk, Stride(d.d_k));
                        gqh.noalias() += dS * kh;
                    }
                    if (tk) {
                        BlockMap gkh(gk + ko + h * d.dhk, d.n_k, d.dhk, Stride(d.d_k));
                        gkh.noalias() += dS.transpose() * qh;
                    }
                }
            }
        }
    });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            Tensor* probs_out) {
    AttnDims d = attn_dims(q, k, v, heads);
    Tensor probs;
    Tensor out = attn_forward(q, k, v, d, probs);
    if (probs_out) *probs_out = std::move(probs);
    return out;
}

// ---- finite differences ----

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step) {
    std::vector<int64_t> coords(size_t(x.size()));
    for (int64_t i = 0; i < x.size(); ++i) coords[size_t(i)] = i;
    return grad_check(f, x, step, coords);
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step,
                  const std::vector<int64_t>& coords) {
    Tape tape;
    Var in = tape.leaf(x);
    Var out = f(tape, in);
    if (tape.val(out).size() != 1) throw ShapeError("grad_check: f must return a scalar");
    tape.backward(out);
    std::vector<double> analytic = tape.grad(in);
    if (analytic.empty()) analytic.assign(size_t(x.size()), 0.0);

    auto eval = [&](const Tensor& pt) {
        Tape t2;
        Var v = t2.constant(pt);
        double y = t2.val(f(t2, v))[0];
        if (!std::isfinite(y)) throw NumericError("grad_check: non-finite objective");
        return y;
    };

    double worst = 0.0;
    Tensor probe = x;
    for (int64_t c : coords) {
        double keep = probe[c];
        probe[c] = keep + step;
        double up = eval(probe);
        probe[c] = keep - step;
        double dn = eval(probe);
        probe[c] = keep;
        double central = (up - dn) / (2.0 * step);
        double err = std::abs(analytic[size_t(c)] - central) / (std::abs(central) + 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace selva
