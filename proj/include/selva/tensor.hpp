#pragma once
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "selva/errors.hpp"

namespace selva {

int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major tensor of doubles. Immutable after forward creation as far
// as the tape is concerned; gradients live on the tape, not here.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(size_t(numel_of(shape_)), 0.0) {}
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int rank() const { return int(shape_.size()); }
    int dim(int i) const { return shape_[size_t(i)]; }
    int64_t size() const { return int64_t(data_.size()); }
    const std::vector<int>& shape() const { return shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](int64_t i) { return data_[size_t(i)]; }
    double operator[](int64_t i) const { return data_[size_t(i)]; }

    double& at(int i) { return data_[size_t(i)]; }
    double& at(int i, int j) { return data_[size_t(i) * shape_[1] + j]; }
    double& at(int i, int j, int k) {
        return data_[(size_t(i) * shape_[1] + j) * shape_[2] + k];
    }
    double& at(int i, int j, int k, int l) {
        return data_[((size_t(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at(int i) const { return data_[size_t(i)]; }
    double at(int i, int j) const { return data_[size_t(i) * shape_[1] + j]; }
    double at(int i, int j, int k) const {
        return data_[(size_t(i) * shape_[1] + j) * shape_[2] + k];
    }
    double at(int i, int j, int k, int l) const {
        return data_[((size_t(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    Tensor reshaped(std::vector<int> shape) const;
    bool finite() const;

  private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// Handle into a Tape node.
struct Var {
    int id = -1;
    bool ok() const { return id >= 0; }
};

// Reverse-mode computation tape. One tape per logical thread; forward values
// are stored on the tape and stay alive until it is destroyed. Constants
// carry no gradient and their backward is never invoked, which is what the
// parameter-freeze contracts rely on.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, int)>;

    Var leaf(const Tensor& v, std::vector<double>* grad_sink = nullptr);
    Var constant(Tensor v);

    const Tensor& val(Var x) const { return nodes_[size_t(x.id)].value; }
    bool tracked(Var x) const { return x.ok() && nodes_[size_t(x.id)].needs_grad; }

    // Seeds d(root)/d(root) = 1 and sweeps the tape once in reverse order.
    void backward(Var root);

    // Gradient of the last backward() w.r.t. node x; empty if none reached it.
    const std::vector<double>& grad(Var x) const;

    size_t node_count() const { return nodes_.size(); }

    // -- op implementation interface --
    Var push(Tensor value, bool needs_grad, BackwardFn bw);
    std::vector<double>& grad_buf(int id);
    bool has_grad(int id) const { return !nodes_[size_t(id)].grad.empty(); }

  private:
    struct Node {
        Tensor value;
        bool needs_grad = false;
        std::vector<double> grad;
        std::vector<double>* sink = nullptr;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<double> empty_;
};

// ---- differentiable ops ----
// All ops work on the value stored in the tape and push one node. Gradient
// rules are exercised against central finite differences in the test suite.

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var matmul(Tape& t, Var a, Var b);                    // [m,k] @ [k,n]
Var add_rowvec(Tape& t, Var a, Var v);                // [..., d] + [d]
Var affine(Tape& t, Var x, Var w, Var b);             // x @ w + b
Var layer_norm(Tape& t, Var x, double eps = 1e-5);    // over last axis
Var gelu(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x);                     // over last axis
Var sum_all(Tape& t, Var x);
Var mean_all(Tape& t, Var x);
Var mean_rows(Tape& t, Var x);                        // [n, d] -> [d]
Var concat_rows(Tape& t, Var a, Var b);               // [n1, d] + [n2, d]
Var slice_rows(Tape& t, Var x, int begin, int end);
Var slice_cols(Tape& t, Var x, int begin, int end);   // on last axis
Var gather_rows(Tape& t, Var x, std::vector<int> idx);
Var broadcast_row(Tape& t, Var v, int n);             // [d] or [1,d] -> [n,d]
Var reshape(Tape& t, Var x, std::vector<int> shape);

// Fused batched multi-head scaled-dot attention.
// q: [B, n_q, d_k] (or [n_q, d_k]), k: [B, n_k, d_k], v: [B, n_k, d_v].
// Softmax over keys per head, pre-scaled by 1/sqrt(d_k / heads).
// When probs_out is given it receives a copy of the attention weights,
// shape [B, heads, n_q, n_k].
Var attention(Tape& t, Var q, Var k, Var v, int heads, Tensor* probs_out = nullptr);

// Spec-facing single-batch form.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            Tensor* probs_out = nullptr);

// ---- value-level kernels (no tape) ----
namespace kernels {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
Tensor softmax_rows(const Tensor& x);
}  // namespace kernels

// Max over coordinates of |autodiff - central difference| / (|central| + 1e-8).
// The second form restricts the sweep to the given flat coordinates.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step);
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step,
                  const std::vector<int64_t>& coords);

}  // namespace selva
