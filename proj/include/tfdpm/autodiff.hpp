#pragma once

#include "tfdpm/common.hpp"

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace tfdpm::nn {

/// A named trainable parameter. Gradients accumulate into `grad` across a
/// backward pass; the optimiser consumes and clears them.
struct Tensor {
    std::string name;
    Matrix value;
    Matrix grad;

    Tensor() = default;
    Tensor(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

    void zero_grad() { grad.setZero(); }
    Eigen::Index size() const { return value.size(); }
};

/// Fills a tensor with U(-s, s), s = 1/sqrt(fan_in).
void init_uniform_fan_in(Tensor& t, Eigen::Index fan_in, Rng& rng);

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense matrices. One Graph instance per forward
/// pass; not thread-safe (use one Graph per worker). Constructed with
/// record=false it skips gradient bookkeeping entirely, which is the fast
/// path for sampling and evaluation.
class Graph {
public:
    explicit Graph(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    Var constant(Matrix v);
    Var param(Tensor& t);

    const Matrix& val(Var v) const { return nodes_[check(v)].value; }
    const Matrix& grad_of(Var v) const;

    // -- elementwise -------------------------------------------------------
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var sigmoid(Var a);
    Var tanh(Var a);
    Var relu(Var a);
    Var leaky_relu(Var a, double slope);
    Var log(Var a);
    /// a + w ⊙ (b − a); the GRU state blend.
    Var lerp(Var a, Var b, Var w);

    // -- linear algebra ----------------------------------------------------
    Var matmul(Var a, Var b);
    /// x·Wᵀ with W stored rows=outputs, cols=inputs.
    Var linear(Var x, Tensor& w);
    /// x·Wᵀ + b broadcast across rows; b is 1×out.
    Var linear(Var x, Tensor& w, Tensor& b);

    // -- shape -------------------------------------------------------------
    Var hcat(const std::vector<Var>& parts);
    Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n);
    Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n);
    Var gather_rows(Var a, std::vector<Eigen::Index> idx);
    /// B×C → (B·times)×C; row b is repeated into rows [b·times, (b+1)·times).
    Var repeat_rows(Var a, Eigen::Index times);
    /// (S·seg)×C → (S·C)×seg; transposes each seg×C block independently.
    Var block_transpose(Var a, Eigen::Index seg);
    /// Row-major reinterpretation to rows×cols (same element count).
    Var reshape_rowmajor(Var a, Eigen::Index rows, Eigen::Index cols);

    // -- reductions --------------------------------------------------------
    Var sum(Var a);
    Var mean(Var a);
    /// R×C → R×1, squared L2 norm of every row.
    Var rowwise_sumsq(Var a);
    /// Scales row r of a (R×C) by v(r, 0); v is R×1.
    Var mul_colvec(Var a, Var v);

    // -- sequence convolutions ---------------------------------------------
    /// Same-length 1-D convolution along rows within each length-`seg`
    /// segment of x ((S·seg)×Cin). w is Cout×(Cin·K), tap-major; zero padding
    /// of (K−1)·dilation/2 on both sides. K must be odd.
    Var seg_conv(Var x, Tensor& w, Tensor* b, Eigen::Index seg, int ksize, int dilation);
    /// Per-channel (depthwise) same-length convolution; k is K×C.
    Var seg_conv_depthwise(Var x, Tensor& k, Eigen::Index seg);

    // -- graph attention ----------------------------------------------------
    /// Masked attention over B stacked blocks of N nodes. s1, s2 are
    /// (B·N)×1 per-node logit halves; e_ij = LeakyReLU(s1_i + s2_j) within a
    /// block, softmax over the neighbourhood given by adjacency (N×N, nonzero
    /// = edge). Output is (B·N)×N, rows sum to 1, masked entries exactly 0.
    Var gat_attention(Var s1, Var s2, const Matrix& adjacency, double leaky_slope);
    /// Per-block product: for each block b, Y_b = A_b · X_b where A is
    /// (B·N)×N and X is (B·N)×F.
    Var block_matmul(Var a, Var x, Eigen::Index n);

    /// Backpropagates d(loss)/d(node) for every recorded node; loss must be
    /// 1×1. Parameter gradients accumulate into their Tensor::grad.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool needs_grad = false;
        Tensor* sink = nullptr;
        std::function<void()> back;
    };

    int check(Var v) const;
    Var make(Matrix value, bool needs_grad, std::function<void()> back = {});
    Matrix& g(int id) { return nodes_[id].grad; }
    bool ng(Var v) const { return record_ && nodes_[check(v)].needs_grad; }

    bool record_;
    std::vector<Node> nodes_;
};

/// Adam with global-norm gradient clipping.
class Adam {
public:
    Adam(std::vector<Tensor*> params, double lr, double clip_norm = 10.0, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    /// Applies one update from the accumulated gradients, then clears them.
    void step();

    const std::vector<Tensor*>& params() const { return params_; }

private:
    std::vector<Tensor*> params_;
    std::vector<Matrix> m_, v_;
    double lr_, clip_, beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace tfdpm::nn
