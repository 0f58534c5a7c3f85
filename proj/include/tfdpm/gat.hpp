#pragma once

#include "tfdpm/autodiff.hpp"
#include "tfdpm/common.hpp"

#include <string>
#include <vector>

namespace tfdpm {

/// Single-head graph attention layer over a fixed node set. Attention
/// logits e_ij = LeakyReLU(w · (h_i ⊕ h_j)) are softmax-normalised over each
/// node's neighbourhood; the output is sigmoid(Σ_j α_ij · V h_j).
///
/// Works on batches of stacked blocks: an input of (B·N)×F holds B
/// independent graphs that share parameters and adjacency.
class GatLayer {
public:
    GatLayer(const std::string& name, Eigen::Index feat_dim, Eigen::Index out_dim,
             Matrix adjacency, double leaky_slope, Rng& rng);

    /// Complete graph with self-loops over n nodes.
    static Matrix complete_adjacency(Eigen::Index n);

    /// Row-stochastic attention, (B·N)×N. Masked entries are exactly zero.
    nn::Var attention(nn::Graph& g, nn::Var h);
    /// Layer output, (B·N)×out_dim, elementwise in (0,1).
    nn::Var forward(nn::Graph& g, nn::Var h);

    /// Single-graph conveniences (no gradient bookkeeping).
    Matrix attention_weights(const Matrix& h);
    Matrix forward_single(const Matrix& h);

    Eigen::Index nodes() const { return adjacency_.rows(); }
    Eigen::Index feat_dim() const { return feat_dim_; }
    Eigen::Index out_dim() const { return value_w_.value.rows(); }
    double leaky_slope() const { return leaky_slope_; }
    const Matrix& adjacency() const { return adjacency_; }

    nn::Tensor& attn_weight() { return attn_w_; }
    nn::Tensor& value_weight() { return value_w_; }
    /// Replaces the neighbourhood rule; must stay square with self-loops.
    void set_adjacency(Matrix adjacency);
    void collect_params(std::vector<nn::Tensor*>& out);

private:
    Eigen::Index feat_dim_;
    Matrix adjacency_;
    double leaky_slope_;
    nn::Tensor attn_w_;   // 2F x 1, [a1; a2]
    nn::Tensor value_w_;  // out x F
};

}  // namespace tfdpm
