#include "tfdpm/gat.hpp"

namespace tfdpm {

GatLayer::GatLayer(const std::string& name, Eigen::Index feat_dim, Eigen::Index out_dim,
                   Matrix adjacency, double leaky_slope, Rng& rng)
    : feat_dim_(feat_dim),
      adjacency_(std::move(adjacency)),
      leaky_slope_(leaky_slope),
      attn_w_(name + ".attn", 2 * feat_dim, 1),
      value_w_(name + ".value", out_dim, feat_dim) {
    if (leaky_slope_ <= 0.0 || leaky_slope_ >= 1.0)
        throw ConfigError("GAT leaky slope must lie in (0,1)");
    if (adjacency_.rows() != adjacency_.cols()) throw ConfigError("GAT adjacency must be square");
    for (Eigen::Index i = 0; i < adjacency_.rows(); ++i) {
        if (adjacency_(i, i) == 0.0) throw ConfigError("GAT adjacency must include self-loops");
    }
    nn::init_uniform_fan_in(attn_w_, 2 * feat_dim, rng);
    nn::init_uniform_fan_in(value_w_, feat_dim, rng);
}

Matrix GatLayer::complete_adjacency(Eigen::Index n) { return Matrix::Ones(n, n); }

nn::Var GatLayer::attention(nn::Graph& g, nn::Var h) {
    if (g.val(h).cols() != feat_dim_) throw ShapeError("GAT: feature dimension mismatch");
    nn::Var w = g.param(attn_w_);
    nn::Var a1 = g.slice_rows(w, 0, feat_dim_);
    nn::Var a2 = g.slice_rows(w, feat_dim_, feat_dim_);
    nn::Var s1 = g.matmul(h, a1);
    nn::Var s2 = g.matmul(h, a2);
    return g.gat_attention(s1, s2, adjacency_, leaky_slope_);
}

nn::Var GatLayer::forward(nn::Graph& g, nn::Var h) {
    nn::Var alpha = attention(g, h);
    nn::Var vh = g.linear(h, value_w_);
    return g.sigmoid(g.block_matmul(alpha, vh, nodes()));
}

Matrix GatLayer::attention_weights(const Matrix& h) {
    nn::Graph g(false);
    return g.val(attention(g, g.constant(h)));
}

Matrix GatLayer::forward_single(const Matrix& h) {
    nn::Graph g(false);
    return g.val(forward(g, g.constant(h)));
}

void GatLayer::set_adjacency(Matrix adjacency) {
    if (adjacency.rows() != adjacency.cols() || adjacency.rows() != adjacency_.rows())
        throw ConfigError("set_adjacency: shape must match the node count");
    for (Eigen::Index i = 0; i < adjacency.rows(); ++i)
        if (adjacency(i, i) == 0.0) throw ConfigError("set_adjacency: self-loops required");
    adjacency_ = std::move(adjacency);
}

void GatLayer::collect_params(std::vector<nn::Tensor*>& out) {
    out.push_back(&attn_w_);
    out.push_back(&value_w_);
}

}  // namespace tfdpm
