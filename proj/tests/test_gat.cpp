#include <doctest.h>

#include "tfdpm/gat.hpp"

#include <cmath>

using namespace tfdpm;

namespace {

GatLayer make_layer(Eigen::Index feat, Eigen::Index out, Matrix adj, std::uint64_t seed = 1,
                    double slope = 0.2) {
    Rng rng(seed);
    return GatLayer("test", feat, out, std::move(adj), slope, rng);
}

}  // namespace

TEST_CASE("identical features on a complete graph give uniform attention") {
    GatLayer layer = make_layer(3, 3, GatLayer::complete_adjacency(2));
    Matrix h(2, 3);
    h << 0.4, -1.0, 2.0, 0.4, -1.0, 2.0;
    Matrix alpha = layer.attention_weights(h);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) CHECK(alpha(i, j) == doctest::Approx(0.5));
}

TEST_CASE("softmax arithmetic: logits [0, ln 2] give [1/3, 2/3]") {
    GatLayer layer = make_layer(1, 1, GatLayer::complete_adjacency(2));
    // e_ij = LeakyReLU(a1 h_i + a2 h_j); with a1 = 0, a2 = 1 the logit is h_j
    layer.attn_weight().value << 0.0, 1.0;
    Matrix h(2, 1);
    h << 0.0, std::log(2.0);
    Matrix alpha = layer.attention_weights(h);
    for (int i = 0; i < 2; ++i) {
        CHECK(alpha(i, 0) == doctest::Approx(1.0 / 3.0));
        CHECK(alpha(i, 1) == doctest::Approx(2.0 / 3.0));
    }
}

TEST_CASE("leaky relu slope: a_i = 5 maps -5 to -1") {
    nn::Graph g(false);
    Matrix x(1, 1);
    x << -5.0;
    CHECK(g.val(g.leaky_relu(g.constant(x), 0.2))(0, 0) == doctest::Approx(-1.0));
    Matrix y(1, 1);
    y << 3.0;
    CHECK(g.val(g.leaky_relu(g.constant(y), 0.2))(0, 0) == doctest::Approx(3.0));
}

TEST_CASE("zero weights give sigmoid(0) outputs") {
    GatLayer layer = make_layer(3, 4, GatLayer::complete_adjacency(3));
    layer.attn_weight().value.setZero();
    layer.value_weight().value.setZero();
    Matrix h = Matrix::Random(3, 3);
    Matrix o = layer.forward_single(h);
    CHECK(o.rows() == 3);
    CHECK(o.cols() == 4);
    for (Eigen::Index i = 0; i < o.size(); ++i) CHECK(o(i) == doctest::Approx(0.5));
}

TEST_CASE("single node with self-loop degenerates to sigmoid(V h)") {
    GatLayer layer = make_layer(3, 2, GatLayer::complete_adjacency(1), 5);
    Matrix h(1, 3);
    h << 0.3, -0.7, 1.1;
    Matrix o = layer.forward_single(h);
    Vector manual = layer.value_weight().value * h.row(0).transpose();
    for (int j = 0; j < 2; ++j)
        CHECK(o(0, j) == doctest::Approx(1.0 / (1.0 + std::exp(-manual(j)))));
}

TEST_CASE("masked neighbours do not influence outputs") {
    // line graph over 3 nodes: node 0 does not see node 2
    Matrix adj(3, 3);
    adj << 1, 1, 0, 1, 1, 1, 0, 1, 1;
    GatLayer layer = make_layer(2, 2, adj, 3);
    Matrix h(3, 2);
    h << 0.1, 0.2, -0.3, 0.4, 0.5, -0.6;
    Matrix base = layer.forward_single(h);

    Matrix h2 = h;
    h2.row(2) << 9.0, -7.0;  // perturb a non-neighbour of node 0
    Matrix moved = layer.forward_single(h2);
    CHECK(base.row(0) == moved.row(0));        // bit-identical
    CHECK(base.row(1) != moved.row(1));        // actual neighbours do move
    CHECK(base.row(2) != moved.row(2));

    // finite-difference: d o_0 / d h_2 == 0 at step 1e-4
    for (int c = 0; c < 2; ++c) {
        Matrix hp = h, hm = h;
        hp(2, c) += 1e-4;
        hm(2, c) -= 1e-4;
        Matrix diff = layer.forward_single(hp).row(0) - layer.forward_single(hm).row(0);
        CHECK(diff.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("attention rows are stochastic and masked entries are exactly zero") {
    Matrix adj(4, 4);
    adj << 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1;
    GatLayer layer = make_layer(5, 3, adj, 17);
    Rng rng(8);
    Matrix h = rng.normal_matrix(4, 5);
    Matrix alpha = layer.attention_weights(h);
    for (int i = 0; i < 4; ++i) {
        CHECK(std::abs(alpha.row(i).sum() - 1.0) < 1e-6);
        for (int j = 0; j < 4; ++j)
            if (adj(i, j) == 0.0) CHECK(alpha(i, j) == 0.0);
    }
}

TEST_CASE("permutation equivariance on the complete graph") {
    GatLayer layer = make_layer(3, 3, GatLayer::complete_adjacency(4), 9);
    Rng rng(10);
    Matrix h = rng.normal_matrix(4, 3);
    Matrix o = layer.forward_single(h);

    const int perm[4] = {2, 0, 3, 1};
    Matrix hp(4, 3);
    for (int i = 0; i < 4; ++i) hp.row(i) = h.row(perm[i]);
    Matrix op = layer.forward_single(hp);
    for (int i = 0; i < 4; ++i)
        CHECK((op.row(i) - o.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batched attention matches per-sample attention") {
    GatLayer layer = make_layer(3, 2, GatLayer::complete_adjacency(3), 21);
    Rng rng(22);
    Matrix h1 = rng.normal_matrix(3, 3), h2 = rng.normal_matrix(3, 3);
    Matrix stacked(6, 3);
    stacked << h1, h2;

    nn::Graph g(false);
    Matrix batched = g.val(layer.forward(g, g.constant(stacked)));
    Matrix o1 = layer.forward_single(h1), o2 = layer.forward_single(h2);
    CHECK((batched.topRows(3) - o1).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((batched.bottomRows(3) - o2).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("constructor validation") {
    Rng rng(1);
    CHECK_THROWS_AS(GatLayer("bad", 2, 2, Matrix::Zero(2, 2), 0.2, rng), ConfigError);  // no self-loops
    CHECK_THROWS_AS(GatLayer("bad", 2, 2, GatLayer::complete_adjacency(2), 1.5, rng), ConfigError);
    GatLayer ok = make_layer(2, 2, GatLayer::complete_adjacency(2));
    Matrix wrong = Matrix::Random(2, 5);
    CHECK_THROWS_AS(ok.attention_weights(wrong), ShapeError);
}
