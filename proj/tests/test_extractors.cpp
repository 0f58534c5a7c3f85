#include <doctest.h>

#include "tfdpm/extractors.hpp"

using namespace tfdpm;

namespace {

ExtractorConfig config(ExtractorKind kind, Eigen::Index d, Eigen::Index omega,
                       Eigen::Index hidden = 8) {
    ExtractorConfig cfg;
    cfg.kind = kind;
    cfg.data_dim = d;
    cfg.window = omega;
    cfg.hidden_size = hidden;
    return cfg;
}

void set_identity_kernel(nn::Tensor& k) {
    k.value.setZero();
    k.value.row(2).setOnes();  // centre tap of the 5-tap kernel
}

}  // namespace

TEST_CASE("smoothing with a frozen identity kernel is the identity") {
    Rng rng(1);
    TcnGatExtractor ex(config(ExtractorKind::TcnGat, 3, 12), rng);
    set_identity_kernel(ex.smooth_kernel());
    Matrix w = rng.normal_matrix(12, 3);
    CHECK((ex.smooth_single(w) - w).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("averaging kernel keeps constants constant in the interior") {
    Rng rng(2);
    DoubleGatExtractor ex(config(ExtractorKind::DoubleGat, 2, 10), rng);
    ex.smooth_kernel().value.setConstant(0.2);
    Matrix w = Matrix::Ones(10, 2) * 3.0;
    Matrix s = ex.smooth_single(w);
    for (Eigen::Index t = 2; t < 8; ++t)
        for (int c = 0; c < 2; ++c) CHECK(s(t, c) == doctest::Approx(3.0));
    // the padded edges see zeros
    CHECK(s(0, 0) == doctest::Approx(3.0 * 0.6));
}

TEST_CASE("smoothing keeps the window length for omega 1, 12, 48") {
    Rng rng(3);
    nn::Tensor k("k", 5, 2);
    k.value.setConstant(0.2);
    for (Eigen::Index omega : {1L, 12L, 48L}) {
        nn::Graph g(false);
        Matrix w = rng.normal_matrix(omega, 2);
        Matrix out = g.val(g.seg_conv_depthwise(g.constant(w), k, omega));
        CHECK(out.rows() == omega);
        CHECK(out.cols() == 2);
    }
}

TEST_CASE("tcn block: zero parameters give zero output, biases average exactly") {
    Rng rng(4);
    TcnGatExtractor ex(config(ExtractorKind::TcnGat, 3, 12), rng);
    std::vector<nn::Tensor*> ps;
    ex.block(0).collect_params(ps);
    for (nn::Tensor* t : ps) t->value.setZero();

    Matrix w = rng.normal_matrix(12, 3);
    Matrix out = ex.tcn_single(0, w);
    CHECK(out.rows() == 12);
    CHECK(out.cols() == 3);
    CHECK(out.isZero());

    // zero weights with biases 1/2/3 make every branch constant; the block
    // output must be their exact mean
    for (nn::Tensor* t : ps) {
        if (t->name.find("conv3_b") != std::string::npos) t->value.setConstant(1.0);
        if (t->name.find("conv5_b") != std::string::npos) t->value.setConstant(2.0);
        if (t->name.find("conv7_b") != std::string::npos) t->value.setConstant(3.0);
    }
    Matrix avg = ex.tcn_single(0, w);
    for (Eigen::Index i = 0; i < avg.size(); ++i) CHECK(avg(i) == doctest::Approx(2.0));
}

TEST_CASE("extractor outputs have the configured feature size regardless of D and omega") {
    Rng rng(5);
    for (auto kind : {ExtractorKind::Gru, ExtractorKind::DoubleGat, ExtractorKind::TcnGat}) {
        for (auto [d, omega] : {std::pair<Eigen::Index, Eigen::Index>{3, 6}, {7, 12}}) {
            auto ex = make_extractor(config(kind, d, omega, 8), rng);
            FeatureState f = ex->extract(rng.normal_matrix(omega, d), 42);
            CHECK(f.vector.size() == 8);
            CHECK(f.time_index == 42);
            CHECK(f.vector.allFinite());
        }
    }
}

TEST_CASE("extractors are pure functions of window and parameters") {
    Rng rng(6);
    for (auto kind : {ExtractorKind::Gru, ExtractorKind::DoubleGat, ExtractorKind::TcnGat}) {
        auto ex = make_extractor(config(kind, 4, 6), rng);
        Matrix w = rng.normal_matrix(6, 4);
        FeatureState a = ex->extract(w, 1);
        FeatureState b = ex->extract(w, 9);
        CHECK(a.vector == b.vector);
        CHECK(a.time_index == 1);
        CHECK(b.time_index == 9);
    }
}

TEST_CASE("gru extractor: zero window output is determined solely by biases") {
    Rng rng(7);
    GruExtractor ex(config(ExtractorKind::Gru, 3, 1, 5), rng);
    // biases start at zero, so a zero window yields a zero feature
    FeatureState f0 = ex.extract(Matrix::Zero(1, 3));
    CHECK(f0.vector.isZero());
    // turning only the candidate bias on moves the feature
    nn::Tensor* bh = ex.param("gru.bh");
    REQUIRE(bh != nullptr);
    bh->value.setConstant(0.7);
    FeatureState f1 = ex.extract(Matrix::Zero(1, 3));
    CHECK(!f1.vector.isZero());
    // changing input weights cannot matter while the window is zero
    nn::Tensor* wz = ex.param("gru.wz");
    wz->value.setConstant(123.0);
    FeatureState f2 = ex.extract(Matrix::Zero(1, 3));
    CHECK(f1.vector == f2.vector);
}

TEST_CASE("double-gat masks hold inside the extractor") {
    Rng rng(8);
    const Eigen::Index omega = 6, d = 3;
    DoubleGatExtractor ex(config(ExtractorKind::DoubleGat, d, omega), rng);
    set_identity_kernel(ex.smooth_kernel());

    // restrict the time graph to a line; timestep 0 must not react to
    // perturbations of timestep 5 (its attention row excludes it)
    Matrix adj = Matrix::Zero(omega, omega);
    for (Eigen::Index i = 0; i < omega; ++i) {
        adj(i, i) = 1;
        if (i > 0) adj(i, i - 1) = 1;
        if (i + 1 < omega) adj(i, i + 1) = 1;
    }
    ex.time_gat().set_adjacency(adj);

    Matrix w = rng.normal_matrix(omega, d);
    Matrix w2 = w;
    w2.row(5) += Vector::Constant(d, 0.37).transpose();

    nn::Graph g(false);
    Matrix o1 = g.val(ex.time_gat().forward(g, g.constant(ex.smooth_single(w))));
    Matrix o2 = g.val(ex.time_gat().forward(g, g.constant(ex.smooth_single(w2))));
    // rows 0..2 do not neighbour row 5 (line graph, identity smoothing)
    for (Eigen::Index t = 0; t < 3; ++t) CHECK(o1.row(t) == o2.row(t));
    CHECK(o1.row(4) != o2.row(4));
}

TEST_CASE("tcn-gat wiring: block 2 sees the exact mean of block 1 and the smoothed signal") {
    Rng rng(9);
    TcnGatExtractor ex(config(ExtractorKind::TcnGat, 4, 8), rng);
    Matrix w = rng.normal_matrix(8, 4);
    auto stages = ex.stages_single(w);
    CHECK((stages.block2_input - 0.5 * (stages.block1 + stages.smoothed)).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK((stages.smoothed - ex.smooth_single(w)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tcn-gat stays finite when block 2 is zeroed") {
    Rng rng(10);
    TcnGatExtractor ex(config(ExtractorKind::TcnGat, 4, 8), rng);
    std::vector<nn::Tensor*> ps;
    ex.block(1).collect_params(ps);
    for (nn::Tensor* t : ps) t->value.setZero();
    FeatureState f = ex.extract(rng.normal_matrix(8, 4));
    CHECK(f.vector.allFinite());
}

TEST_CASE("window validation") {
    Rng rng(11);
    auto ex = make_extractor(config(ExtractorKind::Gru, 3, 6), rng);
    CHECK_THROWS_AS(ex->extract(Matrix::Zero(5, 3)), ShapeError);
    CHECK_THROWS_AS(ex->extract(Matrix::Zero(6, 2)), ShapeError);
    CHECK_THROWS_AS(make_extractor(config(ExtractorKind::TcnGat, 3, 1), rng), ConfigError);
    CHECK_THROWS_AS(parse_extractor_kind("bogus"), ConfigError);
}

TEST_CASE("batched extractor forward matches single-window forward") {
    Rng rng(12);
    for (auto kind : {ExtractorKind::Gru, ExtractorKind::DoubleGat, ExtractorKind::TcnGat}) {
        auto ex = make_extractor(config(kind, 3, 5), rng);
        Matrix w1 = rng.normal_matrix(5, 3), w2 = rng.normal_matrix(5, 3);
        Matrix stacked(10, 3);
        stacked << w1, w2;
        Matrix batched = ex->features(stacked, 2);
        CHECK((batched.row(0).transpose() - ex->extract(w1).vector).cwiseAbs().maxCoeff() < 1e-14);
        CHECK((batched.row(1).transpose() - ex->extract(w2).vector).cwiseAbs().maxCoeff() < 1e-14);
    }
}
