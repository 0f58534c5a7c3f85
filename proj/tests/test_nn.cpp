#include <doctest.h>

#include "tfdpm/autodiff.hpp"

#include <cmath>
#include <functional>

using namespace tfdpm;
using nn::Graph;
using nn::Tensor;
using nn::Var;

namespace {

using BuildFn = std::function<Var(Graph&)>;

double loss_value(const BuildFn& build) {
    Graph g(false);
    return g.val(build(g))(0, 0);
}

// Central-difference check of every entry of every parameter.
void check_grads(const std::vector<Tensor*>& params, const BuildFn& build, double tol = 1e-6) {
    Graph g(true);
    Var loss = build(g);
    for (Tensor* p : params) p->zero_grad();
    g.backward(loss);
    std::vector<Matrix> analytic;
    for (Tensor* p : params) analytic.push_back(p->grad);

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor* p = params[pi];
        for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
            for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
                const double v0 = p->value(i, j);
                const double h = 1e-5 * std::max(1.0, std::abs(v0));
                p->value(i, j) = v0 + h;
                const double lp = loss_value(build);
                p->value(i, j) = v0 - h;
                const double lm = loss_value(build);
                p->value(i, j) = v0;
                const double fd = (lp - lm) / (2.0 * h);
                const double an = analytic[pi](i, j);
                INFO(p->name << "(" << i << "," << j << "): fd=" << fd << " analytic=" << an);
                CHECK(std::abs(fd - an) <= tol * std::max({1.0, std::abs(fd), std::abs(an)}));
            }
        }
    }
}

Tensor make_tensor(const char* name, Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Tensor t(name, r, c);
    t.value = rng.normal_matrix(r, c) * scale;
    return t;
}

}  // namespace

TEST_CASE("rng is deterministic and roughly normal") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    Rng c(7);
    double sum = 0, sumsq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = c.normal();
        sum += x;
        sumsq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sumsq / n - 1.0) < 0.05);
    Rng d(9);
    for (int i = 0; i < 1000; ++i) {
        const long v = d.uniform_int(3, 7);
        CHECK(v >= 3);
        CHECK(v <= 7);
    }
}

TEST_CASE("elementwise op gradients") {
    Rng rng(1);
    Tensor a = make_tensor("a", 3, 4, rng);
    Tensor b = make_tensor("b", 3, 4, rng);
    Tensor w = make_tensor("w", 3, 4, rng, 0.3);
    Matrix coef = rng.normal_matrix(3, 4);

    check_grads({&a, &b}, [&](Graph& g) {
        Var x = g.add(g.param(a), g.param(b));
        return g.sum(g.mul(g.constant(coef), x));
    });
    check_grads({&a, &b}, [&](Graph& g) {
        Var x = g.mul(g.sub(g.param(a), g.param(b)), g.param(a));
        return g.mean(g.mul(g.constant(coef), x));
    });
    check_grads({&a, &b}, [&](Graph& g) {
        Var x = g.div(g.param(a), g.add_scalar(g.sigmoid(g.param(b)), 1.0));
        return g.sum(g.mul(g.constant(coef), x));
    });
    check_grads({&a}, [&](Graph& g) {
        Var x = g.tanh(g.scale(g.param(a), 0.7));
        return g.sum(g.mul(g.constant(coef), x));
    });
    check_grads({&a}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef), g.leaky_relu(g.param(a), 0.2)));
    });
    check_grads({&a}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef), g.relu(g.param(a))));
    });
    check_grads({&a}, [&](Graph& g) {
        Var pos = g.add_scalar(g.sigmoid(g.param(a)), 0.5);
        return g.sum(g.mul(g.constant(coef), g.log(pos)));
    });
    check_grads({&a, &b, &w}, [&](Graph& g) {
        Var wv = g.sigmoid(g.param(w));
        return g.sum(g.mul(g.constant(coef), g.lerp(g.param(a), g.param(b), wv)));
    });
}

TEST_CASE("matmul and linear gradients") {
    Rng rng(2);
    Tensor a = make_tensor("a", 4, 3, rng);
    Tensor b = make_tensor("b", 3, 5, rng);
    Tensor w = make_tensor("w", 5, 3, rng);
    Tensor bias = make_tensor("bias", 1, 5, rng);
    Matrix coef = rng.normal_matrix(4, 5);

    check_grads({&a, &b}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef), g.matmul(g.param(a), g.param(b))));
    });
    check_grads({&a, &w, &bias}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef), g.linear(g.sigmoid(g.param(a)), w, bias)));
    });
}

TEST_CASE("shape op gradients") {
    Rng rng(3);
    Tensor a = make_tensor("a", 6, 4, rng);
    Tensor b = make_tensor("b", 6, 2, rng);

    {
        Matrix coef = rng.normal_matrix(6, 6);
        check_grads({&a, &b}, [&](Graph& g) {
            return g.sum(g.mul(g.constant(coef), g.hcat({g.param(a), g.param(b)})));
        });
    }
    {
        Matrix coef = rng.normal_matrix(6, 2);
        check_grads({&a}, [&](Graph& g) {
            return g.sum(g.mul(g.constant(coef), g.slice_cols(g.param(a), 1, 2)));
        });
    }
    {
        Matrix coef = rng.normal_matrix(3, 4);
        check_grads({&a}, [&](Graph& g) {
            return g.sum(g.mul(g.constant(coef), g.slice_rows(g.param(a), 2, 3)));
        });
    }
    {
        Matrix coef = rng.normal_matrix(5, 4);
        // repeated indices must accumulate
        check_grads({&a}, [&](Graph& g) {
            return g.sum(g.mul(g.constant(coef), g.gather_rows(g.param(a), {0, 2, 2, 5, 1})));
        });
    }
    {
        Tensor small = make_tensor("small", 2, 3, rng);
        Matrix coef = rng.normal_matrix(8, 3);
        check_grads({&small}, [&](Graph& g) {
            return g.sum(g.mul(g.constant(coef), g.repeat_rows(g.param(small), 4)));
        });
    }
    {
        Matrix coef = rng.normal_matrix(8, 3);  // (2*4)x3 <- block_transpose of (2*3)x4
        check_grads({&a}, [&](Graph& g) {
            return g.sum(g.mul(g.constant(coef), g.block_transpose(g.param(a), 3)));
        });
    }
    {
        Matrix coef = rng.normal_matrix(8, 3);
        check_grads({&a}, [&](Graph& g) {
            return g.sum(g.mul(g.constant(coef), g.reshape_rowmajor(g.param(a), 8, 3)));
        });
    }
}

TEST_CASE("reshape_rowmajor preserves row-major order") {
    Graph g(false);
    Matrix m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    Var v = g.reshape_rowmajor(g.constant(m), 6, 1);
    Matrix got = g.val(v);
    for (int i = 0; i < 6; ++i) CHECK(got(i, 0) == doctest::Approx(i + 1.0));
    Var back = g.reshape_rowmajor(v, 2, 3);
    CHECK(g.val(back) == m);
}

TEST_CASE("reduction op gradients") {
    Rng rng(4);
    Tensor a = make_tensor("a", 5, 3, rng);
    Tensor v = make_tensor("v", 5, 1, rng);
    Matrix coef = rng.normal_matrix(5, 1);

    check_grads({&a}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef), g.rowwise_sumsq(g.param(a))));
    });
    check_grads({&a, &v}, [&](Graph& g) {
        Matrix c2 = Matrix::Ones(5, 3);
        return g.sum(g.mul(g.constant(c2), g.mul_colvec(g.param(a), g.param(v))));
    });
    check_grads({&a}, [&](Graph& g) { return g.mean(g.param(a)); });
}

TEST_CASE("segmented convolution gradients") {
    Rng rng(5);
    // 2 segments of length 5, 3 input channels, 2 output channels, k=3 dil=2
    Tensor x = make_tensor("x", 10, 3, rng);
    Tensor w = make_tensor("w", 2, 9, rng);
    Tensor b = make_tensor("b", 1, 2, rng);
    Matrix coef = rng.normal_matrix(10, 2);
    check_grads({&x, &w, &b}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef), g.seg_conv(g.param(x), w, &b, 5, 3, 2)));
    });

    Tensor k = make_tensor("k", 5, 3, rng);
    Matrix coef2 = rng.normal_matrix(10, 3);
    check_grads({&x, &k}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef2), g.seg_conv_depthwise(g.param(x), k, 5)));
    });
}

TEST_CASE("segmented convolution respects segment boundaries") {
    // a pure shift kernel must not leak values across segments
    Graph g(false);
    Matrix x = Matrix::Zero(6, 1);
    x(2, 0) = 1.0;  // last row of the first length-3 segment
    Tensor w("w", 1, 3);
    w.value << 0, 0, 1;  // output(t) = x(t+1)
    Var y = g.seg_conv(g.constant(x), w, nullptr, 3, 3, 1);
    CHECK(g.val(y)(1, 0) == doctest::Approx(1.0));
    CHECK(g.val(y)(2, 0) == doctest::Approx(0.0));  // would see row 3 without the boundary
    CHECK(g.val(y)(3, 0) == doctest::Approx(0.0));
}

TEST_CASE("gat attention gradients and masking") {
    Rng rng(6);
    const Eigen::Index n = 3, blocks = 2;
    Tensor s1 = make_tensor("s1", blocks * n, 1, rng);
    Tensor s2 = make_tensor("s2", blocks * n, 1, rng);
    Matrix adj(n, n);
    adj << 1, 1, 0, 1, 1, 1, 0, 1, 1;  // line graph with self-loops
    Matrix coef = rng.normal_matrix(blocks * n, n);

    check_grads({&s1, &s2}, [&](Graph& g) {
        return g.sum(
            g.mul(g.constant(coef), g.gat_attention(g.param(s1), g.param(s2), adj, 0.2)));
    });

    Graph g(false);
    Matrix alpha = g.val(g.gat_attention(g.constant(s1.value), g.constant(s2.value), adj, 0.2));
    for (Eigen::Index r = 0; r < alpha.rows(); ++r) {
        CHECK(alpha.row(r).sum() == doctest::Approx(1.0).epsilon(1e-9));
        for (Eigen::Index c = 0; c < n; ++c)
            if (adj(r % n, c) == 0.0) CHECK(alpha(r, c) == 0.0);
    }
}

TEST_CASE("block matmul gradients") {
    Rng rng(7);
    const Eigen::Index n = 3;
    Tensor a = make_tensor("a", 2 * n, n, rng);
    Tensor x = make_tensor("x", 2 * n, 4, rng);
    Matrix coef = rng.normal_matrix(2 * n, 4);
    check_grads({&a, &x}, [&](Graph& g) {
        return g.sum(g.mul(g.constant(coef), g.block_matmul(g.param(a), g.param(x), n)));
    });
}

TEST_CASE("compound network gradient") {
    Rng rng(8);
    Tensor x = make_tensor("x", 8, 2, rng);       // 2 segments of length 4
    Tensor w = make_tensor("w", 6, 6, rng, 0.5);  // conv to 6 channels, k=3
    Tensor wb = make_tensor("wb", 1, 6, rng, 0.1);
    Tensor head = make_tensor("head", 1, 3, rng);
    Matrix coef = rng.normal_matrix(8, 1);
    check_grads({&x, &w, &wb, &head}, [&](Graph& g) {
        Var u = g.seg_conv(g.param(x), w, &wb, 4, 3, 1);
        Var gate = g.mul(g.tanh(g.slice_cols(u, 0, 3)), g.sigmoid(g.slice_cols(u, 3, 3)));
        Var y = g.linear(gate, head);
        return g.sum(g.mul(g.constant(coef), y));
    });
}

TEST_CASE("backward rejects non-scalar loss") {
    Graph g(true);
    Tensor a("a", 2, 2);
    CHECK_THROWS_AS(g.backward(g.param(a)), ShapeError);
}

TEST_CASE("adam reduces a quadratic and clips gradients") {
    Tensor t("t", 2, 2);
    t.value << 4, -3, 2, -1;
    nn::Adam opt({&t}, 0.05, 10.0);
    auto loss = [&] {
        Graph g(true);
        Var l = g.sum(g.mul(g.param(t), g.param(t)));
        const double v = g.val(l)(0, 0);
        t.zero_grad();
        g.backward(l);
        return v;
    };
    const double first = loss();
    opt.step();
    double last = first;
    for (int i = 0; i < 200; ++i) {
        last = loss();
        opt.step();
    }
    CHECK(last < first * 0.01);

    // clipped step must not explode
    Tensor u("u", 1, 1);
    u.value(0, 0) = 1.0;
    nn::Adam opt2({&u}, 0.1, 1.0);
    u.grad(0, 0) = 1e9;
    opt2.step();
    CHECK(std::abs(u.value(0, 0) - 1.0) < 0.2);
}
