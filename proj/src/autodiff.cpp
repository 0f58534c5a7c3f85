#include "tfdpm/autodiff.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace tfdpm::nn {

void init_uniform_fan_in(Tensor& t, Eigen::Index fan_in, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    t.value = rng.uniform_matrix(t.value.rows(), t.value.cols(), -s, s);
}

int Graph::check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw ShapeError("invalid graph variable");
    return v.id;
}

Var Graph::make(Matrix value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) {
        n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Matrix v) { return make(std::move(v), false); }

Var Graph::param(Tensor& t) {
    Var v = make(t.value, true);
    if (record_) {
        nodes_[v.id].sink = &t;
        const int id = v.id;
        nodes_[id].back = [this, id] {
            Node& n = nodes_[id];
            n.sink->grad += n.grad;
        };
    }
    return v;
}

const Matrix& Graph::grad_of(Var v) const {
    const Node& n = nodes_[check(v)];
    if (!n.needs_grad) throw ShapeError("node has no gradient");
    return n.grad;
}

static void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        std::ostringstream os;
        os << op << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows()
           << "x" << b.cols();
        throw ShapeError(os.str());
    }
}

Var Graph::add(Var a, Var b) {
    require_same_shape(val(a), val(b), "add");
    Matrix out = val(a) + val(b);
    bool needs = ng(a) || ng(b);
    Var v = make(std::move(out), needs);
    if (v.id >= 0 && nodes_[v.id].needs_grad) {
        int ia = a.id, ib = b.id, io = v.id;
        nodes_[io].back = [this, ia, ib, io] {
            if (nodes_[ia].needs_grad) g(ia) += g(io);
            if (nodes_[ib].needs_grad) g(ib) += g(io);
        };
    }
    return v;
}

Var Graph::sub(Var a, Var b) {
    require_same_shape(val(a), val(b), "sub");
    Var v = make(val(a) - val(b), ng(a) || ng(b));
    if (v.id >= 0 && nodes_[v.id].needs_grad) {
        int ia = a.id, ib = b.id, io = v.id;
        nodes_[io].back = [this, ia, ib, io] {
            if (nodes_[ia].needs_grad) g(ia) += g(io);
            if (nodes_[ib].needs_grad) g(ib) -= g(io);
        };
    }
    return v;
}

Var Graph::mul(Var a, Var b) {
    require_same_shape(val(a), val(b), "mul");
    Var v = make(val(a).cwiseProduct(val(b)), ng(a) || ng(b));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, ib = b.id, io = v.id;
        nodes_[io].back = [this, ia, ib, io] {
            if (nodes_[ia].needs_grad) g(ia) += g(io).cwiseProduct(nodes_[ib].value);
            if (nodes_[ib].needs_grad) g(ib) += g(io).cwiseProduct(nodes_[ia].value);
        };
    }
    return v;
}

Var Graph::div(Var a, Var b) {
    require_same_shape(val(a), val(b), "div");
    Var v = make(val(a).cwiseQuotient(val(b)), ng(a) || ng(b));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, ib = b.id, io = v.id;
        nodes_[io].back = [this, ia, ib, io] {
            const Matrix& bv = nodes_[ib].value;
            if (nodes_[ia].needs_grad) g(ia) += g(io).cwiseQuotient(bv);
            if (nodes_[ib].needs_grad)
                g(ib) -= g(io).cwiseProduct(nodes_[io].value).cwiseQuotient(bv);
        };
    }
    return v;
}

Var Graph::scale(Var a, double s) {
    Var v = make(val(a) * s, ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io, s] { g(ia) += g(io) * s; };
    }
    return v;
}

Var Graph::add_scalar(Var a, double s) {
    Var v = make(val(a).array() + s, ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] { g(ia) += g(io); };
    }
    return v;
}

Var Graph::sigmoid(Var a) {
    Matrix out = (1.0 / (1.0 + (-val(a).array()).exp())).matrix();
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] {
            const auto& y = nodes_[io].value.array();
            g(ia) += (g(io).array() * y * (1.0 - y)).matrix();
        };
    }
    return v;
}

Var Graph::tanh(Var a) {
    Var v = make(val(a).array().tanh().matrix(), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] {
            const auto& y = nodes_[io].value.array();
            g(ia) += (g(io).array() * (1.0 - y * y)).matrix();
        };
    }
    return v;
}

Var Graph::relu(Var a) {
    Var v = make(val(a).cwiseMax(0.0), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] {
            g(ia) += (g(io).array() * (nodes_[ia].value.array() > 0.0).cast<double>()).matrix();
        };
    }
    return v;
}

Var Graph::leaky_relu(Var a, double slope) {
    const auto& x = val(a).array();
    Matrix out = (x > 0.0).select(val(a), val(a) * slope);
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io, slope] {
            const auto& xv = nodes_[ia].value.array();
            g(ia) += (g(io).array() * (xv > 0.0).select(Eigen::ArrayXXd::Constant(xv.rows(), xv.cols(), 1.0),
                                                        Eigen::ArrayXXd::Constant(xv.rows(), xv.cols(), slope)))
                         .matrix();
        };
    }
    return v;
}

Var Graph::log(Var a) {
    Var v = make(val(a).array().log().matrix(), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] {
            g(ia) += g(io).cwiseQuotient(nodes_[ia].value);
        };
    }
    return v;
}

Var Graph::lerp(Var a, Var b, Var w) {
    require_same_shape(val(a), val(b), "lerp");
    require_same_shape(val(a), val(w), "lerp");
    Matrix out = val(a) + val(w).cwiseProduct(val(b) - val(a));
    Var v = make(std::move(out), ng(a) || ng(b) || ng(w));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, ib = b.id, iw = w.id, io = v.id;
        nodes_[io].back = [this, ia, ib, iw, io] {
            const Matrix& wv = nodes_[iw].value;
            if (nodes_[ia].needs_grad)
                g(ia) += g(io).cwiseProduct((1.0 - wv.array()).matrix());
            if (nodes_[ib].needs_grad) g(ib) += g(io).cwiseProduct(wv);
            if (nodes_[iw].needs_grad)
                g(iw) += g(io).cwiseProduct(nodes_[ib].value - nodes_[ia].value);
        };
    }
    return v;
}

Var Graph::matmul(Var a, Var b) {
    if (val(a).cols() != val(b).rows()) throw ShapeError("matmul: inner dimensions differ");
    Var v = make(val(a) * val(b), ng(a) || ng(b));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, ib = b.id, io = v.id;
        nodes_[io].back = [this, ia, ib, io] {
            if (nodes_[ia].needs_grad) g(ia) += g(io) * nodes_[ib].value.transpose();
            if (nodes_[ib].needs_grad) g(ib) += nodes_[ia].value.transpose() * g(io);
        };
    }
    return v;
}

Var Graph::linear(Var x, Tensor& w) {
    if (val(x).cols() != w.value.cols()) throw ShapeError("linear: input width != fan-in of " + w.name);
    Matrix out = val(x) * w.value.transpose();
    if (!record_) return make(std::move(out), false);
    Var wv = param(w);
    Var v = make(std::move(out), true);
    int ix = x.id, iw = wv.id, io = v.id;
    nodes_[io].back = [this, ix, iw, io] {
        if (nodes_[ix].needs_grad) g(ix) += g(io) * nodes_[iw].value;
        g(iw) += g(io).transpose() * nodes_[ix].value;
    };
    return v;
}

Var Graph::linear(Var x, Tensor& w, Tensor& b) {
    if (val(x).cols() != w.value.cols()) throw ShapeError("linear: input width != fan-in of " + w.name);
    if (b.value.rows() != 1 || b.value.cols() != w.value.rows())
        throw ShapeError("linear: bias shape must be 1 x fan-out for " + w.name);
    Matrix out = val(x) * w.value.transpose();
    out.rowwise() += b.value.row(0);
    if (!record_) return make(std::move(out), false);
    Var wv = param(w);
    Var bv = param(b);
    Var v = make(std::move(out), true);
    int ix = x.id, iw = wv.id, ib = bv.id, io = v.id;
    nodes_[io].back = [this, ix, iw, ib, io] {
        if (nodes_[ix].needs_grad) g(ix) += g(io) * nodes_[iw].value;
        g(iw) += g(io).transpose() * nodes_[ix].value;
        g(ib) += g(io).colwise().sum();
    };
    return v;
}

Var Graph::hcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("hcat: empty");
    Eigen::Index rows = val(parts[0]).rows(), cols = 0;
    bool needs = false;
    for (Var p : parts) {
        if (val(p).rows() != rows) throw ShapeError("hcat: row count mismatch");
        cols += val(p).cols();
        needs = needs || ng(p);
    }
    Matrix out(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
        out.middleCols(c, val(p).cols()) = val(p);
        c += val(p).cols();
    }
    Var v = make(std::move(out), needs);
    if (nodes_[v.id].needs_grad) {
        std::vector<int> ids;
        std::vector<Eigen::Index> widths;
        for (Var p : parts) {
            ids.push_back(p.id);
            widths.push_back(val(p).cols());
        }
        int io = v.id;
        nodes_[io].back = [this, ids, widths, io] {
            Eigen::Index c0 = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (nodes_[ids[k]].needs_grad) g(ids[k]) += g(io).middleCols(c0, widths[k]);
                c0 += widths[k];
            }
        };
    }
    return v;
}

Var Graph::slice_cols(Var a, Eigen::Index c0, Eigen::Index n) {
    if (c0 < 0 || c0 + n > val(a).cols()) throw ShapeError("slice_cols: out of range");
    Var v = make(val(a).middleCols(c0, n), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io, c0, n] { g(ia).middleCols(c0, n) += g(io); };
    }
    return v;
}

Var Graph::slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
    if (r0 < 0 || r0 + n > val(a).rows()) throw ShapeError("slice_rows: out of range");
    Var v = make(val(a).middleRows(r0, n), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io, r0, n] { g(ia).middleRows(r0, n) += g(io); };
    }
    return v;
}

Var Graph::gather_rows(Var a, std::vector<Eigen::Index> idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), val(a).cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= val(a).rows()) throw ShapeError("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(r)) = val(a).row(idx[r]);
    }
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        auto ix = std::move(idx);
        nodes_[io].back = [this, ia, io, ix] {
            for (std::size_t r = 0; r < ix.size(); ++r)
                g(ia).row(ix[r]) += g(io).row(static_cast<Eigen::Index>(r));
        };
    }
    return v;
}

Var Graph::repeat_rows(Var a, Eigen::Index times) {
    const Eigen::Index b = val(a).rows(), c = val(a).cols();
    Matrix out(b * times, c);
    for (Eigen::Index i = 0; i < b; ++i) out.middleRows(i * times, times).rowwise() = val(a).row(i);
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io, times] {
            const Eigen::Index n = nodes_[ia].value.rows();
            for (Eigen::Index i = 0; i < n; ++i)
                g(ia).row(i) += g(io).middleRows(i * times, times).colwise().sum();
        };
    }
    return v;
}

Var Graph::block_transpose(Var a, Eigen::Index seg) {
    const Eigen::Index rows = val(a).rows(), c = val(a).cols();
    if (rows % seg != 0) throw ShapeError("block_transpose: rows not divisible by segment length");
    const Eigen::Index s = rows / seg;
    Matrix out(s * c, seg);
    for (Eigen::Index i = 0; i < s; ++i)
        out.middleRows(i * c, c) = val(a).middleRows(i * seg, seg).transpose();
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io, seg, s, c] {
            for (Eigen::Index i = 0; i < s; ++i)
                g(ia).middleRows(i * seg, seg) += g(io).middleRows(i * c, c).transpose();
        };
    }
    return v;
}

Var Graph::reshape_rowmajor(Var a, Eigen::Index rows, Eigen::Index cols) {
    const Matrix& x = val(a);
    if (x.size() != rows * cols) throw ShapeError("reshape_rowmajor: element count mismatch");
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMajor rm = x;  // row-major copy preserves (row, col) order
    Eigen::Map<RowMajor> view(rm.data(), rows, cols);
    Matrix out = view;
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] {
            RowMajor gr = g(io);
            Eigen::Map<RowMajor> back(gr.data(), nodes_[ia].value.rows(), nodes_[ia].value.cols());
            g(ia) += Matrix(back);
        };
    }
    return v;
}

Var Graph::sum(Var a) {
    Matrix out(1, 1);
    out(0, 0) = val(a).sum();
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] {
            g(ia).array() += g(io)(0, 0);
        };
    }
    return v;
}

Var Graph::mean(Var a) {
    const double n = static_cast<double>(val(a).size());
    Matrix out(1, 1);
    out(0, 0) = val(a).sum() / n;
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io, n] { g(ia).array() += g(io)(0, 0) / n; };
    }
    return v;
}

Var Graph::rowwise_sumsq(Var a) {
    Matrix out = val(a).array().square().matrix().rowwise().sum();
    Var v = make(std::move(out), ng(a));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, io = v.id;
        nodes_[io].back = [this, ia, io] {
            g(ia) += 2.0 * nodes_[ia].value.cwiseProduct(g(io).col(0).replicate(1, nodes_[ia].value.cols()));
        };
    }
    return v;
}

Var Graph::mul_colvec(Var a, Var v_) {
    if (val(v_).cols() != 1 || val(v_).rows() != val(a).rows())
        throw ShapeError("mul_colvec: v must be rows(a) x 1");
    Matrix out = val(a).array().colwise() * val(v_).col(0).array();
    Var v = make(std::move(out), ng(a) || ng(v_));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, iv = v_.id, io = v.id;
        nodes_[io].back = [this, ia, iv, io] {
            if (nodes_[ia].needs_grad)
                g(ia) += (g(io).array().colwise() * nodes_[iv].value.col(0).array()).matrix();
            if (nodes_[iv].needs_grad)
                g(iv).col(0) += g(io).cwiseProduct(nodes_[ia].value).rowwise().sum();
        };
    }
    return v;
}

namespace {

// Copies x shifted by `off` rows within each length-`seg` segment, zero at
// the segment boundaries: out.row(s*seg + r) = x.row(s*seg + r + off).
Matrix shift_rows_segmented(const Matrix& x, Eigen::Index seg, Eigen::Index off) {
    Matrix out = Matrix::Zero(x.rows(), x.cols());
    const Eigen::Index s = x.rows() / seg;
    if (off >= seg || -off >= seg) return out;
    const Eigen::Index len = seg - (off >= 0 ? off : -off);
    for (Eigen::Index i = 0; i < s; ++i) {
        const Eigen::Index base = i * seg;
        if (off >= 0)
            out.middleRows(base, len) = x.middleRows(base + off, len);
        else
            out.middleRows(base - off, len) = x.middleRows(base, len);
    }
    return out;
}

// Adds y into out shifted by -off (the adjoint of shift_rows_segmented).
void unshift_add_segmented(Matrix& out, const Matrix& y, Eigen::Index seg, Eigen::Index off) {
    const Eigen::Index s = out.rows() / seg;
    if (off >= seg || -off >= seg) return;
    const Eigen::Index len = seg - (off >= 0 ? off : -off);
    for (Eigen::Index i = 0; i < s; ++i) {
        const Eigen::Index base = i * seg;
        if (off >= 0)
            out.middleRows(base + off, len) += y.middleRows(base, len);
        else
            out.middleRows(base, len) += y.middleRows(base - off, len);
    }
}

}  // namespace

Var Graph::seg_conv(Var x, Tensor& w, Tensor* b, Eigen::Index seg, int ksize, int dilation) {
    const Eigen::Index cin = val(x).cols();
    if (val(x).rows() % seg != 0) throw ShapeError("seg_conv: rows not divisible by segment length");
    if (ksize % 2 == 0) throw ShapeError("seg_conv: kernel size must be odd");
    if (w.value.cols() != cin * ksize)
        throw ShapeError("seg_conv: weight fan-in mismatch for " + w.name);
    const Eigen::Index cout = w.value.rows();
    if (b && (b->value.rows() != 1 || b->value.cols() != cout))
        throw ShapeError("seg_conv: bias shape mismatch for " + b->name);

    std::vector<Matrix> shifted(static_cast<std::size_t>(ksize));
    Matrix out = Matrix::Zero(val(x).rows(), cout);
    for (int k = 0; k < ksize; ++k) {
        const Eigen::Index off = static_cast<Eigen::Index>((k - ksize / 2) * dilation);
        shifted[k] = shift_rows_segmented(val(x), seg, off);
        out.noalias() += shifted[k] * w.value.middleCols(static_cast<Eigen::Index>(k) * cin, cin).transpose();
    }
    if (b) out.rowwise() += b->value.row(0);
    if (!record_) return make(std::move(out), false);

    Var wv = param(w);
    Var bv;
    if (b) bv = param(*b);
    Var v = make(std::move(out), true);
    int ix = x.id, iw = wv.id, io = v.id;
    int ib = b ? bv.id : -1;
    auto sh = std::make_shared<std::vector<Matrix>>(std::move(shifted));
    nodes_[io].back = [this, ix, iw, ib, io, seg, ksize, dilation, cin, sh] {
        const Matrix& go = g(io);
        for (int k = 0; k < ksize; ++k) {
            const Eigen::Index off = static_cast<Eigen::Index>((k - ksize / 2) * dilation);
            const Eigen::Index c0 = static_cast<Eigen::Index>(k) * cin;
            g(iw).middleCols(c0, cin) += go.transpose() * (*sh)[k];
            if (nodes_[ix].needs_grad) {
                Matrix dxk = go * nodes_[iw].value.middleCols(c0, cin);
                unshift_add_segmented(g(ix), dxk, seg, off);
            }
        }
        if (ib >= 0) g(ib) += go.colwise().sum();
    };
    return v;
}

Var Graph::seg_conv_depthwise(Var x, Tensor& k, Eigen::Index seg) {
    const Eigen::Index c = val(x).cols();
    if (val(x).rows() % seg != 0)
        throw ShapeError("seg_conv_depthwise: rows not divisible by segment length");
    if (k.value.cols() != c) throw ShapeError("seg_conv_depthwise: kernel channel mismatch");
    const int ksize = static_cast<int>(k.value.rows());
    if (ksize % 2 == 0) throw ShapeError("seg_conv_depthwise: kernel size must be odd");

    std::vector<Matrix> shifted(static_cast<std::size_t>(ksize));
    Matrix out = Matrix::Zero(val(x).rows(), c);
    for (int t = 0; t < ksize; ++t) {
        const Eigen::Index off = static_cast<Eigen::Index>(t - ksize / 2);
        shifted[t] = shift_rows_segmented(val(x), seg, off);
        out.array() += shifted[t].array().rowwise() * k.value.row(t).array();
    }
    if (!record_) return make(std::move(out), false);

    Var kv = param(k);
    Var v = make(std::move(out), true);
    int ix = x.id, ik = kv.id, io = v.id;
    auto sh = std::make_shared<std::vector<Matrix>>(std::move(shifted));
    nodes_[io].back = [this, ix, ik, io, seg, ksize, sh] {
        const Matrix& go = g(io);
        for (int t = 0; t < ksize; ++t) {
            const Eigen::Index off = static_cast<Eigen::Index>(t - ksize / 2);
            g(ik).row(t) += go.cwiseProduct((*sh)[t]).colwise().sum();
            if (nodes_[ix].needs_grad) {
                Matrix dxt = go.array().rowwise() * nodes_[ik].value.row(t).array();
                unshift_add_segmented(g(ix), dxt, seg, off);
            }
        }
    };
    return v;
}

Var Graph::gat_attention(Var s1, Var s2, const Matrix& adjacency, double leaky_slope) {
    const Eigen::Index n = adjacency.rows();
    if (adjacency.cols() != n) throw ShapeError("gat_attention: adjacency must be square");
    if (val(s1).cols() != 1 || val(s2).cols() != 1)
        throw ShapeError("gat_attention: logit halves must be column vectors");
    require_same_shape(val(s1), val(s2), "gat_attention");
    if (val(s1).rows() % n != 0) throw ShapeError("gat_attention: rows not divisible by node count");
    const Eigen::Index blocks = val(s1).rows() / n;
    for (Eigen::Index i = 0; i < n; ++i)
        if ((adjacency.row(i).array() != 0.0).count() == 0)
            throw ShapeError("gat_attention: node with empty neighbourhood");

    Matrix out = Matrix::Zero(blocks * n, n);
    const auto& a = val(s1);
    const auto& c = val(s2);
    for (Eigen::Index bkq = 0; bkq < blocks; ++bkq) {
        const Eigen::Index base = bkq * n;
        for (Eigen::Index i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < n; ++j) {
                if (adjacency(i, j) == 0.0) continue;
                double e = a(base + i, 0) + c(base + j, 0);
                if (e < 0.0) e *= leaky_slope;
                out(base + i, j) = e;  // stash logits, normalised below
                mx = std::max(mx, e);
            }
            double z = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (adjacency(i, j) == 0.0) continue;
                out(base + i, j) = std::exp(out(base + i, j) - mx);
                z += out(base + i, j);
            }
            for (Eigen::Index j = 0; j < n; ++j)
                if (adjacency(i, j) != 0.0) out(base + i, j) /= z;
        }
    }

    Var v = make(std::move(out), ng(s1) || ng(s2));
    if (nodes_[v.id].needs_grad) {
        int i1 = s1.id, i2 = s2.id, io = v.id;
        Matrix adj = adjacency;
        nodes_[io].back = [this, i1, i2, io, adj, n, blocks, leaky_slope] {
            const Matrix& alpha = nodes_[io].value;
            const Matrix& go = g(io);
            const Matrix& av = nodes_[i1].value;
            const Matrix& cv = nodes_[i2].value;
            for (Eigen::Index bkq = 0; bkq < blocks; ++bkq) {
                const Eigen::Index base = bkq * n;
                for (Eigen::Index i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (Eigen::Index j = 0; j < n; ++j)
                        dot += alpha(base + i, j) * go(base + i, j);
                    for (Eigen::Index j = 0; j < n; ++j) {
                        if (adj(i, j) == 0.0) continue;
                        const double dl = alpha(base + i, j) * (go(base + i, j) - dot);
                        const double e = av(base + i, 0) + cv(base + j, 0);
                        const double de = (e > 0.0) ? dl : dl * leaky_slope;
                        if (nodes_[i1].needs_grad) g(i1)(base + i, 0) += de;
                        if (nodes_[i2].needs_grad) g(i2)(base + j, 0) += de;
                    }
                }
            }
        };
    }
    return v;
}

Var Graph::block_matmul(Var a, Var x, Eigen::Index n) {
    if (val(a).cols() != n) throw ShapeError("block_matmul: a must be (B*N) x N");
    if (val(a).rows() != val(x).rows() || val(a).rows() % n != 0)
        throw ShapeError("block_matmul: row mismatch");
    const Eigen::Index blocks = val(a).rows() / n;
    Matrix out(val(x).rows(), val(x).cols());
    for (Eigen::Index b = 0; b < blocks; ++b)
        out.middleRows(b * n, n).noalias() = val(a).middleRows(b * n, n) * val(x).middleRows(b * n, n);
    Var v = make(std::move(out), ng(a) || ng(x));
    if (nodes_[v.id].needs_grad) {
        int ia = a.id, ix = x.id, io = v.id;
        nodes_[io].back = [this, ia, ix, io, n, blocks] {
            const Matrix& go = g(io);
            for (Eigen::Index b = 0; b < blocks; ++b) {
                const Eigen::Index r = b * n;
                if (nodes_[ia].needs_grad)
                    g(ia).middleRows(r, n).noalias() +=
                        go.middleRows(r, n) * nodes_[ix].value.middleRows(r, n).transpose();
                if (nodes_[ix].needs_grad)
                    g(ix).middleRows(r, n).noalias() +=
                        nodes_[ia].value.middleRows(r, n).transpose() * go.middleRows(r, n);
            }
        };
    }
    return v;
}

void Graph::backward(Var loss) {
    if (!record_) throw ShapeError("backward on a non-recording graph");
    Node& l = nodes_[check(loss)];
    if (l.value.size() != 1) throw ShapeError("backward: loss must be 1x1");
    if (!l.needs_grad) return;  // loss does not depend on any parameter
    l.grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.needs_grad && n.back) n.back();
    }
}

Adam::Adam(std::vector<Tensor*> params, double lr, double clip_norm, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), clip_(clip_norm), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Tensor* t : params_) {
        m_.push_back(Matrix::Zero(t->value.rows(), t->value.cols()));
        v_.push_back(Matrix::Zero(t->value.rows(), t->value.cols()));
    }
}

void Adam::zero_grad() {
    for (Tensor* t : params_) t->zero_grad();
}

void Adam::step() {
    double sq = 0.0;
    for (Tensor* t : params_) sq += t->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm");
    const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor* t = params_[i];
        Matrix grad = t->grad * scale;
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad.cwiseProduct(grad);
        Matrix mhat = m_[i] / bc1;
        Matrix vhat = v_[i] / bc2;
        t->value -= lr_ * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps_).matrix());
        t->zero_grad();
    }
}

}  // namespace tfdpm::nn
