#include "tfdpm/extractors.hpp"

namespace tfdpm {

ExtractorKind parse_extractor_kind(const std::string& name) {
    if (name == "gru") return ExtractorKind::Gru;
    if (name == "double_gat") return ExtractorKind::DoubleGat;
    if (name == "tcn_gat") return ExtractorKind::TcnGat;
    throw ConfigError("unknown extractor '" + name + "' (expected gru|double_gat|tcn_gat)");
}

std::string extractor_kind_name(ExtractorKind kind) {
    switch (kind) {
        case ExtractorKind::Gru: return "gru";
        case ExtractorKind::DoubleGat: return "double_gat";
        case ExtractorKind::TcnGat: return "tcn_gat";
    }
    return "?";
}

GruCell::GruCell(const std::string& name, Eigen::Index input, Eigen::Index hidden, Rng& rng)
    : wz_(name + ".wz", hidden, input),
      uz_(name + ".uz", hidden, hidden),
      bz_(name + ".bz", 1, hidden),
      wr_(name + ".wr", hidden, input),
      ur_(name + ".ur", hidden, hidden),
      br_(name + ".br", 1, hidden),
      wh_(name + ".wh", hidden, input),
      uh_(name + ".uh", hidden, hidden),
      bh_(name + ".bh", 1, hidden) {
    for (nn::Tensor* t : {&wz_, &wr_, &wh_}) nn::init_uniform_fan_in(*t, input, rng);
    for (nn::Tensor* t : {&uz_, &ur_, &uh_}) nn::init_uniform_fan_in(*t, hidden, rng);
}

nn::Var GruCell::step(nn::Graph& g, nn::Var x, nn::Var h) {
    nn::Var z = g.sigmoid(g.add(g.linear(x, wz_, bz_), g.linear(h, uz_)));
    nn::Var r = g.sigmoid(g.add(g.linear(x, wr_, br_), g.linear(h, ur_)));
    nn::Var cand = g.tanh(g.add(g.linear(x, wh_, bh_), g.linear(g.mul(r, h), uh_)));
    return g.lerp(h, cand, z);  // (1-z)*h + z*cand
}

nn::Var GruCell::run(nn::Graph& g, nn::Var seq, Eigen::Index batch, Eigen::Index steps) {
    nn::Var h = g.constant(Matrix::Zero(batch, hidden()));
    for (Eigen::Index t = 0; t < steps; ++t) {
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(batch));
        for (Eigen::Index b = 0; b < batch; ++b) idx[static_cast<std::size_t>(b)] = b * steps + t;
        h = step(g, g.gather_rows(seq, std::move(idx)), h);
    }
    return h;
}

void GruCell::collect_params(std::vector<nn::Tensor*>& out) {
    for (nn::Tensor* t : {&wz_, &uz_, &bz_, &wr_, &ur_, &br_, &wh_, &uh_, &bh_}) out.push_back(t);
}

nn::Tensor* Extractor::param(const std::string& name) {
    for (nn::Tensor* t : params())
        if (t->name == name) return t;
    return nullptr;
}

Matrix Extractor::features(const Matrix& windows, Eigen::Index batch) {
    nn::Graph g(false);
    return g.val(forward(g, g.constant(windows), batch));
}

FeatureState Extractor::extract(const Matrix& window, Eigen::Index time_index) {
    if (window.rows() != cfg_.window || window.cols() != cfg_.data_dim)
        throw ShapeError("extract: window must be omega x D");
    Matrix f = features(window, 1);
    FeatureState fs;
    fs.vector = f.row(0).transpose();
    fs.time_index = time_index;
    return fs;
}

namespace {

// Mild low-pass initialisation; the kernel stays trainable.
void init_smooth_kernel(nn::Tensor& k) {
    const double taps[5] = {0.1, 0.2, 0.4, 0.2, 0.1};
    for (Eigen::Index t = 0; t < 5; ++t) k.value.row(t).setConstant(taps[t]);
}

void check_window_input(const nn::Graph& g, nn::Var windows, const ExtractorConfig& cfg,
                        Eigen::Index batch) {
    if (g.val(windows).cols() != cfg.data_dim)
        throw ShapeError("extractor: channel count mismatch");
    if (g.val(windows).rows() != batch * cfg.window)
        throw ShapeError("extractor: expected batch*omega stacked rows");
}

}  // namespace

GruExtractor::GruExtractor(const ExtractorConfig& cfg, Rng& rng)
    : Extractor(cfg), gru_("gru", cfg.data_dim, cfg.hidden_size, rng) {}

nn::Var GruExtractor::forward(nn::Graph& g, nn::Var windows, Eigen::Index batch) {
    check_window_input(g, windows, cfg_, batch);
    return gru_.run(g, windows, batch, cfg_.window);
}

std::vector<nn::Tensor*> GruExtractor::params() {
    std::vector<nn::Tensor*> out;
    gru_.collect_params(out);
    return out;
}

DoubleGatExtractor::DoubleGatExtractor(const ExtractorConfig& cfg, Rng& rng)
    : Extractor(cfg),
      smooth_("dgat.smooth", ExtractorConfig::kSmoothKernel, cfg.data_dim),
      time_gat_("dgat.time_gat", cfg.data_dim, cfg.data_dim,
                GatLayer::complete_adjacency(cfg.window), cfg.leaky_slope, rng),
      feat_gat_("dgat.feat_gat", cfg.window, cfg.window,
                GatLayer::complete_adjacency(cfg.data_dim), cfg.leaky_slope, rng),
      gru_("dgat.gru", 3 * cfg.data_dim, cfg.hidden_size, rng) {
    if (cfg.window < 2) throw ConfigError("double_gat needs a window of at least 2");
    init_smooth_kernel(smooth_);
}

nn::Var DoubleGatExtractor::smooth(nn::Graph& g, nn::Var windows) {
    return g.seg_conv_depthwise(windows, smooth_, cfg_.window);
}

nn::Var DoubleGatExtractor::forward(nn::Graph& g, nn::Var windows, Eigen::Index batch) {
    check_window_input(g, windows, cfg_, batch);
    nn::Var sm = smooth(g, windows);
    // time-oriented attention: nodes are the omega timesteps
    nn::Var tg = time_gat_.forward(g, sm);
    // feature-oriented attention: nodes are the D channels
    nn::Var fg = feat_gat_.forward(g, g.block_transpose(sm, cfg_.window));
    nn::Var fg_back = g.block_transpose(fg, cfg_.data_dim);
    nn::Var cat = g.hcat({tg, fg_back, sm});
    return gru_.run(g, cat, batch, cfg_.window);
}

std::vector<nn::Tensor*> DoubleGatExtractor::params() {
    std::vector<nn::Tensor*> out;
    out.push_back(&smooth_);
    time_gat_.collect_params(out);
    feat_gat_.collect_params(out);
    gru_.collect_params(out);
    return out;
}

Matrix DoubleGatExtractor::smooth_single(const Matrix& window) {
    nn::Graph g(false);
    return g.val(smooth(g, g.constant(window)));
}

TcnGatBlock::TcnGatBlock(const std::string& name, Eigen::Index data_dim, Eigen::Index window,
                         double leaky_slope, Rng& rng)
    : gat_(name + ".gat", window, window, GatLayer::complete_adjacency(data_dim), leaky_slope, rng) {
    for (int i = 0; i < 3; ++i) {
        const int k = ExtractorConfig::kTcnKernels[i];
        conv_w_[i] = nn::Tensor(name + ".conv" + std::to_string(k), data_dim, data_dim * k);
        conv_b_[i] = nn::Tensor(name + ".conv" + std::to_string(k) + "_b", 1, data_dim);
        nn::init_uniform_fan_in(conv_w_[i], data_dim * k, rng);
    }
}

nn::Var TcnGatBlock::tcn(nn::Graph& g, nn::Var x, Eigen::Index window) {
    nn::Var acc;
    for (int i = 0; i < 3; ++i) {
        nn::Var branch =
            g.seg_conv(x, conv_w_[i], &conv_b_[i], window, ExtractorConfig::kTcnKernels[i], 1);
        acc = (i == 0) ? branch : g.add(acc, branch);
    }
    return g.scale(acc, 1.0 / 3.0);
}

nn::Var TcnGatBlock::forward(nn::Graph& g, nn::Var x, Eigen::Index window) {
    nn::Var t = tcn(g, x, window);
    nn::Var o = gat_.forward(g, g.block_transpose(t, window));
    return g.block_transpose(o, gat_.nodes());
}

void TcnGatBlock::collect_params(std::vector<nn::Tensor*>& out) {
    for (int i = 0; i < 3; ++i) {
        out.push_back(&conv_w_[i]);
        out.push_back(&conv_b_[i]);
    }
    gat_.collect_params(out);
}

TcnGatExtractor::TcnGatExtractor(const ExtractorConfig& cfg, Rng& rng)
    : Extractor(cfg),
      smooth_("tcngat.smooth", ExtractorConfig::kSmoothKernel, cfg.data_dim),
      block1_("tcngat.block1", cfg.data_dim, cfg.window, cfg.leaky_slope, rng),
      block2_("tcngat.block2", cfg.data_dim, cfg.window, cfg.leaky_slope, rng),
      gru_("tcngat.gru", 3 * cfg.data_dim, cfg.hidden_size, rng) {
    if (cfg.window < 2) throw ConfigError("tcn_gat needs a window of at least 2");
    init_smooth_kernel(smooth_);
}

nn::Var TcnGatExtractor::smooth(nn::Graph& g, nn::Var windows) {
    return g.seg_conv_depthwise(windows, smooth_, cfg_.window);
}

TcnGatExtractor::StageVars TcnGatExtractor::forward_stages(nn::Graph& g, nn::Var windows,
                                                           Eigen::Index batch) {
    check_window_input(g, windows, cfg_, batch);
    StageVars s;
    s.smoothed = smooth(g, windows);
    s.block1 = block1_.forward(g, s.smoothed, cfg_.window);
    // the second block consumes the mean of the first block and the smoothed signal
    s.block2_input = g.scale(g.add(s.block1, s.smoothed), 0.5);
    s.block2 = block2_.forward(g, s.block2_input, cfg_.window);
    nn::Var cat = g.hcat({s.block1, s.block2, s.smoothed});
    s.features = gru_.run(g, cat, batch, cfg_.window);
    return s;
}

nn::Var TcnGatExtractor::forward(nn::Graph& g, nn::Var windows, Eigen::Index batch) {
    return forward_stages(g, windows, batch).features;
}

TcnGatExtractor::Stages TcnGatExtractor::stages_single(const Matrix& window) {
    nn::Graph g(false);
    StageVars v = forward_stages(g, g.constant(window), 1);
    return {g.val(v.smoothed), g.val(v.block1), g.val(v.block2_input), g.val(v.block2)};
}

std::vector<nn::Tensor*> TcnGatExtractor::params() {
    std::vector<nn::Tensor*> out;
    out.push_back(&smooth_);
    block1_.collect_params(out);
    block2_.collect_params(out);
    gru_.collect_params(out);
    return out;
}

Matrix TcnGatExtractor::smooth_single(const Matrix& window) {
    nn::Graph g(false);
    return g.val(smooth(g, g.constant(window)));
}

Matrix TcnGatExtractor::tcn_single(int block_idx, const Matrix& window) {
    nn::Graph g(false);
    return g.val(block(block_idx).tcn(g, g.constant(window), window.rows()));
}

std::unique_ptr<Extractor> make_extractor(const ExtractorConfig& cfg, Rng& rng) {
    if (cfg.data_dim < 1) throw ConfigError("extractor: data dimension must be positive");
    if (cfg.window < 1) throw ConfigError("extractor: window must be positive");
    if (cfg.hidden_size < 1) throw ConfigError("extractor: hidden size must be positive");
    switch (cfg.kind) {
        case ExtractorKind::Gru: return std::make_unique<GruExtractor>(cfg, rng);
        case ExtractorKind::DoubleGat: return std::make_unique<DoubleGatExtractor>(cfg, rng);
        case ExtractorKind::TcnGat: return std::make_unique<TcnGatExtractor>(cfg, rng);
    }
    throw ConfigError("extractor: bad kind");
}

}  // namespace tfdpm
