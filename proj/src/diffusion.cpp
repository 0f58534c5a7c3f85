#include "tfdpm/diffusion.hpp"

#include <cmath>
#include <sstream>

namespace tfdpm {

NoiseSchedule NoiseSchedule::linear(int n_steps, double beta_start, double beta_end) {
    if (n_steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("noise schedule requires 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(static_cast<std::size_t>(n_steps));
    for (int i = 0; i < n_steps; ++i)
        betas[static_cast<std::size_t>(i)] =
            beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                             static_cast<double>(n_steps - 1);
    return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ConfigError("noise schedule cannot be empty");
    NoiseSchedule s;
    s.alpha_bars_.resize(betas.size());
    double prod = 1.0;
    double prev = 0.0;
    for (std::size_t i = 0; i < betas.size(); ++i) {
        if (!(betas[i] > 0.0) || !(betas[i] < 1.0))
            throw ConfigError("noise schedule betas must lie in (0,1)");
        if (betas[i] < prev) throw ConfigError("noise schedule betas must be non-decreasing");
        prev = betas[i];
        prod *= 1.0 - betas[i];
        s.alpha_bars_[i] = prod;
    }
    s.betas_ = std::move(betas);
    return s;
}

double NoiseSchedule::beta(int n) const {
    if (n < 1 || n > steps()) {
        std::ostringstream os;
        os << "schedule step " << n << " out of range [1, " << steps() << "]";
        throw ConfigError(os.str());
    }
    return betas_[static_cast<std::size_t>(n - 1)];
}

double NoiseSchedule::alpha_bar(int n) const {
    if (n == 0) return 1.0;
    if (n < 0 || n > steps()) {
        std::ostringstream os;
        os << "schedule step " << n << " out of range [0, " << steps() << "]";
        throw ConfigError(os.str());
    }
    return alpha_bars_[static_cast<std::size_t>(n - 1)];
}

double NoiseSchedule::posterior_beta(int n) const {
    return (1.0 - alpha_bar(n - 1)) / (1.0 - alpha_bar(n)) * beta(n);
}

double NoiseSchedule::snr(int n) const {
    if (n == 0) {
        if (steps() < 2) throw ConfigError("SNR(0) extrapolation needs at least 2 steps");
        const double s1 = snr(1), s2 = snr(2);
        return s1 + (s1 - s2);
    }
    const double ab = alpha_bar(n);
    return ab / (1.0 - ab);
}

double NoiseSchedule::loss_weight(int n) const {
    return 0.5 * static_cast<double>(steps()) * (snr(n - 1) - snr(n));
}

Vector forward_sample(const NoiseSchedule& s, const Vector& x0, int n, const Vector& eps) {
    if (x0.size() != eps.size()) throw ShapeError("forward_sample: x0/eps size mismatch");
    const double ab = s.alpha_bar(n);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

std::pair<Vector, double> posterior_params(const NoiseSchedule& s, const Vector& x0,
                                           const Vector& xn, int n) {
    if (x0.size() != xn.size()) throw ShapeError("posterior_params: x0/xn size mismatch");
    const double ab = s.alpha_bar(n), ab_prev = s.alpha_bar(n - 1);
    const double c0 = std::sqrt(ab_prev) * s.beta(n) / (1.0 - ab);
    const double cn = std::sqrt(s.alpha(n)) * (1.0 - ab_prev) / (1.0 - ab);
    return {c0 * x0 + cn * xn, s.posterior_beta(n)};
}

EpsNetwork::EpsNetwork(const EpsNetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.data_dim < 1) throw ConfigError("eps network: data dimension must be positive");
    const Eigen::Index c = cfg.residual_channels, sk = cfg.skip_channels;
    const Eigen::Index f2 = 2 * cfg.fourier_features;

    input_w_ = nn::Tensor("eps.input_w", c, 5);
    input_b_ = nn::Tensor("eps.input_b", 1, c);
    noise_w_ = nn::Tensor("eps.noise_w", c, f2);
    noise_b_ = nn::Tensor("eps.noise_b", 1, c);
    nn::init_uniform_fan_in(input_w_, 5, rng);
    nn::init_uniform_fan_in(noise_w_, f2, rng);
    for (int i = 0; i < 4; ++i) {
        const std::string p = "eps.block" + std::to_string(i);
        dil_w_[i] = nn::Tensor(p + ".dil_w", 2 * c, c * 3);
        dil_b_[i] = nn::Tensor(p + ".dil_b", 1, 2 * c);
        cond_w_[i] = nn::Tensor(p + ".cond_w", 2 * c, cfg.cond_dim);
        cond_b_[i] = nn::Tensor(p + ".cond_b", 1, 2 * c);
        out_w_[i] = nn::Tensor(p + ".out_w", c + sk, c);
        out_b_[i] = nn::Tensor(p + ".out_b", 1, c + sk);
        nn::init_uniform_fan_in(dil_w_[i], c * 3, rng);
        nn::init_uniform_fan_in(cond_w_[i], cfg.cond_dim, rng);
        nn::init_uniform_fan_in(out_w_[i], c, rng);
    }
    head1_w_ = nn::Tensor("eps.head1_w", sk, sk);
    head1_b_ = nn::Tensor("eps.head1_b", 1, sk);
    head2_w_ = nn::Tensor("eps.head2_w", 1, sk);
    head2_b_ = nn::Tensor("eps.head2_b", 1, 1);
    nn::init_uniform_fan_in(head1_w_, sk, rng);
    // the final projection starts at zero so an untrained net predicts zero noise
}

Matrix EpsNetwork::fourier_embed(const Matrix& alpha) const {
    const Eigen::Index b = alpha.rows(), k = cfg_.fourier_features;
    Matrix out(b, 2 * k);
    const double lo = cfg_.alpha_lo, hi = cfg_.alpha_hi;
    const double span = (hi != lo) ? (hi - lo) : 1.0;
    for (Eigen::Index r = 0; r < b; ++r) {
        double a = (alpha(r, 0) - lo) / span;
        a = std::clamp(a, 0.0, 1.0);
        for (Eigen::Index j = 0; j < k; ++j) {
            // frequencies geometrically spaced in [1, 1000]
            const double f = std::pow(1000.0, static_cast<double>(j) / static_cast<double>(k - 1));
            out(r, 2 * j) = std::sin(2.0 * M_PI * f * a);
            out(r, 2 * j + 1) = std::cos(2.0 * M_PI * f * a);
        }
    }
    return out;
}

nn::Var EpsNetwork::forward(nn::Graph& g, nn::Var x, const Matrix& alpha, nn::Var cond,
                            Eigen::Index batch) {
    const Eigen::Index d = cfg_.data_dim, c = cfg_.residual_channels, sk = cfg_.skip_channels;
    if (g.val(x).rows() != batch || g.val(x).cols() != d)
        throw ShapeError("eps network: x must be batch x data_dim");
    if (g.val(cond).rows() != batch || g.val(cond).cols() != cfg_.cond_dim)
        throw ShapeError("eps network: condition must be batch x cond_dim");
    if (alpha.rows() != batch || alpha.cols() != 1)
        throw ShapeError("eps network: alpha must be batch x 1");

    nn::Var emb = g.linear(g.constant(fourier_embed(alpha)), noise_w_, noise_b_);
    nn::Var h = g.seg_conv(g.reshape_rowmajor(x, batch * d, 1), input_w_, &input_b_, d, 5, 1);
    h = g.add(h, g.repeat_rows(emb, d));

    nn::Var skips;
    for (int i = 0; i < 4; ++i) {
        nn::Var u = g.seg_conv(h, dil_w_[i], &dil_b_[i], d, 3, cfg_.dilations[i]);
        u = g.add(u, g.repeat_rows(g.linear(cond, cond_w_[i], cond_b_[i]), d));
        nn::Var gate = g.mul(g.tanh(g.slice_cols(u, 0, c)), g.sigmoid(g.slice_cols(u, c, c)));
        nn::Var o = g.linear(gate, out_w_[i], out_b_[i]);
        h = g.add(h, g.slice_cols(o, 0, c));
        nn::Var skip = g.slice_cols(o, c, sk);
        skips = (i == 0) ? skip : g.add(skips, skip);
    }

    nn::Var y = g.relu(skips);
    y = g.relu(g.linear(y, head1_w_, head1_b_));
    y = g.linear(y, head2_w_, head2_b_);
    return g.reshape_rowmajor(y, batch, d);
}

Matrix EpsNetwork::eval(const Matrix& x, const Matrix& alpha, const Matrix& cond) {
    nn::Graph g(false);
    return g.val(forward(g, g.constant(x), alpha, g.constant(cond), x.rows()));
}

Vector EpsNetwork::eps_forward(const Vector& xn, double alpha_n, const FeatureState& cond) {
    Matrix a(1, 1);
    a(0, 0) = alpha_n;
    return eval(xn.transpose(), a, cond.vector.transpose()).row(0).transpose();
}

std::vector<nn::Tensor*> EpsNetwork::params() {
    std::vector<nn::Tensor*> out = {&input_w_, &input_b_, &noise_w_, &noise_b_};
    for (int i = 0; i < 4; ++i) {
        out.push_back(&dil_w_[i]);
        out.push_back(&dil_b_[i]);
        out.push_back(&cond_w_[i]);
        out.push_back(&cond_b_[i]);
        out.push_back(&out_w_[i]);
        out.push_back(&out_b_[i]);
    }
    out.push_back(&head1_w_);
    out.push_back(&head1_b_);
    out.push_back(&head2_w_);
    out.push_back(&head2_b_);
    return out;
}

nn::Tensor* EpsNetwork::param(const std::string& name) {
    for (nn::Tensor* t : params())
        if (t->name == name) return t;
    return nullptr;
}

double diffusion_loss(EpsNetwork& net, const NoiseSchedule& s, const Vector& x0,
                      const FeatureState& cond, int n, const Vector& eps) {
    const Vector xn = forward_sample(s, x0, n, eps);
    const Vector eps_hat = net.eps_forward(xn, s.alpha(n), cond);
    return s.loss_weight(n) * (eps - eps_hat).squaredNorm();
}

Vector implied_score(EpsNetwork& net, const NoiseSchedule& s, int n, const Vector& xn,
                     const FeatureState& cond) {
    return -net.eps_forward(xn, s.alpha(n), cond) / std::sqrt(1.0 - s.alpha_bar(n));
}

Matrix sample_batch(EpsNetwork& net, const NoiseSchedule& s, const Matrix& cond, Rng& rng,
                    long* eps_calls) {
    const Eigen::Index b = cond.rows(), d = net.config().data_dim;
    Matrix x = rng.normal_matrix(b, d);
    long calls = 0;
    for (int n = s.steps(); n >= 1; --n) {
        const Matrix alpha = Matrix::Constant(b, 1, s.alpha(n));
        const Matrix eps_hat = net.eval(x, alpha, cond);
        ++calls;
        const double ab = s.alpha_bar(n);
        x = (x - (s.beta(n) / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(s.alpha(n));
        if (n > 1) x += std::sqrt(s.posterior_beta(n)) * rng.normal_matrix(b, d);
        if (!x.allFinite()) {
            std::ostringstream os;
            os << "sampler produced a non-finite value at step " << n;
            throw SamplingError(os.str());
        }
    }
    if (eps_calls) *eps_calls = calls;
    return x;
}

Vector sample(EpsNetwork& net, const NoiseSchedule& s, const FeatureState& cond,
              std::uint64_t seed, long* eps_calls) {
    Rng rng(seed);
    return sample_batch(net, s, cond.vector.transpose(), rng, eps_calls).row(0).transpose();
}

}  // namespace tfdpm
