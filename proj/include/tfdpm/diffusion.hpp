#pragma once

#include "tfdpm/autodiff.hpp"
#include "tfdpm/common.hpp"
#include "tfdpm/extractors.hpp"

#include <utility>
#include <vector>

namespace tfdpm {

/// Variance schedule of the forward corruption chain plus the derived
/// alpha / alpha-bar / posterior-beta / SNR tables. Step indices are
/// 1-based; alpha_bar(0) == 1.
class NoiseSchedule {
public:
    /// N evenly spaced betas from beta_start to beta_end inclusive.
    static NoiseSchedule linear(int n_steps, double beta_start, double beta_end);
    /// Schedule from explicit betas (ascending, each in (0,1)); used for the
    /// short schedules the noise-scheduling network constructs.
    static NoiseSchedule from_betas(std::vector<double> betas);

    int steps() const { return static_cast<int>(betas_.size()); }
    double beta(int n) const;
    double alpha(int n) const { return 1.0 - beta(n); }
    double alpha_bar(int n) const;
    /// Posterior variance beta-tilde_n = (1 - abar_{n-1})/(1 - abar_n) * beta_n.
    double posterior_beta(int n) const;
    /// Signal-to-noise ratio abar_n / (1 - abar_n). SNR(0) is the linear
    /// extrapolation SNR(1) + (SNR(1) - SNR(2)) so the n = 1 loss weight
    /// stays finite.
    double snr(int n) const;
    /// (N_s / 2) * (SNR(n-1) - SNR(n)).
    double loss_weight(int n) const;

    const std::vector<double>& betas() const { return betas_; }

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

/// x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps.
Vector forward_sample(const NoiseSchedule& s, const Vector& x0, int n, const Vector& eps);

/// Mean and variance of q(x_{n-1} | x_n, x_0).
std::pair<Vector, double> posterior_params(const NoiseSchedule& s, const Vector& x0,
                                           const Vector& xn, int n);

struct EpsNetworkConfig {
    Eigen::Index data_dim = 0;
    Eigen::Index cond_dim = 64;
    Eigen::Index residual_channels = 64;
    Eigen::Index skip_channels = 64;
    int dilations[4] = {1, 2, 4, 8};
    Eigen::Index fourier_features = 64;
    // alpha values are affinely mapped onto [0, 1] using the training
    // schedule's endpoints before the Fourier embedding
    double alpha_hi = 1.0 - 1e-4;
    double alpha_lo = 1.0 - 1e-2;
};

/// Conditional denoiser: a stack of 4 gated residual blocks with dilated
/// 1-D convolutions over the channel axis, conditioned on F_t and a Fourier
/// embedding of the (rescaled) alpha_n.
class EpsNetwork {
public:
    EpsNetwork(const EpsNetworkConfig& cfg, Rng& rng);

    /// x: B×D, alpha: B×1, cond: B×cond_dim -> B×D.
    nn::Var forward(nn::Graph& g, nn::Var x, const Matrix& alpha, nn::Var cond,
                    Eigen::Index batch);
    /// No-gradient batched evaluation.
    Matrix eval(const Matrix& x, const Matrix& alpha, const Matrix& cond);
    /// Single-step convenience.
    Vector eps_forward(const Vector& xn, double alpha_n, const FeatureState& cond);

    Matrix fourier_embed(const Matrix& alpha) const;

    const EpsNetworkConfig& config() const { return cfg_; }
    std::vector<nn::Tensor*> params();
    nn::Tensor* param(const std::string& name);

private:
    EpsNetworkConfig cfg_;
    nn::Tensor input_w_, input_b_;
    nn::Tensor noise_w_, noise_b_;
    nn::Tensor dil_w_[4], dil_b_[4];
    nn::Tensor cond_w_[4], cond_b_[4];
    nn::Tensor out_w_[4], out_b_[4];
    nn::Tensor head1_w_, head1_b_;
    nn::Tensor head2_w_, head2_b_;
};

/// SNR-weighted single-sample training loss
/// (N_s/2)(SNR(n-1) - SNR(n)) * ||eps - eps_hat(x_n, alpha_n, F_t)||^2.
double diffusion_loss(EpsNetwork& net, const NoiseSchedule& s, const Vector& x0,
                      const FeatureState& cond, int n, const Vector& eps);

/// Score estimate implied by the eps-parameterisation:
/// -eps_hat(x_n, alpha_n, F_t) / sqrt(1 - abar_n).
Vector implied_score(EpsNetwork& net, const NoiseSchedule& s, int n, const Vector& xn,
                     const FeatureState& cond);

/// Ancestral sampler over the full schedule, batched across condition rows.
/// Invokes the eps network exactly steps() times; eps_calls, when given,
/// receives that count. Throws SamplingError on non-finite intermediates.
Matrix sample_batch(EpsNetwork& net, const NoiseSchedule& s, const Matrix& cond, Rng& rng,
                    long* eps_calls = nullptr);

/// Single-condition sampler (seeded).
Vector sample(EpsNetwork& net, const NoiseSchedule& s, const FeatureState& cond,
              std::uint64_t seed, long* eps_calls = nullptr);

}  // namespace tfdpm
