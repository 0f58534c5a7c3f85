#pragma once

#include "tfdpm/autodiff.hpp"
#include "tfdpm/common.hpp"
#include "tfdpm/diffusion.hpp"
#include "tfdpm/extractors.hpp"

#include <utility>
#include <vector>

namespace tfdpm {

/// Two-layer perceptron sigma_phi(x_n, F_t) with a sigmoid head, so outputs
/// lie strictly inside (0,1).
class SchedulerNet {
public:
    SchedulerNet(Eigen::Index data_dim, Eigen::Index cond_dim, Eigen::Index hidden, Rng& rng);

    /// x: B×D, cond: B×H -> B×1.
    nn::Var forward(nn::Graph& g, nn::Var x, nn::Var cond);
    Matrix eval(const Matrix& x, const Matrix& cond);
    double eval_single(const Vector& x, const FeatureState& cond);

    Eigen::Index data_dim() const { return data_dim_; }
    Eigen::Index cond_dim() const { return cond_dim_; }
    Eigen::Index hidden() const { return w1_.value.rows(); }
    std::vector<nn::Tensor*> params();

private:
    Eigen::Index data_dim_, cond_dim_;
    nn::Tensor w1_, b1_, w2_, b2_;
};

/// min{1 - abar_next/(1 - beta_next), beta_next}; throws ScheduleError when
/// the bound is not positive (inconsistent inputs).
double next_beta_bound(double beta_next, double alpha_bar_next);

/// beta_hat_n = bound * sigma_phi(x_n, F_t), guaranteed inside (0, bound).
double next_beta(SchedulerNet& net, const Vector& xn, const FeatureState& cond, double beta_next,
                 double alpha_bar_next);

/// C_n(phi) = 1/4 log((1-abar)/beta) + (D/2)(beta/(1-abar) - 1).
double cn_term(double beta_hat, double alpha_bar_hat, Eigen::Index d);

/// Per-sample bilateral objective against the frozen denoiser. alpha passed
/// to the denoiser is the original schedule's alpha(n). Throws ScheduleError
/// when 1 - beta_hat - abar_hat <= 0 (caller redraws n).
double scheduler_loss(EpsNetwork& eps_star, const NoiseSchedule& s, const Vector& x0,
                      const FeatureState& cond, int n, const Vector& eps, double beta_hat,
                      double alpha_bar_hat);

struct FastScheduleTrace {
    std::vector<double> betas_used;  // ascending: the constructed short schedule
    long n_calls = 0;                // denoiser invocations for this time step
    enum class Stop { HitFloor, Exhausted } stop_reason = Stop::Exhausted;
    bool fell_back_to_full = false;
};

struct FastSampleResult {
    Matrix x0;  // B×D
    std::vector<FastScheduleTrace> traces;
};

/// Accelerated sampler: a reverse pass that queries sigma_phi after every
/// step to pick the next noise scale, stopping once it falls below
/// beta_floor, followed by a standard ancestral pass over the constructed
/// short schedule. Each condition row gets its own schedule.
FastSampleResult fast_sample_batch(EpsNetwork& eps, const NoiseSchedule& full, SchedulerNet& net,
                                   const Matrix& cond, double alpha_bar_init, double beta_init,
                                   double beta_floor, Rng& rng);

std::pair<Vector, FastScheduleTrace> fast_sample(EpsNetwork& eps, const NoiseSchedule& full,
                                                 SchedulerNet& net, const FeatureState& cond,
                                                 double alpha_bar_init, double beta_init,
                                                 double beta_floor, std::uint64_t seed);

}  // namespace tfdpm
