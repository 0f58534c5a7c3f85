#pragma once

#include "tfdpm/common.hpp"
#include "tfdpm/dataset.hpp"
#include "tfdpm/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace tfdpm {

using LogFn = std::function<void(const std::string&)>;

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    int best_epoch = -1;
    int epochs_run = 0;
};

/// One joint optimiser step for extractor + denoiser on a window batch:
/// per element draws n ~ U(1, N_s) and eps ~ N(0, I), forms the SNR-weighted
/// loss, averages over the batch and applies one Adam update. Returns the
/// batch mean loss. Throws TrainingError (with the offending n, ||x|| and
/// weight) when the loss turns non-finite.
double train_step(TfdpmModel& model, const WindowBatch& batch, nn::Adam& opt, Rng& rng);

/// Batch loss on fixed (n, eps) draws; used for the validation split.
double eval_loss(TfdpmModel& model, const WindowBatch& batch, const std::vector<int>& ns,
                 const Matrix& eps);

/// Full training run with shuffled minibatches, a 10% validation split and
/// early stopping (patience 3); the best-validation parameters are restored
/// on exit.
TrainHistory fit_tfdpm(TfdpmModel& model, const TimeSeriesDataset& train, const LogFn& log = {});

/// Trains the noise-scheduling network against a frozen TFDPM. The returned
/// model records tau, the fast-sampler init pair from the config, the
/// beta_1 floor of the training schedule and the base checkpoint hash.
SchedulerModel train_scheduler(TfdpmModel& frozen, const TimeSeriesDataset& train, int tau,
                               TrainHistory* history = nullptr, const LogFn& log = {});

}  // namespace tfdpm
