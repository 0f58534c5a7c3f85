#pragma once

#include "tfdpm/common.hpp"
#include "tfdpm/dataset.hpp"
#include "tfdpm/diffusion.hpp"
#include "tfdpm/extractors.hpp"
#include "tfdpm/scheduler.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace tfdpm {

/// Run configuration. Defaults mirror the published hyperparameter settings:
/// window 12, 100 diffusion steps with betas from 1e-4 to 1e-2, batch 100,
/// 20 epochs with early stopping, tau 10.
struct RunConfig {
    Eigen::Index window = 12;
    int diffusion_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 1e-2;
    int batch_size = 100;
    int epochs = 20;
    std::string extractor = "tcn_gat";
    Eigen::Index hidden_size = 64;
    int tau = 10;
    double alpha_bar_init = 0.5;  // fast-sampler starting alpha-bar
    double beta_init = 0.5;       // fast-sampler starting beta
    std::uint64_t seed = 0;
    int n_samples = 1;

    void validate() const;
};

/// Applies `key=value` to a config; unknown keys raise ConfigError.
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);
/// Flat key=value file, '#' comments allowed.
RunConfig parse_config_file(const std::string& path);
std::map<std::string, std::string> config_entries(const RunConfig& cfg);

/// A trained (or trainable) TFDPM: feature extractor + conditional denoiser
/// + the schedule and normalisation metadata needed to run it.
struct TfdpmModel {
    RunConfig config;
    std::vector<ChannelSpec> channels;  // expanded
    NormStats norm_stats;
    NoiseSchedule schedule = NoiseSchedule::linear(100, 1e-4, 1e-2);
    std::unique_ptr<Extractor> extractor;
    std::unique_ptr<EpsNetwork> eps;
    std::string content_hash;  // set by save/load

    static TfdpmModel create(const RunConfig& cfg, const std::vector<ChannelSpec>& channels,
                             const NormStats& stats);

    Eigen::Index data_dim() const { return static_cast<Eigen::Index>(channels.size()); }
    std::vector<nn::Tensor*> trainable_params();
};

void save_checkpoint(TfdpmModel& model, const std::string& path);
TfdpmModel load_checkpoint(const std::string& path);

/// Noise-scheduling network bound to a specific TFDPM checkpoint.
struct SchedulerModel {
    int tau = 10;
    double alpha_bar_init = 0.5;
    double beta_init = 0.5;
    double beta_floor = 1e-4;
    std::string base_hash;  // hash of the TFDPM checkpoint trained against
    std::unique_ptr<SchedulerNet> net;
    std::string content_hash;
};

void save_scheduler_checkpoint(SchedulerModel& model, const std::string& path);
/// When `expect_base_hash` is non-empty it must match the stored base hash.
SchedulerModel load_scheduler_checkpoint(const std::string& path,
                                         const std::string& expect_base_hash = {});

}  // namespace tfdpm
