#pragma once

#include "tfdpm/common.hpp"
#include "tfdpm/dataset.hpp"
#include "tfdpm/detection.hpp"
#include "tfdpm/model.hpp"

#include <string>
#include <vector>

namespace tfdpm {

enum class DetectMode { Full, Fast };

DetectMode parse_detect_mode(const std::string& name);
std::string detect_mode_name(DetectMode mode);

/// Per-timestep detection output: one scored prediction for every test step
/// with a full history window (t = omega .. T-1).
struct DetectOutput {
    std::vector<Eigen::Index> time_indices;
    std::vector<double> scores;
    Matrix observed;   // Q x D
    Matrix predicted;  // Q x D
    std::vector<int> labels;       // empty when the data is unlabelled
    std::vector<long> eps_calls;   // denoiser invocations per timestep
    DetectMode mode = DetectMode::Full;

    Eigen::Index q() const { return static_cast<Eigen::Index>(scores.size()); }
    double mean_eps_calls() const;
};

/// Runs the sampler over every scored timestep. Fast mode requires a
/// scheduler whose base hash matches the model (checked by the caller when
/// loading). Work is chunked and runs across hardware threads; results are
/// deterministic for a given seed regardless of thread count.
DetectOutput run_detection(TfdpmModel& model, SchedulerModel* sched,
                           const TimeSeriesDataset& test, DetectMode mode, std::uint64_t seed,
                           int n_samples = 1, Eigen::Index chunk = 256, int threads = 0);

/// Detection plus best-F1 threshold search; the test data must be labelled.
DetectionReport detect(TfdpmModel& model, SchedulerModel* sched, const TimeSeriesDataset& test,
                       DetectMode mode, std::uint64_t seed, int n_samples = 1);

struct TuneResult {
    double alpha_bar_init = 0.0;
    double beta_init = 0.0;
    double f1 = -1.0;
    double mean_calls = 0.0;
};

/// Grid search over the fast-sampler init pair (0.1 .. 0.9, step 0.1 on both
/// axes, 81 candidates) maximising point-adjusted F1 on labelled validation
/// windows; ties break toward fewer denoiser calls. Evaluates at most
/// `max_windows` evenly spaced timesteps.
TuneResult tune_init(TfdpmModel& model, SchedulerModel& sched, const TimeSeriesDataset& val,
                     std::uint64_t seed, Eigen::Index max_windows = 256, int threads = 0);

}  // namespace tfdpm
