#pragma once

#include "tfdpm/common.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace tfdpm {

struct ChannelSpec {
    enum class Kind { Continuous, Discrete };

    std::string name;
    Kind kind = Kind::Continuous;
    int cardinality = 0;  // discrete only, >= 2
};

/// Per-channel (min, max) pairs recorded when normalising training data.
using NormStats = std::vector<std::pair<double, double>>;

/// Normalised multichannel series. `channels` describes the columns after
/// one-hot expansion of discrete inputs; `norm_stats` holds the min/max used
/// for each expanded column.
struct TimeSeriesDataset {
    Matrix values;  // T x D, values in [0,1] when normalised with own stats
    std::vector<int> labels;
    std::vector<ChannelSpec> channels;
    NormStats norm_stats;

    Eigen::Index rows() const { return values.rows(); }
    Eigen::Index cols() const { return values.cols(); }
    bool has_labels() const { return !labels.empty(); }
};

/// A batch of (history, target) pairs. Histories are stacked sample-major:
/// rows [b*omega, (b+1)*omega) hold the window preceding targets.row(b),
/// which sits at time_indices[b] in the source series.
struct WindowBatch {
    Matrix histories;  // (B*omega) x D
    Matrix targets;    // B x D
    std::vector<Eigen::Index> time_indices;
    Eigen::Index batch = 0;
    Eigen::Index omega = 0;
};

/// Min-max normalisation per column. When `stats` is given those bounds are
/// applied (test data may land outside [0,1]); otherwise bounds come from the
/// input. Degenerate columns (max == min) map to 0.
std::pair<Matrix, NormStats> normalize(const Matrix& raw, const NormStats* stats = nullptr);

/// Inverse of normalize for non-degenerate columns; degenerate columns map
/// back to their recorded min.
Matrix denormalize(const Matrix& normed, const NormStats& stats);

/// One-hot expands discrete channels. Returns the expanded matrix and the
/// per-column channel descriptions.
std::pair<Matrix, std::vector<ChannelSpec>> expand_one_hot(const Matrix& raw,
                                                           const std::vector<ChannelSpec>& specs);

/// Loads a CSV with a header naming each raw channel plus an optional
/// `label` column. Rows containing missing values are dropped, discrete
/// channels are one-hot expanded, and min-max normalisation is applied
/// (reusing `train_stats` when given).
TimeSeriesDataset load_dataset(const std::string& path, const std::vector<ChannelSpec>& specs,
                               const NormStats* train_stats = nullptr);

/// Number of (history, target) pairs a series yields: T - omega.
/// Throws ConfigError when T <= omega.
Eigen::Index window_count(const TimeSeriesDataset& ds, Eigen::Index omega);

/// Materialises the windows whose targets sit at the given time indices.
WindowBatch gather_windows(const TimeSeriesDataset& ds, Eigen::Index omega,
                           const std::vector<Eigen::Index>& target_times);

/// All T - omega windows in time order.
WindowBatch all_windows(const TimeSeriesDataset& ds, Eigen::Index omega);

enum class Scenario { Easy, Hard };
Scenario parse_scenario(const std::string& name);

/// Raw (unnormalised) simulator output plus channel metadata.
struct SynthData {
    Matrix train_raw;
    Matrix test_raw;
    std::vector<int> test_labels;
    std::vector<ChannelSpec> specs;
};

/// Two-tank water loop with threshold-switched pump/valve actuators. The
/// test segment carries labelled attack windows (sensor bias, stuck-at, ramp
/// drift, actuator flip) totalling 5-12% of its length. Deterministic per
/// seed.
SynthData synth_cps_raw(Scenario scenario, Eigen::Index t_train, Eigen::Index t_test,
                        std::uint64_t seed);

/// Simulator output as ready-to-train datasets: train normalised with its
/// own stats, test normalised with the training stats.
std::pair<TimeSeriesDataset, TimeSeriesDataset> synth_cps(Scenario scenario, Eigen::Index t_train,
                                                          Eigen::Index t_test, std::uint64_t seed);

void write_csv(const std::string& path, const Matrix& raw, const std::vector<ChannelSpec>& specs,
               const std::vector<int>* labels);
void write_schema(const std::string& path, const std::vector<ChannelSpec>& specs);
std::vector<ChannelSpec> read_schema(const std::string& path);

}  // namespace tfdpm
