#pragma once

#include "tfdpm/common.hpp"

#include <vector>

namespace tfdpm {

/// Result of a best-F1 threshold search over point-adjusted predictions.
struct DetectionReport {
    std::vector<double> scores;
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<int> adjusted_predictions;

    Eigen::Index q() const { return static_cast<Eigen::Index>(scores.size()); }
};

/// Mean squared error across channels: sum_i (pred_i - obs_i)^2 / D.
double anomaly_score(const Vector& pred, const Vector& obs);

/// Thresholds scores (score > threshold) and applies the segment rule: any
/// alert inside a contiguous labelled segment marks the whole segment.
std::vector<int> point_adjust(const std::vector<double>& scores, const std::vector<int>& labels,
                              double threshold);

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Pointwise precision/recall/F1 with zero denominators mapping to 0.
Prf prf1(const std::vector<int>& adjusted, const std::vector<int>& labels);

/// Evaluates every candidate threshold (all distinct score values plus a
/// below-minimum sentinel) and returns the report with maximal F1; ties break
/// toward higher precision. Labels must contain at least one 1.
DetectionReport best_f1_search(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace tfdpm
