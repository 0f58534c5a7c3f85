#include "tfdpm/detection.hpp"

#include <algorithm>
#include <set>

namespace tfdpm {

double anomaly_score(const Vector& pred, const Vector& obs) {
    if (pred.size() != obs.size()) throw ShapeError("anomaly_score: dimension mismatch");
    return (pred - obs).squaredNorm() / static_cast<double>(pred.size());
}

std::vector<int> point_adjust(const std::vector<double>& scores, const std::vector<int>& labels,
                              double threshold) {
    if (scores.size() != labels.size()) throw ShapeError("point_adjust: length mismatch");
    std::vector<int> adjusted(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) adjusted[i] = scores[i] > threshold ? 1 : 0;

    std::size_t i = 0;
    while (i < labels.size()) {
        if (labels[i] != 1) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < labels.size() && labels[j] == 1) ++j;
        bool any = false;
        for (std::size_t k = i; k < j; ++k) any = any || adjusted[k] == 1;
        if (any)
            for (std::size_t k = i; k < j; ++k) adjusted[k] = 1;
        i = j;
    }
    return adjusted;
}

Prf prf1(const std::vector<int>& adjusted, const std::vector<int>& labels) {
    if (adjusted.size() != labels.size()) throw ShapeError("prf1: length mismatch");
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (adjusted[i] == 1 && labels[i] == 1) ++tp;
        if (adjusted[i] == 1 && labels[i] == 0) ++fp;
        if (adjusted[i] == 0 && labels[i] == 1) ++fn;
    }
    Prf out;
    out.precision = (tp + fp > 0) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    out.recall = (tp + fn > 0) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    out.f1 = (out.precision + out.recall > 0.0)
                 ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
                 : 0.0;
    return out;
}

DetectionReport best_f1_search(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("best_f1_search: length mismatch");
    if (std::find(labels.begin(), labels.end(), 1) == labels.end())
        throw DataError("best_f1_search: labels contain no anomalies");

    std::set<double> distinct(scores.begin(), scores.end());
    std::vector<double> candidates(distinct.begin(), distinct.end());
    // everything-alerts sentinel; the max score itself covers nothing-alerts
    candidates.push_back(*distinct.begin() - 1.0);

    DetectionReport best;
    best.scores = scores;
    bool first = true;
    for (double thr : candidates) {
        std::vector<int> adj = point_adjust(scores, labels, thr);
        const Prf m = prf1(adj, labels);
        if (first || m.f1 > best.f1 || (m.f1 == best.f1 && m.precision > best.precision)) {
            first = false;
            best.threshold = thr;
            best.precision = m.precision;
            best.recall = m.recall;
            best.f1 = m.f1;
            best.adjusted_predictions = std::move(adj);
        }
    }
    return best;
}

}  // namespace tfdpm
