#include "tfdpm/pipeline.hpp"

#include "tfdpm/scheduler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <thread>

namespace tfdpm {

DetectMode parse_detect_mode(const std::string& name) {
    if (name == "full") return DetectMode::Full;
    if (name == "fast") return DetectMode::Fast;
    throw ConfigError("unknown mode '" + name + "' (expected full|fast)");
}

std::string detect_mode_name(DetectMode mode) {
    return mode == DetectMode::Full ? "full" : "fast";
}

double DetectOutput::mean_eps_calls() const {
    if (eps_calls.empty()) return 0.0;
    double total = 0.0;
    for (long c : eps_calls) total += static_cast<double>(c);
    return total / static_cast<double>(eps_calls.size());
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t x = seed + salt * 0x9e3779b97f4a7c15ULL;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

void run_chunks(Eigen::Index n_chunks, int threads, const std::function<void(Eigen::Index)>& body) {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    const int pool = std::min<int>(threads > 0 ? threads : hw, static_cast<int>(n_chunks));
    if (pool <= 1) {
        for (Eigen::Index c = 0; c < n_chunks; ++c) body(c);
        return;
    }
    std::atomic<Eigen::Index> next{0};
    std::vector<std::thread> workers;
    std::exception_ptr error;
    std::mutex error_mu;
    for (int w = 0; w < pool; ++w) {
        workers.emplace_back([&] {
            for (;;) {
                const Eigen::Index c = next.fetch_add(1);
                if (c >= n_chunks) return;
                try {
                    body(c);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

DetectOutput run_detection(TfdpmModel& model, SchedulerModel* sched,
                           const TimeSeriesDataset& test, DetectMode mode, std::uint64_t seed,
                           int n_samples, Eigen::Index chunk, int threads) {
    if (test.cols() != model.data_dim())
        throw DataError("test data width does not match the checkpoint's channel count");
    if (mode == DetectMode::Fast && (!sched || !sched->net))
        throw ConfigError("fast mode requires a scheduler checkpoint");
    if (n_samples < 1) throw ConfigError("n_samples must be >= 1");

    const Eigen::Index omega = model.config.window;
    const Eigen::Index q = window_count(test, omega);
    const Eigen::Index d = model.data_dim();

    DetectOutput out;
    out.mode = mode;
    out.time_indices.resize(static_cast<std::size_t>(q));
    out.scores.assign(static_cast<std::size_t>(q), 0.0);
    out.eps_calls.assign(static_cast<std::size_t>(q), 0);
    out.observed.resize(q, d);
    out.predicted.resize(q, d);
    if (test.has_labels())
        out.labels.assign(test.labels.begin() + omega, test.labels.end());

    const Eigen::Index n_chunks = (q + chunk - 1) / chunk;
    run_chunks(n_chunks, threads, [&](Eigen::Index c) {
        const Eigen::Index lo = c * chunk;
        const Eigen::Index hi = std::min(q, lo + chunk);
        std::vector<Eigen::Index> times;
        times.reserve(static_cast<std::size_t>(hi - lo));
        for (Eigen::Index i = lo; i < hi; ++i) times.push_back(omega + i);

        WindowBatch wb = gather_windows(test, omega, times);
        const Matrix cond = model.extractor->features(wb.histories, wb.batch);

        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c) + 1));
        Matrix pred = Matrix::Zero(wb.batch, d);
        for (int s = 0; s < n_samples; ++s) {
            if (mode == DetectMode::Full) {
                long calls = 0;
                pred += sample_batch(*model.eps, model.schedule, cond, rng, &calls);
                for (Eigen::Index i = lo; i < hi; ++i)
                    out.eps_calls[static_cast<std::size_t>(i)] += calls;
            } else {
                FastSampleResult fr =
                    fast_sample_batch(*model.eps, model.schedule, *sched->net, cond,
                                      sched->alpha_bar_init, sched->beta_init, sched->beta_floor, rng);
                pred += fr.x0;
                for (Eigen::Index i = lo; i < hi; ++i)
                    out.eps_calls[static_cast<std::size_t>(i)] +=
                        fr.traces[static_cast<std::size_t>(i - lo)].n_calls;
            }
        }
        pred /= static_cast<double>(n_samples);

        for (Eigen::Index i = lo; i < hi; ++i) {
            out.time_indices[static_cast<std::size_t>(i)] = omega + i;
            out.observed.row(i) = wb.targets.row(i - lo);
            out.predicted.row(i) = pred.row(i - lo);
            out.scores[static_cast<std::size_t>(i)] =
                anomaly_score(pred.row(i - lo).transpose(), wb.targets.row(i - lo).transpose());
        }
    });
    return out;
}

DetectionReport detect(TfdpmModel& model, SchedulerModel* sched, const TimeSeriesDataset& test,
                       DetectMode mode, std::uint64_t seed, int n_samples) {
    if (!test.has_labels()) throw DataError("detect: test data has no labels");
    DetectOutput out = run_detection(model, sched, test, mode, seed, n_samples);
    return best_f1_search(out.scores, out.labels);
}

TuneResult tune_init(TfdpmModel& model, SchedulerModel& sched, const TimeSeriesDataset& val,
                     std::uint64_t seed, Eigen::Index max_windows, int threads) {
    if (!val.has_labels()) throw DataError("tune_init: validation data has no labels");
    const Eigen::Index omega = model.config.window;
    const Eigen::Index q = window_count(val, omega);

    // evenly spaced subset keeps every attack segment represented
    std::vector<Eigen::Index> times;
    const Eigen::Index take = std::min(q, max_windows);
    for (Eigen::Index i = 0; i < take; ++i) times.push_back(omega + (i * q) / take);

    std::vector<int> labels;
    labels.reserve(times.size());
    for (Eigen::Index t : times) labels.push_back(val.labels[static_cast<std::size_t>(t)]);
    if (std::find(labels.begin(), labels.end(), 1) == labels.end())
        throw DataError("tune_init: validation subset contains no anomalies");

    WindowBatch wb = gather_windows(val, omega, times);
    const Matrix cond = model.extractor->features(wb.histories, wb.batch);

    struct Candidate {
        double a, b, f1 = -1.0, calls = 0.0;
    };
    std::vector<Candidate> grid;
    for (int ia = 1; ia <= 9; ++ia)
        for (int ib = 1; ib <= 9; ++ib)
            grid.push_back({0.1 * ia, 0.1 * ib});

    run_chunks(static_cast<Eigen::Index>(grid.size()), threads, [&](Eigen::Index k) {
        Candidate& cand = grid[static_cast<std::size_t>(k)];
        try {
            Rng rng(mix_seed(seed, 977));  // same draws for every candidate
            FastSampleResult fr = fast_sample_batch(*model.eps, model.schedule, *sched.net, cond,
                                                    cand.a, cand.b, sched.beta_floor, rng);
            std::vector<double> scores(static_cast<std::size_t>(wb.batch));
            double calls = 0.0;
            for (Eigen::Index i = 0; i < wb.batch; ++i) {
                scores[static_cast<std::size_t>(i)] =
                    anomaly_score(fr.x0.row(i).transpose(), wb.targets.row(i).transpose());
                calls += static_cast<double>(fr.traces[static_cast<std::size_t>(i)].n_calls);
            }
            cand.f1 = best_f1_search(scores, labels).f1;
            cand.calls = calls / static_cast<double>(wb.batch);
        } catch (const std::exception&) {
            cand.f1 = -1.0;  // unusable pair (collapsed or diverged)
        }
    });

    TuneResult best;
    for (const auto& cand : grid) {
        const bool better = cand.f1 > best.f1 ||
                            (cand.f1 == best.f1 && best.f1 >= 0.0 && cand.calls < best.mean_calls);
        if (better) {
            best.alpha_bar_init = cand.a;
            best.beta_init = cand.b;
            best.f1 = cand.f1;
            best.mean_calls = cand.calls;
        }
    }
    if (best.f1 < 0.0) throw ScheduleError("tune_init: no usable (alpha_bar, beta) pair in the grid");
    return best;
}

}  // namespace tfdpm
