#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace tfdpm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Input data is unusable: malformed CSV, schema mismatch, bad labels.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A configuration value violates its documented invariant.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Matrix/vector dimensions do not line up.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Checkpoint file is corrupt, has a bad hash, or wrong version.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Noise-schedule constraint violated (bound <= 0 or undefined loss domain).
struct ScheduleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite value encountered while sampling.
struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during optimisation.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Deterministic random source. Gaussian draws use Box-Muller on top of a
/// 64-bit Mersenne twister so that sequences are identical across platforms
/// for a given seed (std::normal_distribution is implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    /// Uniform integer in [lo, hi] inclusive.
    long uniform_int(long lo, long hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        // rejection sampling keeps the draw unbiased
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r;
        do {
            r = gen_();
        } while (r >= limit);
        return lo + static_cast<long>(r % span);
    }

    /// Standard normal draw.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = mag * std::sin(two_pi * u2);
        has_spare_ = true;
        return mag * std::cos(two_pi * u2);
    }

    Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal();
        return m;
    }

    Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
        Matrix m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = lo + (hi - lo) * uniform();
        return m;
    }

    /// Derive an independent stream, e.g. one per worker chunk.
    std::uint64_t fork_seed(std::uint64_t salt) {
        std::uint64_t x = gen_() ^ (salt * 0x9e3779b97f4a7c15ULL);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        return x;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace tfdpm
