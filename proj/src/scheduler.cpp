#include "tfdpm/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

namespace tfdpm {

SchedulerNet::SchedulerNet(Eigen::Index data_dim, Eigen::Index cond_dim, Eigen::Index hidden,
                           Rng& rng)
    : data_dim_(data_dim),
      cond_dim_(cond_dim),
      w1_("sched.w1", hidden, data_dim + cond_dim),
      b1_("sched.b1", 1, hidden),
      w2_("sched.w2", 1, hidden),
      b2_("sched.b2", 1, 1) {
    if (data_dim < 1 || cond_dim < 1 || hidden < 1)
        throw ConfigError("scheduler net dimensions must be positive");
    nn::init_uniform_fan_in(w1_, data_dim + cond_dim, rng);
    nn::init_uniform_fan_in(w2_, hidden, rng);
}

nn::Var SchedulerNet::forward(nn::Graph& g, nn::Var x, nn::Var cond) {
    if (g.val(x).cols() != data_dim_ || g.val(cond).cols() != cond_dim_)
        throw ShapeError("scheduler net: input width mismatch");
    nn::Var h = g.tanh(g.linear(g.hcat({x, cond}), w1_, b1_));
    return g.sigmoid(g.linear(h, w2_, b2_));
}

Matrix SchedulerNet::eval(const Matrix& x, const Matrix& cond) {
    nn::Graph g(false);
    return g.val(forward(g, g.constant(x), g.constant(cond)));
}

double SchedulerNet::eval_single(const Vector& x, const FeatureState& cond) {
    return eval(x.transpose(), cond.vector.transpose())(0, 0);
}

std::vector<nn::Tensor*> SchedulerNet::params() { return {&w1_, &b1_, &w2_, &b2_}; }

double next_beta_bound(double beta_next, double alpha_bar_next) {
    if (!(beta_next > 0.0) || !(beta_next < 1.0) || !(alpha_bar_next > 0.0) ||
        !(alpha_bar_next < 1.0))
        throw ScheduleError("next_beta: inputs must lie in (0,1)");
    const double bound = std::min(1.0 - alpha_bar_next / (1.0 - beta_next), beta_next);
    if (!(bound > 0.0)) {
        std::ostringstream os;
        os << "next_beta: bound " << bound << " <= 0 for beta_next=" << beta_next
           << ", alpha_bar_next=" << alpha_bar_next;
        throw ScheduleError(os.str());
    }
    return bound;
}

double next_beta(SchedulerNet& net, const Vector& xn, const FeatureState& cond, double beta_next,
                 double alpha_bar_next) {
    const double bound = next_beta_bound(beta_next, alpha_bar_next);
    return bound * net.eval_single(xn, cond);
}

double cn_term(double beta_hat, double alpha_bar_hat, Eigen::Index d) {
    return 0.25 * std::log((1.0 - alpha_bar_hat) / beta_hat) +
           0.5 * static_cast<double>(d) * (beta_hat / (1.0 - alpha_bar_hat) - 1.0);
}

double scheduler_loss(EpsNetwork& eps_star, const NoiseSchedule& s, const Vector& x0,
                      const FeatureState& cond, int n, const Vector& eps, double beta_hat,
                      double alpha_bar_hat) {
    const double dom = 1.0 - beta_hat - alpha_bar_hat;
    if (!(dom > 0.0)) throw ScheduleError("scheduler_loss: 1 - beta_hat - alpha_bar_hat <= 0");
    const double rt = std::sqrt(1.0 - alpha_bar_hat);
    const Vector xn = std::sqrt(alpha_bar_hat) * x0 + rt * eps;
    const Vector eps_hat = eps_star.eps_forward(xn, s.alpha(n), cond);
    const Vector v = rt * eps - (beta_hat / rt) * eps_hat;
    return v.squaredNorm() / (2.0 * dom) + cn_term(beta_hat, alpha_bar_hat, x0.size());
}

namespace {

Matrix gather(const Matrix& m, const std::vector<Eigen::Index>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
    return out;
}

}  // namespace

FastSampleResult fast_sample_batch(EpsNetwork& eps, const NoiseSchedule& full, SchedulerNet& net,
                                   const Matrix& cond, double alpha_bar_init, double beta_init,
                                   double beta_floor, Rng& rng) {
    if (!(alpha_bar_init > 0.0) || !(alpha_bar_init < 1.0) || !(beta_init > 0.0) ||
        !(beta_init < 1.0))
        throw ConfigError("fast sampler: init alpha_bar and beta must lie in (0,1)");
    if (!(beta_floor > 0.0)) throw ConfigError("fast sampler: beta_floor must be positive");

    const Eigen::Index b = cond.rows(), d = eps.config().data_dim;
    const int n_steps = full.steps();

    FastSampleResult res;
    res.traces.assign(static_cast<std::size_t>(b), {});
    std::vector<std::vector<double>> stacks(static_cast<std::size_t>(b));
    std::vector<double> beta_cur(static_cast<std::size_t>(b), beta_init);
    std::vector<double> abar_cur(static_cast<std::size_t>(b), alpha_bar_init);
    std::vector<char> active(static_cast<std::size_t>(b), 1);
    for (auto& st : stacks) st.push_back(beta_init);

    // Phase 1: run reverse steps, asking sigma_phi for the next noise scale
    // after each, until it drops below the floor.
    Matrix x = rng.normal_matrix(b, d);
    for (int n = n_steps; n >= 2; --n) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index i = 0; i < b; ++i)
            if (active[static_cast<std::size_t>(i)]) idx.push_back(i);
        if (idx.empty()) break;

        const Eigen::Index a = static_cast<Eigen::Index>(idx.size());
        Matrix xa = gather(x, idx), ca = gather(cond, idx);
        Matrix alpha_hat(a, 1);
        for (Eigen::Index i = 0; i < a; ++i)
            alpha_hat(i, 0) = 1.0 - beta_cur[static_cast<std::size_t>(idx[i])];

        const Matrix eps_hat = eps.eval(xa, alpha_hat, ca);
        Matrix x_next(a, d);
        for (Eigen::Index i = 0; i < a; ++i) {
            const std::size_t s = static_cast<std::size_t>(idx[i]);
            res.traces[s].n_calls += 1;
            const double bt = beta_cur[s];
            const double al = 1.0 - bt;
            const double ab = abar_cur[s];
            const double ab_prev = ab / al;
            const double pbeta = std::max(0.0, (1.0 - ab_prev) / (1.0 - ab) * bt);
            x_next.row(i) = (xa.row(i) - (bt / std::sqrt(1.0 - ab)) * eps_hat.row(i)) / std::sqrt(al);
            x_next.row(i) += std::sqrt(pbeta) * rng.normal_matrix(1, d);
        }

        const Matrix sigma = net.eval(x_next, ca);
        for (Eigen::Index i = 0; i < a; ++i) {
            const std::size_t s = static_cast<std::size_t>(idx[i]);
            const double bt = beta_cur[s];
            const double ab = abar_cur[s];
            const double bound = std::min(1.0 - ab / (1.0 - bt), bt);
            if (!(bound > 0.0)) {
                active[s] = 0;  // constraint no longer satisfiable
                res.traces[s].stop_reason = FastScheduleTrace::Stop::Exhausted;
                continue;
            }
            const double beta_new = bound * sigma(i, 0);
            if (beta_new < beta_floor) {
                active[s] = 0;
                res.traces[s].stop_reason = FastScheduleTrace::Stop::HitFloor;
                continue;
            }
            stacks[s].push_back(beta_new);
            beta_cur[s] = beta_new;
            abar_cur[s] = ab / (1.0 - bt);
            x.row(idx[i]) = x_next.row(i);
        }
    }

    // A collapsed (empty) schedule falls back to the full sampler. The stack
    // always holds the initial beta, so this only guards pathological input.
    std::vector<Eigen::Index> fallback;
    for (Eigen::Index i = 0; i < b; ++i)
        if (stacks[static_cast<std::size_t>(i)].empty()) fallback.push_back(i);

    // Phase 2: regenerate from scratch over each constructed short schedule.
    std::vector<NoiseSchedule> shorts;
    shorts.reserve(static_cast<std::size_t>(b));
    Eigen::Index max_len = 0;
    for (Eigen::Index i = 0; i < b; ++i) {
        auto& st = stacks[static_cast<std::size_t>(i)];
        if (st.empty()) {
            shorts.push_back(full);
            continue;
        }
        std::vector<double> asc(st.rbegin(), st.rend());
        res.traces[static_cast<std::size_t>(i)].betas_used = asc;
        shorts.push_back(NoiseSchedule::from_betas(std::move(asc)));
        max_len = std::max(max_len, static_cast<Eigen::Index>(st.size()));
    }

    res.x0 = rng.normal_matrix(b, d);
    if (!fallback.empty()) {
        std::cerr << "tfdpm: warning: fast schedule collapsed for " << fallback.size()
                  << " sample(s); falling back to the full sampler\n";
        long calls = 0;
        Matrix xf = sample_batch(eps, full, gather(cond, fallback), rng, &calls);
        for (std::size_t i = 0; i < fallback.size(); ++i) {
            res.x0.row(fallback[i]) = xf.row(static_cast<Eigen::Index>(i));
            auto& tr = res.traces[static_cast<std::size_t>(fallback[i])];
            tr.fell_back_to_full = true;
            tr.n_calls += calls;
        }
    }
    for (Eigen::Index j = 0; j < max_len; ++j) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index i = 0; i < b; ++i)
            if (!res.traces[static_cast<std::size_t>(i)].fell_back_to_full &&
                shorts[static_cast<std::size_t>(i)].steps() - j >= 1)
                idx.push_back(i);
        if (idx.empty()) break;
        const Eigen::Index a = static_cast<Eigen::Index>(idx.size());
        Matrix xa = gather(res.x0, idx), ca = gather(cond, idx);
        Matrix alpha_col(a, 1);
        for (Eigen::Index i = 0; i < a; ++i) {
            const auto& sch = shorts[static_cast<std::size_t>(idx[i])];
            alpha_col(i, 0) = sch.alpha(sch.steps() - static_cast<int>(j));
        }
        const Matrix eps_hat = eps.eval(xa, alpha_col, ca);
        for (Eigen::Index i = 0; i < a; ++i) {
            const std::size_t s = static_cast<std::size_t>(idx[i]);
            const auto& sch = shorts[s];
            const int n = sch.steps() - static_cast<int>(j);
            res.traces[s].n_calls += 1;
            const double ab = sch.alpha_bar(n);
            Eigen::RowVectorXd row =
                (xa.row(i) - (sch.beta(n) / std::sqrt(1.0 - ab)) * eps_hat.row(i)) /
                std::sqrt(sch.alpha(n));
            if (n > 1) row += std::sqrt(sch.posterior_beta(n)) * rng.normal_matrix(1, d);
            if (!row.allFinite()) {
                std::ostringstream os;
                os << "fast sampler produced a non-finite value at short-schedule step " << n;
                throw SamplingError(os.str());
            }
            res.x0.row(idx[i]) = row;
        }
    }
    return res;
}

std::pair<Vector, FastScheduleTrace> fast_sample(EpsNetwork& eps, const NoiseSchedule& full,
                                                 SchedulerNet& net, const FeatureState& cond,
                                                 double alpha_bar_init, double beta_init,
                                                 double beta_floor, std::uint64_t seed) {
    Rng rng(seed);
    FastSampleResult r = fast_sample_batch(eps, full, net, cond.vector.transpose(), alpha_bar_init,
                                           beta_init, beta_floor, rng);
    return {r.x0.row(0).transpose(), r.traces[0]};
}

}  // namespace tfdpm
