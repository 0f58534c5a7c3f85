#include "tfdpm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tfdpm {

namespace {

constexpr int kPatience = 3;
constexpr double kLearningRate = 1e-3;
constexpr double kGradClip = 10.0;

// Builds the batched SNR-weighted objective on the tape. The corrupted
// inputs and draws are constants; gradients flow through the extractor and
// the denoiser.
nn::Var build_diffusion_loss(nn::Graph& g, TfdpmModel& model, const WindowBatch& batch,
                             const std::vector<int>& ns, const Matrix& eps) {
    const Eigen::Index b = batch.batch, d = model.data_dim();
    const NoiseSchedule& s = model.schedule;

    Matrix xn(b, d), alpha(b, 1), weights(b, 1);
    for (Eigen::Index i = 0; i < b; ++i) {
        const int n = ns[static_cast<std::size_t>(i)];
        const double ab = s.alpha_bar(n);
        xn.row(i) = std::sqrt(ab) * batch.targets.row(i) + std::sqrt(1.0 - ab) * eps.row(i);
        alpha(i, 0) = s.alpha(n);
        weights(i, 0) = s.loss_weight(n);
    }

    nn::Var cond = model.extractor->forward(g, g.constant(batch.histories), b);
    nn::Var eps_hat = model.eps->forward(g, g.constant(xn), alpha, cond, b);
    nn::Var resid = g.sub(g.constant(eps), eps_hat);
    return g.mean(g.mul(g.constant(weights), g.rowwise_sumsq(resid)));
}

void check_finite_loss(double loss, TfdpmModel& model, const WindowBatch& batch,
                       const std::vector<int>& ns, const Matrix& eps) {
    if (std::isfinite(loss)) return;
    // report the largest corrupted input alongside its step and weight
    Eigen::Index worst = 0;
    double worst_norm = -1.0;
    for (Eigen::Index i = 0; i < batch.batch; ++i) {
        const int n = ns[static_cast<std::size_t>(i)];
        const double ab = model.schedule.alpha_bar(n);
        const double xn = (std::sqrt(ab) * batch.targets.row(i) + std::sqrt(1.0 - ab) * eps.row(i)).norm();
        if (!std::isfinite(xn) || xn > worst_norm) {
            worst_norm = xn;
            worst = i;
            if (!std::isfinite(xn)) break;
        }
    }
    const int n = ns[static_cast<std::size_t>(worst)];
    std::ostringstream os;
    os << "non-finite training loss (n=" << n << ", |x|=" << worst_norm
       << ", weight=" << model.schedule.loss_weight(n) << ")";
    throw TrainingError(os.str());
}

std::vector<Matrix> snapshot(const std::vector<nn::Tensor*>& params) {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (const nn::Tensor* t : params) out.push_back(t->value);
    return out;
}

void restore(const std::vector<nn::Tensor*>& params, const std::vector<Matrix>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

struct Split {
    std::vector<Eigen::Index> train_times;
    std::vector<Eigen::Index> val_times;
};

Split split_windows(const TimeSeriesDataset& ds, Eigen::Index omega, Rng& rng) {
    const Eigen::Index n = window_count(ds, omega);
    std::vector<Eigen::Index> times(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) times[static_cast<std::size_t>(i)] = omega + i;
    for (std::size_t i = times.size(); i > 1; --i)
        std::swap(times[i - 1], times[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
    const std::size_t n_val = std::max<std::size_t>(1, times.size() / 10);
    Split s;
    s.val_times.assign(times.end() - static_cast<std::ptrdiff_t>(n_val), times.end());
    s.train_times.assign(times.begin(), times.end() - static_cast<std::ptrdiff_t>(n_val));
    if (s.train_times.empty()) throw ConfigError("not enough windows to split off validation data");
    return s;
}

}  // namespace

double train_step(TfdpmModel& model, const WindowBatch& batch, nn::Adam& opt, Rng& rng) {
    if (batch.batch < 1) throw ConfigError("train_step: empty batch");
    const int n_steps = model.schedule.steps();
    std::vector<int> ns(static_cast<std::size_t>(batch.batch));
    for (auto& n : ns) n = static_cast<int>(rng.uniform_int(1, n_steps));
    const Matrix eps = rng.normal_matrix(batch.batch, model.data_dim());

    nn::Graph g(true);
    nn::Var loss = build_diffusion_loss(g, model, batch, ns, eps);
    const double value = g.val(loss)(0, 0);
    check_finite_loss(value, model, batch, ns, eps);
    g.backward(loss);
    opt.step();
    return value;
}

double eval_loss(TfdpmModel& model, const WindowBatch& batch, const std::vector<int>& ns,
                 const Matrix& eps) {
    nn::Graph g(false);
    return g.val(build_diffusion_loss(g, model, batch, ns, eps))(0, 0);
}

TrainHistory fit_tfdpm(TfdpmModel& model, const TimeSeriesDataset& train, const LogFn& log) {
    model.config.validate();
    if (train.cols() != model.data_dim())
        throw ConfigError("training data width does not match the model");
    const RunConfig& cfg = model.config;

    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 11);
    Split split = split_windows(train, cfg.window, rng);

    // fixed validation draws keep epoch-to-epoch losses comparable
    Rng val_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 12);
    WindowBatch val_batch = gather_windows(train, cfg.window, split.val_times);
    std::vector<int> val_ns(split.val_times.size());
    for (auto& n : val_ns) n = static_cast<int>(val_rng.uniform_int(1, cfg.diffusion_steps));
    const Matrix val_eps = val_rng.normal_matrix(val_batch.batch, model.data_dim());

    nn::Adam opt(model.trainable_params(), kLearningRate, kGradClip);

    TrainHistory hist;
    auto params = model.trainable_params();
    std::vector<Matrix> best = snapshot(params);
    double best_val = std::numeric_limits<double>::infinity();
    int since_improve = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = split.train_times;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);

        double total = 0.0;
        long batches = 0;
        for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - off);
            std::vector<Eigen::Index> times(order.begin() + static_cast<std::ptrdiff_t>(off),
                                            order.begin() + static_cast<std::ptrdiff_t>(off + take));
            WindowBatch wb = gather_windows(train, cfg.window, times);
            total += train_step(model, wb, opt, rng);
            ++batches;
        }
        const double train_mean = total / static_cast<double>(batches);
        const double val = eval_loss(model, val_batch, val_ns, val_eps);
        hist.train_loss.push_back(train_mean);
        hist.val_loss.push_back(val);
        hist.epochs_run = epoch + 1;

        if (log) {
            std::ostringstream os;
            os << "epoch " << (epoch + 1) << "/" << cfg.epochs << " train_loss=" << train_mean
               << " val_loss=" << val;
            log(os.str());
        }

        if (val < best_val) {
            best_val = val;
            best = snapshot(params);
            hist.best_epoch = epoch;
            since_improve = 0;
        } else if (++since_improve >= kPatience) {
            if (log) log("early stopping: no validation improvement for 3 epochs");
            break;
        }
    }
    restore(params, best);
    return hist;
}

namespace {

// Per-batch scheduler objective. sigma is recomputed on the tape; the
// denoiser output is a constant because theta* stays frozen.
struct SchedulerBatch {
    Matrix xn, cond, bounds, abars, eps_hat_scaled, target;
};

SchedulerBatch prepare_scheduler_batch(TfdpmModel& model, SchedulerNet& net,
                                       const WindowBatch& batch, int tau, Rng& rng) {
    const NoiseSchedule& s = model.schedule;
    const Eigen::Index b = batch.batch, d = model.data_dim();
    const int n_steps = s.steps();

    SchedulerBatch out;
    out.cond = model.extractor->features(batch.histories, b);
    out.xn.resize(b, d);
    out.bounds.resize(b, 1);
    out.abars.resize(b, 1);
    out.eps_hat_scaled.resize(b, d);
    out.target.resize(b, d);
    Matrix alpha(b, 1);

    for (Eigen::Index i = 0; i < b; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 20)
                throw TrainingError("scheduler training: cannot draw a valid (n, eps) pair");
            const int n = static_cast<int>(rng.uniform_int(2, n_steps - tau));
            const double abar = s.alpha_bar(n);
            const double beta_next = 1.0 - s.alpha_bar(n + tau) / s.alpha_bar(n);
            const double bound = std::min(1.0 - s.alpha_bar(n + tau) / (1.0 - beta_next), beta_next);
            if (!(bound > 0.0)) continue;
            const Vector e = rng.normal_matrix(1, d).row(0).transpose();
            const Vector x = std::sqrt(abar) * batch.targets.row(i).transpose() +
                             std::sqrt(1.0 - abar) * e;
            // the draw is rejected when the loss domain would be empty
            Matrix sig = net.eval(x.transpose(), out.cond.row(i));
            const double beta_hat = bound * sig(0, 0);
            if (!(1.0 - beta_hat - abar > 0.0)) continue;

            out.xn.row(i) = x.transpose();
            out.bounds(i, 0) = bound;
            out.abars(i, 0) = abar;
            alpha(i, 0) = s.alpha(n);
            out.target.row(i) = std::sqrt(1.0 - abar) * e.transpose();
            break;
        }
    }
    Matrix eps_hat = model.eps->eval(out.xn, alpha, out.cond);
    for (Eigen::Index i = 0; i < b; ++i) {
        const double rt = std::sqrt(1.0 - out.abars(i, 0));
        out.eps_hat_scaled.row(i) = eps_hat.row(i) / rt;
    }
    return out;
}

nn::Var build_scheduler_loss(nn::Graph& g, SchedulerNet& net, const SchedulerBatch& sb,
                             Eigen::Index data_dim) {
    nn::Var sigma = net.forward(g, g.constant(sb.xn), g.constant(sb.cond));
    nn::Var beta_hat = g.mul(g.constant(sb.bounds), sigma);
    nn::Var one_minus_abar = g.constant((1.0 - sb.abars.array()).matrix());

    nn::Var v = g.sub(g.constant(sb.target), g.mul_colvec(g.constant(sb.eps_hat_scaled), beta_hat));
    nn::Var denom = g.scale(g.sub(one_minus_abar, beta_hat), 2.0);
    nn::Var term1 = g.div(g.rowwise_sumsq(v), denom);

    nn::Var cn = g.add(g.scale(g.log(g.div(one_minus_abar, beta_hat)), 0.25),
                       g.scale(g.add_scalar(g.div(beta_hat, one_minus_abar), -1.0),
                               0.5 * static_cast<double>(data_dim)));
    return g.mean(g.add(term1, cn));
}

}  // namespace

SchedulerModel train_scheduler(TfdpmModel& frozen, const TimeSeriesDataset& train, int tau,
                               TrainHistory* history, const LogFn& log) {
    const RunConfig& cfg = frozen.config;
    if (tau < 1 || tau > frozen.schedule.steps() - 2)
        throw ConfigError("train_scheduler: need 1 <= tau <= N_s - 2");

    SchedulerModel sm;
    sm.tau = tau;
    sm.alpha_bar_init = cfg.alpha_bar_init;
    sm.beta_init = cfg.beta_init;
    sm.beta_floor = frozen.schedule.beta(1);
    sm.base_hash = frozen.content_hash;

    Rng init_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 21);
    sm.net = std::make_unique<SchedulerNet>(frozen.data_dim(), cfg.hidden_size, 64, init_rng);

    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 22);
    Split split = split_windows(train, cfg.window, rng);
    WindowBatch val_batch = gather_windows(train, cfg.window, split.val_times);
    const std::uint64_t val_seed = cfg.seed * 0x9e3779b97f4a7c15ULL + 23;

    nn::Adam opt(sm.net->params(), kLearningRate, kGradClip);
    auto params = sm.net->params();
    std::vector<Matrix> best = snapshot(params);
    double best_val = std::numeric_limits<double>::infinity();
    int since_improve = 0;
    TrainHistory hist;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = split.train_times;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);

        double total = 0.0;
        long batches = 0;
        for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - off);
            std::vector<Eigen::Index> times(order.begin() + static_cast<std::ptrdiff_t>(off),
                                            order.begin() + static_cast<std::ptrdiff_t>(off + take));
            WindowBatch wb = gather_windows(train, cfg.window, times);
            SchedulerBatch sb = prepare_scheduler_batch(frozen, *sm.net, wb, tau, rng);

            nn::Graph g(true);
            nn::Var loss = build_scheduler_loss(g, *sm.net, sb, frozen.data_dim());
            const double value = g.val(loss)(0, 0);
            if (!std::isfinite(value)) throw TrainingError("non-finite scheduler loss");
            g.backward(loss);
            opt.step();
            total += value;
            ++batches;
        }
        const double train_mean = total / static_cast<double>(batches);

        // the same seeded draws every epoch keep validation losses comparable
        Rng ev(val_seed);
        SchedulerBatch vb = prepare_scheduler_batch(frozen, *sm.net, val_batch, tau, ev);
        nn::Graph vg(false);
        const double val = vg.val(build_scheduler_loss(vg, *sm.net, vb, frozen.data_dim()))(0, 0);

        hist.train_loss.push_back(train_mean);
        hist.val_loss.push_back(val);
        hist.epochs_run = epoch + 1;
        if (log) {
            std::ostringstream os;
            os << "epoch " << (epoch + 1) << "/" << cfg.epochs << " train_loss=" << train_mean
               << " val_loss=" << val;
            log(os.str());
        }
        if (val < best_val) {
            best_val = val;
            best = snapshot(params);
            hist.best_epoch = epoch;
            since_improve = 0;
        } else if (++since_improve >= kPatience) {
            if (log) log("early stopping: no validation improvement for 3 epochs");
            break;
        }
    }
    restore(params, best);
    if (history) *history = hist;
    return sm;
}

}  // namespace tfdpm
