#include "tfdpm/dataset.hpp"
#include "tfdpm/detection.hpp"
#include "tfdpm/model.hpp"
#include "tfdpm/pipeline.hpp"
#include "tfdpm/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace tfdpm;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string sibling_schema(const std::string& data_path) {
    return (fs::path(data_path).parent_path() / "schema.json").string();
}

// TFDPM_SEED wins over config files and flags.
void apply_env_seed(RunConfig& cfg) {
    if (const char* env = std::getenv("TFDPM_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("TFDPM_SEED must be an unsigned integer");
        }
    }
}

std::optional<std::uint64_t> env_seed() {
    if (const char* env = std::getenv("TFDPM_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("TFDPM_SEED must be an unsigned integer");
        }
    }
    return std::nullopt;
}

struct ScoresFile {
    std::string mode = "unknown";
    std::string checkpoint_hash = "unknown";
    std::vector<Eigen::Index> time_indices;
    std::vector<double> scores;
    std::vector<int> labels;
    bool has_labels = false;
};

void write_scores_csv(const std::string& path, const DetectOutput& out,
                      const std::string& checkpoint_hash) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << "# mode=" << detect_mode_name(out.mode) << '\n';
    f << "# checkpoint_hash=" << checkpoint_hash << '\n';
    f << "time_index,score,label\n";
    for (std::size_t i = 0; i < out.scores.size(); ++i) {
        f << out.time_indices[i] << ',' << fmt_double(out.scores[i]) << ','
          << (out.labels.empty() ? 0 : out.labels[i]) << '\n';
    }
}

ScoresFile read_scores_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    ScoresFile sf;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (line.rfind("# mode", 0) == 0 && eq != std::string::npos)
                sf.mode = line.substr(eq + 1);
            if (line.rfind("# checkpoint_hash", 0) == 0 && eq != std::string::npos)
                sf.checkpoint_hash = line.substr(eq + 1);
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            if (line.rfind("time_index,score", 0) != 0)
                throw DataError(path + ": expected time_index,score[,label] header");
            sf.has_labels = line == "time_index,score,label";
            continue;
        }
        std::istringstream is(line);
        std::string t, s, l;
        if (!std::getline(is, t, ',') || !std::getline(is, s, ',')) {
            std::ostringstream os;
            os << path << ":" << lineno << ": malformed row";
            throw DataError(os.str());
        }
        try {
            sf.time_indices.push_back(std::stol(t));
            sf.scores.push_back(std::stod(s));
        } catch (const std::exception&) {
            std::ostringstream os;
            os << path << ":" << lineno << ": malformed row";
            throw DataError(os.str());
        }
        if (sf.has_labels) {
            if (!std::getline(is, l, ',')) {
                std::ostringstream os;
                os << path << ":" << lineno << ": missing label";
                throw DataError(os.str());
            }
            sf.labels.push_back(l == "1" ? 1 : 0);
        }
    }
    if (sf.scores.empty()) throw DataError(path + ": no score rows");
    return sf;
}

void write_preds_csv(const std::string& path, const DetectOutput& out,
                     const std::vector<ChannelSpec>& channels) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << "time_index";
    for (const auto& c : channels) f << ",obs_" << c.name;
    for (const auto& c : channels) f << ",pred_" << c.name;
    f << '\n';
    for (Eigen::Index i = 0; i < out.q(); ++i) {
        f << out.time_indices[static_cast<std::size_t>(i)];
        for (Eigen::Index c = 0; c < out.observed.cols(); ++c)
            f << ',' << fmt_double(out.observed(i, c));
        for (Eigen::Index c = 0; c < out.predicted.cols(); ++c)
            f << ',' << fmt_double(out.predicted(i, c));
        f << '\n';
    }
}

int cmd_simulate(const std::string& scenario, long train_steps, long test_steps,
                 std::uint64_t seed, const std::string& out_dir) {
    if (auto s = env_seed()) seed = *s;
    fs::create_directories(out_dir);
    SynthData data = synth_cps_raw(parse_scenario(scenario), train_steps, test_steps, seed);
    write_csv((fs::path(out_dir) / "train.csv").string(), data.train_raw, data.specs, nullptr);
    write_csv((fs::path(out_dir) / "test.csv").string(), data.test_raw, data.specs,
              &data.test_labels);
    write_schema((fs::path(out_dir) / "schema.json").string(), data.specs);
    long anomalous = 0;
    for (int l : data.test_labels) anomalous += l;
    std::cout << "wrote " << out_dir << "/train.csv (" << train_steps << " rows), test.csv ("
              << test_steps << " rows, " << anomalous << " anomalous), schema.json\n";
    return 0;
}

int cmd_train(const std::string& data_path, std::string schema_path,
              const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out_path) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    apply_env_seed(cfg);
    cfg.validate();

    if (schema_path.empty()) schema_path = sibling_schema(data_path);
    const auto specs = read_schema(schema_path);
    TimeSeriesDataset train = load_dataset(data_path, specs);

    TfdpmModel model = TfdpmModel::create(cfg, train.channels, train.norm_stats);
    fit_tfdpm(model, train, [](const std::string& line) { std::cout << line << '\n'; });
    save_checkpoint(model, out_path);
    std::cout << "saved checkpoint " << out_path << " (hash " << model.content_hash << ")\n";
    return 0;
}

int cmd_train_scheduler(const std::string& ckpt_path, const std::string& data_path,
                        std::string schema_path, int tau_override, bool tune,
                        const std::string& tune_data, const std::string& out_path) {
    TfdpmModel model = load_checkpoint(ckpt_path);
    if (auto s = env_seed()) model.config.seed = *s;
    if (tau_override > 0) model.config.tau = tau_override;
    model.config.validate();

    if (schema_path.empty()) schema_path = sibling_schema(data_path);
    const auto specs = read_schema(schema_path);
    TimeSeriesDataset train = load_dataset(data_path, specs, &model.norm_stats);

    SchedulerModel sched =
        train_scheduler(model, train, model.config.tau, nullptr,
                        [](const std::string& line) { std::cout << line << '\n'; });

    if (tune) {
        if (tune_data.empty()) throw ConfigError("--tune requires --tune-data");
        TimeSeriesDataset val = load_dataset(tune_data, specs, &model.norm_stats);
        TuneResult best = tune_init(model, sched, val, model.config.seed);
        sched.alpha_bar_init = best.alpha_bar_init;
        sched.beta_init = best.beta_init;
        std::cout << "tuned init: alpha_bar=" << best.alpha_bar_init
                  << " beta=" << best.beta_init << " f1=" << best.f1
                  << " mean_calls=" << best.mean_calls << '\n';
    }

    save_scheduler_checkpoint(sched, out_path);
    std::cout << "saved scheduler checkpoint " << out_path << " (hash " << sched.content_hash
              << ", base " << sched.base_hash << ")\n";
    return 0;
}

int cmd_detect(const std::string& ckpt_path, const std::string& sched_path,
               const std::string& data_path, std::string schema_path, const std::string& mode_name,
               const std::string& out_path, std::string preds_path, int n_samples,
               long seed_override) {
    const DetectMode mode = parse_detect_mode(mode_name);
    if (mode == DetectMode::Fast && sched_path.empty())
        throw ConfigError("fast mode requires --sched-ckpt");

    TfdpmModel model = load_checkpoint(ckpt_path);
    SchedulerModel sched;
    if (!sched_path.empty()) sched = load_scheduler_checkpoint(sched_path, model.content_hash);

    std::uint64_t seed = model.config.seed;
    if (seed_override >= 0) seed = static_cast<std::uint64_t>(seed_override);
    if (auto s = env_seed()) seed = *s;
    const int samples = n_samples > 0 ? n_samples : model.config.n_samples;

    if (schema_path.empty()) schema_path = sibling_schema(data_path);
    const auto specs = read_schema(schema_path);
    TimeSeriesDataset test = load_dataset(data_path, specs, &model.norm_stats);

    DetectOutput out = run_detection(model, sched.net ? &sched : nullptr, test, mode, seed, samples);
    write_scores_csv(out_path, out, model.content_hash);
    if (preds_path.empty()) preds_path = out_path + ".preds.csv";
    write_preds_csv(preds_path, out, model.channels);

    if (mode == DetectMode::Fast) {
        for (Eigen::Index i = 0; i < out.q(); ++i)
            std::cout << "t=" << out.time_indices[static_cast<std::size_t>(i)]
                      << " n_calls=" << out.eps_calls[static_cast<std::size_t>(i)] << '\n';
    }
    std::cout << "wrote " << out.q() << " scores to " << out_path << " (mode "
              << detect_mode_name(mode) << ", mean eps calls/step " << out.mean_eps_calls()
              << ")\n";
    return 0;
}

int cmd_evaluate(const std::string& scores_path, const std::string& out_path) {
    ScoresFile sf = read_scores_csv(scores_path);
    if (!sf.has_labels) throw DataError(scores_path + ": missing label column");
    DetectionReport report = best_f1_search(sf.scores, sf.labels);

    nlohmann::json j;
    j["threshold"] = report.threshold;
    j["precision"] = report.precision;
    j["recall"] = report.recall;
    j["f1"] = report.f1;
    j["q"] = report.q();
    j["mode"] = sf.mode;
    j["checkpoint_hash"] = sf.checkpoint_hash;
    std::ofstream f(out_path);
    if (!f) throw DataError("cannot write '" + out_path + "'");
    f << j.dump(2) << '\n';
    std::cout << "f1=" << report.f1 << " precision=" << report.precision
              << " recall=" << report.recall << " threshold=" << report.threshold << '\n';
    return 0;
}

int cmd_plot(const std::string& scores_path, std::string preds_path, long channel,
             const std::string& out_path) {
    ScoresFile sf = read_scores_csv(scores_path);
    if (preds_path.empty()) preds_path = scores_path + ".preds.csv";

    std::ifstream pf(preds_path);
    if (!pf) throw DataError("cannot open predictions '" + preds_path + "'");
    std::string line;
    if (!std::getline(pf, line)) throw DataError(preds_path + ": empty file");
    std::vector<std::string> header;
    {
        std::istringstream is(line);
        std::string f;
        while (std::getline(is, f, ',')) header.push_back(f);
    }
    const std::size_t d = (header.size() - 1) / 2;
    if (header.size() < 3 || header.size() != 1 + 2 * d)
        throw DataError(preds_path + ": malformed header");
    if (channel < 0 || static_cast<std::size_t>(channel) >= d)
        throw ConfigError("channel index out of range");

    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write '" + out_path + "'");
    out << "t,observed,predicted,score,label\n";
    std::size_t row = 0;
    while (std::getline(pf, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::vector<std::string> fields;
        std::string f;
        while (std::getline(is, f, ',')) fields.push_back(f);
        if (fields.size() != header.size() || row >= sf.scores.size())
            throw DataError(preds_path + ": row/score misalignment");
        out << fields[0] << ',' << fields[1 + static_cast<std::size_t>(channel)] << ','
            << fields[1 + d + static_cast<std::size_t>(channel)] << ','
            << fmt_double(sf.scores[row]) << ',' << (sf.has_labels ? sf.labels[row] : 0) << '\n';
        ++row;
    }
    if (row != sf.scores.size()) throw DataError("predictions and scores have different lengths");
    std::cout << "wrote " << row << " plot rows to " << out_path << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TFDPM attack detection for cyber-physical time series"};
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "Generate a synthetic CPS dataset");
    std::string sim_scenario = "easy", sim_out;
    long sim_train = 5000, sim_test = 2000;
    std::uint64_t sim_seed = 0;
    sim->add_option("--scenario", sim_scenario, "easy|hard");
    sim->add_option("--train-steps", sim_train, "training rows")->check(CLI::PositiveNumber);
    sim->add_option("--test-steps", sim_test, "test rows")->check(CLI::PositiveNumber);
    sim->add_option("--seed", sim_seed, "simulator seed");
    sim->add_option("--out", sim_out, "output directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "Train the detector");
    std::string tr_data, tr_schema, tr_config, tr_out;
    std::vector<std::string> tr_sets;
    tr->add_option("--data", tr_data, "training CSV")->required();
    tr->add_option("--schema", tr_schema, "channel schema (default: schema.json next to data)");
    tr->add_option("--config", tr_config, "key=value config file");
    tr->add_option("--set", tr_sets, "config override key=value (repeatable)");
    tr->add_option("--out", tr_out, "checkpoint path")->required();

    // train-scheduler
    auto* ts = app.add_subcommand("train-scheduler", "Train the noise-scheduling network");
    std::string ts_ckpt, ts_data, ts_schema, ts_out, ts_tune_data;
    int ts_tau = 0;
    bool ts_tune = false;
    ts->add_option("--ckpt", ts_ckpt, "trained TFDPM checkpoint")->required();
    ts->add_option("--data", ts_data, "training CSV")->required();
    ts->add_option("--schema", ts_schema, "channel schema");
    ts->add_option("--tau", ts_tau, "stride (default: checkpoint config)");
    ts->add_flag("--tune", ts_tune, "grid-search the fast-sampler init pair");
    ts->add_option("--tune-data", ts_tune_data, "labelled validation CSV for --tune");
    ts->add_option("--out", ts_out, "scheduler checkpoint path")->required();

    // detect
    auto* de = app.add_subcommand("detect", "Score a test series");
    std::string de_ckpt, de_sched, de_data, de_schema, de_mode = "full", de_out, de_preds;
    int de_samples = 0;
    long de_seed = -1;
    de->add_option("--ckpt", de_ckpt, "TFDPM checkpoint")->required();
    de->add_option("--sched-ckpt", de_sched, "scheduler checkpoint (fast mode)");
    de->add_option("--data", de_data, "test CSV")->required();
    de->add_option("--schema", de_schema, "channel schema");
    de->add_option("--mode", de_mode, "full|fast");
    de->add_option("--out", de_out, "scores CSV path")->required();
    de->add_option("--preds", de_preds, "predictions CSV path (default: <out>.preds.csv)");
    de->add_option("--n-samples", de_samples, "samples averaged per timestep");
    de->add_option("--seed", de_seed, "sampling seed (default: checkpoint config)");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Best-F1 threshold search over a scores file");
    std::string ev_scores, ev_out;
    ev->add_option("--scores", ev_scores, "scores CSV from detect")->required();
    ev->add_option("--out", ev_out, "report JSON path")->required();

    // plot
    auto* pl = app.add_subcommand("plot", "Emit aligned series for external rendering");
    std::string pl_scores, pl_preds, pl_out;
    long pl_channel = 0;
    pl->add_option("--scores", pl_scores, "scores CSV from detect")->required();
    pl->add_option("--preds", pl_preds, "predictions CSV (default: <scores>.preds.csv)");
    pl->add_option("--channel", pl_channel, "channel index to emit");
    pl->add_option("--out", pl_out, "plot data CSV path")->required();

    try {
        app.parse(argc, argv);
        if (sim->parsed())
            return cmd_simulate(sim_scenario, sim_train, sim_test, sim_seed, sim_out);
        if (tr->parsed()) return cmd_train(tr_data, tr_schema, tr_config, tr_sets, tr_out);
        if (ts->parsed())
            return cmd_train_scheduler(ts_ckpt, ts_data, ts_schema, ts_tau, ts_tune, ts_tune_data,
                                       ts_out);
        if (de->parsed())
            return cmd_detect(de_ckpt, de_sched, de_data, de_schema, de_mode, de_out, de_preds,
                              de_samples, de_seed);
        if (ev->parsed()) return cmd_evaluate(ev_scores, ev_out);
        if (pl->parsed()) return cmd_plot(pl_scores, pl_preds, pl_channel, pl_out);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
