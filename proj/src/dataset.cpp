#include "tfdpm/dataset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tfdpm {

std::pair<Matrix, NormStats> normalize(const Matrix& raw, const NormStats* stats) {
    if (raw.rows() < 1) throw ConfigError("normalize: need at least one row");
    NormStats used;
    if (stats) {
        if (static_cast<Eigen::Index>(stats->size()) != raw.cols())
            throw ShapeError("normalize: stats length does not match column count");
        used = *stats;
    } else {
        used.reserve(raw.cols());
        for (Eigen::Index c = 0; c < raw.cols(); ++c)
            used.emplace_back(raw.col(c).minCoeff(), raw.col(c).maxCoeff());
    }
    Matrix out(raw.rows(), raw.cols());
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
        const double lo = used[c].first, hi = used[c].second;
        if (hi == lo) {
            out.col(c).setZero();  // degenerate channel stays inert
        } else {
            out.col(c) = (raw.col(c).array() - lo) / (hi - lo);
        }
    }
    return {std::move(out), std::move(used)};
}

Matrix denormalize(const Matrix& normed, const NormStats& stats) {
    if (static_cast<Eigen::Index>(stats.size()) != normed.cols())
        throw ShapeError("denormalize: stats length does not match column count");
    Matrix out(normed.rows(), normed.cols());
    for (Eigen::Index c = 0; c < normed.cols(); ++c) {
        const double lo = stats[c].first, hi = stats[c].second;
        if (hi == lo)
            out.col(c).setConstant(lo);
        else
            out.col(c) = normed.col(c).array() * (hi - lo) + lo;
    }
    return out;
}

std::pair<Matrix, std::vector<ChannelSpec>> expand_one_hot(const Matrix& raw,
                                                           const std::vector<ChannelSpec>& specs) {
    if (static_cast<Eigen::Index>(specs.size()) != raw.cols())
        throw ShapeError("expand_one_hot: spec count does not match column count");
    Eigen::Index d = 0;
    for (const auto& s : specs) {
        if (s.kind == ChannelSpec::Kind::Discrete) {
            if (s.cardinality < 2)
                throw ConfigError("channel '" + s.name + "': discrete cardinality must be >= 2");
            d += s.cardinality;
        } else {
            d += 1;
        }
    }
    Matrix out = Matrix::Zero(raw.rows(), d);
    std::vector<ChannelSpec> expanded;
    expanded.reserve(static_cast<std::size_t>(d));
    Eigen::Index c = 0;
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const auto& s = specs[k];
        if (s.kind == ChannelSpec::Kind::Continuous) {
            out.col(c) = raw.col(static_cast<Eigen::Index>(k));
            expanded.push_back(s);
            ++c;
            continue;
        }
        for (int v = 0; v < s.cardinality; ++v) {
            ChannelSpec e = s;
            e.name = s.name + "#" + std::to_string(v);
            expanded.push_back(e);
        }
        for (Eigen::Index r = 0; r < raw.rows(); ++r) {
            const double x = raw(r, static_cast<Eigen::Index>(k));
            const long v = std::lround(x);
            if (std::abs(x - static_cast<double>(v)) > 1e-9 || v < 0 || v >= s.cardinality) {
                std::ostringstream os;
                os << "channel '" << s.name << "' row " << r << ": value " << x
                   << " is not a category in [0, " << s.cardinality << ")";
                throw DataError(os.str());
            }
            out(r, c + v) = 1.0;
        }
        c += s.cardinality;
    }
    return {std::move(out), std::move(expanded)};
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    for (auto& f : fields) {
        const auto b = f.find_first_not_of(" \t");
        const auto e = f.find_last_not_of(" \t");
        f = (b == std::string::npos) ? std::string() : f.substr(b, e - b + 1);
    }
    return fields;
}

bool is_missing(const std::string& f) {
    if (f.empty()) return true;
    std::string low;
    for (char c : f) low.push_back(static_cast<char>(std::tolower(c)));
    return low == "nan" || low == "na";
}

}  // namespace

TimeSeriesDataset load_dataset(const std::string& path, const std::vector<ChannelSpec>& specs,
                               const NormStats* train_stats) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    const auto header = split_csv_line(line);

    // Map each raw channel to its CSV column; reject columns we do not know.
    std::vector<int> col_of(specs.size(), -1);
    int label_col = -1;
    for (std::size_t h = 0; h < header.size(); ++h) {
        if (header[h] == "label") {
            label_col = static_cast<int>(h);
            continue;
        }
        bool known = false;
        for (std::size_t k = 0; k < specs.size(); ++k) {
            if (specs[k].name == header[h]) {
                if (col_of[k] != -1) throw DataError(path + ": duplicate column '" + header[h] + "'");
                col_of[k] = static_cast<int>(h);
                known = true;
                break;
            }
        }
        if (!known) throw DataError(path + ": unknown channel '" + header[h] + "'");
    }
    for (std::size_t k = 0; k < specs.size(); ++k)
        if (col_of[k] == -1) throw DataError(path + ": missing channel '" + specs[k].name + "'");

    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            std::ostringstream os;
            os << path << ":" << lineno << ": expected " << header.size() << " fields, got "
               << fields.size();
            throw DataError(os.str());
        }
        bool missing = false;
        for (const auto& f : fields)
            if (is_missing(f)) missing = true;
        if (missing) continue;  // discard rows with missing values

        std::vector<double> row(specs.size());
        for (std::size_t k = 0; k < specs.size(); ++k) {
            const std::string& f = fields[static_cast<std::size_t>(col_of[k])];
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(f, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != f.size()) {
                std::ostringstream os;
                os << path << ":" << lineno << ": cannot parse '" << f << "' in channel '"
                   << specs[k].name << "'";
                throw DataError(os.str());
            }
            row[k] = v;
        }
        rows.push_back(std::move(row));
        if (label_col >= 0) {
            const std::string& f = fields[static_cast<std::size_t>(label_col)];
            if (f != "0" && f != "1") {
                std::ostringstream os;
                os << path << ":" << lineno << ": label must be 0 or 1, got '" << f << "'";
                throw DataError(os.str());
            }
            labels.push_back(f == "1" ? 1 : 0);
        }
    }
    if (rows.empty()) throw DataError(path + ": no usable rows");

    Matrix raw(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(specs.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t k = 0; k < specs.size(); ++k)
            raw(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];

    auto [expanded, channels] = expand_one_hot(raw, specs);
    auto [values, stats] = normalize(expanded, train_stats);

    TimeSeriesDataset ds;
    ds.values = std::move(values);
    ds.channels = std::move(channels);
    ds.norm_stats = std::move(stats);
    ds.labels = std::move(labels);
    return ds;
}

Eigen::Index window_count(const TimeSeriesDataset& ds, Eigen::Index omega) {
    if (omega < 1) throw ConfigError("window length must be >= 1");
    if (ds.rows() <= omega) {
        std::ostringstream os;
        os << "series of length " << ds.rows() << " cannot produce windows of length " << omega;
        throw ConfigError(os.str());
    }
    return ds.rows() - omega;
}

WindowBatch gather_windows(const TimeSeriesDataset& ds, Eigen::Index omega,
                           const std::vector<Eigen::Index>& target_times) {
    window_count(ds, omega);  // validates T > omega
    WindowBatch wb;
    wb.batch = static_cast<Eigen::Index>(target_times.size());
    wb.omega = omega;
    wb.histories.resize(wb.batch * omega, ds.cols());
    wb.targets.resize(wb.batch, ds.cols());
    wb.time_indices = target_times;
    for (Eigen::Index b = 0; b < wb.batch; ++b) {
        const Eigen::Index t = target_times[static_cast<std::size_t>(b)];
        if (t < omega || t >= ds.rows()) throw ConfigError("window target index out of range");
        wb.histories.middleRows(b * omega, omega) = ds.values.middleRows(t - omega, omega);
        wb.targets.row(b) = ds.values.row(t);
    }
    return wb;
}

WindowBatch all_windows(const TimeSeriesDataset& ds, Eigen::Index omega) {
    const Eigen::Index n = window_count(ds, omega);
    std::vector<Eigen::Index> times(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) times[static_cast<std::size_t>(i)] = omega + i;
    return gather_windows(ds, omega, times);
}

Scenario parse_scenario(const std::string& name) {
    if (name == "easy") return Scenario::Easy;
    if (name == "hard") return Scenario::Hard;
    throw ConfigError("unknown scenario '" + name + "' (expected easy|hard)");
}

namespace {

struct SimParams {
    double sensor_noise;
    double flow_noise;
    double bias_level, bias_pressure, bias_demand, bias_flow;
};

SimParams params_for(Scenario s) {
    if (s == Scenario::Easy) return {0.004, 0.05, 0.28, 0.55, 0.30, 0.020};
    return {0.008, 0.08, 0.14, 0.28, 0.15, 0.010};
}

enum class Attack { None, Bias, Stuck, Ramp, Flip };

struct AttackSegment {
    Eigen::Index start = 0, len = 0;
    Attack type = Attack::None;
    int channel = 0;   // recorded channel under attack (sensor attacks)
    int actuator = 0;  // 0 = pump, 1 = valve (flip attacks)
    double magnitude = 0.0;
};

// Plant state advanced one step at a time. Sensor attacks only corrupt the
// recorded row; actuator flips corrupt the command actually applied.
class TwoTankSim {
public:
    TwoTankSim(const SimParams& p, Rng& rng) : p_(p), rng_(rng) {}

    // Returns the recorded raw channel row (10 columns).
    Eigen::RowVectorXd step(Eigen::Index t, const AttackSegment* seg) {
        demand_ar_ = 0.9 * demand_ar_ + 0.1 * rng_.normal();
        const double demand =
            0.5 + 0.35 * std::sin(2.0 * M_PI * static_cast<double>(t) / 240.0) + 0.06 * demand_ar_;

        if (l1_ < 0.35) pump_ = 1;
        if (l1_ > 0.80) pump_ = 0;
        if (l2_ > 0.65) valve_ = 1;
        if (l2_ < 0.30) valve_ = 0;

        int pump_applied = pump_, valve_applied = valve_;
        if (seg && seg->type == Attack::Flip) {
            if (seg->actuator == 0)
                pump_applied = 1 - pump_applied;
            else
                valve_applied = 1 - valve_applied;
        }

        const double f_in = pump_applied * 0.045 * (1.0 + p_.flow_noise * rng_.normal());
        const double f_12 = 0.050 * l1_ * (1.0 + p_.flow_noise * rng_.normal());
        const double f_out =
            (0.030 * demand + valve_applied * 0.035) * l2_ * (1.0 + p_.flow_noise * rng_.normal());

        l1_ = std::clamp(l1_ + f_in - f_12, 0.0, 1.0);
        l2_ = std::clamp(l2_ + f_12 - f_out, 0.0, 1.0);

        Eigen::RowVectorXd row(10);
        row << l1_ + p_.sensor_noise * rng_.normal(), l2_ + p_.sensor_noise * rng_.normal(),
            f_in + 0.25 * p_.sensor_noise * rng_.normal(), f_12 + 0.25 * p_.sensor_noise * rng_.normal(),
            f_out + 0.25 * p_.sensor_noise * rng_.normal(),
            2.0 * l1_ + 0.05 + 2.0 * p_.sensor_noise * rng_.normal(),
            2.0 * l2_ + 0.05 + 2.0 * p_.sensor_noise * rng_.normal(),
            demand + p_.sensor_noise * rng_.normal(), static_cast<double>(pump_applied),
            static_cast<double>(valve_applied);

        if (seg) apply_sensor_attack(row, t, *seg);
        return row;
    }

private:
    void apply_sensor_attack(Eigen::RowVectorXd& row, Eigen::Index t, const AttackSegment& seg) {
        switch (seg.type) {
            case Attack::Bias:
                row(seg.channel) += seg.magnitude;
                break;
            case Attack::Stuck:
                if (t == seg.start) stuck_value_ = row(seg.channel);
                row(seg.channel) = stuck_value_;
                break;
            case Attack::Ramp:
                row(seg.channel) += seg.magnitude * static_cast<double>(t - seg.start + 1) /
                                    static_cast<double>(seg.len);
                break;
            default:
                break;
        }
    }

    SimParams p_;
    Rng& rng_;
    double l1_ = 0.55, l2_ = 0.45, demand_ar_ = 0.0;
    int pump_ = 1, valve_ = 0;
    double stuck_value_ = 0.0;
};

std::vector<ChannelSpec> synth_specs() {
    auto cont = [](const char* n) { return ChannelSpec{n, ChannelSpec::Kind::Continuous, 0}; };
    std::vector<ChannelSpec> specs = {cont("level1"),   cont("level2"),    cont("inflow"),
                                      cont("transfer"), cont("outflow"),   cont("pressure1"),
                                      cont("pressure2"), cont("demand")};
    specs.push_back(ChannelSpec{"pump", ChannelSpec::Kind::Discrete, 2});
    specs.push_back(ChannelSpec{"valve", ChannelSpec::Kind::Discrete, 2});
    return specs;
}

std::vector<AttackSegment> plan_attacks(Eigen::Index t_test, const SimParams& p, Rng& rng) {
    // Aim at ~8% anomalous steps spread over at least five segments.
    const Eigen::Index budget = static_cast<Eigen::Index>(0.08 * static_cast<double>(t_test));
    const Eigen::Index n_segments = std::max<Eigen::Index>(5, budget / 28);
    const Eigen::Index mean_len = std::max<Eigen::Index>(4, budget / n_segments);
    const Eigen::Index len_lo = std::max<Eigen::Index>(4, (mean_len * 7) / 10);
    const Eigen::Index len_hi = std::max(len_lo + 1, (mean_len * 13) / 10);
    const Eigen::Index margin = 80;  // leave the opening steps attack-free
    const Eigen::Index region = (t_test - margin) / n_segments;

    const Attack cycle[4] = {Attack::Bias, Attack::Stuck, Attack::Ramp, Attack::Flip};
    const int bias_channels[5] = {0, 1, 5, 6, 7};

    std::vector<AttackSegment> segs;
    for (Eigen::Index i = 0; i < n_segments; ++i) {
        AttackSegment s;
        s.len = rng.uniform_int(len_lo, len_hi);
        const Eigen::Index lo = margin + i * region;
        const Eigen::Index hi = std::max(lo + 1, margin + (i + 1) * region - s.len - 8);
        s.start = rng.uniform_int(lo, hi - 1);
        s.start = std::min(s.start, t_test - s.len - 1);
        s.type = cycle[i % 4];
        s.channel = bias_channels[rng.uniform_int(0, 4)];
        s.actuator = static_cast<int>(rng.uniform_int(0, 1));
        double mag = 0.0;
        switch (s.channel) {
            case 0:
            case 1: mag = p.bias_level; break;
            case 5:
            case 6: mag = p.bias_pressure; break;
            case 7: mag = p.bias_demand; break;
            default: mag = p.bias_flow; break;
        }
        s.magnitude = (rng.uniform_int(0, 1) == 0 ? 1.0 : -1.0) * mag;
        segs.push_back(s);
    }

    // Integer rounding can push the total outside the 5-12% band; trim or pad
    // segment lengths round-robin until it fits.
    auto total = [&segs] {
        Eigen::Index n = 0;
        for (const auto& s : segs) n += s.len;
        return n;
    };
    const Eigen::Index hi_cap = (t_test * 11) / 100;
    const Eigen::Index lo_cap = (t_test * 6) / 100;
    std::size_t k = 0;
    while (total() > hi_cap) {
        if (segs[k % segs.size()].len > 4) segs[k % segs.size()].len -= 1;
        ++k;
    }
    while (total() < lo_cap) {
        segs[k % segs.size()].len += 1;
        ++k;
    }
    return segs;
}

}  // namespace

SynthData synth_cps_raw(Scenario scenario, Eigen::Index t_train, Eigen::Index t_test,
                        std::uint64_t seed) {
    if (t_train <= 200 || t_test <= 200)
        throw ConfigError("synth_cps: need more than 200 train and test steps");
    const SimParams p = params_for(scenario);

    SynthData out;
    out.specs = synth_specs();

    Rng rng_train(seed * 2654435761ULL + 1);
    TwoTankSim train_sim(p, rng_train);
    out.train_raw.resize(t_train, 10);
    // settle transients before recording
    for (Eigen::Index t = 0; t < 100; ++t) train_sim.step(t, nullptr);
    for (Eigen::Index t = 0; t < t_train; ++t) out.train_raw.row(t) = train_sim.step(t, nullptr);

    Rng rng_test(seed * 2654435761ULL + 2);
    auto segments = plan_attacks(t_test, p, rng_test);
    TwoTankSim test_sim(p, rng_test);
    out.test_raw.resize(t_test, 10);
    out.test_labels.assign(static_cast<std::size_t>(t_test), 0);
    for (Eigen::Index t = 0; t < 100; ++t) test_sim.step(t, nullptr);
    for (Eigen::Index t = 0; t < t_test; ++t) {
        const AttackSegment* active = nullptr;
        for (const auto& s : segments)
            if (t >= s.start && t < s.start + s.len) active = &s;
        out.test_raw.row(t) = test_sim.step(t, active);
        if (active) out.test_labels[static_cast<std::size_t>(t)] = 1;
    }
    return out;
}

std::pair<TimeSeriesDataset, TimeSeriesDataset> synth_cps(Scenario scenario, Eigen::Index t_train,
                                                          Eigen::Index t_test, std::uint64_t seed) {
    SynthData raw = synth_cps_raw(scenario, t_train, t_test, seed);

    auto [train_x, channels] = expand_one_hot(raw.train_raw, raw.specs);
    auto [train_v, stats] = normalize(train_x);
    TimeSeriesDataset train;
    train.values = std::move(train_v);
    train.channels = channels;
    train.norm_stats = stats;
    train.labels.assign(static_cast<std::size_t>(t_train), 0);

    auto [test_x, channels2] = expand_one_hot(raw.test_raw, raw.specs);
    auto [test_v, stats2] = normalize(test_x, &stats);
    TimeSeriesDataset test;
    test.values = std::move(test_v);
    test.channels = std::move(channels2);
    test.norm_stats = std::move(stats2);
    test.labels = std::move(raw.test_labels);
    return {std::move(train), std::move(test)};
}

void write_csv(const std::string& path, const Matrix& raw, const std::vector<ChannelSpec>& specs,
               const std::vector<int>* labels) {
    if (static_cast<Eigen::Index>(specs.size()) != raw.cols())
        throw ShapeError("write_csv: spec count does not match column count");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    for (std::size_t k = 0; k < specs.size(); ++k) {
        if (k) out << ',';
        out << specs[k].name;
    }
    if (labels) out << ",label";
    out << '\n';
    char buf[64];
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        for (Eigen::Index c = 0; c < raw.cols(); ++c) {
            if (c) out << ',';
            if (specs[static_cast<std::size_t>(c)].kind == ChannelSpec::Kind::Discrete) {
                out << static_cast<long>(std::lround(raw(r, c)));
            } else {
                std::snprintf(buf, sizeof buf, "%.17g", raw(r, c));
                out << buf;
            }
        }
        if (labels) out << ',' << (*labels)[static_cast<std::size_t>(r)];
        out << '\n';
    }
}

void write_schema(const std::string& path, const std::vector<ChannelSpec>& specs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : specs) {
        nlohmann::json j;
        j["name"] = s.name;
        j["kind"] = s.kind == ChannelSpec::Kind::Discrete ? "discrete" : "continuous";
        if (s.kind == ChannelSpec::Kind::Discrete) j["cardinality"] = s.cardinality;
        arr.push_back(j);
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << arr.dump(2) << '\n';
}

std::vector<ChannelSpec> read_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schema '" + path + "'");
    nlohmann::json arr;
    try {
        in >> arr;
    } catch (const std::exception& e) {
        throw DataError("schema '" + path + "': " + e.what());
    }
    if (!arr.is_array()) throw DataError("schema '" + path + "': expected a JSON array");
    std::vector<ChannelSpec> specs;
    for (const auto& j : arr) {
        ChannelSpec s;
        s.name = j.at("name").get<std::string>();
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "discrete") {
            s.kind = ChannelSpec::Kind::Discrete;
            s.cardinality = j.at("cardinality").get<int>();
            if (s.cardinality < 2)
                throw DataError("schema '" + path + "': cardinality must be >= 2 for " + s.name);
        } else if (kind == "continuous") {
            s.kind = ChannelSpec::Kind::Continuous;
        } else {
            throw DataError("schema '" + path + "': unknown kind '" + kind + "'");
        }
        for (const auto& prev : specs)
            if (prev.name == s.name) throw DataError("schema '" + path + "': duplicate name " + s.name);
        specs.push_back(std::move(s));
    }
    if (specs.empty()) throw DataError("schema '" + path + "': no channels");
    return specs;
}

}  // namespace tfdpm
