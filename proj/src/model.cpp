#include "tfdpm/model.hpp"

#include "tfdpm/serialize.hpp"

#include <fstream>
#include <sstream>

namespace tfdpm {

void RunConfig::validate() const {
    if (window < 1) throw ConfigError("window must be >= 1");
    if (diffusion_steps < 2) throw ConfigError("diffusion_steps must be >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("need 0 < beta_start <= beta_end < 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    parse_extractor_kind(extractor);
    if (hidden_size < 1) throw ConfigError("hidden_size must be >= 1");
    if (tau < 1) throw ConfigError("tau must be >= 1");
    if (tau > diffusion_steps - 2) throw ConfigError("tau must be <= diffusion_steps - 2");
    if (!(alpha_bar_init > 0.0) || !(alpha_bar_init < 1.0))
        throw ConfigError("alpha_bar_init must lie in (0,1)");
    if (!(beta_init > 0.0) || !(beta_init < 1.0)) throw ConfigError("beta_init must lie in (0,1)");
    if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream is(value);
    T v{};
    is >> v;
    if (is.fail() || !is.eof()) throw ConfigError("config: bad value '" + value + "' for " + key);
    return v;
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "window")
        cfg.window = parse_number<Eigen::Index>(key, value);
    else if (key == "diffusion_steps")
        cfg.diffusion_steps = parse_number<int>(key, value);
    else if (key == "beta_start")
        cfg.beta_start = parse_number<double>(key, value);
    else if (key == "beta_end")
        cfg.beta_end = parse_number<double>(key, value);
    else if (key == "batch_size")
        cfg.batch_size = parse_number<int>(key, value);
    else if (key == "epochs")
        cfg.epochs = parse_number<int>(key, value);
    else if (key == "extractor")
        cfg.extractor = value;
    else if (key == "hidden_size")
        cfg.hidden_size = parse_number<Eigen::Index>(key, value);
    else if (key == "tau")
        cfg.tau = parse_number<int>(key, value);
    else if (key == "alpha_bar_init")
        cfg.alpha_bar_init = parse_number<double>(key, value);
    else if (key == "beta_init")
        cfg.beta_init = parse_number<double>(key, value);
    else if (key == "seed")
        cfg.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "n_samples")
        cfg.n_samples = parse_number<int>(key, value);
    else
        throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            std::ostringstream os;
            os << path << ":" << lineno << ": expected key=value";
            throw ConfigError(os.str());
        }
        auto trim = [](std::string s) {
            const auto x = s.find_first_not_of(" \t");
            const auto y = s.find_last_not_of(" \t");
            return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
        };
        apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

std::map<std::string, std::string> config_entries(const RunConfig& cfg) {
    auto fmt = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::map<std::string, std::string> m;
    m["window"] = std::to_string(cfg.window);
    m["diffusion_steps"] = std::to_string(cfg.diffusion_steps);
    m["beta_start"] = fmt(cfg.beta_start);
    m["beta_end"] = fmt(cfg.beta_end);
    m["batch_size"] = std::to_string(cfg.batch_size);
    m["epochs"] = std::to_string(cfg.epochs);
    m["extractor"] = cfg.extractor;
    m["hidden_size"] = std::to_string(cfg.hidden_size);
    m["tau"] = std::to_string(cfg.tau);
    m["alpha_bar_init"] = fmt(cfg.alpha_bar_init);
    m["beta_init"] = fmt(cfg.beta_init);
    m["seed"] = std::to_string(cfg.seed);
    m["n_samples"] = std::to_string(cfg.n_samples);
    return m;
}

TfdpmModel TfdpmModel::create(const RunConfig& cfg, const std::vector<ChannelSpec>& channels,
                              const NormStats& stats) {
    cfg.validate();
    if (channels.empty()) throw ConfigError("model: no channels");
    if (channels.size() != stats.size()) throw ConfigError("model: stats/channel count mismatch");

    TfdpmModel m;
    m.config = cfg;
    m.channels = channels;
    m.norm_stats = stats;
    m.schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);

    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0xd1b54a32d192ed03ULL);

    ExtractorConfig ec;
    ec.kind = parse_extractor_kind(cfg.extractor);
    ec.data_dim = m.data_dim();
    ec.window = cfg.window;
    ec.hidden_size = cfg.hidden_size;
    m.extractor = make_extractor(ec, rng);

    EpsNetworkConfig nc;
    nc.data_dim = m.data_dim();
    nc.cond_dim = cfg.hidden_size;
    nc.alpha_hi = m.schedule.alpha(1);
    nc.alpha_lo = m.schedule.alpha(m.schedule.steps());
    m.eps = std::make_unique<EpsNetwork>(nc, rng);
    return m;
}

std::vector<nn::Tensor*> TfdpmModel::trainable_params() {
    std::vector<nn::Tensor*> out = extractor->params();
    for (nn::Tensor* t : eps->params()) out.push_back(t);
    return out;
}

namespace {

constexpr const char* kModelMagic = "TFDPM-CKPT";
constexpr const char* kSchedMagic = "TFDPM-SCHED-CKPT";
constexpr int kFormatVersion = 1;

void write_tensors(io::Writer& w, const std::vector<nn::Tensor*>& tensors) {
    w.u64(tensors.size());
    for (const nn::Tensor* t : tensors) {
        w.str(t->name);
        w.matrix(t->value);
    }
}

void read_tensors(io::Reader& r, const std::vector<nn::Tensor*>& tensors) {
    const std::uint64_t n = r.u64();
    if (n != tensors.size()) throw CheckpointError("checkpoint parameter count mismatch");
    for (nn::Tensor* t : tensors) {
        const std::string name = r.str();
        Matrix v = r.matrix();
        if (name != t->name) throw CheckpointError("checkpoint parameter '" + name +
                                                   "' does not match expected '" + t->name + "'");
        if (v.rows() != t->value.rows() || v.cols() != t->value.cols())
            throw CheckpointError("checkpoint parameter '" + name + "' has wrong shape");
        t->value = std::move(v);
    }
}

struct Header {
    int version = 0;
    std::string hash;
    std::map<std::string, std::string> fields;  // config + extra lines
    std::string payload;
};

void write_checkpoint_file(const std::string& path, const char* magic,
                           const std::map<std::string, std::string>& fields,
                           const std::string& payload, std::string* hash_out) {
    const std::string hash = io::hex64(io::fnv1a(payload));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out << magic << ' ' << kFormatVersion << '\n';
    out << "hash " << hash << '\n';
    for (const auto& [k, v] : fields) out << "config " << k << '=' << v << '\n';
    out << "payload " << payload.size() << '\n';
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
    if (hash_out) *hash_out = hash;
}

Header read_checkpoint_file(const std::string& path, const char* magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    Header h;
    std::string line;
    if (!std::getline(in, line)) throw CheckpointError(path + ": empty checkpoint");
    {
        std::istringstream is(line);
        std::string m;
        is >> m >> h.version;
        if (m != magic) throw CheckpointError(path + ": not a " + std::string(magic) + " file");
        if (h.version != kFormatVersion) {
            std::ostringstream os;
            os << path << ": unsupported format version " << h.version;
            throw CheckpointError(os.str());
        }
    }
    std::size_t payload_size = 0;
    bool have_payload = false;
    while (std::getline(in, line)) {
        if (line.rfind("hash ", 0) == 0) {
            h.hash = line.substr(5);
        } else if (line.rfind("config ", 0) == 0) {
            const std::string kv = line.substr(7);
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw CheckpointError(path + ": bad config line");
            h.fields[kv.substr(0, eq)] = kv.substr(eq + 1);
        } else if (line.rfind("payload ", 0) == 0) {
            payload_size = static_cast<std::size_t>(std::stoull(line.substr(8)));
            have_payload = true;
            break;
        } else if (line.rfind("base ", 0) == 0) {
            h.fields["__base"] = line.substr(5);
        } else {
            throw CheckpointError(path + ": unexpected header line '" + line + "'");
        }
    }
    if (!have_payload) throw CheckpointError(path + ": missing payload");
    h.payload.resize(payload_size);
    in.read(h.payload.data(), static_cast<std::streamsize>(payload_size));
    if (static_cast<std::size_t>(in.gcount()) != payload_size)
        throw CheckpointError(path + ": truncated payload");
    // refuse to touch the payload if the hash does not check out
    if (io::hex64(io::fnv1a(h.payload)) != h.hash)
        throw CheckpointError(path + ": content hash mismatch");
    return h;
}

}  // namespace

void save_checkpoint(TfdpmModel& model, const std::string& path) {
    io::Writer w;
    w.u64(model.channels.size());
    for (const auto& c : model.channels) {
        w.str(c.name);
        w.u64(c.kind == ChannelSpec::Kind::Discrete ? 1 : 0);
        w.u64(static_cast<std::uint64_t>(c.cardinality));
    }
    w.u64(model.norm_stats.size());
    for (const auto& [lo, hi] : model.norm_stats) {
        w.f64(lo);
        w.f64(hi);
    }
    w.u64(model.schedule.betas().size());
    for (double b : model.schedule.betas()) w.f64(b);
    write_tensors(w, model.extractor->params());
    write_tensors(w, model.eps->params());

    write_checkpoint_file(path, kModelMagic, config_entries(model.config), w.bytes(),
                          &model.content_hash);
}

TfdpmModel load_checkpoint(const std::string& path) {
    Header h = read_checkpoint_file(path, kModelMagic);

    RunConfig cfg;
    for (const auto& [k, v] : h.fields) apply_config_entry(cfg, k, v);

    io::Reader r(h.payload);
    const std::uint64_t n_channels = r.u64();
    std::vector<ChannelSpec> channels;
    for (std::uint64_t i = 0; i < n_channels; ++i) {
        ChannelSpec c;
        c.name = r.str();
        c.kind = r.u64() ? ChannelSpec::Kind::Discrete : ChannelSpec::Kind::Continuous;
        c.cardinality = static_cast<int>(r.u64());
        channels.push_back(std::move(c));
    }
    const std::uint64_t n_stats = r.u64();
    NormStats stats;
    for (std::uint64_t i = 0; i < n_stats; ++i) {
        const double lo = r.f64();
        const double hi = r.f64();
        stats.emplace_back(lo, hi);
    }

    TfdpmModel m = TfdpmModel::create(cfg, channels, stats);
    const std::uint64_t n_betas = r.u64();
    std::vector<double> betas(n_betas);
    for (auto& b : betas) b = r.f64();
    m.schedule = NoiseSchedule::from_betas(std::move(betas));

    read_tensors(r, m.extractor->params());
    read_tensors(r, m.eps->params());
    if (!r.done()) throw CheckpointError(path + ": trailing bytes in payload");
    m.content_hash = h.hash;
    return m;
}

void save_scheduler_checkpoint(SchedulerModel& model, const std::string& path) {
    if (!model.net) throw CheckpointError("scheduler checkpoint: no network to save");
    io::Writer w;
    w.u64(static_cast<std::uint64_t>(model.net->data_dim()));
    w.u64(static_cast<std::uint64_t>(model.net->cond_dim()));
    w.u64(static_cast<std::uint64_t>(model.net->hidden()));
    write_tensors(w, model.net->params());

    auto fmt = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::map<std::string, std::string> fields;
    fields["tau"] = std::to_string(model.tau);
    fields["alpha_bar_init"] = fmt(model.alpha_bar_init);
    fields["beta_init"] = fmt(model.beta_init);
    fields["beta_floor"] = fmt(model.beta_floor);
    fields["base_hash"] = model.base_hash;
    write_checkpoint_file(path, kSchedMagic, fields, w.bytes(), &model.content_hash);
}

SchedulerModel load_scheduler_checkpoint(const std::string& path,
                                         const std::string& expect_base_hash) {
    Header h = read_checkpoint_file(path, kSchedMagic);

    SchedulerModel m;
    try {
        m.tau = std::stoi(h.fields.at("tau"));
        m.alpha_bar_init = std::stod(h.fields.at("alpha_bar_init"));
        m.beta_init = std::stod(h.fields.at("beta_init"));
        m.beta_floor = std::stod(h.fields.at("beta_floor"));
        m.base_hash = h.fields.at("base_hash");
    } catch (const std::exception&) {
        throw CheckpointError(path + ": missing or malformed scheduler fields");
    }
    if (!expect_base_hash.empty() && m.base_hash != expect_base_hash)
        throw CheckpointError(path + ": scheduler was trained against checkpoint " + m.base_hash +
                              ", not " + expect_base_hash);

    io::Reader r(h.payload);
    const auto data_dim = static_cast<Eigen::Index>(r.u64());
    const auto cond_dim = static_cast<Eigen::Index>(r.u64());
    const auto hidden = static_cast<Eigen::Index>(r.u64());
    Rng rng(0);
    m.net = std::make_unique<SchedulerNet>(data_dim, cond_dim, hidden, rng);
    read_tensors(r, m.net->params());
    if (!r.done()) throw CheckpointError(path + ": trailing bytes in payload");
    m.content_hash = h.hash;
    return m;
}

}  // namespace tfdpm
