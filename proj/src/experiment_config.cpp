#include "qdqkd/experiment_config.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace qdqkd::cfg {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Field {
    std::string section, key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

double parse_double(const std::string& v) {
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        while (pos < v.size() && std::isspace(uint8_t(v[pos]))) ++pos;
        if (pos != v.size()) throw invalid_input("malformed number '" + v + "'");
        return d;
    } catch (const std::logic_error&) {
        throw invalid_input("malformed number '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& v) {
    try {
        size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        while (pos < v.size() && std::isspace(uint8_t(v[pos]))) ++pos;
        if (pos != v.size()) throw invalid_input("malformed integer '" + v + "'");
        return d;
    } catch (const std::logic_error&) {
        throw invalid_input("malformed integer '" + v + "'");
    }
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw invalid_input("malformed boolean '" + v + "'");
}

std::vector<Field> schema(ExperimentConfig& c) {
    std::vector<Field> f;
    auto dbl = [&](const char* sec, const char* key, double& ref) {
        f.push_back({sec, key, [&ref] { return fmt_double(ref); },
                     [&ref](const std::string& v) { ref = parse_double(v); }});
    };
    auto u64 = [&](const char* sec, const char* key, uint64_t& ref) {
        f.push_back({sec, key, [&ref] { return std::to_string(ref); },
                     [&ref](const std::string& v) { ref = parse_u64(v); }});
    };
    auto bol = [&](const char* sec, const char* key, bool& ref) {
        f.push_back({sec, key, [&ref] { return ref ? std::string("true") : std::string("false"); },
                     [&ref](const std::string& v) { ref = parse_bool(v); }});
    };
    dbl("source", "rep_rate_hz", c.source.rep_rate_hz);
    dbl("source", "pair_prob_epsilon", c.source.pair_prob_epsilon);
    dbl("source", "xx_lifetime_ps", c.source.xx_lifetime_ps);
    dbl("source", "x_lifetime_ps", c.source.x_lifetime_ps);
    dbl("source", "fss_ueV", c.source.fss_ueV);
    dbl("source", "slow_channel_fraction", c.source.slow_channel_fraction);
    dbl("source", "slow_channel_lifetime_ps", c.source.slow_channel_lifetime_ps);
    bol("source", "slow_channel_dephased", c.source.slow_channel_dephased);
    dbl("source", "blink_beta", c.source.blink_beta);
    dbl("source", "blink_off_mean_us", c.source.blink_off_mean_us);
    dbl("source", "multiphoton_prob_xx", c.source.multiphoton_prob_xx);
    dbl("source", "multiphoton_prob_x", c.source.multiphoton_prob_x);
    dbl("source", "fss_drift_ueV_per_hour", c.source.fss_drift_ueV_per_hour);

    dbl("detector", "efficiency", c.detector.efficiency);
    dbl("detector", "jitter_sigma_ps", c.detector.jitter_sigma_ps);
    dbl("detector", "dead_time_ps", c.detector.dead_time_ps);
    dbl("detector", "dark_count_rate_hz", c.detector.dark_count_rate_hz);

    dbl("channel", "arm_efficiency_alice", c.channel.arm_efficiency_alice);
    dbl("channel", "arm_efficiency_bob", c.channel.arm_efficiency_bob);
    dbl("channel", "fiber_length_m", c.channel.fiber_length_m);
    dbl("channel", "polarization_drift_rad_per_hour",
        c.channel.polarization_drift_rad_per_hour);
    dbl("channel", "initial_misalignment_rad", c.channel.initial_misalignment_rad);
    dbl("channel", "dark_count_rate_hz", c.channel.dark_count_rate_hz);
    dbl("channel", "efficiency_decay_per_hour", c.channel.efficiency_decay_per_hour);
    dbl("channel", "reopt_threshold", c.channel.reopt_threshold);

    dbl("tomography", "window_ps", c.tomography.window_ps);
    dbl("tomography", "window_offset_ps", c.tomography.window_offset_ps);
    u64("tomography", "pulses_per_basis", c.tomography.pulses_per_basis);

    dbl("session", "duration_s", c.session.duration_s);
    dbl("session", "block_s", c.session.block_s);
    dbl("session", "accel_factor", c.session.accel_factor);
    dbl("session", "window_ps", c.session.window_ps);
    dbl("session", "window_offset_ps", c.session.window_offset_ps);
    dbl("session", "sample_fraction", c.session.sample_fraction);
    u64("session", "seed", c.session.seed);
    return f;
}

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(uint8_t(s[a]))) ++a;
    while (b > a && std::isspace(uint8_t(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace

ExperimentConfig config_from_text(const std::string& text) {
    ExperimentConfig cfg;
    auto fields = schema(cfg);
    std::map<std::pair<std::string, std::string>, size_t> index;
    for (size_t i = 0; i < fields.size(); ++i)
        index[{fields[i].section, fields[i].key}] = i;

    std::istringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw invalid_input("config line " + std::to_string(lineno) +
                                    ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw invalid_input("config line " + std::to_string(lineno) +
                                ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        const auto it = index.find({section, key});
        if (it == index.end())
            throw invalid_input("config line " + std::to_string(lineno) +
                                ": unknown key '" + section + "." + key + "'");
        fields[it->second].set(value);
    }
    source::validate(cfg.source);
    analysis::validate(cfg.detector);
    qkd::validate(cfg.channel);
    tomo::validate(cfg.tomography);
    if (cfg.session.duration_s <= 0 || cfg.session.block_s <= 0)
        throw invalid_input("session duration and block length must be > 0");
    if (cfg.session.accel_factor < 1)
        throw invalid_input("session accel_factor must be >= 1");
    if (cfg.session.sample_fraction <= 0 || cfg.session.sample_fraction >= 1)
        throw invalid_input("session sample_fraction must be in (0,1)");
    return cfg;
}

std::string config_to_text(const ExperimentConfig& cfg) {
    ExperimentConfig copy = cfg;
    auto fields = schema(copy);
    std::string out, section;
    for (const auto& f : fields) {
        if (f.section != section) {
            if (!out.empty()) out += '\n';
            out += "[" + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get() + "\n";
    }
    return out;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return config_from_text(buf.str());
}

void save_config(const std::string& path, const ExperimentConfig& cfg) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << config_to_text(cfg);
}

std::string resolve_config_path(const std::string& arg) {
    namespace fs = std::filesystem;
    if (fs::exists(arg)) return arg;
    if (const char* dir = std::getenv("QDQKD_CONFIG_DIR")) {
        const fs::path candidate = fs::path(dir) / arg;
        if (fs::exists(candidate)) return candidate.string();
    }
    return arg;  // let the open fail with the original name
}

} // namespace qdqkd::cfg
