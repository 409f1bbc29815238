#include "dawn/config.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dawn {

namespace {

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    size_t e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

double parse_num(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

std::string num_str(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = [] {
        std::map<std::string, Field> m;
        auto add_int = [&](const std::string& k, int RunConfig::*p) {
            m[k] = {[k, p](RunConfig& c, const std::string& v) { c.*p = parse_int(k, v); },
                    [p](const RunConfig& c) { return std::to_string(c.*p); }};
        };
        auto add_num = [&](const std::string& k, double RunConfig::*p) {
            m[k] = {[k, p](RunConfig& c, const std::string& v) { c.*p = parse_num(k, v); },
                    [p](const RunConfig& c) { return num_str(c.*p); }};
        };
        auto add_str = [&](const std::string& k, std::string RunConfig::*p) {
            m[k] = {[p](RunConfig& c, const std::string& v) { c.*p = v; },
                    [p](const RunConfig& c) { return c.*p; }};
        };
        m["seed"] = {[](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }};
        add_int("threads", &RunConfig::threads);
        add_str("out", &RunConfig::out);
        add_str("data", &RunConfig::data);
        add_int("episodes", &RunConfig::episodes);
        add_str("stage", &RunConfig::stage);
        add_str("variant", &RunConfig::variant);
        add_int("steps", &RunConfig::steps);
        add_num("lr", &RunConfig::lr);
        add_num("weight_decay", &RunConfig::weight_decay);
        add_int("batch", &RunConfig::batch);
        add_str("schedule", &RunConfig::schedule);
        add_int("t_train", &RunConfig::t_train);
        add_num("d_max", &RunConfig::d_max);
        add_int("kmin", &RunConfig::kmin);
        add_int("kmax", &RunConfig::kmax);
        add_int("use_gripper", &RunConfig::use_gripper);
        add_str("motion_source", &RunConfig::motion_source);
        add_int("sample_every", &RunConfig::sample_every);
        add_str("vae", &RunConfig::vae_ckpt);
        add_str("motion", &RunConfig::motion_ckpt);
        add_str("action", &RunConfig::action_ckpt);
        add_int("eval_episodes", &RunConfig::eval_episodes);
        add_int("chain", &RunConfig::chain);
        add_int("max_steps", &RunConfig::max_steps);
        add_int("replan", &RunConfig::replan);
        add_int("k", &RunConfig::k_infer);
        add_int("n_motion", &RunConfig::n_motion);
        add_int("n_action", &RunConfig::n_action);
        add_int("oracle_flow", &RunConfig::oracle_flow);
        add_str("suite", &RunConfig::suite);
        add_str("steps_sweep", &RunConfig::steps_sweep);
        add_int("vis", &RunConfig::vis);
        add_str("episode_file", &RunConfig::episode_file);
        add_int("obs_index", &RunConfig::obs_index);
        add_int("frames", &RunConfig::frames);
        return m;
    }();
    return f;
}

}  // namespace

const std::vector<std::string>& RunConfig::known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& [name, _] : fields()) k.push_back(name);
        return k;
    }();
    return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key: " + key);
    it->second.set(*this, value);
}

std::string RunConfig::get(const std::string& key) const {
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key: " + key);
    return it->second.get(*this);
}

std::string RunConfig::resolved() const {
    std::ostringstream os;
    for (const auto& [name, f] : fields()) os << name << " = " << f.get(*this) << "\n";
    return os.str();
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void RunConfig::write_resolved(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream f(std::filesystem::path(dir) / "run.config");
    if (!f) throw IoError("cannot write resolved config in " + dir);
    f << resolved();
}

int RunConfig::default_steps() const {
    if (steps >= 0) return steps;
    if (stage == "vae") return 3000;
    if (stage == "motion") return 20000;
    if (stage == "action") return 5000;
    return 1000;
}

}  // namespace dawn
