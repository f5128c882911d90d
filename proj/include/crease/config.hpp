#pragma once

// Flat key = value configuration with an `include <path>` directive.
// Later assignments override earlier ones; includes resolve relative to the
// including file. Every key must be known to defaults().

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crease/image.hpp"

namespace crease {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

inline std::uint64_t hash_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + p.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return fnv1a64(buf.str());
}

class Config {
public:
    /// Full-scale defaults. Sizes that are not fixed by the method itself
    /// (image size, widths, batch sizes) are ordinary engineering choices.
    static Config defaults() {
        Config c;
        c.values_ = {
            {"seed", "0"},
            // corpus
            {"corpus.subjects", "247"},
            {"corpus.poses", "10"},
            {"corpus.image_size", "32"},
            {"corpus.test_subjects", "100"},
            {"corpus.test_poses", "10"},
            // pairs
            {"pairs.strategy", "permute_aug"},
            {"pairs.aug_per_subject", "100"},
            // denoiser network
            {"denoiser.base_channels", "32"},
            {"denoiser.channel_multipliers", "1,2,4"},
            {"denoiser.time_embed_dim", "128"},
            // bridge training / sampling
            {"bridge.T", "1000"},
            {"bridge.sample_steps", "200"},
            {"bridge.variance_scale", "1.0"},
            {"bridge.sampler", "posterior"},
            {"bridge.epochs", "200"},
            {"bridge.lr", "1e-4"},
            {"bridge.ema_decay", "0.995"},
            {"bridge.batch_size", "16"},
            // subject-specific sampling
            {"ssgm.variations_per_pose", "5"},
            {"ssgm.flag_percentile", "5"},
            // unconditional model
            {"ddpm.T", "1000"},
            {"ddpm.sample_steps", "1000"},
            {"ddpm.epochs", "200"},
            {"ddpm.lr", "1e-4"},
            {"ddpm.ema_decay", "0.995"},
            {"ddpm.batch_size", "16"},
            // subject-agnostic sampling
            {"sagm.identities", "247"},
            {"sagm.poses_per_identity", "11"},
            {"sagm.leak_fmr", "1e-3"},
            // verifier
            {"verifier.embed_dim", "512"},
            {"verifier.width", "32"},
            {"verifier.adaface_m", "0.4"},
            {"verifier.adaface_h", "0.33"},
            {"verifier.adaface_s", "64.0"},
            {"verifier.focal_gamma", "2.0"},
            {"verifier.epochs", "40"},
            {"verifier.lr", "1e-3"},
            {"verifier.batch_size", "64"},
            {"verifier.aug_copies", "1"},
            // evaluation
            {"eval.enrol_poses", "1"},
            {"eval.fmr_targets", "1e-3,1e-4"},
            {"eval.det_points", "200"},
        };
        return c;
    }

    /// defaults() overlaid with the file (and its includes).
    static Config load(const std::filesystem::path& file) {
        Config c = defaults();
        std::set<std::filesystem::path> stack;
        c.load_into(file, stack);
        return c;
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw ValidationError("unknown config key '" + key + "'");
        values_[key] = value;
    }

    /// key=value overrides, e.g. from the command line
    void apply_overrides(const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ValidationError("override '" + kv + "' is not key=value");
            set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
        }
    }

    [[nodiscard]] const std::string& str(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
        return it->second;
    }

    [[nodiscard]] long long integer(const std::string& key) const {
        const auto& v = str(key);
        try {
            std::size_t pos = 0;
            const long long r = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::logic_error&) {
            throw ValidationError("config key '" + key + "' expects an integer, got '" + v + "'");
        }
    }

    [[nodiscard]] int positive(const std::string& key) const {
        const auto v = integer(key);
        if (v <= 0) throw ValidationError("config key '" + key + "' must be positive");
        return static_cast<int>(v);
    }

    [[nodiscard]] double real(const std::string& key) const {
        const auto& v = str(key);
        try {
            std::size_t pos = 0;
            const double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::logic_error&) {
            throw ValidationError("config key '" + key + "' expects a real, got '" + v + "'");
        }
    }

    [[nodiscard]] std::vector<double> reals(const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                out.push_back(std::stod(trim(item)));
            } catch (const std::logic_error&) {
                throw ValidationError("config key '" + key + "' expects a comma-separated list of reals");
            }
        }
        if (out.empty()) throw ValidationError("config key '" + key + "' is empty");
        return out;
    }

    [[nodiscard]] std::vector<int> integers(const std::string& key) const {
        std::vector<int> out;
        for (double v : reals(key)) {
            if (v != static_cast<int>(v)) throw ValidationError("config key '" + key + "' expects integers");
            out.push_back(static_cast<int>(v));
        }
        return out;
    }

    [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

    /// FNV-1a 64 over the sorted "key=value\n" serialization.
    [[nodiscard]] std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [k, v] : values_) h = fnv1a64(k + "=" + v + "\n", h);
        return h;
    }

    [[nodiscard]] std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

private:
    std::map<std::string, std::string> values_;

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    void load_into(const std::filesystem::path& file, std::set<std::filesystem::path>& stack) {
        const auto canon = std::filesystem::weakly_canonical(file);
        if (stack.count(canon)) throw ValidationError("config include cycle at " + file.string());
        std::ifstream in(file);
        if (!in) throw ValidationError("cannot open config " + file.string());
        stack.insert(canon);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto where = file.string() + ":" + std::to_string(lineno) + ": ";
            if (line.rfind("include", 0) == 0 && line.find('=') == std::string::npos) {
                const auto target = trim(line.substr(7));
                if (target.empty()) throw ValidationError(where + "include needs a path");
                load_into(file.parent_path() / target, stack);
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ValidationError(where + "expected 'key = value'");
            const auto key = trim(line.substr(0, eq));
            if (!values_.count(key)) throw ValidationError(where + "unknown config key '" + key + "'");
            values_[key] = trim(line.substr(eq + 1));
        }
        stack.erase(canon);
    }
};

/// Run-log written next to every artifact: enough to replay the run.
struct RunLog {
    std::string command;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<std::pair<std::string, std::string>> inputs;  // path, content hash
    std::vector<std::string> outputs;
    double wall_time_s = 0.0;
    nlohmann::json extra = nlohmann::json::object();

    void add_input(const std::filesystem::path& p) {
        inputs.emplace_back(p.string(), hex64(hash_file(p)));
    }

    void write(const std::filesystem::path& file) const {
        nlohmann::json j;
        j["command"] = command;
        j["seed"] = seed;
        j["config_hash"] = config_hash;
        j["inputs"] = nlohmann::json::array();
        for (const auto& [p, h] : inputs) j["inputs"].push_back({{"path", p}, {"hash", h}});
        j["outputs"] = outputs;
        j["wall_time_s"] = wall_time_s;
        j["extra"] = extra;
        if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
        std::ofstream out(file);
        if (!out) throw std::runtime_error("cannot write run-log " + file.string());
        out << j.dump(2) << '\n';
    }
};

class WallTimer {
public:
    [[nodiscard]] double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace crease
