#pragma once

#include <array>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "segbench/blocks.hpp"
#include "segbench/losses.hpp"
#include "segbench/synth.hpp"
#include "segbench/train.hpp"

namespace segbench {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Everything one run needs, mirrored from the module configs. Parsed from a
// sectioned key=value file; unknown sections or keys are rejected before any
// compute, and all defaults are sufficient for a zero-edit run.
struct RunConfig {
    // [data]
    SceneSpec scene;
    int64_t train_count = 96;
    int64_t val_count = 32;
    uint64_t data_seed = 9000;
    // [model]
    NormPolicy policy = NormPolicy::PLAIN_BN;
    std::vector<int> widths = {8, 16};
    std::array<bool, 3> sn_branches = {true, true, true};
    double eps = 1e-5;
    double bn_momentum = 0.1;
    uint64_t model_seed = 1;
    // [loss]
    LossConfig loss{1.0, 0.0}; // bce+dice baseline
    bool lovasz_per_image = true;
    // [optim]
    OptimConfig optim;
    char train_modality = 'A';
    int eval_interval = 0;
    uint64_t train_seed = 1;
    // [report]
    std::string out_dir; // empty: flag, then $SEGBENCH_OUT, then "runs"
    double floor = 1e-8;

    std::string resolved_out_dir() const {
        if (!out_dir.empty()) return out_dir;
        if (const char* env = std::getenv("SEGBENCH_OUT")) return env;
        return "runs";
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return d;
    } catch (...) {
        throw ConfigError("config: key '" + key + "' expects a real, got '" + v + "'");
    }
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        int64_t d = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return d;
    } catch (...) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

inline std::vector<double> parse_reals(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_real(key, trim(tok)));
    if (out.empty()) throw ConfigError("config: key '" + key + "' expects a comma list");
    return out;
}

inline std::vector<int> parse_ints(const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (double d : parse_reals(key, v)) out.push_back(static_cast<int>(d));
    return out;
}

} // namespace detail

inline RunConfig parse_run_config(std::istream& is) {
    RunConfig cfg;
    static const std::map<std::string, std::set<std::string>> schema = {
        {"data",
         {"height", "width", "frequencies", "train_count", "val_count", "seed", "noise", "invert_b",
          "mix", "gain_lo", "gain_hi", "offset_lo", "offset_hi"}},
        {"model", {"policy", "widths", "sn_branches", "eps", "momentum", "seed"}},
        {"loss", {"lambda1", "lambda2", "lovasz_per_image"}},
        {"optim",
         {"base_lr", "momentum", "weight_decay", "warmup_iters", "constant_iters", "poly_iters",
          "poly_power", "batch_size", "decay_norm_params", "seed", "train_modality", "eval_interval"}},
        {"report", {"out_dir", "floor"}},
    };

    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError("config:" + std::to_string(lineno) + ": bad section line");
            section = s.substr(1, s.size() - 2);
            if (!schema.count(section))
                throw ConfigError("config:" + std::to_string(lineno) + ": unknown section [" + section + "]");
            continue;
        }
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config:" + std::to_string(lineno) + ": expected key=value, got '" + s + "'");
        std::string key = detail::trim(s.substr(0, eq));
        std::string val = detail::trim(s.substr(eq + 1));
        if (section.empty())
            throw ConfigError("config:" + std::to_string(lineno) + ": key '" + key + "' outside any section");
        if (!schema.at(section).count(key))
            throw ConfigError("config:" + std::to_string(lineno) + ": unknown key '" + key + "' in [" +
                              section + "]");
        const std::string qual = section + "." + key;

        using namespace detail;
        if (section == "data") {
            if (key == "height") cfg.scene.height = static_cast<int>(parse_int(qual, val));
            else if (key == "width") cfg.scene.width = static_cast<int>(parse_int(qual, val));
            else if (key == "frequencies") cfg.scene.frequencies = parse_reals(qual, val);
            else if (key == "train_count") cfg.train_count = parse_int(qual, val);
            else if (key == "val_count") cfg.val_count = parse_int(qual, val);
            else if (key == "seed") cfg.data_seed = static_cast<uint64_t>(parse_int(qual, val));
            else if (key == "noise") cfg.scene.noise = parse_real(qual, val);
            else if (key == "invert_b") cfg.scene.invert_b = parse_bool(qual, val);
            else if (key == "mix") {
                std::vector<double> m = parse_reals(qual, val);
                if (m.size() != 3) throw ConfigError("config: 'data.mix' expects three reals");
                cfg.scene.mix = {m[0], m[1], m[2]};
            } else if (key == "gain_lo") cfg.scene.gain_lo = parse_real(qual, val);
            else if (key == "gain_hi") cfg.scene.gain_hi = parse_real(qual, val);
            else if (key == "offset_lo") cfg.scene.offset_lo = parse_real(qual, val);
            else if (key == "offset_hi") cfg.scene.offset_hi = parse_real(qual, val);
        } else if (section == "model") {
            if (key == "policy") cfg.policy = policy_from_string(val);
            else if (key == "widths") cfg.widths = parse_ints(qual, val);
            else if (key == "sn_branches") cfg.sn_branches = detail::branches_from_str(val);
            else if (key == "eps") cfg.eps = parse_real(qual, val);
            else if (key == "momentum") cfg.bn_momentum = parse_real(qual, val);
            else if (key == "seed") cfg.model_seed = static_cast<uint64_t>(parse_int(qual, val));
        } else if (section == "loss") {
            if (key == "lambda1") cfg.loss.lambda1 = parse_real(qual, val);
            else if (key == "lambda2") cfg.loss.lambda2 = parse_real(qual, val);
            else if (key == "lovasz_per_image") cfg.lovasz_per_image = parse_bool(qual, val);
        } else if (section == "optim") {
            if (key == "base_lr") cfg.optim.base_lr = parse_real(qual, val);
            else if (key == "momentum") cfg.optim.momentum = parse_real(qual, val);
            else if (key == "weight_decay") cfg.optim.weight_decay = parse_real(qual, val);
            else if (key == "warmup_iters") cfg.optim.warmup_iters = static_cast<int>(parse_int(qual, val));
            else if (key == "constant_iters")
                cfg.optim.constant_iters = static_cast<int>(parse_int(qual, val));
            else if (key == "poly_iters") cfg.optim.poly_iters = static_cast<int>(parse_int(qual, val));
            else if (key == "poly_power") cfg.optim.poly_power = parse_real(qual, val);
            else if (key == "batch_size") cfg.optim.batch_size = static_cast<int>(parse_int(qual, val));
            else if (key == "decay_norm_params") cfg.optim.decay_norm_params = parse_bool(qual, val);
            else if (key == "seed") cfg.train_seed = static_cast<uint64_t>(parse_int(qual, val));
            else if (key == "train_modality") {
                if (val != "A" && val != "B")
                    throw ConfigError("config: 'optim.train_modality' expects A or B, got '" + val + "'");
                cfg.train_modality = val[0];
            } else if (key == "eval_interval") cfg.eval_interval = static_cast<int>(parse_int(qual, val));
        } else if (section == "report") {
            if (key == "out_dir") cfg.out_dir = val;
            else if (key == "floor") cfg.floor = parse_real(qual, val);
        }
    }
    try {
        cfg.scene.validate();
        cfg.optim.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (cfg.floor <= 0) throw ConfigError("config: 'report.floor' must be positive");
    if (cfg.train_count < 1 || cfg.val_count < 1)
        throw ConfigError("config: train_count and val_count must be >= 1");
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open file '" + path + "'");
    return parse_run_config(is);
}

// The documented defaults; parsing this text reproduces RunConfig{}.
inline void write_default_config(std::ostream& os) {
    RunConfig d;
    os << "# segbench run configuration (every key shown with its default)\n";
    os << "[data]\n";
    os << "height = " << d.scene.height << "\n";
    os << "width = " << d.scene.width << "\n";
    os << "# expected pixel fraction per foreground class (background is the remainder);\n";
    os << "# keep at least one class rare (< 0.01)\n";
    os << "frequencies = 0.08,0.06,0.05,0.04,0.03,0.005\n";
    os << "train_count = " << d.train_count << "\n";
    os << "val_count = " << d.val_count << "\n";
    os << "seed = " << d.data_seed << "\n";
    os << "noise = " << d.scene.noise << "\n";
    os << "# modality B: mix . rgb, optional inversion, per-image affine jitter\n";
    os << "invert_b = true\n";
    os << "mix = 0.299,0.587,0.114\n";
    os << "gain_lo = " << d.scene.gain_lo << "\n";
    os << "gain_hi = " << d.scene.gain_hi << "\n";
    os << "offset_lo = " << d.scene.offset_lo << "\n";
    os << "offset_hi = " << d.scene.offset_hi << "\n";
    os << "\n[model]\n";
    os << "# PLAIN_BN | IBN_A | IBN_B | IBN_S\n";
    os << "policy = " << to_string(d.policy) << "\n";
    os << "widths = 8,16\n";
    os << "sn_branches = IN,LN,BN\n";
    os << "eps = 1e-5\n";
    os << "momentum = " << d.bn_momentum << "\n";
    os << "seed = " << d.model_seed << "\n";
    os << "\n[loss]\n";
    os << "lambda1 = " << d.loss.lambda1 << "\n";
    os << "lambda2 = " << d.loss.lambda2 << "\n";
    os << "lovasz_per_image = true\n";
    os << "\n[optim]\n";
    os << "base_lr = " << d.optim.base_lr << "\n";
    os << "momentum = " << d.optim.momentum << "\n";
    os << "weight_decay = 5e-4\n";
    os << "warmup_iters = " << d.optim.warmup_iters << "\n";
    os << "constant_iters = " << d.optim.constant_iters << "\n";
    os << "poly_iters = " << d.optim.poly_iters << "\n";
    os << "poly_power = " << d.optim.poly_power << "\n";
    os << "batch_size = " << d.optim.batch_size << "\n";
    os << "decay_norm_params = true\n";
    os << "seed = " << d.train_seed << "\n";
    os << "train_modality = A\n";
    os << "eval_interval = " << d.eval_interval << "\n";
    os << "\n[report]\n";
    os << "# empty out_dir falls back to $SEGBENCH_OUT, then ./runs\n";
    os << "out_dir =\n";
    os << "floor = 1e-8\n";
}

} // namespace segbench
