#pragma once

// Flat key=value run configuration with # comments. Every key maps onto one
// field of the world, split, training or evaluation settings.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aga/evaluation.hpp"
#include "aga/synth.hpp"
#include "aga/trainer.hpp"

namespace aga {

struct ConfigError : ContractError {
    using ContractError::ContractError;
};

struct RunConfig {
    WorldConfig world;
    SplitSizes sizes;
    TrainConfig train;
    std::size_t heatmap_samples = 2;
    ProbeOptions probe;
};

namespace detail {

struct ConfigField {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end)
        throw ConfigError("config field '" + key + "': cannot parse value '" + text + "'");
    return v;
}

template <class T>
ConfigField size_field(const std::string& key, T RunConfig::*section, std::size_t T::*member) {
    return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = parse_number<std::size_t>(key, v); },
            [=](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}

template <class T>
ConfigField real_field(const std::string& key, T RunConfig::*section, double T::*member) {
    return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = parse_number<double>(key, v); },
            [=](const RunConfig& c) { return fmt_double((c.*section).*member); }};
}

inline ConfigField real_ref(const std::string& key, std::function<double&(RunConfig&)> ref) {
    return {[=](RunConfig& c, const std::string& v) { ref(c) = parse_number<double>(key, v); },
            [=](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); }};
}

inline ConfigField size_ref(const std::string& key, std::function<std::size_t&(RunConfig&)> ref) {
    return {[=](RunConfig& c, const std::string& v) { ref(c) = parse_number<std::size_t>(key, v); },
            [=](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

inline const std::map<std::string, ConfigField>& config_fields() {
    static const std::map<std::string, ConfigField> fields = [] {
        std::map<std::string, ConfigField> f;
        using W = WorldConfig;
        for (auto [k, m] : std::initializer_list<std::pair<const char*, std::size_t W::*>>{
                 {"num_classes", &W::num_classes},
                 {"concepts_per_class", &W::concepts_per_class},
                 {"tokens_per_concept", &W::tokens_per_concept},
                 {"vocab", &W::vocab},
                 {"grid_rows", &W::grid_rows},
                 {"grid_cols", &W::grid_cols},
                 {"max_tokens", &W::max_tokens},
                 {"patch_features", &W::patch_features},
                 {"region_min", &W::region_min},
                 {"region_max", &W::region_max}})
            f.emplace(k, size_field(k, &RunConfig::world, m));
        for (auto [k, m] : std::initializer_list<std::pair<const char*, double W::*>>{
                 {"patch_noise", &W::patch_noise},
                 {"distractor_rate", &W::distractor_rate},
                 {"concept_presence", &W::concept_presence}})
            f.emplace(k, real_field(k, &RunConfig::world, m));
        f.emplace("train_size", size_field("train_size", &RunConfig::sizes, &SplitSizes::train));
        f.emplace("val_size", size_field("val_size", &RunConfig::sizes, &SplitSizes::val));
        f.emplace("test_size", size_field("test_size", &RunConfig::sizes, &SplitSizes::test));

        f.emplace("epochs", size_ref("epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; }));
        f.emplace("batch_size", size_ref("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
        f.emplace("checkpoint_every",
                  size_ref("checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; }));
        f.emplace("hidden", size_ref("hidden", [](RunConfig& c) -> std::size_t& { return c.train.encoder.hidden; }));
        f.emplace("embed_dim",
                  size_ref("embed_dim", [](RunConfig& c) -> std::size_t& { return c.train.encoder.embed_dim; }));
        f.emplace("mix_window",
                  size_ref("mix_window", [](RunConfig& c) -> std::size_t& { return c.train.encoder.mix_window; }));
        f.emplace("lr", real_ref("lr", [](RunConfig& c) -> double& { return c.train.optim.lr; }));
        f.emplace("beta1", real_ref("beta1", [](RunConfig& c) -> double& { return c.train.optim.beta1; }));
        f.emplace("beta2", real_ref("beta2", [](RunConfig& c) -> double& { return c.train.optim.beta2; }));
        f.emplace("adam_eps", real_ref("adam_eps", [](RunConfig& c) -> double& { return c.train.optim.eps; }));
        f.emplace("weight_decay",
                  real_ref("weight_decay", [](RunConfig& c) -> double& { return c.train.optim.weight_decay; }));
        f.emplace("tau1", real_ref("tau1", [](RunConfig& c) -> double& { return c.train.loss.temps.tau1; }));
        f.emplace("tau2", real_ref("tau2", [](RunConfig& c) -> double& { return c.train.loss.temps.tau2; }));
        f.emplace("tau3", real_ref("tau3", [](RunConfig& c) -> double& { return c.train.loss.temps.tau3; }));
        f.emplace("lambda1", real_ref("lambda1", [](RunConfig& c) -> double& { return c.train.loss.weights.lambda1; }));
        f.emplace("lambda2", real_ref("lambda2", [](RunConfig& c) -> double& { return c.train.loss.weights.lambda2; }));
        f.emplace("lambda3", real_ref("lambda3", [](RunConfig& c) -> double& { return c.train.loss.weights.lambda3; }));
        f.emplace("gamma_tg", real_ref("gamma_tg", [](RunConfig& c) -> double& { return c.train.gamma_tg; }));
        f.emplace("gamma_vg", real_ref("gamma_vg", [](RunConfig& c) -> double& { return c.train.gamma_vg; }));
        f.emplace("sigma0", real_ref("sigma0", [](RunConfig& c) -> double& { return c.train.sigma0; }));

        f.emplace("heatmap_samples",
                  size_ref("heatmap_samples", [](RunConfig& c) -> std::size_t& { return c.heatmap_samples; }));
        f.emplace("probe_iterations",
                  size_ref("probe_iterations", [](RunConfig& c) -> std::size_t& { return c.probe.iterations; }));
        f.emplace("probe_lr", real_ref("probe_lr", [](RunConfig& c) -> double& { return c.probe.lr; }));
        f.emplace("probe_l2", real_ref("probe_l2", [](RunConfig& c) -> double& { return c.probe.l2; }));
        return f;
    }();
    return fields;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, f] : detail::config_fields()) keys.push_back(k);
    return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& fields = detail::config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("config field '" + key + "': unknown key");
    it->second.set(cfg, value);
}

/// Applies `key = value` lines on top of `cfg`. Later lines win.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg;
    apply_config_text(cfg, ss.str());
    return cfg;
}

/// Checks every section. Messages name the offending field.
inline void validate_config(const RunConfig& cfg) {
    try {
        cfg.world.validate();
        cfg.train.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    if (cfg.sizes.train == 0) throw ConfigError("config field 'train_size': must be positive");
    if (cfg.sizes.test == 0) throw ConfigError("config field 'test_size': must be positive");
}

/// Canonical rendering: every key in sorted order with round-trip precision.
inline std::string render_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& [k, f] : detail::config_fields()) out += k + " = " + f.get(cfg) + "\n";
    return out;
}

}  // namespace aga
