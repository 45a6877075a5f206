#pragma once

// Run configuration: one flat key=value namespace covering data paths, the
// model, training, loss, carbon and evaluation settings.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "downscale/evaluation.hpp"
#include "downscale/fields.hpp"
#include "downscale/io.hpp"
#include "downscale/models.hpp"
#include "downscale/training.hpp"

namespace downscale {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Every accepted key with its default value.
inline KeyValues default_config() {
    KeyValues kv{
        {"seed", "0"},
        {"data.train", "data/train"},
        {"data.val", ""},
        {"data.test", "data/test"},
        {"synth.samples", "8"},
        {"synth.ny", "64"},
        {"synth.nx", "64"},
        {"synth.profile", "default"},
        {"synth.spacing_m", "25000"},
        {"train.lr", "0.0001"},
        {"train.epochs", "50"},
        {"train.batch_size", "1"},
        {"train.beta1", "0.9"},
        {"train.beta2", "0.999"},
        {"train.eps", "1e-08"},
        {"train.channels", "full"},
        {"loss.use_mass_loss", "true"},
        {"loss.mass_weight", "1"},
        {"loss.mass_convention", "mean_preserving"},
        {"loss.per_variable", "true"},
        {"loss.mass_units", "normalized"},
        {"carbon.device_power_watts", "100"},
        {"carbon.emission_factor_kg_per_kwh", "0.7"},
        {"eval.checkpoints", ""},
        {"eval.include_bilinear", "true"},
        {"eval.variables", "surface"},
        {"eval.heatmap_samples", "0"},
        {"eval.heatmap_variable", "t2m"},
    };
    // in_channels follows train.channels and scale is fixed, so neither is a key
    for (const auto& [k, v] : spec_to_kv(ModelSpec{}))
        if (k != "in_channels" && k != "scale") kv["model." + k] = v;
    return kv;
}

inline void set_key(KeyValues& cfg, const std::string& key, const std::string& value) {
    auto it = cfg.find(key);
    if (it == cfg.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
}

/// Applies a `key=value` override.
inline void apply_override(KeyValues& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

/// Defaults overlaid with a config file. Unknown keys are rejected.
inline KeyValues load_config(const std::filesystem::path& path) {
    KeyValues cfg = default_config();
    KeyValues file;
    try {
        file = read_key_values(path);
    } catch (const FormatError& e) {
        if (e.kind() == FormatError::Kind::io) throw;
        throw ConfigError(e.what());
    }
    for (const auto& [k, v] : file) {
        if (!cfg.count(k)) throw ConfigError(path.string() + ": unknown config key '" + k + "'");
        cfg[k] = v;
    }
    return cfg;
}

namespace detail {

template <typename F>
auto config_value(const KeyValues& cfg, const std::string& key, F parse) {
    auto it = cfg.find(key);
    if (it == cfg.end()) throw ConfigError("missing config key '" + key + "'");
    try {
        return parse(it->second);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

}  // namespace detail

inline std::string cfg_string(const KeyValues& cfg, const std::string& key) {
    return detail::config_value(cfg, key, [](const std::string& s) { return s; });
}

inline double cfg_double(const KeyValues& cfg, const std::string& key) {
    return detail::config_value(cfg, key, [&](const std::string& s) { return parse_double(s, key); });
}

inline std::size_t cfg_size(const KeyValues& cfg, const std::string& key) {
    return detail::config_value(cfg, key, [&](const std::string& s) {
        const long long v = parse_int(s, key);
        if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    });
}

inline bool cfg_bool(const KeyValues& cfg, const std::string& key) {
    return detail::config_value(cfg, key, [&](const std::string& s) { return parse_bool(s, key); });
}

inline std::uint64_t cfg_seed(const KeyValues& cfg) {
    return detail::config_value(cfg, "seed", [](const std::string& s) {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != s.size() || s.starts_with('-')) throw ConfigError("config key 'seed': not an unsigned integer");
        return static_cast<std::uint64_t>(v);
    });
}

inline std::vector<std::string> cfg_list(const KeyValues& cfg, const std::string& key) {
    std::vector<std::string> out;
    std::string s = cfg_string(cfg, key);
    std::size_t start = 0;
    while (start <= s.size()) {
        auto end = s.find(',', start);
        if (end == std::string::npos) end = s.size();
        auto item = trim(std::string_view(s).substr(start, end - start));
        if (!item.empty()) out.push_back(item);
        start = end + 1;
    }
    return out;
}

inline ChannelMask cfg_channels(const KeyValues& cfg) {
    return detail::config_value(cfg, "train.channels", [](const std::string& s) { return parse_mask(s); });
}

inline ModelSpec model_spec(const KeyValues& cfg) {
    KeyValues kv;
    for (const auto& [k, v] : cfg)
        if (k.starts_with("model.")) kv[k.substr(6)] = v;
    kv["in_channels"] = std::to_string(vars_for(cfg_channels(cfg)).size());
    kv["scale"] = "2";
    try {
        ModelSpec s = spec_from_kv(kv);
        validate(s);
        return s;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

inline TrainConfig train_config(const KeyValues& cfg) {
    TrainConfig t;
    t.lr = cfg_double(cfg, "train.lr");
    t.epochs = cfg_size(cfg, "train.epochs");
    t.batch_size = cfg_size(cfg, "train.batch_size");
    t.beta1 = cfg_double(cfg, "train.beta1");
    t.beta2 = cfg_double(cfg, "train.beta2");
    t.eps = cfg_double(cfg, "train.eps");
    t.channels = cfg_channels(cfg);
    t.seed = cfg_seed(cfg);
    try {
        validate(t);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return t;
}

inline LossConfig loss_config(const KeyValues& cfg) {
    LossConfig l;
    l.use_mass_loss = cfg_bool(cfg, "loss.use_mass_loss");
    l.mass_weight = cfg_double(cfg, "loss.mass_weight");
    l.convention = detail::config_value(cfg, "loss.mass_convention",
                                        [](const std::string& s) { return parse_convention(s); });
    l.per_variable = cfg_bool(cfg, "loss.per_variable");
    l.units = detail::config_value(cfg, "loss.mass_units", [](const std::string& s) { return parse_units(s); });
    try {
        validate(l);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return l;
}

inline CarbonConfig carbon_config(const KeyValues& cfg) {
    CarbonConfig c{cfg_double(cfg, "carbon.device_power_watts"),
                   cfg_double(cfg, "carbon.emission_factor_kg_per_kwh")};
    try {
        validate(c);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

}  // namespace downscale
