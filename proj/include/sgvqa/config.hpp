#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgvqa/corpus.hpp"
#include "sgvqa/trainer.hpp"

namespace sgvqa {

/// Invalid configuration; `path` names the offending field ("" for the file).
class ConfigError : public std::runtime_error {
   public:
    ConfigError(std::string path, const std::string& what)
        : std::runtime_error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

   private:
    std::string path_;
};

struct EvalOptions {
    std::string split = "test";
    std::string checkpoint;  // empty: <out>/train/checkpoint.json
};

struct AblateOptions {
    std::string split = "test";
    double jitter_fraction = 0.6;
    double crop_sigma = 0.05;
    double crop_margin = 0.1;
};

struct ProbeOptions {
    std::string split = "test";
    double feature_sigma = 1.0;
    double question_noise = 0.5;
};

struct SweepOptions {
    std::vector<double> fractions{0.2, 0.5, 1.0};
};

struct GradcheckOptions {
    std::string preset = "desk";
    double eps = 1e-5;
    double tolerance = 1e-4;
    int max_coords = 6;  // per tensor; 0 checks all
    int items = 2;
    bool all_variants = true;  // otherwise only train.loss
};

struct ExperimentConfig {
    CorpusConfig corpus;
    TrainConfig train;
    EvalOptions eval;
    AblateOptions ablate;
    ProbeOptions probe;
    SweepOptions sweep;
    GradcheckOptions gradcheck;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalOptions, split, checkpoint)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AblateOptions, split, jitter_fraction, crop_sigma, crop_margin)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeOptions, split, feature_sigma, question_noise)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SweepOptions, fractions)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GradcheckOptions, preset, eps, tolerance, max_coords, items,
                                                all_variants)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, corpus, train, eval, ablate, probe, sweep, gradcheck)

inline Split split_from_string(std::string_view s) {
    for (Split sp : {Split::train, Split::val, Split::test})
        if (to_string(sp) == s) return sp;
    throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

namespace detail {

inline std::string type_label(const json& j) {
    switch (j.type()) {
        case json::value_t::object: return "object";
        case json::value_t::array: return "array";
        case json::value_t::string: return "string";
        case json::value_t::boolean: return "boolean";
        case json::value_t::number_integer:
        case json::value_t::number_unsigned: return "integer";
        case json::value_t::number_float: return "number";
        case json::value_t::null: return "null";
        default: return "value";
    }
}

/// Does `v` fit where the schema holds `ref`? Integers are accepted for reals.
inline bool compatible(const json& ref, const json& v) {
    if (ref.is_number_float()) return v.is_number();
    if (ref.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    if (ref.is_number_integer()) return v.is_number_integer();
    return ref.type() == v.type();
}

inline std::string join(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

/// Checks `user` against the default-valued `schema`: every key must exist
/// and every leaf must have a compatible type.
inline void check_against(const json& schema, const json& user, const std::string& path) {
    if (schema.is_object()) {
        if (!user.is_object()) throw ConfigError(path, "expected object, got " + type_label(user));
        for (auto it = user.begin(); it != user.end(); ++it) {
            const std::string p = join(path, it.key());
            if (!schema.contains(it.key())) throw ConfigError(p, "unknown key");
            check_against(schema.at(it.key()), it.value(), p);
        }
        return;
    }
    if (schema.is_array()) {
        if (!user.is_array()) throw ConfigError(path, "expected array, got " + type_label(user));
        if (!schema.empty())
            for (std::size_t i = 0; i < user.size(); ++i)
                if (!compatible(schema[0], user[i]))
                    throw ConfigError(path + "[" + std::to_string(i) + "]",
                                      "expected " + type_label(schema[0]) + ", got " + type_label(user[i]));
        return;
    }
    if (!compatible(schema, user)) throw ConfigError(path, "expected " + type_label(schema) + ", got " + type_label(user));
}

inline std::string path_of(const json::json_pointer& ptr) {
    std::string s = ptr.to_string();
    std::replace(s.begin(), s.end(), '/', '.');
    return s.empty() ? s : s.substr(1);
}

}  // namespace detail

/// Parses one `key=value` override into the config tree. The value is read
/// as JSON when possible and as a bare string otherwise.
inline void apply_override(json& tree, const json& schema, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("", "override '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    std::string ptr;
    for (std::size_t i = 0, j; i <= key.size(); i = j + 1) {
        j = key.find('.', i);
        if (j == std::string::npos) j = key.size();
        if (j == i) throw ConfigError(key, "empty path segment");
        ptr += "/" + key.substr(i, j - i);
    }
    const json::json_pointer jp(ptr);
    if (!schema.contains(jp)) throw ConfigError(key, "unknown key");
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    // bare words such as variant=global must stay strings even if they look like JSON literals elsewhere
    if (schema.at(jp).is_string() && !value.is_string()) value = raw;
    detail::check_against(schema.at(jp), value, key);
    tree[jp] = value;
}

inline void validate(const ExperimentConfig& c) {
    try {
        validate(c.corpus);
    } catch (const std::invalid_argument& e) {
        const std::string m = e.what();
        throw ConfigError(m.substr(0, m.find(':')), m.substr(m.find(':') + 2));
    }
    try {
        c.train.validate("train.");
    } catch (const std::invalid_argument& e) {
        const std::string m = e.what();
        throw ConfigError(m.substr(0, m.find(':')), m.substr(m.find(':') + 2));
    }
    const auto dims = dims_for(c.train.preset);
    if (dims.node != static_cast<std::size_t>(c.corpus.node_dim))
        throw ConfigError("corpus.node_dim", "must equal the node width of preset '" +
                                                 std::string(to_string(c.train.preset)) + "' (" +
                                                 std::to_string(dims.node) + ")");
    auto check_split = [](const std::string& path, const std::string& s) {
        try {
            split_from_string(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path, e.what());
        }
    };
    check_split("eval.split", c.eval.split);
    check_split("ablate.split", c.ablate.split);
    check_split("probe.split", c.probe.split);
    if (!(c.ablate.jitter_fraction >= 0 && c.ablate.jitter_fraction <= 1))
        throw ConfigError("ablate.jitter_fraction", "must be in [0, 1]");
    if (c.ablate.crop_sigma < 0) throw ConfigError("ablate.crop_sigma", "must be >= 0");
    if (!(c.ablate.crop_margin >= 0 && c.ablate.crop_margin < 0.5))
        throw ConfigError("ablate.crop_margin", "must be in [0, 0.5)");
    if (c.probe.feature_sigma < 0) throw ConfigError("probe.feature_sigma", "must be >= 0");
    if (!(c.probe.question_noise >= 0 && c.probe.question_noise <= 1))
        throw ConfigError("probe.question_noise", "must be in [0, 1]");
    if (c.sweep.fractions.empty()) throw ConfigError("sweep.fractions", "must not be empty");
    for (std::size_t i = 0; i < c.sweep.fractions.size(); ++i) {
        const double f = c.sweep.fractions[i];
        if (!(f > 0 && f <= 1)) throw ConfigError("sweep.fractions[" + std::to_string(i) + "]", "must be in (0, 1]");
        if (i && f <= c.sweep.fractions[i - 1]) throw ConfigError("sweep.fractions", "must be strictly ascending");
    }
    try {
        preset_from_string(c.gradcheck.preset);
    } catch (const std::invalid_argument& e) {
        throw ConfigError("gradcheck.preset", e.what());
    }
    if (c.gradcheck.eps < 1e-7 || c.gradcheck.eps > 1e-3) throw ConfigError("gradcheck.eps", "must be in [1e-7, 1e-3]");
    if (!(c.gradcheck.tolerance > 0)) throw ConfigError("gradcheck.tolerance", "must be > 0");
    if (c.gradcheck.max_coords < 0) throw ConfigError("gradcheck.max_coords", "must be >= 0");
    if (c.gradcheck.items < 1) throw ConfigError("gradcheck.items", "must be positive");
}

/// Defaults, then the file (if any), then overrides; the result is validated.
inline ExperimentConfig parse_config_json(const json& file, const std::vector<std::string>& overrides = {}) {
    const json schema = ExperimentConfig{};
    detail::check_against(schema, file, "");
    json tree = schema;
    tree.merge_patch(file);
    for (const auto& o : overrides) apply_override(tree, schema, o);
    ExperimentConfig c;
    try {
        c = tree.get<ExperimentConfig>();
    } catch (const json::exception& e) {
        // enum fields accept only their listed names
        throw ConfigError("", std::string("cannot read config: ") + e.what());
    }
    // enum strings that nlohmann silently maps to the first value
    auto check_enum = [&](const char* ptr, auto parse) {
        const json::json_pointer jp(ptr);
        try {
            parse(tree.at(jp).template get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(detail::path_of(jp), e.what());
        }
    };
    check_enum("/train/loss/variant", [](const std::string& s) { variant_from_string(s); });
    check_enum("/train/preset", [](const std::string& s) { preset_from_string(s); });
    for (std::size_t i = 0; i < tree["train"]["augmentations"].size(); ++i) {
        const std::string s = tree["train"]["augmentations"][i].get<std::string>();
        try {
            augment_kind_from_string(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("train.augmentations[" + std::to_string(i) + "]", e.what());
        }
    }
    validate(c);
    return c;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    json file = json::object();
    if (!path.empty()) {
        if (!std::filesystem::exists(path)) throw ConfigError("", "config file not found: " + path.string());
        const std::string text = read_text(path);
        if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
            try {
                file = json::parse(text);
            } catch (const json::parse_error& e) {
                throw ConfigError("", "cannot parse " + path.string() + ": " + e.what());
            }
        }
    }
    return parse_config_json(file, overrides);
}

}  // namespace sgvqa
