#ifndef NTK_LAB_SCHEMA_HPP
#define NTK_LAB_SCHEMA_HPP

#include <string>

#include <json.hpp>

#include "ntk_lab/errors.hpp"

namespace ntk_lab::schema {

using nlohmann::json;

/// The published configuration schema (a JSON Schema draft-07 document).
inline const json& config_schema() {
    static const json s = json::parse(R"JSON(
{
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "ntk-lab experiment config",
  "type": "object",
  "required": ["experiment"],
  "additionalProperties": false,
  "properties": {
    "experiment": {"type": "string",
                   "enum": ["simulate", "theory-compare", "sweep", "gen-curves", "align-demo", "model-kernel"]},
    "seed": {"type": "integer", "minimum": 0},
    "output": {"type": "string"},
    "description": {"type": "string"},
    "data": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "source": {"type": "string", "enum": ["synthetic", "csv"]},
        "path": {"type": "string"},
        "test_path": {"type": "string"},
        "dim": {"type": "integer", "minimum": 1},
        "samples": {"type": "integer", "minimum": 1},
        "test_samples": {"type": "integer", "minimum": 0},
        "condition": {"type": "number", "minimum": 1},
        "whiten": {"type": "boolean"},
        "gamma": {"type": ["number", "array"], "minimum": 0, "maximum": 1, "minItems": 1,
                  "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "targets": {"type": "string", "enum": ["preprocessed", "raw"]},
        "teacher_scales": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "network": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "depth": {"type": ["integer", "array"], "minimum": 1, "minItems": 1,
                  "items": {"type": "integer", "minimum": 1}},
        "width": {"type": "integer", "minimum": 1},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "activation": {"type": "string", "enum": ["linear", "relu", "tanh"]},
        "sigma": {"type": ["number", "array"], "exclusiveMinimum": 0, "minItems": 1,
                  "items": {"type": "number", "exclusiveMinimum": 0}},
        "init": {"type": "string", "enum": ["random", "balanced"]},
        "u0sq": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "flow": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "max_time": {"type": "number", "exclusiveMinimum": 0},
        "integrator": {"type": "string", "enum": ["euler", "rk4"]},
        "adaptive": {"type": "boolean"},
        "safety": {"type": "number", "exclusiveMinimum": 0},
        "t_min": {"type": "number", "exclusiveMinimum": 0},
        "per_decade": {"type": "integer", "minimum": 1},
        "stop_loss": {"type": "number", "minimum": 0},
        "max_steps": {"type": "integer", "minimum": 1}
      }
    },
    "outputs": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "trajectory": {"type": "boolean"},
        "predictions": {"type": "boolean"},
        "snapshots": {"type": "boolean"},
        "modes": {"type": "boolean"},
        "min_norm": {"type": "boolean"}
      }
    },
    "theory": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "window": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "sweep": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "measure": {"type": "string", "enum": ["t_half", "laziness"]},
        "stop_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
      }
    },
    "transfer": {
      "type": "object",
      "additionalProperties": false,
      "required": ["A", "alpha", "P"],
      "properties": {
        "A": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "alpha": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": -1, "maximum": 1}},
        "P": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "dim": {"type": "integer", "minimum": 2},
        "lambda": {"type": "number", "minimum": 0},
        "trials": {"type": "integer", "minimum": 0}
      }
    },
    "model_kernel": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "epsilon": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "growth_time": {"type": "number", "exclusiveMinimum": 0},
        "spike": {"type": "number", "minimum": 0},
        "steps": {"type": "integer", "minimum": 1}
      }
    }
  }
}
)JSON");
    return s;
}

namespace detail {

inline std::string type_of(const json& v) {
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
    if (v.is_number()) return "number";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    if (v.is_object()) return "object";
    return "null";
}

inline bool type_matches(const json& v, const std::string& t) {
    const std::string actual = type_of(v);
    return actual == t || (t == "number" && actual == "integer");
}

inline std::string child(const std::string& path, const std::string& key) { return path + "/" + key; }

}  // namespace detail

/// Validates `doc` against the keyword subset used by config_schema(); throws ConfigError with a
/// JSON-pointer path to the first offending field.
inline void validate(const json& doc, const json& schema, const std::string& path = "") {
    const std::string where = path.empty() ? "/" : path;
    if (auto it = schema.find("type"); it != schema.end()) {
        bool ok = false;
        if (it->is_string()) ok = detail::type_matches(doc, *it);
        else
            for (const auto& t : *it) ok = ok || detail::type_matches(doc, t);
        if (!ok) throw ConfigError(where, "expected type " + it->dump() + ", got " + detail::type_of(doc));
    }
    if (auto it = schema.find("enum"); it != schema.end()) {
        bool ok = false;
        for (const auto& e : *it) ok = ok || e == doc;
        if (!ok) throw ConfigError(where, "value " + doc.dump() + " is not one of " + it->dump());
    }
    if (doc.is_number()) {
        const double v = doc.get<double>();
        if (auto it = schema.find("minimum"); it != schema.end() && v < it->get<double>())
            throw ConfigError(where, "must be >= " + it->dump());
        if (auto it = schema.find("maximum"); it != schema.end() && v > it->get<double>())
            throw ConfigError(where, "must be <= " + it->dump());
        if (auto it = schema.find("exclusiveMinimum"); it != schema.end() && !(v > it->get<double>()))
            throw ConfigError(where, "must be > " + it->dump());
    }
    if (doc.is_array()) {
        if (auto it = schema.find("minItems"); it != schema.end() && doc.size() < it->get<std::size_t>())
            throw ConfigError(where, "needs at least " + it->dump() + " items");
        if (auto it = schema.find("items"); it != schema.end())
            for (std::size_t i = 0; i < doc.size(); ++i) validate(doc[i], *it, detail::child(path, std::to_string(i)));
    }
    if (doc.is_object()) {
        if (auto it = schema.find("required"); it != schema.end())
            for (const auto& k : *it)
                if (!doc.contains(k.get<std::string>()))
                    throw ConfigError(detail::child(path, k.get<std::string>()), "required field is missing");
        const json* props = schema.contains("properties") ? &schema["properties"] : nullptr;
        const bool closed = schema.value("additionalProperties", true) == false;
        for (auto it = doc.begin(); it != doc.end(); ++it) {
            const std::string p = detail::child(path, it.key());
            if (props && props->contains(it.key())) validate(it.value(), (*props)[it.key()], p);
            else if (closed) throw ConfigError(p, "unknown field");
        }
    }
}

inline void validate_config(const json& doc) { validate(doc, config_schema()); }

}  // namespace ntk_lab::schema

#endif
