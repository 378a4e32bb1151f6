// SPDX-License-Identifier: Apache-2.0

#include "gistlm/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gistlm/errors.hpp"

namespace gistlm {

namespace {

bool power_of_two(int64_t v) {
    return v > 0 && (v & (v - 1)) == 0;
}

int64_t require_integer(const nlohmann::json& j, const std::string& key) {
    if (!j.is_number_integer()) {
        throw ConfigError("config key '" + key + "' must be an integer");
    }
    return j.get<int64_t>();
}

}  // namespace

void CompressionConfig::validate() const {
    if (ratio < 2) {
        throw ConfigError("ratio must be >= 2, got " + std::to_string(ratio));
    }
    if (sink_count < 0) {
        throw ConfigError("sink_count must be >= 0, got " + std::to_string(sink_count));
    }
    if (window_units < 0) {
        throw ConfigError("window_units must be >= 0, got " + std::to_string(window_units));
    }
    if (block_size < 8 || !power_of_two(block_size)) {
        throw ConfigError("block_size must be a power of two >= 8, got " +
                          std::to_string(block_size));
    }
}

CompressionConfig CompressionConfig::from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("invalid config JSON: ") + e.what());
    }
    if (!doc.is_object()) {
        throw ConfigError("config JSON must be an object");
    }

    CompressionConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        if (key == "ratio") {
            cfg.ratio = require_integer(value, key);
        } else if (key == "sink_count") {
            cfg.sink_count = require_integer(value, key);
        } else if (key == "window_units") {
            cfg.window_units = require_integer(value, key);
        } else if (key == "block_size") {
            cfg.block_size = require_integer(value, key);
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

CompressionConfig CompressionConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string CompressionConfig::to_json() const {
    nlohmann::json doc{{"ratio", ratio},
                       {"sink_count", sink_count},
                       {"window_units", window_units},
                       {"block_size", block_size}};
    return doc.dump();
}

}  // namespace gistlm
