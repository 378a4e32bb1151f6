// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

namespace gistlm {

/// Governs every layout decision: how many raw tokens one gist stands for,
/// how many always-visible sink tokens are prepended, how many previous
/// complete gist units stay directly attendable, and the kernel block size.
struct CompressionConfig {
    int64_t ratio = 4;          // raw tokens per gist, >= 2
    int64_t sink_count = 128;   // always-visible prefix tokens, >= 0
    int64_t window_units = 32;  // previous complete units kept attendable, >= 0
    int64_t block_size = 64;    // kernel tile size, power of two, >= 8

    /// Throws ConfigError if any field constraint is violated.
    void validate() const;

    /// Parses a JSON document with exactly the keys
    /// {ratio, sink_count, window_units, block_size}. All values must be
    /// integers; unknown keys are rejected. Missing keys keep their defaults.
    static CompressionConfig from_json(const std::string& text);
    static CompressionConfig from_json_file(const std::string& path);

    std::string to_json() const;

    bool operator==(const CompressionConfig&) const = default;
};

}  // namespace gistlm
