// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "gistlm/model.hpp"

namespace gistlm {

/// Checkpoints are a pair of files: <prefix>.json holds the manifest (model
/// and compression configs, training pattern, and one {name, shape, dtype,
/// byte_offset} record per tensor) and <prefix>.bin holds a single
/// little-endian buffer of 32-bit floats.
template <typename Real>
void save_checkpoint(const std::string& prefix, const Model<Real>& model, TrainPattern pattern,
                     int64_t chunk_len = 0);

template <typename Real>
struct LoadedCheckpoint {
    Model<Real> model;
    TrainPattern pattern;
    int64_t chunk_len;
};

/// Rebuilds a model from a checkpoint, validating every tensor shape against
/// the manifest's model config.
template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& prefix);

}  // namespace gistlm
