#pragma once

// Parameter persistence: DIR/manifest.json names every parameter with its
// shape and byte offset into DIR/params.bin, a single raw little-endian
// float32 blob. The manifest carries an arbitrary metadata object so
// callers can round-trip model configuration alongside the weights.

#include "pasr/autodiff.hpp"
#include "pasr/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <vector>

namespace pasr {

void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<ad::Parameter<float>*>& params,
                     const nlohmann::json& meta);

// Loads values into the given parameters, matched by name; every parameter
// must be present with an identical shape. Returns the stored metadata.
nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                               const std::vector<ad::Parameter<float>*>& params);

// Metadata without touching the blob.
nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir);

}  // namespace pasr
