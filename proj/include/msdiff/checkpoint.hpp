#pragma once

#include <optional>
#include <string>

#include "msdiff/adapters.hpp"
#include "msdiff/model.hpp"

namespace msdiff {

// Single-file archive: magic, JSON manifest (config echo, seed, step, stage,
// array directory), then raw little-endian float64 payloads. Loading
// validates array names and sizes against the manifest.
struct LoadedCheckpoint {
    Model model;
    std::optional<AdapterSet> adapters;
    AdapterPlacement placement;  // meaningful when adapters present
    std::string stage;
    int64_t step = 0;
};

void save_checkpoint(const std::string& path, Model& model, AdapterSet* adapters,
                     const AdapterPlacement* placement, const std::string& stage, int64_t step);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace msdiff
