#pragma once

// Sectioned key-value experiment configuration mirroring the module parameter
// structs; strict loading (unknown keys rejected, invariants enforced) and a
// canonical dump that round-trips exactly.

#include <string>

#include "qdqkd/detection.hpp"
#include "qdqkd/qkd_protocol.hpp"
#include "qdqkd/source_model.hpp"
#include "qdqkd/tomography.hpp"

namespace qdqkd::cfg {

struct SessionConfig {
    double duration_s = 28800.0;
    double block_s = 60.0;
    double accel_factor = 29000.0;
    double window_ps = 2000.0;
    double window_offset_ps = 0.0;
    double sample_fraction = 0.05;
    uint64_t seed = 1;
};

struct ExperimentConfig {
    source::SourceParams source;
    analysis::DetectorParams detector;
    qkd::ChannelParams channel;
    tomo::TomographySettings tomography;
    SessionConfig session;
};

// Parses the sectioned text; throws invalid_input on unknown sections/keys,
// malformed values or violated parameter invariants.
ExperimentConfig config_from_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical form: fixed section/key order, 17-significant-digit values.
std::string config_to_text(const ExperimentConfig& cfg);
void save_config(const std::string& path, const ExperimentConfig& cfg);

// Resolves a config argument: as given if the file exists, otherwise under
// $QDQKD_CONFIG_DIR.
std::string resolve_config_path(const std::string& arg);

} // namespace qdqkd::cfg
