// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// Run configuration shared by the CLI and the C API. Configs are JSON objects
// with a "neff" and a "bionet" section; unknown keys are rejected.

#pragma once

#include "neffbio/train.hpp"

#include <filesystem>
#include <span>
#include <string>

namespace neffbio {

struct RunConfig {
    std::filesystem::path scene;
    std::filesystem::path output_dir;
    std::uint64_t seed = 0;
    NeffTrainConfig neff;
    BioTrainConfig bionet;
    // Surface extraction.
    int grid_res = 64;
    double tau = 0.0;  // <= 0: half the lattice spacing
    int render_samples = 64;
};

// Desk-scale defaults: small fields and a small BioNet that train on one core.
RunConfig default_run_config();

// Applies "a.b.c=value" overrides to a JSON document. Values are parsed as
// JSON when possible and taken as strings otherwise.
std::string apply_overrides(const std::string& json_text, std::span<const std::string> overrides);

// Parses on top of default_run_config(). Throws ConfigError.
RunConfig run_config_from_json(const std::string& json_text);
std::string run_config_to_json(const RunConfig& config);

// Seed, output directory and the field feature width are copied into the
// per-stage configs.
void sync_run_config(RunConfig& config);

double effective_tau(const RunConfig& config);

}  // namespace neffbio
