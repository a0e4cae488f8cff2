// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "neffbio/diff.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace neffbio {

struct AdamOptions {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. First and second moments are kept per
// parameter, in the order the parameters were registered.
class Adam {
public:
    Adam(diff::ParameterSet& params, AdamOptions options = {});

    // Applies one update from the gradients currently stored in the
    // parameter set. Throws NumericalError naming the first parameter holding
    // a non-finite gradient, in which case nothing is modified.
    void step();

    std::int64_t steps() const { return step_; }
    AdamOptions& options() { return options_; }
    const AdamOptions& options() const { return options_; }
    const Tensor& first_moment(std::size_t i) const { return m_[i]; }
    const Tensor& second_moment(std::size_t i) const { return v_[i]; }

private:
    diff::ParameterSet* params_;
    AdamOptions options_;
    std::int64_t step_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

// ---------------------------------------------------------------------------
// NFBK checkpoints: "NFBK", u32 version, then records of
// (u32 name length, UTF-8 name, u32 rank, u32 dims..., f64 LE payload)
// until end of file.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<double> data;
};

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records);

// Every parameter is written as a rank-2 record.
std::vector<CheckpointRecord> to_records(const diff::ParameterSet& params,
                                         const std::string& prefix = "");
// Copies matching records into the parameter set. Every parameter must be
// present with a matching element count; unknown records are ignored.
void load_records(diff::ParameterSet& params, const std::vector<CheckpointRecord>& records,
                  const std::string& prefix = "");

const CheckpointRecord* find_record(const std::vector<CheckpointRecord>& records,
                                    std::string_view name);

}  // namespace neffbio
