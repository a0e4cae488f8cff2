// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace neffbio {

Adam::Adam(diff::ParameterSet& params, AdamOptions options)
    : params_(&params), options_(options) {
    if (!(options_.lr > 0.0)) throw ConfigError("adam: learning rate must be > 0");
    for (const auto& p : params) {
        m_.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
    }
}

void Adam::step() {
    if (m_.size() != params_->size()) {
        throw std::logic_error("adam: parameter set changed after optimizer construction");
    }
    for (const auto& p : *params_) {
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
            throw ShapeError("adam: gradient shape mismatch for " + p.name);
        }
        if (!p.grad.allFinite()) {
            throw NumericalError("adam: non-finite gradient in parameter '" + p.name + "' at step " +
                                 std::to_string(step_ + 1));
        }
    }
    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_->size(); ++i) {
        auto& p = (*params_)[i];
        m_[i] = b1 * m_[i] + (1.0 - b1) * p.grad;
        v_[i] = b2 * v_[i] + (1.0 - b2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= options_.lr * (m_[i].array() / c1) /
                           ((v_[i].array() / c2).sqrt() + options_.eps);
    }
}

// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

bool read_u32(std::istream& is, std::uint32_t& v) {
    return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof v));
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
    os.write("NFBK", 4);
    write_u32(os, kCheckpointVersion);
    for (const auto& r : records) {
        std::size_t expected = 1;
        for (auto d : r.dims) expected *= d;
        if (expected != r.data.size()) {
            throw std::invalid_argument("checkpoint record '" + r.name + "' dims disagree with payload");
        }
        write_u32(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        write_u32(os, static_cast<std::uint32_t>(r.dims.size()));
        for (auto d : r.dims) write_u32(os, d);
        os.write(reinterpret_cast<const char*>(r.data.data()),
                 static_cast<std::streamsize>(r.data.size() * sizeof(double)));
    }
    if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path.string());
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NFBK", 4) != 0) {
        throw DataError(path.string() + ": bad magic, not an NFBK checkpoint");
    }
    std::uint32_t version = 0;
    if (!read_u32(is, version)) throw DataError(path.string() + ": truncated header");
    if (version != kCheckpointVersion) {
        throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    std::vector<CheckpointRecord> out;
    std::uint32_t name_len = 0;
    while (read_u32(is, name_len)) {
        CheckpointRecord r;
        r.name.resize(name_len);
        std::uint32_t rank = 0;
        if (!is.read(r.name.data(), name_len) || !read_u32(is, rank) || rank > 8) {
            throw DataError(path.string() + ": truncated or corrupt record header");
        }
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t d = 0;
            if (!read_u32(is, d)) throw DataError(path.string() + ": truncated dims in " + r.name);
            r.dims.push_back(d);
            count *= d;
        }
        r.data.resize(count);
        if (!is.read(reinterpret_cast<char*>(r.data.data()),
                     static_cast<std::streamsize>(count * sizeof(double)))) {
            throw DataError(path.string() + ": truncated payload in record '" + r.name + "'");
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<CheckpointRecord> to_records(const diff::ParameterSet& params, const std::string& prefix) {
    std::vector<CheckpointRecord> out;
    for (const auto& p : params) {
        CheckpointRecord r;
        r.name = prefix + p.name;
        r.dims = {static_cast<std::uint32_t>(p.value.rows()), static_cast<std::uint32_t>(p.value.cols())};
        r.data.assign(p.value.data(), p.value.data() + p.value.size());
        out.push_back(std::move(r));
    }
    return out;
}

const CheckpointRecord* find_record(const std::vector<CheckpointRecord>& records, std::string_view name) {
    for (const auto& r : records) {
        if (r.name == name) return &r;
    }
    return nullptr;
}

void load_records(diff::ParameterSet& params, const std::vector<CheckpointRecord>& records,
                  const std::string& prefix) {
    for (auto& p : params) {
        const CheckpointRecord* r = find_record(records, prefix + p.name);
        if (r == nullptr) throw DataError("checkpoint is missing parameter '" + prefix + p.name + "'");
        if (r->data.size() != static_cast<std::size_t>(p.value.size())) {
            throw DataError("checkpoint parameter '" + r->name + "' has " +
                            std::to_string(r->data.size()) + " values, expected " +
                            std::to_string(p.value.size()));
        }
        std::memcpy(p.value.data(), r->data.data(), r->data.size() * sizeof(double));
    }
}

}  // namespace neffbio
