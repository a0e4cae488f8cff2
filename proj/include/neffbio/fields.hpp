// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// The three neural fields of a scene: geometry (signed distance plus a
// geometry feature), semantic feature, and radiance.

#pragma once

#include "neffbio/diff.hpp"
#include "neffbio/optim.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace neffbio {

using Vec3 = Eigen::Vector3d;

struct EncodingSpec {
    int position_frequencies = 6;
    int direction_frequencies = 4;
    bool include_raw = true;
};

enum class EncodingKind { Position, Direction };

constexpr int encoded_dim(int dims, int frequencies, bool include_raw) {
    return dims * ((include_raw ? 1 : 0) + 2 * frequencies);
}

// Row-wise encoding (p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p),
// cos(2^{L-1} pi p)); each sin/cos block covers all d components.
Tensor positional_encode(const Tensor& points, int frequencies, bool include_raw);
diff::Var positional_encode(diff::Var points, int frequencies, bool include_raw);
Eigen::VectorXd positional_encode(const Eigen::VectorXd& p, const EncodingSpec& spec, EncodingKind kind);

enum class Activation { Relu, SmoothRelu, Identity };

// Fully connected stack: `hidden_layers` activated layers of `width` followed
// by a linear output layer. Weights are stored as in x out matrices.
class Mlp {
public:
    Mlp() = default;
    Mlp(diff::ParameterSet& params, const std::string& prefix, int in, int hidden_layers, int width,
        int out, Activation hidden);

    diff::Var forward(diff::Graph& g, diff::ParameterSet& params, diff::Var x) const;
    Tensor infer(const diff::ParameterSet& params, const Tensor& x) const;

    int in_dim() const { return in_; }
    int out_dim() const { return out_; }
    std::size_t layer_count() const { return layers_.size(); }
    // Parameter indices of layer i (weight, bias).
    std::pair<std::size_t, std::size_t> layer(std::size_t i) const { return layers_[i]; }

private:
    int in_ = 0;
    int out_ = 0;
    Activation hidden_ = Activation::Relu;
    std::vector<std::pair<std::size_t, std::size_t>> layers_;
};

struct FieldConfig {
    EncodingSpec encoding;
    int geometry_layers = 8;
    int geometry_width = 256;
    int geometry_feature_dim = 256;
    int feature_layers = 2;
    int feature_width = 256;
    int feature_dim = 64;
    int radiance_layers = 4;
    int radiance_width = 256;
    // Sphere radius targeted by the geometric initialisation of F_g.
    double init_radius = 0.5;
    // Standard deviation of the logistic density at initialisation.
    double init_density_std = 0.3;
    // Reject points outside [-1,1]^3 instead of clamping them.
    bool strict_bounds = false;
};

struct GeometrySample {
    double sdf = 0.0;
    Eigen::VectorXd feature;
};

class FieldSet {
public:
    FieldSet(const FieldConfig& config, std::uint64_t seed);

    const FieldConfig& config() const { return config_; }
    diff::ParameterSet& parameters() { return params_; }
    const diff::ParameterSet& parameters() const { return params_; }

    int position_dim() const;
    int direction_dim() const;

    // Graph-level batched evaluation. Points are N x 3, directions N x 3.
    struct GeometryVars {
        diff::Var sdf;      // N x 1
        diff::Var feature;  // N x geometry_feature_dim
    };
    GeometryVars geometry(diff::Graph& g, diff::Var points);
    diff::Var feature(diff::Graph& g, diff::Var geometry_feature);
    diff::Var radiance(diff::Graph& g, diff::Var points, diff::Var directions, diff::Var geometry_feature);
    diff::Var density_scale(diff::Graph& g);

    // Single-point convenience wrappers.
    GeometrySample eval_geometry(const Vec3& x) const;
    Eigen::VectorXd eval_feature(const Eigen::VectorXd& geometry_feature) const;
    Vec3 eval_radiance(const Vec3& x, const Vec3& v, const Eigen::VectorXd& geometry_feature) const;
    double density_scale() const;

    // Plain batched inference without a tape. Any output pointer may be null.
    void infer(const Tensor& points, Tensor* sdf, Tensor* geometry_feature, Tensor* feature) const;
    Tensor infer_radiance(const Tensor& points, const Tensor& directions, const Tensor& geometry_feature) const;

    // Bounds policy applied to every incoming point batch.
    Tensor checked_points(const Tensor& points) const;

    std::vector<CheckpointRecord> to_records() const;
    static FieldSet from_records(const std::vector<CheckpointRecord>& records);

    const Mlp& geometry_net() const { return geometry_net_; }
    const Mlp& feature_net() const { return feature_net_; }
    const Mlp& radiance_net() const { return radiance_net_; }

private:
    void geometric_init(std::uint64_t seed);
    void calibrate_sdf_head(std::mt19937_64& rng);

    FieldConfig config_;
    diff::ParameterSet params_;
    Mlp geometry_net_;
    Mlp feature_net_;
    Mlp radiance_net_;
    std::size_t log_scale_index_ = 0;
};

// Unit direction <-> spherical angles (polar from +z, azimuth from +x).
Vec3 direction_from_angles(double polar, double azimuth);
std::pair<double, double> angles_from_direction(const Vec3& v);

}  // namespace neffbio
