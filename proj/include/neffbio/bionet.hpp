// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// Biomass network: surface extraction from a trained field, voxelisation,
// sparse 3D CNN backbone, transformer encoder with a Biomass token, and the
// regression head. Also the rigid augmentation used while training it.

#pragma once

#include "neffbio/diff.hpp"
#include "neffbio/errors.hpp"
#include "neffbio/fields.hpp"
#include "neffbio/optim.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <random>
#include <unordered_map>
#include <vector>

namespace neffbio {

struct SurfacePointCloud {
    Tensor points;    // n x 3
    Tensor features;  // n x c
    std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
};

// Evaluates the SDF (n x 1) and the semantic feature (n x c) at n points.
using SurfaceQuery = std::function<void(const Tensor& points, Tensor& sdf, Tensor& features)>;

// Keeps the lattice points of a grid_res^3 lattice over [-1,1]^3 with
// |sdf| < tau. Throws DataError when nothing is kept.
SurfacePointCloud extract_surface_features(const SurfaceQuery& query, int grid_res, double tau);
SurfacePointCloud extract_surface_features(const FieldSet& fields, int grid_res, double tau);

// ASCII PLY with x, y, z and f0..f{c-1} vertex properties.
void write_ply(const std::filesystem::path& path, const SurfacePointCloud& cloud);
SurfacePointCloud read_ply(const std::filesystem::path& path);

// --- voxels ---------------------------------------------------------------------

using Index3 = std::array<int, 3>;

struct SparseVoxelGrid {
    Index3 dims{0, 0, 0};
    std::vector<Index3> sites;
    Tensor values;  // sites x channels

    int channels() const { return static_cast<int>(values.cols()); }
    std::size_t size() const { return sites.size(); }
};

// Site lookup for a fixed active set.
class SiteIndex {
public:
    SiteIndex(const Index3& dims, const std::vector<Index3>& sites);
    // -1 when the site is inactive or out of bounds.
    int find(int i, int j, int k) const;

private:
    Index3 dims_;
    std::unordered_map<std::int64_t, int> map_;
};

struct VoxelSpec {
    Index3 dims{64, 64, 16};
    Vec3 voxel_size = Vec3::Constant(1.0 / 32.0);
    // Append the mean in-voxel offset (voxel units, centred) before the features.
    bool include_offsets = true;
};

// Lower corner of the grid: centred on the cloud centroid in x and y, resting
// on the lowest point in z, snapped to the voxel lattice.
Vec3 anchored_origin(const SurfacePointCloud& cloud, const VoxelSpec& spec);

// Averages the points inside each voxel. Voxel (i,j,k) covers
// origin + [i,i+1) x voxel_size; points outside the grid are dropped and
// counted in *dropped.
SparseVoxelGrid voxelize(const SurfacePointCloud& cloud, const VoxelSpec& spec, const Vec3& origin,
                         std::size_t* dropped = nullptr);
SparseVoxelGrid voxelize(const SurfacePointCloud& cloud, const VoxelSpec& spec);

// --- sparse convolution ------------------------------------------------------------

enum class ConvMode { Submanifold, Strided };

// Tap t = (dx+1)*9 + (dy+1)*3 + (dz+1) for offsets in {-1,0,1}^3. Kernels are
// stored as (27*in) x out, tap-major.
inline int kernel_tap(int dx, int dy, int dz) { return (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1); }

// Input/output row pairs for each tap.
struct ConvRulebook {
    Index3 out_dims{0, 0, 0};
    std::vector<Index3> out_sites;
    std::array<std::vector<Eigen::Index>, 27> in_rows;
    std::array<std::vector<Eigen::Index>, 27> out_rows;
};

// Submanifold: outputs are the input sites, out[p] = sum_o W_o in[p+o].
// Strided: dims halve (ceil), output site q is active iff some input site p
// has floor(p/2) = q, and out[q] = sum_o W_o in[2q+o].
ConvRulebook build_rulebook(const Index3& dims, const std::vector<Index3>& sites, ConvMode mode);

diff::Var sparse_conv(diff::Var x, diff::Var kernel, diff::Var bias, const ConvRulebook& rules);

// Tape-free convenience form.
SparseVoxelGrid sparse_conv3d(const SparseVoxelGrid& grid, const Tensor& kernel, const Tensor& bias,
                              ConvMode mode);

// --- network ----------------------------------------------------------------------------

struct BioNetConfig {
    int levels = 4;
    int base_channels = 32;
    int d_model = 512;
    int heads = 8;
    int ffn = 2048;
    int encoder_layers = 5;
    double dropout = 0.1;
    std::vector<int> head_hidden{512, 256};
    VoxelSpec voxel;
};

struct TokenSequence {
    diff::Var tokens;     // (1 + T) x d_model, Biomass token first
    diff::Var pos_embed;  // (1 + T) x d_model
};

class BioNet {
public:
    BioNet(const BioNetConfig& config, int feature_channels, std::uint64_t seed);

    const BioNetConfig& config() const { return config_; }
    int feature_channels() const { return feature_channels_; }
    int input_channels() const;
    // Output dims after the strided levels.
    Index3 token_grid() const;
    int token_count() const;  // 1 + h^t * w^t
    diff::ParameterSet& parameters() { return params_; }
    const diff::ParameterSet& parameters() const { return params_; }

    // Predictions are output_scale * softplus(head). The scale defaults to
    // 1 and is set from the label magnitude before training.
    double output_scale() const { return output_scale_; }
    void set_output_scale(double s);

    // Channel counts entering each level, for shape checks.
    std::vector<int> level_channels() const;

    TokenSequence backbone(diff::Graph& g, const SparseVoxelGrid& grid) const;
    // A null rng disables dropout.
    diff::Var transformer_predict(diff::Graph& g, const TokenSequence& seq, std::mt19937_64* dropout_rng) const;
    diff::Var predict(diff::Graph& g, const SparseVoxelGrid& grid, std::mt19937_64* dropout_rng) const;
    double predict(const SparseVoxelGrid& grid) const;

    std::vector<CheckpointRecord> to_records() const;
    static BioNet from_records(const std::vector<CheckpointRecord>& records);

    // Parameter names of encoder weights, for tests.
    std::vector<std::string> encoder_parameter_names() const;

private:
    struct Conv {
        std::size_t kernel, bias;
    };
    struct Norm {
        std::size_t gamma, beta;
    };
    struct ResBlock {
        Conv c1, c2;
        Norm n1, n2;
    };
    struct Level {
        ResBlock b1, b2;
        Conv down;
    };
    struct Dense {
        std::size_t w, b;
    };
    struct Encoder {
        Norm ln1, ln2;
        Dense q, k, v, o, f1, f2;
    };

    Conv add_conv(const std::string& name, int in, int out, std::mt19937_64& rng);
    Norm add_norm(const std::string& name, int channels, bool rows);
    Dense add_dense(const std::string& name, int in, int out, std::mt19937_64& rng);
    diff::Var conv(diff::Graph& g, const Conv& c, diff::Var x, const ConvRulebook& rules) const;
    diff::Var norm(diff::Graph& g, const Norm& n, diff::Var x, diff::NormAxis axis) const;
    diff::Var dense(diff::Graph& g, const Dense& d, diff::Var x) const;
    diff::Var dropout(diff::Graph& g, diff::Var x, std::mt19937_64* rng) const;

    BioNetConfig config_;
    int feature_channels_ = 0;
    double output_scale_ = 1.0;
    diff::ParameterSet params_;
    Conv stem_{};
    std::vector<Level> levels_;
    Dense token_proj_{};
    std::size_t biomass_token_ = 0, pos_embed_ = 0;
    std::vector<Encoder> encoders_;
    Norm final_norm_{};
    std::vector<Dense> head_;
};

// --- augmentation ---------------------------------------------------------------------

struct AugmentParams {
    double theta = 0.0;      // about x
    double alpha_rot = 0.0;  // about y
    double phi = 0.0;        // about z
    Vec3 delta = Vec3::Zero();
};

inline constexpr double kMaxTheta = 3.14159265358979323846 / 18.0;
inline constexpr double kMaxAlphaRot = 3.14159265358979323846 / 18.0;
inline constexpr double kMaxPhi = 3.14159265358979323846 / 12.0;

AugmentParams sample_augment(std::mt19937_64& rng);
// Rotates by Rz(phi) Ry(alpha_rot) Rx(theta) about the centroid, then
// translates by delta. Throws ConfigError for out-of-range angles.
SurfacePointCloud augment(const SurfacePointCloud& cloud, const AugmentParams& params);

}  // namespace neffbio
