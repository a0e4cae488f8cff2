// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// Scene bundles on disk, the synthetic scene generator, and plot selection
// from camera positions.

#pragma once

#include "neffbio/errors.hpp"
#include "neffbio/render.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace neffbio {

// 8-bit RGB, row-major, 3 bytes per pixel.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    Vec3 at(int x, int y) const;
    bool operator==(const Image&) const = default;
};

// h x w x c float map, row-major with channels innermost.
struct FeatureMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    float at(int y, int x, int ch) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
    }
    bool operator==(const FeatureMap&) const = default;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
// Converts [0,1] RGB rows (h*w x 3) to 8 bits with rounding.
Image image_from_tensor(const Tensor& rgb, int width, int height);
Tensor tensor_from_image(const Image& image);

FeatureMap read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const FeatureMap& map);

// Bilinear lookup of a feature map at image pixel coordinates (u, v) of an
// image of size image_w x image_h. The map may be coarser than the image.
Eigen::VectorXd sample_feature(const FeatureMap& map, double u, double v, int image_w, int image_h);

struct PlotSpec {
    std::string id;
    Vec3 endpoint_a = Vec3::Zero();
    Vec3 endpoint_b = Vec3::UnitX();
    double along_threshold = 1.5;
    double lateral_threshold = 7.5;
    std::optional<double> biomass;  // grams
};

struct SceneBundle {
    std::vector<Camera> cameras;
    std::vector<Image> images;
    std::vector<FeatureMap> features;
    // Held-out views are excluded from training rays.
    std::vector<bool> held_out;
    Tensor sparse_points;  // k x 3, scene units
    // Similarity taking world coordinates into the [-1,1]^3 scene cube.
    Eigen::Matrix4d norm_transform = Eigen::Matrix4d::Identity();
    std::vector<FeatureMap> depths;  // optional, c = 1
    std::vector<PlotSpec> plots;     // optional

    std::vector<std::size_t> training_views() const;
    std::vector<std::size_t> test_views() const;
    int feature_channels() const { return features.empty() ? 0 : features.front().channels; }
};

// Checks every invariant; throws DataError naming the offending item.
void validate_bundle(const SceneBundle& bundle);
SceneBundle load_scene_bundle(const std::filesystem::path& dir);
void save_scene_bundle(const SceneBundle& bundle, const std::filesystem::path& dir);

std::vector<PlotSpec> read_plots(const std::filesystem::path& path);
void write_plots(const std::filesystem::path& path, const std::vector<PlotSpec>& plots);

// --- analytic scenes ---------------------------------------------------------

enum class PrimitiveKind { Sphere, Box, Plane };

struct Primitive {
    PrimitiveKind kind = PrimitiveKind::Sphere;
    Vec3 center = Vec3::Zero();        // sphere/box centre, a point on the plane
    Vec3 size = Vec3::Constant(0.5);   // radius in x (sphere), half extents (box)
    Vec3 normal = Vec3::UnitZ();       // plane normal
    Vec3 albedo = Vec3::Constant(0.8);
    Eigen::VectorXd feature;           // semantic label, length c

    double sdf(const Vec3& x) const;
    Vec3 gradient(const Vec3& x) const;
};

// Union of primitives: minimum distance and the index of the closest one.
struct SceneHit {
    double sdf = 0.0;
    int index = -1;
};
SceneHit scene_sdf(const std::vector<Primitive>& prims, const Vec3& x);

struct SynthSpec {
    std::vector<Primitive> primitives;
    int n_views = 20;
    int n_test_views = 4;
    int width = 96;
    int height = 96;
    double focal = 110.0;          // pixels
    double camera_distance = 3.0;
    double camera_elevation = 0.5; // radians above the xy plane
    int feature_downsample = 1;    // feature maps are (h/ds) x (w/ds)
    int sparse_points = 2000;
    Vec3 light_direction = Vec3(0.3, -0.4, 1.0);  // towards the light
    double ambient = 0.25;
    Vec3 background = Vec3::Constant(0.5);
    std::uint64_t seed = 0;
};

// A sphere resting on a ground plane, both inside the scene cube.
SynthSpec sphere_on_plane_spec(int feature_channels, std::uint64_t seed);

// Renders images, feature maps and depths by sphere tracing within the scene
// cube; emits surface samples as sparse points.
SceneBundle synth_scene(const SynthSpec& spec);

// Uniform samples on the visible union surface (|union SDF| < 1e-6) inside
// the scene cube.
Tensor sample_surface_points(const std::vector<Primitive>& prims, int count, std::uint64_t seed);

// Sphere traces one ray within [t_near, t_far]; returns t of the hit.
std::optional<double> sphere_trace(const std::vector<Primitive>& prims, const Ray& ray, int* hit_index);

SynthSpec synth_spec_from_json(const std::string& json_text);

// --- plots ---------------------------------------------------------------------

// Cameras whose centre c satisfies |d . v| <= along and |d x v| <= lateral,
// with d = c - centre and v the unit row direction.
std::vector<std::size_t> extract_plot_views(const std::vector<Vec3>& camera_positions, const PlotSpec& plot);
std::vector<std::size_t> crop_plot_points(const Tensor& points, const PlotSpec& plot, double half_length,
                                          double half_width);

}  // namespace neffbio
