// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// Ray generation, sampling, SDF-to-opacity conversion and volumetric
// compositing of colour, feature and depth.

#pragma once

#include "neffbio/diff.hpp"
#include "neffbio/fields.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace neffbio {

// Pinhole camera with OpenCV axes: x right, y down, looking down +z. Pixel
// coordinates are continuous with integer values at pixel centres.
struct Camera {
    std::string image_name;
    int width = 0;
    int height = 0;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    Eigen::Matrix4d world_from_camera = Eigen::Matrix4d::Identity();

    Vec3 center() const { return world_from_camera.block<3, 1>(0, 3); }
    Eigen::Matrix3d rotation() const { return world_from_camera.block<3, 3>(0, 0); }
};

struct Pixel {
    double u = 0.0;
    double v = 0.0;
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();
    double t_near = 0.0;
    double t_far = 1.0;
    // Misses the scene cube; renders as background with zero feature.
    bool degenerate = false;
};

// Slab intersection with [-1,1]^3; returns false on a miss.
bool intersect_scene_cube(const Vec3& origin, const Vec3& direction, double& t_near, double& t_far);

Ray generate_ray(const Camera& camera, Pixel pixel);
std::vector<Ray> generate_rays(const Camera& camera, std::span<const Pixel> pixels);
// Pixel coordinates of a world point.
Pixel project(const Camera& camera, const Vec3& world);

enum class SampleMode { Stratified, Uniform };

struct RaySamples {
    std::vector<double> t;
    std::vector<double> dt;
    std::vector<Vec3> x;
};

RaySamples sample_ray(const Ray& ray, int n, SampleMode mode, std::mt19937_64& rng);
RaySamples sample_ray(const Ray& ray, int n, SampleMode mode, std::uint64_t seed);

// Discrete opacity of the interval between two consecutive SDF samples:
// max((Phi(k s_i) - Phi(k s_{i+1})) / Phi(k s_i), 0), Phi the logistic sigmoid.
double alpha_from_sdf(double sdf, double sdf_next, double scale);
// Continuous density max(-dPhi/dt / Phi, 0) for an SDF with slope ds/dt.
double sigma_from_sdf(double sdf, double sdf_slope, double scale);

struct Compositing {
    std::vector<double> weights;
    std::vector<double> transmittance;
};

Compositing composite_alpha(std::span<const double> alphas);
Compositing composite_sigma(std::span<const double> sigmas, std::span<const double> dt);

// --- differentiable building blocks -----------------------------------------

// sdf: R x (n+1) values along each ray, scale: 1 x 1. Returns R x n alphas.
diff::Var sdf_alpha(diff::Var sdf, diff::Var scale);
// alpha: R x n. Returns weights w_i = T_i alpha_i with T_0 = 1.
diff::Var composite_weights(diff::Var alpha);
// weights: R x n, values: (R n) x k in ray-major order. Returns R x k.
diff::Var integrate_samples(diff::Var weights, diff::Var values);

struct RenderOptions {
    int samples = 64;
    SampleMode mode = SampleMode::Stratified;
    Vec3 background = Vec3::Constant(0.5);
    bool with_feature = true;
};

struct BatchRender {
    diff::Var color;    // R x 3
    diff::Var feature;  // R x c (unset when features are disabled)
    diff::Var weights;  // R x n
    Tensor t;           // R x n sample positions
    Tensor depth;       // R x 1
    Tensor transmittance;
};

BatchRender render_batch(diff::Graph& g, FieldSet& fields, std::span<const Ray> rays, const RenderOptions& options,
                         std::mt19937_64& rng);

struct RenderResult {
    Vec3 color = Vec3::Zero();
    Eigen::VectorXd feature;
    double depth = 0.0;
    std::vector<double> weights;
    std::vector<double> transmittance;
    std::vector<double> sigma;
};

RenderResult render_ray(FieldSet& fields, const Ray& ray, int n, std::uint64_t seed,
                        const RenderOptions& options = {});

// Tape-free rendering of many rays, chunked. Features are returned only when
// `features` is non-null.
void render_rays_inference(const FieldSet& fields, std::span<const Ray> rays, const RenderOptions& options,
                           std::uint64_t seed, Tensor& colors, Tensor& depths, Tensor* features);

}  // namespace neffbio
