// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// Training loops, run configuration and evaluation helpers shared by the
// C API, the CLI and the acceptance harness.

#pragma once

#include "neffbio/bionet.hpp"
#include "neffbio/dataio.hpp"
#include "neffbio/fields.hpp"
#include "neffbio/loss.hpp"
#include "neffbio/optim.hpp"
#include "neffbio/render.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace neffbio {

struct NeffTrainConfig {
    int iterations = 5000;
    int rays_per_step = 512;
    int samples_per_ray = 64;
    int sparse_subset = 1024;   // sparse points per step for the geometry term
    int eikonal_points = 256;   // random cube points per step, 0 disables
    LossWeights weights;
    AdamOptions adam;
    // Cosine decay of the learning rate down to lr * lr_final_ratio.
    double lr_final_ratio = 0.1;
    int warmup_steps = 100;
    FieldConfig field;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;        // 0: only the final checkpoint
    std::filesystem::path output_dir;  // empty: nothing written
    int log_every = 1;
};

struct StepLog {
    int step = 0;
    double total = 0.0;
    double color = 0.0;
    double feature = 0.0;
    double geometry = 0.0;
    double eikonal = 0.0;
    double density_scale = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

using StepCallback = std::function<void(const StepLog&)>;

// Learning rate at `step` (0-based) under warmup then cosine decay.
double neff_learning_rate(const NeffTrainConfig& config, int step);

// Tunes glibc's allocator so the large per-step tensors are recycled rather
// than mapped and unmapped on every operation. No-op elsewhere.
void tune_allocator();

// Trains a fresh field set on the bundle's training views. Throws
// NumericalError naming the step and loss component on NaN/Inf.
FieldSet train_neff(const SceneBundle& bundle, const NeffTrainConfig& config,
                    std::vector<StepLog>* log = nullptr, const StepCallback& on_step = {});

// --- evaluation ---------------------------------------------------------------

struct ViewRender {
    Tensor color;    // (w*h) x 3
    Tensor depth;    // (w*h) x 1
    Tensor feature;  // (w*h) x c, empty unless requested
};

ViewRender render_view(const FieldSet& fields, const Camera& camera, int samples, bool with_feature,
                       const Vec3& background = Vec3::Constant(0.5));

struct NeffEvaluation {
    double psnr = 0.0;            // mean over held-out views
    double ssim = 0.0;
    double feature_cosine = 0.0;  // mean over object pixels of held-out views
    double surface_sdf = 0.0;     // mean |F_g| at the supplied surface points
};

NeffEvaluation evaluate_neff(const FieldSet& fields, const SceneBundle& bundle, const Tensor& surface_points,
                             int samples);

double mean_abs_sdf(const FieldSet& fields, const Tensor& points);

// --- biomass network -------------------------------------------------------------

struct BioPlot {
    std::string id;
    SurfacePointCloud cloud;
    double biomass = 0.0;  // grams, > 1
};

struct BioTrainConfig {
    int iterations = 2000;
    int batch_size = 4;
    bool augment = true;
    BioNetConfig net;
    AdamOptions adam{.lr = 1e-3};
    double lr_final_ratio = 0.1;
    int warmup_steps = 100;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;
    std::filesystem::path output_dir;
    int log_every = 1;
};

struct BioStepLog {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

using BioStepCallback = std::function<void(const BioStepLog&)>;

// Warmup then cosine decay, shared by both training loops.
double scheduled_learning_rate(double base, double final_ratio, int warmup, int iterations, int step);

// Batches are drawn without replacement from a shuffled plot order; within a
// batch the loss is reduced in plot order. The output scale is initialised to
// the mean label.
BioNet train_bionet(const std::vector<BioPlot>& plots, const BioTrainConfig& config,
                    std::vector<BioStepLog>* log = nullptr, const BioStepCallback& on_step = {});

// Un-augmented predictions, one per plot.
std::vector<double> predict_plots(const BioNet& net, const std::vector<BioPlot>& plots);

// A random cluster of sphere and box "plants" in the unit cube, extracted
// from its analytic SDF on a grid_res^3 lattice. Features are per-plant unit
// vectors with `channels` entries.
SurfacePointCloud synthetic_plot(std::uint64_t seed, int channels, int grid_res = 48);

}  // namespace neffbio
