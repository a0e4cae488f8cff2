// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/train.hpp"

#include "neffbio/eval.hpp"

#include <spdlog/spdlog.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <numeric>
#include <limits>

namespace neffbio {

namespace fs = std::filesystem;

void tune_allocator() {
#if defined(__GLIBC__)
    // Keep blocks up to 32 MB on the heap and never trim below 1 GB.
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

double scheduled_learning_rate(double base, double final_ratio, int warmup, int iterations, int step) {
    if (step < warmup) return base * (step + 1) / static_cast<double>(warmup);
    const int span = std::max(1, iterations - warmup);
    const double p = std::min(1.0, (step - warmup) / static_cast<double>(span));
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    return base * (final_ratio + (1.0 - final_ratio) * cosine);
}

double neff_learning_rate(const NeffTrainConfig& c, int step) {
    return scheduled_learning_rate(c.adam.lr, c.lr_final_ratio, c.warmup_steps, c.iterations, step);
}

namespace {

void check_config(const NeffTrainConfig& c) {
    if (c.iterations < 0) throw ConfigError("iterations must be >= 0");
    if (c.rays_per_step <= 0) throw ConfigError("rays_per_step must be positive");
    if (c.samples_per_ray <= 0) throw ConfigError("samples_per_ray must be positive");
    if (c.sparse_subset <= 0) throw ConfigError("sparse_subset must be positive");
    if (c.eikonal_points < 0) throw ConfigError("eikonal_points must be >= 0");
    if (!(c.adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (c.lr_final_ratio < 0.0 || c.lr_final_ratio > 1.0) throw ConfigError("lr_final_ratio must be in [0,1]");
    if (c.warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (c.weights.alpha < 0.0 || c.weights.beta < 0.0 || c.weights.eikonal < 0.0)
        throw ConfigError("loss weights must be >= 0");
}

void write_fields(const FieldSet& fields, const fs::path& path) { write_checkpoint(path, fields.to_records()); }

void check_finite(const NeffLoss& l, int step) {
    const std::pair<const char*, double> parts[] = {
        {"colour", l.color}, {"feature", l.feature}, {"geometry", l.geometry}, {"eikonal", l.eikonal}};
    for (const auto& [name, v] : parts)
        if (!std::isfinite(v))
            throw NumericalError("step " + std::to_string(step) + ": non-finite " + name + " loss");
    if (!std::isfinite(l.total.scalar()))
        throw NumericalError("step " + std::to_string(step) + ": non-finite total loss");
}

}  // namespace

FieldSet train_neff(const SceneBundle& bundle, const NeffTrainConfig& cfg, std::vector<StepLog>* log,
                    const StepCallback& on_step) {
    check_config(cfg);
    validate_bundle(bundle);
    const int c = bundle.feature_channels();
    if (c != cfg.field.feature_dim)
        throw ConfigError("field feature_dim " + std::to_string(cfg.field.feature_dim) +
                          " does not match the bundle's " + std::to_string(c) + " feature channels");
    const bool use_geometry = cfg.weights.beta > 0.0;
    if (use_geometry && bundle.sparse_points.rows() == 0)
        throw DataError("geometry supervision is enabled but the bundle has no sparse points");
    const std::vector<std::size_t> views = bundle.training_views();
    if (views.empty()) throw DataError("bundle has no training views");

    tune_allocator();
    FieldSet fields(cfg.field, cfg.seed);
    Adam adam(fields.parameters(), cfg.adam);

    std::vector<long> offsets{0};
    for (std::size_t v : views) offsets.push_back(offsets.back() + long(bundle.cameras[v].width) * bundle.cameras[v].height);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 17);
    std::uniform_int_distribution<long> pick_pixel(0, offsets.back() - 1);
    std::uniform_int_distribution<Eigen::Index> pick_point(0, std::max<Eigen::Index>(0, bundle.sparse_points.rows() - 1));
    std::uniform_real_distribution<double> cube(-1.0, 1.0);

    RenderOptions ropt;
    ropt.samples = cfg.samples_per_ray;
    ropt.mode = SampleMode::Stratified;

    std::ofstream csv;
    if (!cfg.output_dir.empty()) {
        fs::create_directories(cfg.output_dir);
        csv.open(cfg.output_dir / "neff_log.csv");
        csv << "step,total,colour,feature,geometry,eikonal,density_scale,lr,seconds\n";
    }

    const int R = cfg.rays_per_step;
    std::vector<Ray> rays(R);
    Tensor gt_color(R, 3), gt_feat(R, c), sparse(cfg.sparse_subset, 3), eik_pts(cfg.eikonal_points, 3);
    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 0; step < cfg.iterations; ++step) {
        const double lr = neff_learning_rate(cfg, step);
        adam.options().lr = lr;
        for (int r = 0; r < R; ++r) {
            const long gidx = pick_pixel(rng);
            const auto it = std::upper_bound(offsets.begin(), offsets.end(), gidx) - 1;
            const std::size_t view = views[static_cast<std::size_t>(it - offsets.begin())];
            const Camera& cam = bundle.cameras[view];
            const long local = gidx - *it;
            const int px = static_cast<int>(local % cam.width), py = static_cast<int>(local / cam.width);
            const double u = px + 0.5, v = py + 0.5;
            rays[r] = generate_ray(cam, {u, v});
            gt_color.row(r) = bundle.images[view].at(px, py).transpose();
            gt_feat.row(r) = sample_feature(bundle.features[view], u, v, cam.width, cam.height).transpose();
        }
        diff::Graph g;
        BatchRender br = render_batch(g, fields, rays, ropt, rng);
        std::optional<diff::Var> sdf_var, eik_var;
        if (use_geometry) {
            for (int i = 0; i < cfg.sparse_subset; ++i) sparse.row(i) = bundle.sparse_points.row(pick_point(rng));
            sdf_var = fields.geometry(g, g.constant(sparse)).sdf;
        }
        if (cfg.weights.eikonal > 0.0 && cfg.eikonal_points > 0) {
            for (Eigen::Index i = 0; i < eik_pts.size(); ++i) eik_pts.data()[i] = cube(rng);
            eik_var = eikonal_loss(g, fields, eik_pts);
        }
        NeffLoss loss = neff_loss(br.color, br.feature, gt_color, gt_feat, sdf_var, eik_var, cfg.weights);
        check_finite(loss, step);
        fields.parameters().zero_grad();
        g.backward(loss.total);
        adam.step();

        const StepLog entry{step,
                            loss.total.scalar(),
                            loss.color,
                            loss.feature,
                            loss.geometry,
                            loss.eikonal,
                            fields.density_scale(),
                            lr,
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        if (log) log->push_back(entry);
        if (on_step) on_step(entry);
        if (csv.is_open() && (step % cfg.log_every == 0 || step + 1 == cfg.iterations)) {
            csv << entry.step << ',' << entry.total << ',' << entry.color << ',' << entry.feature << ','
                << entry.geometry << ',' << entry.eikonal << ',' << entry.density_scale << ',' << entry.lr << ','
                << entry.seconds << '\n';
        }
        if (!cfg.output_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            step + 1 < cfg.iterations) {
            char name[48];
            std::snprintf(name, sizeof name, "neff_step%06d.nfbk", step + 1);
            write_fields(fields, cfg.output_dir / name);
        }
    }
    if (!cfg.output_dir.empty()) write_fields(fields, cfg.output_dir / "neff_final.nfbk");
    return fields;
}

// --- evaluation ------------------------------------------------------------------

ViewRender render_view(const FieldSet& fields, const Camera& camera, int samples, bool with_feature,
                       const Vec3& background) {
    std::vector<Pixel> pixels;
    pixels.reserve(static_cast<std::size_t>(camera.width) * camera.height);
    for (int y = 0; y < camera.height; ++y)
        for (int x = 0; x < camera.width; ++x) pixels.push_back({x + 0.5, y + 0.5});
    const std::vector<Ray> rays = generate_rays(camera, pixels);
    RenderOptions opt;
    opt.samples = samples;
    opt.mode = SampleMode::Uniform;
    opt.background = background;
    ViewRender out;
    render_rays_inference(fields, rays, opt, 0, out.color, out.depth, with_feature ? &out.feature : nullptr);
    return out;
}

double mean_abs_sdf(const FieldSet& fields, const Tensor& points) {
    if (points.rows() == 0) throw DataError("mean_abs_sdf: no points");
    Tensor sdf;
    fields.infer(points, &sdf, nullptr, nullptr);
    return sdf.cwiseAbs().mean();
}

NeffEvaluation evaluate_neff(const FieldSet& fields, const SceneBundle& bundle, const Tensor& surface_points,
                             int samples) {
    std::vector<std::size_t> views = bundle.test_views();
    if (views.empty()) views = bundle.training_views();
    NeffEvaluation ev;
    double cos_sum = 0.0;
    long cos_n = 0;
    for (std::size_t v : views) {
        const Camera& cam = bundle.cameras[v];
        const ViewRender r = render_view(fields, cam, samples, true);
        const Tensor gt = tensor_from_image(bundle.images[v]);
        ev.psnr += psnr(r.color, gt);
        ev.ssim += ssim(r.color, gt, cam.width, cam.height);
        for (int y = 0; y < cam.height; ++y) {
            for (int x = 0; x < cam.width; ++x) {
                const Eigen::VectorXd f = sample_feature(bundle.features[v], x + 0.5, y + 0.5, cam.width, cam.height);
                const bool object = bundle.depths.empty() ? f.norm() > 1e-6 : bundle.depths[v].at(y, x, 0) > 0.f;
                if (!object || f.norm() < 1e-12) continue;
                const Eigen::VectorXd p = r.feature.row(static_cast<Eigen::Index>(y) * cam.width + x).transpose();
                cos_sum += p.dot(f) / std::max(p.norm() * f.norm(), 1e-12);
                ++cos_n;
            }
        }
    }
    ev.psnr /= static_cast<double>(views.size());
    ev.ssim /= static_cast<double>(views.size());
    ev.feature_cosine = cos_n > 0 ? cos_sum / static_cast<double>(cos_n) : 0.0;
    if (surface_points.rows() > 0) ev.surface_sdf = mean_abs_sdf(fields, surface_points);
    return ev;
}

// --- biomass network ----------------------------------------------------------------

namespace {

void check_config(const BioTrainConfig& c, const std::vector<BioPlot>& plots) {
    if (c.iterations < 0) throw ConfigError("iterations must be >= 0");
    if (c.batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(c.adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (c.warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (plots.empty()) throw DataError("no training plots");
    const Eigen::Index ch = plots.front().cloud.features.cols();
    for (const auto& p : plots) {
        if (!(p.biomass > 1.0)) throw DataError("plot '" + p.id + "': biomass must exceed 1 gram");
        if (p.cloud.size() == 0) throw DataError("plot '" + p.id + "' has no points");
        if (p.cloud.features.cols() != ch) throw DataError("plot '" + p.id + "' has a different feature width");
    }
}

}  // namespace

BioNet train_bionet(const std::vector<BioPlot>& plots, const BioTrainConfig& cfg, std::vector<BioStepLog>* log,
                    const BioStepCallback& on_step) {
    check_config(cfg, plots);
    tune_allocator();
    BioNet net(cfg.net, static_cast<int>(plots.front().cloud.features.cols()), cfg.seed);
    double label_mean = 0.0;
    for (const auto& p : plots) label_mean += p.biomass;
    net.set_output_scale(label_mean / static_cast<double>(plots.size()));
    Adam adam(net.parameters(), cfg.adam);

    std::ofstream csv;
    if (!cfg.output_dir.empty()) {
        fs::create_directories(cfg.output_dir);
        csv.open(cfg.output_dir / "bionet_log.csv");
        csv << "step,loss,lr,seconds\n";
    }
    auto save = [&](const fs::path& path) { write_checkpoint(path, net.to_records()); };

    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 29);
    std::vector<std::size_t> order(plots.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), plots.size());
    std::vector<std::size_t> members(batch);
    std::vector<double> labels(batch);

    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 0; step < cfg.iterations; ++step) {
        const double lr = scheduled_learning_rate(cfg.adam.lr, cfg.lr_final_ratio, cfg.warmup_steps,
                                                  cfg.iterations, step);
        adam.options().lr = lr;
        for (std::size_t b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            members[b] = order[cursor++];
        }
        std::sort(members.begin(), members.end());

        diff::Graph g;
        std::vector<diff::Var> preds;
        for (std::size_t b = 0; b < batch; ++b) {
            const BioPlot& plot = plots[members[b]];
            labels[b] = plot.biomass;
            const SparseVoxelGrid grid =
                voxelize(cfg.augment ? augment(plot.cloud, sample_augment(rng)) : plot.cloud, cfg.net.voxel);
            if (grid.size() == 0) throw DataError("plot '" + plot.id + "' has no points inside the voxel grid");
            preds.push_back(net.predict(g, grid, &rng));
        }
        diff::Var loss = biomass_loss(diff::concat(preds, diff::Axis::Rows), labels);
        const double value = loss.scalar();
        if (!std::isfinite(value))
            throw NumericalError("non-finite biomass loss at step " + std::to_string(step));
        net.parameters().zero_grad();
        g.backward(loss);
        adam.step();

        const BioStepLog entry{step, value, lr,
                               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        if (log) log->push_back(entry);
        if (on_step) on_step(entry);
        if (csv.is_open() && (step % cfg.log_every == 0 || step + 1 == cfg.iterations))
            csv << entry.step << ',' << entry.loss << ',' << entry.lr << ',' << entry.seconds << '\n';
        if (!cfg.output_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            step + 1 < cfg.iterations) {
            char name[48];
            std::snprintf(name, sizeof name, "bionet_step%06d.nfbk", step + 1);
            save(cfg.output_dir / name);
        }
    }
    if (!cfg.output_dir.empty()) save(cfg.output_dir / "bionet_final.nfbk");
    return net;
}

std::vector<double> predict_plots(const BioNet& net, const std::vector<BioPlot>& plots) {
    std::vector<double> out;
    out.reserve(plots.size());
    for (const auto& p : plots) out.push_back(net.predict(voxelize(p.cloud, net.config().voxel)));
    return out;
}

SurfacePointCloud synthetic_plot(std::uint64_t seed, int channels, int grid_res) {
    if (channels <= 0) throw ConfigError("synthetic_plot: channels must be positive");
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 101);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n01;
    std::vector<Primitive> plants(1 + static_cast<int>(u(rng) * 4));
    for (auto& p : plants) {
        p.kind = u(rng) < 0.6 ? PrimitiveKind::Sphere : PrimitiveKind::Box;
        const double r = 0.12 + 0.25 * u(rng);
        p.size = p.kind == PrimitiveKind::Sphere ? Vec3::Constant(r) : Vec3(r, 0.6 * r + 0.4 * r * u(rng), r);
        p.center = Vec3(-0.55 + 1.1 * u(rng), -0.55 + 1.1 * u(rng), -0.6 + p.size.z());
        p.feature = Eigen::VectorXd(channels);
        for (int c = 0; c < channels; ++c) p.feature(c) = n01(rng);
        p.feature.normalize();
    }
    const SurfaceQuery query = [&](const Tensor& pts, Tensor& sdf, Tensor& feat) {
        sdf.resize(pts.rows(), 1);
        feat.resize(pts.rows(), channels);
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
            const Vec3 x = pts.row(i).transpose();
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t k = 0; k < plants.size(); ++k) {
                const double d = plants[k].sdf(x);
                if (d < best) best = d, arg = k;
            }
            sdf(i, 0) = best;
            feat.row(i) = plants[arg].feature.transpose();
        }
    };
    return extract_surface_features(query, grid_res, 1.0 / (grid_res - 1));
}

}  // namespace neffbio
