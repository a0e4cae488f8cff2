// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio.h"

#include "neffbio/config.hpp"
#include "neffbio/eval.hpp"

#include <fstream>
#include <memory>
#include <new>

using namespace neffbio;
namespace fs = std::filesystem;

struct nb_config {
    RunConfig value;
    std::string json;
};
struct nb_scene {
    SceneBundle bundle;
};
struct nb_fields {
    FieldSet fields;
};
struct nb_cloud {
    SurfacePointCloud cloud;
};
struct nb_bionet {
    BioNet net;
};

namespace {

thread_local std::string g_error;

template <class F>
nb_status guarded(F&& body) {
    try {
        body();
        g_error.clear();
        return NB_OK;
    } catch (const ConfigError& e) {
        g_error = e.what();
        return NB_ERR_CONFIG;
    } catch (const DataError& e) {
        g_error = e.what();
        return NB_ERR_DATA;
    } catch (const NumericalError& e) {
        g_error = e.what();
        return NB_ERR_NUMERIC;
    } catch (const ShapeError& e) {
        g_error = e.what();
        return NB_ERR_DATA;
    } catch (const std::bad_alloc&) {
        g_error = "out of memory";
        return NB_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_error = e.what();
        return NB_ERR_INTERNAL;
    }
}

template <class T>
void need(const T* p, const char* what) {
    if (!p) throw ConfigError(std::string(what) + " is null");
}

Image to_image(const Tensor& rgb, int w, int h) { return image_from_tensor(rgb.cwiseMax(0.0).cwiseMin(1.0), w, h); }

}  // namespace

extern "C" {

const char* nb_version(void) { return "0.1.0"; }
const char* nb_last_error(void) { return g_error.c_str(); }

nb_status nb_config_create(const char* json, const char* const* overrides, size_t n_overrides, nb_config** out) {
    return guarded([&] {
        need(out, "out");
        std::vector<std::string> ov;
        for (size_t i = 0; i < n_overrides; ++i) {
            need(overrides[i], "override");
            ov.emplace_back(overrides[i]);
        }
        const std::string text = apply_overrides(json ? json : "", ov);
        auto c = std::make_unique<nb_config>();
        c->value = run_config_from_json(text);
        *out = c.release();
    });
}

nb_status nb_config_json(nb_config* config, const char** out) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        config->json = run_config_to_json(config->value);
        *out = config->json.c_str();
    });
}

void nb_config_free(nb_config* config) { delete config; }

nb_status nb_synth_scene(const char* spec_json, const char* out_dir) {
    return guarded([&] {
        need(out_dir, "out_dir");
        const SynthSpec spec = spec_json ? synth_spec_from_json(spec_json) : sphere_on_plane_spec(64, 0);
        save_scene_bundle(synth_scene(spec), out_dir);
    });
}

nb_status nb_synth_plots(size_t n, int feature_channels, uint64_t seed, const char* out_dir) {
    return guarded([&] {
        need(out_dir, "out_dir");
        if (n == 0) throw ConfigError("plot count must be positive");
        const fs::path dir(out_dir);
        fs::create_directories(dir);
        std::ofstream manifest(dir / "dataset.json");
        manifest.precision(17);
        manifest << "{\"plots\": [\n";
        for (size_t i = 0; i < n; ++i) {
            const SurfacePointCloud cloud = synthetic_plot(seed * 1000003 + i, feature_channels);
            char name[32];
            std::snprintf(name, sizeof name, "plot_%03zu", i);
            write_ply(dir / (std::string(name) + ".ply"), cloud);
            manifest << "  {\"id\": \"" << name << "\", \"cloud\": \"" << name << ".ply\", \"biomass\": "
                     << 0.5 * static_cast<double>(cloud.size()) << '}' << (i + 1 < n ? ",\n" : "\n");
        }
        manifest << "]}\n";
    });
}

nb_status nb_scene_load(const char* dir, nb_scene** out) {
    return guarded([&] {
        need(dir, "dir");
        need(out, "out");
        *out = new nb_scene{load_scene_bundle(dir)};
    });
}

size_t nb_scene_view_count(const nb_scene* scene) { return scene ? scene->bundle.cameras.size() : 0; }
int nb_scene_feature_channels(const nb_scene* scene) { return scene ? scene->bundle.feature_channels() : 0; }
void nb_scene_free(nb_scene* scene) { delete scene; }

nb_status nb_train_neff(const nb_scene* scene, const nb_config* config, nb_fields** out) {
    return guarded([&] {
        need(scene, "scene");
        need(config, "config");
        need(out, "out");
        NeffTrainConfig cfg = config->value.neff;
        cfg.field.feature_dim = scene->bundle.feature_channels();
        if (!cfg.output_dir.empty()) {
            fs::create_directories(cfg.output_dir);
            std::ofstream(cfg.output_dir / "config.json") << run_config_to_json(config->value) << '\n';
        }
        *out = new nb_fields{train_neff(scene->bundle, cfg)};
    });
}

nb_status nb_fields_load(const char* path, nb_fields** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new nb_fields{FieldSet::from_records(read_checkpoint(path))};
    });
}

nb_status nb_fields_save(const nb_fields* fields, const char* path) {
    return guarded([&] {
        need(fields, "fields");
        need(path, "path");
        write_checkpoint(path, fields->fields.to_records());
    });
}

void nb_fields_free(nb_fields* fields) { delete fields; }

nb_status nb_render_view(const nb_fields* fields, const nb_scene* scene, size_t view, int samples,
                         const char* out_dir) {
    return guarded([&] {
        need(fields, "fields");
        need(scene, "scene");
        need(out_dir, "out_dir");
        if (samples <= 0) throw ConfigError("samples must be positive");
        const SceneBundle& b = scene->bundle;
        if (view >= b.cameras.size()) throw DataError("view index " + std::to_string(view) + " out of range");
        const Camera& cam = b.cameras[view];
        const ViewRender r = render_view(fields->fields, cam, samples, true);
        const fs::path dir(out_dir);
        fs::create_directories(dir);
        const std::string stem = fs::path(cam.image_name).stem().string();
        write_png(dir / (stem + "_rgb.png"), to_image(r.color, cam.width, cam.height));
        const double far = std::max(r.depth.maxCoeff(), 1e-12);
        write_png(dir / (stem + "_depth.png"), to_image((r.depth / far).replicate(1, 3), cam.width, cam.height));
        write_png(dir / (stem + "_feat.png"), to_image(feature_pca_rgb(r.feature), cam.width, cam.height));
    });
}

nb_status nb_evaluate_neff(const nb_fields* fields, const nb_scene* scene, int samples, nb_neff_metrics* out) {
    return guarded([&] {
        need(fields, "fields");
        need(scene, "scene");
        need(out, "out");
        if (samples <= 0) throw ConfigError("samples must be positive");
        const NeffEvaluation e = evaluate_neff(fields->fields, scene->bundle, scene->bundle.sparse_points, samples);
        *out = {e.psnr, e.ssim, e.feature_cosine, e.surface_sdf};
    });
}

nb_status nb_extract_surface(const nb_fields* fields, int grid_res, double tau, nb_cloud** out) {
    return guarded([&] {
        need(fields, "fields");
        need(out, "out");
        if (!(tau > 0.0)) throw ConfigError("tau must be positive");
        *out = new nb_cloud{extract_surface_features(fields->fields, grid_res, tau)};
    });
}

nb_status nb_cloud_load(const char* ply_path, nb_cloud** out) {
    return guarded([&] {
        need(ply_path, "ply_path");
        need(out, "out");
        *out = new nb_cloud{read_ply(ply_path)};
    });
}

nb_status nb_cloud_save(const nb_cloud* cloud, const char* ply_path) {
    return guarded([&] {
        need(cloud, "cloud");
        need(ply_path, "ply_path");
        write_ply(ply_path, cloud->cloud);
    });
}

size_t nb_cloud_size(const nb_cloud* cloud) { return cloud ? cloud->cloud.size() : 0; }
void nb_cloud_free(nb_cloud* cloud) { delete cloud; }

nb_status nb_train_bionet(const nb_cloud* const* clouds, const double* biomass, size_t n, const nb_config* config,
                          nb_bionet** out) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        if (n > 0) {
            need(clouds, "clouds");
            need(biomass, "biomass");
        }
        std::vector<BioPlot> plots;
        for (size_t i = 0; i < n; ++i) {
            need(clouds[i], "cloud");
            plots.push_back({std::to_string(i), clouds[i]->cloud, biomass[i]});
        }
        const BioTrainConfig& cfg = config->value.bionet;
        if (!cfg.output_dir.empty()) {
            fs::create_directories(cfg.output_dir);
            std::ofstream(cfg.output_dir / "config.json") << run_config_to_json(config->value) << '\n';
        }
        *out = new nb_bionet{train_bionet(plots, cfg)};
    });
}

nb_status nb_bionet_load(const char* path, nb_bionet** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new nb_bionet{BioNet::from_records(read_checkpoint(path))};
    });
}

nb_status nb_bionet_save(const nb_bionet* net, const char* path) {
    return guarded([&] {
        need(net, "net");
        need(path, "path");
        write_checkpoint(path, net->net.to_records());
    });
}

nb_status nb_bionet_predict(const nb_bionet* net, const nb_cloud* cloud, double* out) {
    return guarded([&] {
        need(net, "net");
        need(cloud, "cloud");
        need(out, "out");
        if (cloud->cloud.features.cols() != net->net.feature_channels())
            throw DataError("cloud has " + std::to_string(cloud->cloud.features.cols()) +
                            " feature channels, the network expects " + std::to_string(net->net.feature_channels()));
        const SparseVoxelGrid grid = voxelize(cloud->cloud, net->net.config().voxel);
        if (grid.size() == 0) throw DataError("no cloud points fall inside the voxel grid");
        *out = net->net.predict(grid);
    });
}

void nb_bionet_free(nb_bionet* net) { delete net; }

nb_status nb_extract_plots(const nb_scene* scene, const char* out_dir, size_t* n_plots) {
    return guarded([&] {
        need(scene, "scene");
        need(out_dir, "out_dir");
        const SceneBundle& b = scene->bundle;
        if (b.plots.empty()) throw DataError("scene has no plots");
        std::vector<Vec3> centres;
        for (const Camera& c : b.cameras) centres.push_back(c.center());
        for (const PlotSpec& p : b.plots) {
            const fs::path dir = fs::path(out_dir) / p.id;
            fs::create_directories(dir);
            std::ofstream views(dir / "views.txt");
            for (std::size_t v : extract_plot_views(centres, p)) views << b.cameras[v].image_name << '\n';
            std::ofstream pts(dir / "points.txt");
            pts.precision(17);
            for (std::size_t i : crop_plot_points(b.sparse_points, p, p.along_threshold, p.lateral_threshold))
                pts << b.sparse_points(static_cast<Eigen::Index>(i), 0) << ' '
                    << b.sparse_points(static_cast<Eigen::Index>(i), 1) << ' '
                    << b.sparse_points(static_cast<Eigen::Index>(i), 2) << '\n';
        }
        if (n_plots) *n_plots = b.plots.size();
    });
}

nb_status nb_regression_metrics(const double* predicted, const double* truth, size_t n, nb_regression* out) {
    return guarded([&] {
        need(out, "out");
        if (n > 0) {
            need(predicted, "predicted");
            need(truth, "truth");
        }
        const MetricReport r = regression_metrics({predicted, n}, {truth, n});
        *out = {r.mae, r.mare, r.rmse, r.n};
    });
}

}  // extern "C"
