// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// neffbio command-line tool. Thin layer over the C API.

#include "neffbio.h"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Carries an nb_status out of a subcommand.
struct Failure {
    nb_status status;
    std::string message;
};

void check(nb_status s) {
    if (s != NB_OK) throw Failure{s, nb_last_error()};
}

[[noreturn]] void fail(nb_status s, std::string message) { throw Failure{s, std::move(message)}; }

template <class T, void (*Free)(T*)>
struct Deleter {
    void operator()(T* p) const { Free(p); }
};
using ConfigPtr = std::unique_ptr<nb_config, Deleter<nb_config, nb_config_free>>;
using ScenePtr = std::unique_ptr<nb_scene, Deleter<nb_scene, nb_scene_free>>;
using FieldsPtr = std::unique_ptr<nb_fields, Deleter<nb_fields, nb_fields_free>>;
using CloudPtr = std::unique_ptr<nb_cloud, Deleter<nb_cloud, nb_cloud_free>>;
using NetPtr = std::unique_ptr<nb_bionet, Deleter<nb_bionet, nb_bionet_free>>;

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    if (!in) fail(NB_ERR_DATA, "cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse_json(const std::string& text, const std::string& what, nb_status status) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(status, what + ": " + e.what());
    }
}

ScenePtr load_scene(const std::string& dir) {
    nb_scene* s = nullptr;
    check(nb_scene_load(dir.c_str(), &s));
    return ScenePtr(s);
}

FieldsPtr load_fields(const std::string& path) {
    nb_fields* f = nullptr;
    check(nb_fields_load(path.c_str(), &f));
    return FieldsPtr(f);
}

CloudPtr load_cloud(const std::string& path) {
    nb_cloud* c = nullptr;
    check(nb_cloud_load(path.c_str(), &c));
    return CloudPtr(c);
}

NetPtr load_net(const std::string& path) {
    nb_bionet* n = nullptr;
    check(nb_bionet_load(path.c_str(), &n));
    return NetPtr(n);
}

// Options shared by the commands that take a run configuration.
struct ConfigArgs {
    std::string file;
    std::string scene;
    std::string out;
    std::vector<std::string> overrides;  // filled from unparsed --key=value flags

    void attach(CLI::App* cmd, bool with_scene) {
        cmd->add_option("-c,--config", file, "JSON run configuration")->check(CLI::ExistingFile);
        if (with_scene) cmd->add_option("--scene", scene, "Scene bundle directory");
        cmd->add_option("-o,--out", out, "Output directory");
        cmd->allow_extras();
    }

    ConfigPtr build(CLI::App* cmd) {
        for (const std::string& extra : cmd->remaining()) {
            if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos)
                fail(NB_ERR_CONFIG, "unexpected argument '" + extra + "' (overrides are --key=value)");
            overrides.push_back(extra.substr(2));
        }
        if (!scene.empty()) overrides.push_back("scene=" + json(scene).dump());
        if (!out.empty()) overrides.push_back("output_dir=" + json(out).dump());
        std::vector<const char*> ptrs;
        for (auto& o : overrides) ptrs.push_back(o.c_str());
        const std::string text = file.empty() ? std::string() : read_text(file);
        nb_config* c = nullptr;
        check(nb_config_create(text.empty() ? nullptr : text.c_str(), ptrs.data(), ptrs.size(), &c));
        return ConfigPtr(c);
    }
};

json resolved(nb_config* c) {
    const char* text = nullptr;
    check(nb_config_json(c, &text));
    return json::parse(text);
}

// {"plots": [{"id": ..., "cloud": "a.ply", "biomass": 123.0}]}; cloud paths
// are relative to the dataset file.
struct Dataset {
    std::vector<std::string> ids;
    std::vector<CloudPtr> clouds;
    std::vector<double> biomass;
};

Dataset load_dataset(const std::string& path) {
    const json j = parse_json(read_text(path), "dataset " + path, NB_ERR_DATA);
    if (!j.contains("plots") || !j["plots"].is_array()) fail(NB_ERR_DATA, "dataset " + path + " has no plots array");
    Dataset d;
    const fs::path base = fs::path(path).parent_path();
    for (const auto& p : j["plots"]) {
        if (!p.contains("cloud") || !p["cloud"].is_string())
            fail(NB_ERR_DATA, "dataset " + path + ": every plot needs a cloud path");
        d.ids.push_back(p.value("id", std::to_string(d.ids.size())));
        d.clouds.push_back(load_cloud((base / p["cloud"].get<std::string>()).string()));
        d.biomass.push_back(p.contains("biomass") && p["biomass"].is_number() ? p["biomass"].get<double>() : 0.0);
    }
    if (d.ids.empty()) fail(NB_ERR_DATA, "dataset " + path + " is empty");
    return d;
}

void write_json(const json& j, const std::string& path) {
    std::cout << j.dump(2) << '\n';
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) fail(NB_ERR_DATA, "cannot write " + path);
    out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neffbio: neural feature fields and biomass regression"};
    app.require_subcommand(1);
    app.set_version_flag("--version", nb_version());

    // synth
    auto* synth = app.add_subcommand("synth", "Write a synthetic scene bundle");
    std::string synth_spec, synth_out;
    synth->add_option("--spec", synth_spec, "JSON scene description")->check(CLI::ExistingFile);
    synth->add_option("-o,--out", synth_out, "Output directory")->required();
    std::size_t synth_plots = 0;
    int synth_channels = 8;
    std::uint64_t synth_seed = 0;
    synth->add_option("--plots", synth_plots, "Write this many synthetic plot clouds instead of a scene");
    synth->add_option("--channels", synth_channels, "Feature channels of synthetic plots");
    synth->add_option("--seed", synth_seed, "Seed for synthetic plots");

    // train-neff
    auto* train_neff = app.add_subcommand("train-neff", "Train the neural fields on a scene bundle");
    ConfigArgs neff_args;
    neff_args.attach(train_neff, true);

    // render
    auto* render = app.add_subcommand("render", "Render colour, depth and feature images");
    std::string render_scene, render_ckpt, render_out, render_views = "test";
    int render_samples = 64;
    render->add_option("--scene", render_scene, "Scene bundle directory")->required();
    render->add_option("--checkpoint", render_ckpt, "Field checkpoint")->required();
    render->add_option("-o,--out", render_out, "Output directory")->required();
    render->add_option("--views", render_views, "test, all, or a view index");
    render->add_option("--samples", render_samples, "Samples per ray");

    // extract-surface
    auto* surface = app.add_subcommand("extract-surface", "Extract a featured surface point cloud");
    std::string surface_ckpt, surface_out;
    int surface_res = 64;
    double surface_tau = 0.0;
    surface->add_option("--checkpoint", surface_ckpt, "Field checkpoint")->required();
    surface->add_option("-o,--out", surface_out, "Output PLY file")->required();
    surface->add_option("--grid-res", surface_res, "Lattice resolution per axis");
    surface->add_option("--tau", surface_tau, "SDF band (default: half the lattice spacing)");

    // train-bionet
    auto* train_bio = app.add_subcommand("train-bionet", "Train the biomass network");
    ConfigArgs bio_args;
    std::string bio_dataset;
    bio_args.attach(train_bio, false);
    train_bio->add_option("--dataset", bio_dataset, "Dataset JSON listing clouds and biomass")->required();

    // predict
    auto* predict = app.add_subcommand("predict", "Predict biomass for point clouds");
    std::string pred_ckpt, pred_dataset, pred_out;
    std::vector<std::string> pred_clouds;
    predict->add_option("--checkpoint", pred_ckpt, "BioNet checkpoint")->required();
    auto* pc = predict->add_option("--cloud", pred_clouds, "PLY point cloud(s)");
    auto* pd = predict->add_option("--dataset", pred_dataset, "Dataset JSON");
    pc->excludes(pd);
    predict->add_option("-o,--out", pred_out, "Write predictions JSON here");

    // extract-plots
    auto* plots = app.add_subcommand("extract-plots", "Select views and crop sparse points per plot");
    std::string plots_scene, plots_out;
    plots->add_option("--scene", plots_scene, "Scene bundle directory with plots.json")->required();
    plots->add_option("-o,--out", plots_out, "Output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate fields on held-out views or BioNet on a dataset");
    std::string eval_scene, eval_ckpt, eval_bionet, eval_dataset, eval_out;
    int eval_samples = 64;
    eval->add_option("--scene", eval_scene, "Scene bundle directory");
    eval->add_option("--checkpoint", eval_ckpt, "Field checkpoint");
    eval->add_option("--bionet", eval_bionet, "BioNet checkpoint");
    eval->add_option("--dataset", eval_dataset, "Dataset JSON with biomass labels");
    eval->add_option("--samples", eval_samples, "Samples per ray");
    eval->add_option("-o,--out", eval_out, "Write metrics JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : NB_ERR_CONFIG;
    }

    try {
        if (synth->parsed()) {
            if (synth_plots > 0) {
                check(nb_synth_plots(synth_plots, synth_channels, synth_seed, synth_out.c_str()));
            } else {
                const std::string spec = synth_spec.empty() ? std::string() : read_text(synth_spec);
                check(nb_synth_scene(spec.empty() ? nullptr : spec.c_str(), synth_out.c_str()));
            }
            std::cout << "wrote " << synth_out << '\n';
        } else if (train_neff->parsed()) {
            ConfigPtr cfg = neff_args.build(train_neff);
            const json r = resolved(cfg.get());
            if (r["scene"].get<std::string>().empty()) fail(NB_ERR_CONFIG, "no scene given (--scene or config)");
            ScenePtr scene = load_scene(r["scene"].get<std::string>());
            nb_fields* f = nullptr;
            check(nb_train_neff(scene.get(), cfg.get(), &f));
            FieldsPtr fields(f);
            nb_neff_metrics m{};
            check(nb_evaluate_neff(fields.get(), scene.get(), r["render_samples"].get<int>(), &m));
            const json metrics = {{"psnr", m.psnr}, {"ssim", m.ssim}, {"feature_cosine", m.feature_cosine},
                                  {"surface_sdf", m.surface_sdf}};
            const std::string out = r["output_dir"].get<std::string>();
            write_json(metrics, out.empty() ? std::string() : (fs::path(out) / "neff_metrics.json").string());
        } else if (render->parsed()) {
            ScenePtr scene = load_scene(render_scene);
            FieldsPtr fields = load_fields(render_ckpt);
            std::vector<size_t> views;
            const size_t n = nb_scene_view_count(scene.get());
            if (render_views == "all" || render_views == "test") {
                // Held-out views come after the training views in synthetic
                // bundles; "test" falls back to all views without a split.
                for (size_t v = 0; v < n; ++v) views.push_back(v);
                if (render_views == "test") {
                    const json cams = parse_json(read_text(fs::path(render_scene) / "cameras.json"), "cameras.json",
                                                 NB_ERR_DATA);
                    std::vector<size_t> test;
                    for (size_t v = 0; v < n; ++v)
                        if (cams["cameras"][v].value("split", "train") == "test") test.push_back(v);
                    if (!test.empty()) views = test;
                }
            } else {
                try {
                    views.push_back(static_cast<size_t>(std::stoul(render_views)));
                } catch (const std::exception&) {
                    fail(NB_ERR_CONFIG, "--views must be test, all or an index");
                }
            }
            for (size_t v : views) check(nb_render_view(fields.get(), scene.get(), v, render_samples, render_out.c_str()));
            std::cout << "rendered " << views.size() << " view(s) to " << render_out << '\n';
        } else if (surface->parsed()) {
            FieldsPtr fields = load_fields(surface_ckpt);
            const double tau = surface_tau > 0.0 ? surface_tau : 1.0 / (surface_res - 1);
            nb_cloud* c = nullptr;
            check(nb_extract_surface(fields.get(), surface_res, tau, &c));
            CloudPtr cloud(c);
            check(nb_cloud_save(cloud.get(), surface_out.c_str()));
            std::cout << "wrote " << nb_cloud_size(cloud.get()) << " points to " << surface_out << '\n';
        } else if (train_bio->parsed()) {
            ConfigPtr cfg = bio_args.build(train_bio);
            Dataset d = load_dataset(bio_dataset);
            std::vector<const nb_cloud*> clouds;
            for (auto& c : d.clouds) clouds.push_back(c.get());
            nb_bionet* n = nullptr;
            check(nb_train_bionet(clouds.data(), d.biomass.data(), clouds.size(), cfg.get(), &n));
            NetPtr net(n);
            std::vector<double> pred(clouds.size());
            for (size_t i = 0; i < clouds.size(); ++i) check(nb_bionet_predict(net.get(), clouds[i], &pred[i]));
            nb_regression reg{};
            check(nb_regression_metrics(pred.data(), d.biomass.data(), pred.size(), &reg));
            const json metrics = {{"mae", reg.mae}, {"mare", reg.mare}, {"rmse", reg.rmse}, {"n", reg.n}};
            const std::string out = resolved(cfg.get())["output_dir"].get<std::string>();
            write_json(metrics, out.empty() ? std::string() : (fs::path(out) / "bionet_metrics.json").string());
        } else if (predict->parsed()) {
            NetPtr net = load_net(pred_ckpt);
            json rows = json::array();
            auto run = [&](const std::string& id, const nb_cloud* cloud) {
                double m = 0.0;
                check(nb_bionet_predict(net.get(), cloud, &m));
                rows.push_back({{"id", id}, {"biomass", m}});
            };
            if (!pred_dataset.empty()) {
                Dataset d = load_dataset(pred_dataset);
                for (size_t i = 0; i < d.ids.size(); ++i) run(d.ids[i], d.clouds[i].get());
            } else {
                if (pred_clouds.empty()) fail(NB_ERR_CONFIG, "give --cloud or --dataset");
                for (const auto& p : pred_clouds) run(p, load_cloud(p).get());
            }
            write_json({{"predictions", rows}}, pred_out);
        } else if (plots->parsed()) {
            ScenePtr scene = load_scene(plots_scene);
            size_t n = 0;
            check(nb_extract_plots(scene.get(), plots_out.c_str(), &n));
            std::cout << "extracted " << n << " plot(s) to " << plots_out << '\n';
        } else if (eval->parsed()) {
            json metrics;
            const bool fields_mode = !eval_ckpt.empty(), bio_mode = !eval_bionet.empty();
            if (fields_mode == bio_mode) fail(NB_ERR_CONFIG, "give either --checkpoint or --bionet");
            if (fields_mode) {
                if (eval_scene.empty()) fail(NB_ERR_CONFIG, "--checkpoint needs --scene");
                ScenePtr scene = load_scene(eval_scene);
                FieldsPtr fields = load_fields(eval_ckpt);
                nb_neff_metrics m{};
                check(nb_evaluate_neff(fields.get(), scene.get(), eval_samples, &m));
                metrics = {{"psnr", m.psnr}, {"ssim", m.ssim}, {"feature_cosine", m.feature_cosine},
                           {"surface_sdf", m.surface_sdf}};
            } else {
                if (eval_dataset.empty()) fail(NB_ERR_CONFIG, "--bionet needs --dataset");
                NetPtr net = load_net(eval_bionet);
                Dataset d = load_dataset(eval_dataset);
                std::vector<double> pred(d.ids.size());
                for (size_t i = 0; i < d.ids.size(); ++i) check(nb_bionet_predict(net.get(), d.clouds[i].get(), &pred[i]));
                nb_regression reg{};
                check(nb_regression_metrics(pred.data(), d.biomass.data(), pred.size(), &reg));
                metrics = {{"mae", reg.mae}, {"mare", reg.mare}, {"rmse", reg.rmse}, {"n", reg.n}};
            }
            write_json(metrics, eval_out);
        }
    } catch (const Failure& f) {
        std::cerr << "error: " << f.message << '\n';
        return f.status;
    }
    return 0;
}
