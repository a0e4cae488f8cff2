// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/config.hpp"

#include "json.hpp"

#include <set>

namespace neffbio {

using nlohmann::json;

RunConfig default_run_config() {
    RunConfig c;
    c.neff.samples_per_ray = 24;
    c.neff.field.geometry_width = 64;
    c.neff.field.geometry_feature_dim = 64;
    c.neff.field.radiance_width = 32;
    c.neff.field.feature_width = 32;
    c.neff.checkpoint_every = 1000;

    BioNetConfig& n = c.bionet.net;
    n.base_channels = 8;
    n.d_model = 64;
    n.heads = 4;
    n.ffn = 128;
    n.dropout = 0.0;
    n.head_hidden = {64, 32};
    n.voxel.dims = {32, 32, 16};
    n.voxel.voxel_size = Vec3::Constant(0.075);
    c.bionet.checkpoint_every = 500;
    return c;
}

namespace {

// Reads typed keys from one JSON object and rejects the ones nobody asked for.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }
    ~Section() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + prefix() + k + "'");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + prefix() + key + "' has the wrong type");
        }
    }
    void get_path(const char* key, std::filesystem::path& out) {
        std::string s = out.string();
        get(key, s);
        out = s;
    }
    void get_vec3(const char* key, Vec3& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if (v.is_number()) {
            out = Vec3::Constant(v.get<double>());
        } else if (v.is_array() && v.size() == 3 && v[0].is_number() && v[1].is_number() && v[2].is_number()) {
            out = Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
        } else {
            throw ConfigError("config key '" + prefix() + key + "' must be a number or 3 numbers");
        }
    }
    const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }
    std::string prefix() const { return path_.empty() ? "" : path_ + "."; }

private:
    std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_adam(Section& s, AdamOptions& a) {
    s.get("lr", a.lr);
    s.get("beta1", a.beta1);
    s.get("beta2", a.beta2);
    s.get("adam_eps", a.eps);
}

void read_field(const json& j, FieldConfig& f) {
    Section s(j, "neff.field");
    s.get("position_frequencies", f.encoding.position_frequencies);
    s.get("direction_frequencies", f.encoding.direction_frequencies);
    s.get("geometry_layers", f.geometry_layers);
    s.get("geometry_width", f.geometry_width);
    s.get("geometry_feature_dim", f.geometry_feature_dim);
    s.get("feature_layers", f.feature_layers);
    s.get("feature_width", f.feature_width);
    s.get("feature_dim", f.feature_dim);
    s.get("radiance_layers", f.radiance_layers);
    s.get("radiance_width", f.radiance_width);
    s.get("init_radius", f.init_radius);
    s.get("init_density_std", f.init_density_std);
}

void read_neff(const json& j, NeffTrainConfig& n) {
    Section s(j, "neff");
    s.get("iterations", n.iterations);
    s.get("rays_per_step", n.rays_per_step);
    s.get("samples_per_ray", n.samples_per_ray);
    s.get("sparse_subset", n.sparse_subset);
    s.get("eikonal_points", n.eikonal_points);
    s.get("alpha", n.weights.alpha);
    s.get("beta", n.weights.beta);
    s.get("eikonal", n.weights.eikonal);
    read_adam(s, n.adam);
    s.get("lr_final_ratio", n.lr_final_ratio);
    s.get("warmup_steps", n.warmup_steps);
    s.get("checkpoint_every", n.checkpoint_every);
    s.get("log_every", n.log_every);
    if (const json* f = s.child("field")) read_field(*f, n.field);
}

void read_bionet(const json& j, BioTrainConfig& b) {
    Section s(j, "bionet");
    s.get("iterations", b.iterations);
    s.get("batch_size", b.batch_size);
    s.get("augment", b.augment);
    read_adam(s, b.adam);
    s.get("lr_final_ratio", b.lr_final_ratio);
    s.get("warmup_steps", b.warmup_steps);
    s.get("checkpoint_every", b.checkpoint_every);
    s.get("log_every", b.log_every);
    BioNetConfig& n = b.net;
    s.get("levels", n.levels);
    s.get("base_channels", n.base_channels);
    s.get("d_model", n.d_model);
    s.get("heads", n.heads);
    s.get("ffn", n.ffn);
    s.get("encoder_layers", n.encoder_layers);
    s.get("dropout", n.dropout);
    s.get("head_hidden", n.head_hidden);
    s.get("voxel_dims", n.voxel.dims);
    s.get_vec3("voxel_size", n.voxel.voxel_size);
    s.get("include_offsets", n.voxel.include_offsets);
}

void validate(const RunConfig& c) {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    if (c.neff.iterations < 0) throw ConfigError("neff.iterations must be >= 0");
    if (c.bionet.iterations < 0) throw ConfigError("bionet.iterations must be >= 0");
    positive(c.neff.rays_per_step, "neff.rays_per_step");
    positive(c.neff.samples_per_ray, "neff.samples_per_ray");
    positive(c.neff.sparse_subset, "neff.sparse_subset");
    positive(c.neff.log_every, "neff.log_every");
    positive(c.bionet.batch_size, "bionet.batch_size");
    positive(c.bionet.log_every, "bionet.log_every");
    positive(c.render_samples, "render_samples");
    if (c.grid_res < 16) throw ConfigError("grid_res must be >= 16");
    for (int d : c.bionet.net.voxel.dims) positive(d, "bionet.voxel_dims");
    if (!(c.bionet.net.voxel.voxel_size.minCoeff() > 0.0)) throw ConfigError("bionet.voxel_size must be positive");
    if (!(c.neff.adam.lr > 0.0) || !(c.bionet.adam.lr > 0.0)) throw ConfigError("lr must be positive");
}

}  // namespace

std::string apply_overrides(const std::string& json_text, std::span<const std::string> overrides) {
    json doc;
    try {
        doc = json_text.empty() ? json::object() : json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    for (const std::string& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
        const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        json* node = &doc;
        std::size_t start = 0;
        for (;;) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
            if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            if (node->is_null()) *node = json::object();
            start = dot + 1;
        }
    }
    return doc.dump(2);
}

RunConfig run_config_from_json(const std::string& json_text) {
    json doc;
    try {
        doc = json_text.empty() ? json::object() : json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c = default_run_config();
    {
        Section s(doc, "");
        s.get_path("scene", c.scene);
        s.get_path("output_dir", c.output_dir);
        s.get("seed", c.seed);
        s.get("grid_res", c.grid_res);
        s.get("tau", c.tau);
        s.get("render_samples", c.render_samples);
        if (const json* n = s.child("neff")) read_neff(*n, c.neff);
        if (const json* b = s.child("bionet")) read_bionet(*b, c.bionet);
    }
    validate(c);
    sync_run_config(c);
    return c;
}

std::string run_config_to_json(const RunConfig& c) {
    const FieldConfig& f = c.neff.field;
    const BioNetConfig& n = c.bionet.net;
    json j = {
        {"scene", c.scene.string()},
        {"output_dir", c.output_dir.string()},
        {"seed", c.seed},
        {"grid_res", c.grid_res},
        {"tau", c.tau},
        {"render_samples", c.render_samples},
        {"neff",
         {{"iterations", c.neff.iterations},
          {"rays_per_step", c.neff.rays_per_step},
          {"samples_per_ray", c.neff.samples_per_ray},
          {"sparse_subset", c.neff.sparse_subset},
          {"eikonal_points", c.neff.eikonal_points},
          {"alpha", c.neff.weights.alpha},
          {"beta", c.neff.weights.beta},
          {"eikonal", c.neff.weights.eikonal},
          {"lr", c.neff.adam.lr},
          {"beta1", c.neff.adam.beta1},
          {"beta2", c.neff.adam.beta2},
          {"adam_eps", c.neff.adam.eps},
          {"lr_final_ratio", c.neff.lr_final_ratio},
          {"warmup_steps", c.neff.warmup_steps},
          {"checkpoint_every", c.neff.checkpoint_every},
          {"log_every", c.neff.log_every},
          {"field",
           {{"position_frequencies", f.encoding.position_frequencies},
            {"direction_frequencies", f.encoding.direction_frequencies},
            {"geometry_layers", f.geometry_layers},
            {"geometry_width", f.geometry_width},
            {"geometry_feature_dim", f.geometry_feature_dim},
            {"feature_layers", f.feature_layers},
            {"feature_width", f.feature_width},
            {"feature_dim", f.feature_dim},
            {"radiance_layers", f.radiance_layers},
            {"radiance_width", f.radiance_width},
            {"init_radius", f.init_radius},
            {"init_density_std", f.init_density_std}}}}},
        {"bionet",
         {{"iterations", c.bionet.iterations},
          {"batch_size", c.bionet.batch_size},
          {"augment", c.bionet.augment},
          {"lr", c.bionet.adam.lr},
          {"beta1", c.bionet.adam.beta1},
          {"beta2", c.bionet.adam.beta2},
          {"adam_eps", c.bionet.adam.eps},
          {"lr_final_ratio", c.bionet.lr_final_ratio},
          {"warmup_steps", c.bionet.warmup_steps},
          {"checkpoint_every", c.bionet.checkpoint_every},
          {"log_every", c.bionet.log_every},
          {"levels", n.levels},
          {"base_channels", n.base_channels},
          {"d_model", n.d_model},
          {"heads", n.heads},
          {"ffn", n.ffn},
          {"encoder_layers", n.encoder_layers},
          {"dropout", n.dropout},
          {"head_hidden", n.head_hidden},
          {"voxel_dims", n.voxel.dims},
          {"voxel_size", {n.voxel.voxel_size.x(), n.voxel.voxel_size.y(), n.voxel.voxel_size.z()}},
          {"include_offsets", n.voxel.include_offsets}}}};
    return j.dump(2);
}

void sync_run_config(RunConfig& c) {
    c.neff.seed = c.seed;
    c.bionet.seed = c.seed;
    if (!c.output_dir.empty()) {
        c.neff.output_dir = c.output_dir;
        c.bionet.output_dir = c.output_dir;
    }
}

double effective_tau(const RunConfig& c) { return c.tau > 0.0 ? c.tau : 1.0 / (c.grid_res - 1); }

}  // namespace neffbio
