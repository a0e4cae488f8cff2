// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/dataio.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace neffbio {

static_assert(std::endian::native == std::endian::little, "feature files are little-endian f32");

namespace fs = std::filesystem;
using nlohmann::json;

Vec3 Image::at(int x, int y) const {
    const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
    return Vec3(rgb[o], rgb[o + 1], rgb[o + 2]) / 255.0;
}

// --- PNG -----------------------------------------------------------------------

Image read_png(const fs::path& path) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    Image out;
    out.width = static_cast<int>(img.width);
    out.height = static_cast<int>(img.height);
    out.rgb.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    return out;
}

void write_png(const fs::path& path, const Image& image) {
    if (image.width <= 0 || image.height <= 0 ||
        image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3)
        throw DataError("image buffer does not match its size for " + path.string());
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.rgb.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + img.message);
}

Image image_from_tensor(const Tensor& rgb, int width, int height) {
    if (rgb.rows() != static_cast<Eigen::Index>(width) * height || rgb.cols() != 3)
        throw ShapeError("image tensor must be (w*h) x 3");
    Image out{width, height, std::vector<std::uint8_t>(rgb.size())};
    for (Eigen::Index i = 0; i < rgb.size(); ++i) {
        const double v = std::clamp(rgb.data()[i], 0.0, 1.0);
        out.rgb[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

Tensor tensor_from_image(const Image& image) {
    Tensor t(static_cast<Eigen::Index>(image.width) * image.height, 3);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = image.rgb[i] / 255.0;
    return t;
}

// --- feature files ---------------------------------------------------------------

FeatureMap read_feature_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open feature file " + path.string());
    char magic[4];
    std::uint32_t dims[3];
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(dims), sizeof dims);
    if (!in || std::memcmp(magic, "NFFT", 4) != 0)
        throw DataError("feature file " + path.string() + ": bad magic or truncated header");
    FeatureMap m{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]), {}};
    const std::uint64_t n = std::uint64_t(dims[0]) * dims[1] * dims[2];
    in.seekg(0, std::ios::end);
    const std::uint64_t payload = static_cast<std::uint64_t>(in.tellg()) - 16;
    if (n == 0 || payload != n * sizeof(float)) {
        std::ostringstream os;
        os << "feature file " << path.string() << ": header (h=" << dims[0] << ", w=" << dims[1]
           << ", c=" << dims[2] << ") disagrees with payload of " << payload << " bytes";
        throw DataError(os.str());
    }
    in.seekg(16);
    m.data.resize(n);
    in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw DataError("feature file " + path.string() + ": short read");
    return m;
}

void write_feature_file(const fs::path& path, const FeatureMap& map) {
    if (map.data.size() != static_cast<std::size_t>(map.height) * map.width * map.channels)
        throw DataError("feature map payload does not match its header for " + path.string());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write feature file " + path.string());
    const std::uint32_t dims[3] = {static_cast<std::uint32_t>(map.height), static_cast<std::uint32_t>(map.width),
                                   static_cast<std::uint32_t>(map.channels)};
    out.write("NFFT", 4);
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    out.write(reinterpret_cast<const char*>(map.data.data()),
              static_cast<std::streamsize>(map.data.size() * sizeof(float)));
    if (!out) throw DataError("short write to " + path.string());
}

Eigen::VectorXd sample_feature(const FeatureMap& map, double u, double v, int image_w, int image_h) {
    const double fx = std::clamp(u * map.width / image_w - 0.5, 0.0, map.width - 1.0);
    const double fy = std::clamp(v * map.height / image_h - 0.5, 0.0, map.height - 1.0);
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const int x1 = std::min(x0 + 1, map.width - 1), y1 = std::min(y0 + 1, map.height - 1);
    const double ax = fx - x0, ay = fy - y0;
    Eigen::VectorXd out(map.channels);
    for (int c = 0; c < map.channels; ++c) {
        out(c) = (1 - ay) * ((1 - ax) * map.at(y0, x0, c) + ax * map.at(y0, x1, c)) +
                 ay * ((1 - ax) * map.at(y1, x0, c) + ax * map.at(y1, x1, c));
    }
    return out;
}

// --- bundle ------------------------------------------------------------------------

std::vector<std::size_t> SceneBundle::training_views() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < cameras.size(); ++i)
        if (i >= held_out.size() || !held_out[i]) out.push_back(i);
    return out;
}

std::vector<std::size_t> SceneBundle::test_views() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < cameras.size() && i < held_out.size(); ++i)
        if (held_out[i]) out.push_back(i);
    return out;
}

namespace {

json matrix_to_json(const Eigen::Matrix4d& m) {
    json a = json::array();
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) a.push_back(m(r, c));
    return a;
}

Eigen::Matrix4d matrix_from_json(const json& a, const std::string& where) {
    if (!a.is_array() || a.size() != 16) throw DataError(where + ": expected 16 numbers (row-major 4x4)");
    Eigen::Matrix4d m;
    for (int i = 0; i < 16; ++i) m(i / 4, i % 4) = a.at(i).get<double>();
    return m;
}

json vec_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from_json(const json& a, const std::string& where) {
    if (!a.is_array() || a.size() != 3) throw DataError(where + ": expected a 3-vector");
    return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

std::string stem_of(const std::string& name) { return fs::path(name).stem().string(); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("missing file " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void validate_plot(const PlotSpec& p) {
    if ((p.endpoint_a - p.endpoint_b).norm() == 0.0) throw DataError("plot '" + p.id + "': coincident endpoints");
    if (!(p.along_threshold > 0.0) || !(p.lateral_threshold > 0.0))
        throw DataError("plot '" + p.id + "': thresholds must be positive");
    if (p.biomass && !(*p.biomass > 1.0))
        throw DataError("plot '" + p.id + "': biomass must be in grams (> 1)");
}

}  // namespace

void validate_bundle(const SceneBundle& b) {
    if (b.cameras.empty()) throw DataError("bundle has no cameras");
    if (b.images.size() != b.cameras.size())
        throw DataError("bundle: image count " + std::to_string(b.images.size()) + " != camera count " +
                        std::to_string(b.cameras.size()));
    if (b.features.size() != b.images.size())
        throw DataError("bundle: feature map count " + std::to_string(b.features.size()) + " != image count " +
                        std::to_string(b.images.size()));
    if (!b.depths.empty() && b.depths.size() != b.images.size()) throw DataError("bundle: depth map count mismatch");
    if (!b.held_out.empty() && b.held_out.size() != b.cameras.size()) throw DataError("bundle: split count mismatch");
    const int c = b.features.front().channels;
    for (std::size_t i = 0; i < b.cameras.size(); ++i) {
        const Camera& cam = b.cameras[i];
        const std::string who = "camera '" + cam.image_name + "'";
        if (cam.width <= 0 || cam.height <= 0) throw DataError(who + ": non-positive size");
        if (!(cam.fx > 0.0) || !(cam.fy > 0.0)) throw DataError(who + ": focal lengths must be positive");
        const Eigen::Matrix3d r = cam.rotation();
        if (!cam.world_from_camera.allFinite() ||
            (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-4 ||
            std::abs(r.determinant() - 1.0) > 1e-4)
            throw DataError(who + ": world_from_camera rotation is not orthonormal (tol 1e-4)");
        if ((cam.world_from_camera.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 0.0)
            throw DataError(who + ": world_from_camera last row must be 0 0 0 1");
        const Image& im = b.images[i];
        if (im.width != cam.width || im.height != cam.height)
            throw DataError(who + ": image size differs from camera size");
        if (im.rgb.size() != static_cast<std::size_t>(im.width) * im.height * 3)
            throw DataError(who + ": image buffer size mismatch");
        const FeatureMap& f = b.features[i];
        if (f.channels != c) throw DataError(who + ": feature channel count differs between images");
        if (f.height <= 0 || f.width <= 0 || f.data.size() != static_cast<std::size_t>(f.height) * f.width * c)
            throw DataError(who + ": feature map payload mismatch");
        for (float v : f.data)
            if (!std::isfinite(v)) throw DataError(who + ": non-finite feature value");
        if (!b.depths.empty() && b.depths[i].channels != 1) throw DataError(who + ": depth map must have c=1");
    }
    if (b.sparse_points.size() > 0 && (b.sparse_points.cols() != 3 || !b.sparse_points.allFinite()))
        throw DataError("sparse_points must be finite k x 3");
    if (!b.norm_transform.allFinite()) throw DataError("norm_transform is not finite");
    for (const auto& p : b.plots) validate_plot(p);
}

std::vector<PlotSpec> read_plots(const fs::path& path) {
    const json j = read_json(path);
    std::vector<PlotSpec> out;
    try {
        for (const auto& e : j.at("plots")) {
            PlotSpec p;
            p.id = e.at("id").get<std::string>();
            const auto& ends = e.at("endpoints");
            if (!ends.is_array() || ends.size() != 2) throw DataError(path.string() + ": plot needs two endpoints");
            p.endpoint_a = vec_from_json(ends[0], path.string() + " endpoints");
            p.endpoint_b = vec_from_json(ends[1], path.string() + " endpoints");
            p.along_threshold = e.value("along_threshold", 1.5);
            p.lateral_threshold = e.value("lateral_threshold", 7.5);
            if (e.contains("biomass") && !e["biomass"].is_null()) p.biomass = e["biomass"].get<double>();
            validate_plot(p);
            out.push_back(std::move(p));
        }
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return out;
}

void write_plots(const fs::path& path, const std::vector<PlotSpec>& plots) {
    json arr = json::array();
    for (const auto& p : plots) {
        json e = {{"id", p.id},
                  {"endpoints", json::array({vec_to_json(p.endpoint_a), vec_to_json(p.endpoint_b)})},
                  {"along_threshold", p.along_threshold},
                  {"lateral_threshold", p.lateral_threshold}};
        if (p.biomass) e["biomass"] = *p.biomass;
        arr.push_back(std::move(e));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << json{{"plots", arr}}.dump(2) << '\n';
}

SceneBundle load_scene_bundle(const fs::path& dir) {
    const fs::path cams_path = dir / "cameras.json";
    const json j = read_json(cams_path);
    SceneBundle b;
    try {
        if (j.contains("norm_transform"))
            b.norm_transform = matrix_from_json(j["norm_transform"], cams_path.string() + " norm_transform");
        for (const auto& e : j.at("cameras")) {
            Camera c;
            c.image_name = e.at("image_name").get<std::string>();
            c.width = e.at("width").get<int>();
            c.height = e.at("height").get<int>();
            c.fx = e.at("fx").get<double>();
            c.fy = e.at("fy").get<double>();
            c.cx = e.at("cx").get<double>();
            c.cy = e.at("cy").get<double>();
            c.world_from_camera =
                matrix_from_json(e.at("world_from_camera"), cams_path.string() + " camera '" + c.image_name + "'");
            b.held_out.push_back(e.value("split", std::string("train")) == "test");
            b.cameras.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw DataError(cams_path.string() + ": " + e.what());
    }
    const bool has_depth = fs::is_directory(dir / "depth");
    for (const auto& c : b.cameras) {
        b.images.push_back(read_png(dir / "images" / c.image_name));
        b.features.push_back(read_feature_file(dir / "features" / (stem_of(c.image_name) + ".bin")));
        if (has_depth) b.depths.push_back(read_feature_file(dir / "depth" / (stem_of(c.image_name) + ".bin")));
    }
    const fs::path pts = dir / "sparse_points.txt";
    if (fs::exists(pts)) {
        std::ifstream in(pts);
        std::vector<double> v;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            std::istringstream ls(line);
            double x, y, z;
            if (!(ls >> x >> y >> z))
                throw DataError(pts.string() + ": line " + std::to_string(lineno) + " is not 'x y z'");
            v.insert(v.end(), {x, y, z});
        }
        b.sparse_points = Eigen::Map<Tensor>(v.data(), static_cast<Eigen::Index>(v.size() / 3), 3);
    } else {
        b.sparse_points = Tensor(0, 3);
    }
    if (fs::exists(dir / "plots.json")) b.plots = read_plots(dir / "plots.json");
    validate_bundle(b);
    return b;
}

void save_scene_bundle(const SceneBundle& b, const fs::path& dir) {
    validate_bundle(b);
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "features");
    if (!b.depths.empty()) fs::create_directories(dir / "depth");
    json cams = json::array();
    for (std::size_t i = 0; i < b.cameras.size(); ++i) {
        const Camera& c = b.cameras[i];
        cams.push_back({{"image_name", c.image_name},
                        {"width", c.width},
                        {"height", c.height},
                        {"fx", c.fx},
                        {"fy", c.fy},
                        {"cx", c.cx},
                        {"cy", c.cy},
                        {"world_from_camera", matrix_to_json(c.world_from_camera)},
                        {"split", i < b.held_out.size() && b.held_out[i] ? "test" : "train"}});
        write_png(dir / "images" / c.image_name, b.images[i]);
        write_feature_file(dir / "features" / (stem_of(c.image_name) + ".bin"), b.features[i]);
        if (!b.depths.empty()) write_feature_file(dir / "depth" / (stem_of(c.image_name) + ".bin"), b.depths[i]);
    }
    {
        std::ofstream out(dir / "cameras.json");
        if (!out) throw DataError("cannot write " + (dir / "cameras.json").string());
        out << json{{"cameras", cams}, {"norm_transform", matrix_to_json(b.norm_transform)}}.dump(2) << '\n';
    }
    {
        std::ofstream out(dir / "sparse_points.txt");
        char buf[96];
        for (Eigen::Index i = 0; i < b.sparse_points.rows(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", b.sparse_points(i, 0), b.sparse_points(i, 1),
                          b.sparse_points(i, 2));
            out << buf;
        }
    }
    if (!b.plots.empty()) write_plots(dir / "plots.json", b.plots);
}

// --- analytic scenes ------------------------------------------------------------------

double Primitive::sdf(const Vec3& x) const {
    switch (kind) {
        case PrimitiveKind::Sphere:
            return (x - center).norm() - size.x();
        case PrimitiveKind::Box: {
            const Vec3 q = (x - center).cwiseAbs() - size;
            return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
        }
        case PrimitiveKind::Plane:
            return normal.normalized().dot(x - center);
    }
    return 0.0;
}

Vec3 Primitive::gradient(const Vec3& x) const {
    switch (kind) {
        case PrimitiveKind::Sphere: {
            const Vec3 d = x - center;
            const double n = d.norm();
            return n > 0.0 ? Vec3(d / n) : Vec3::UnitZ();
        }
        case PrimitiveKind::Box: {
            const Vec3 d = x - center;
            const Vec3 q = d.cwiseAbs() - size;
            Vec3 g;
            if (q.maxCoeff() > 0.0) {
                g = q.cwiseMax(0.0);
            } else {
                Eigen::Index k;
                q.maxCoeff(&k);
                g = Vec3::Zero();
                g(k) = 1.0;
            }
            for (int k = 0; k < 3; ++k)
                if (d(k) < 0.0) g(k) = -g(k);
            return g.normalized();
        }
        case PrimitiveKind::Plane:
            return normal.normalized();
    }
    return Vec3::UnitZ();
}

SceneHit scene_sdf(const std::vector<Primitive>& prims, const Vec3& x) {
    SceneHit h{std::numeric_limits<double>::infinity(), -1};
    for (std::size_t i = 0; i < prims.size(); ++i) {
        const double d = prims[i].sdf(x);
        if (d < h.sdf) h = {d, static_cast<int>(i)};
    }
    return h;
}

std::optional<double> sphere_trace(const std::vector<Primitive>& prims, const Ray& ray, int* hit_index) {
    if (ray.degenerate) return std::nullopt;
    double t = ray.t_near;
    for (int it = 0; it < 2000 && t <= ray.t_far; ++it) {
        const SceneHit h = scene_sdf(prims, ray.origin + t * ray.direction);
        // Entering the cube inside solid counts as a hit at the entry point.
        if (h.sdf < 1e-10) {
            if (hit_index) *hit_index = h.index;
            return t;
        }
        t += h.sdf;
    }
    return std::nullopt;
}

namespace {

Camera look_at_origin(const Vec3& position, int w, int h, double focal, const std::string& name) {
    const Vec3 forward = (-position).normalized();
    Vec3 right = forward.cross(Vec3::UnitZ());
    if (right.norm() < 1e-9) right = Vec3::UnitX();
    right.normalize();
    const Vec3 down = forward.cross(right);
    Camera c;
    c.image_name = name;
    c.width = w;
    c.height = h;
    c.fx = c.fy = focal;
    c.cx = w / 2.0;
    c.cy = h / 2.0;
    c.world_from_camera.setIdentity();
    c.world_from_camera.block<3, 1>(0, 0) = right;
    c.world_from_camera.block<3, 1>(0, 1) = down;
    c.world_from_camera.block<3, 1>(0, 2) = forward;
    c.world_from_camera.block<3, 1>(0, 3) = position;
    return c;
}

// Surface area of the part of a primitive that can lie in the cube; used for
// area-weighted sampling.
double sampling_area(const Primitive& p) {
    switch (p.kind) {
        case PrimitiveKind::Sphere:
            return 4.0 * std::numbers::pi * p.size.x() * p.size.x();
        case PrimitiveKind::Box:
            return 8.0 * (p.size.x() * p.size.y() + p.size.y() * p.size.z() + p.size.x() * p.size.z());
        case PrimitiveKind::Plane:
            return 12.0;  // bounded by the cube cross-section
    }
    return 0.0;
}

Vec3 sample_on(const Primitive& p, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> nd;
    switch (p.kind) {
        case PrimitiveKind::Sphere: {
            Vec3 d(nd(rng), nd(rng), nd(rng));
            return p.center + p.size.x() * d.normalized();
        }
        case PrimitiveKind::Box: {
            const Vec3& s = p.size;
            const double axy = s.x() * s.y(), ayz = s.y() * s.z(), axz = s.x() * s.z();
            const double r = std::uniform_real_distribution<double>(0.0, axy + ayz + axz)(rng);
            const int axis = r < ayz ? 0 : (r < ayz + axz ? 1 : 2);
            Vec3 q(u(rng) * s.x(), u(rng) * s.y(), u(rng) * s.z());
            q(axis) = (u(rng) < 0.0 ? -1.0 : 1.0) * s(axis);
            return p.center + q;
        }
        case PrimitiveKind::Plane: {
            const Vec3 n = p.normal.normalized();
            Vec3 a = n.unitOrthogonal(), b = n.cross(a);
            // Project the plane point nearest the origin, then spread over the cube.
            const Vec3 base = -n * n.dot(-p.center);
            return base + std::sqrt(3.0) * (u(rng) * a + u(rng) * b);
        }
    }
    return p.center;
}

bool in_cube(const Vec3& x) { return x.cwiseAbs().maxCoeff() <= 1.0; }

}  // namespace

Tensor sample_surface_points(const std::vector<Primitive>& prims, int count, std::uint64_t seed) {
    if (prims.empty() || count <= 0) return Tensor(0, 3);
    std::mt19937_64 rng(seed);
    std::vector<double> areas;
    for (const auto& p : prims) areas.push_back(sampling_area(p));
    std::discrete_distribution<int> pick(areas.begin(), areas.end());
    Tensor out(count, 3);
    int n = 0;
    for (long attempt = 0; n < count && attempt < 1000L * count; ++attempt) {
        const Vec3 x = sample_on(prims[pick(rng)], rng);
        if (!in_cube(x) || std::abs(scene_sdf(prims, x).sdf) >= 1e-6) continue;
        out.row(n++) = x.transpose();
    }
    if (n < count) throw DataError("could not place surface samples inside the scene cube");
    return out;
}

SynthSpec sphere_on_plane_spec(int feature_channels, std::uint64_t seed) {
    if (feature_channels < 1) throw ConfigError("feature_channels must be positive");
    SynthSpec s;
    s.seed = seed;
    std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
    std::normal_distribution<double> nd;
    auto label = [&] {
        Eigen::VectorXd f(feature_channels);
        for (int i = 0; i < feature_channels; ++i) f(i) = nd(rng);
        return Eigen::VectorXd(f.normalized());
    };
    Primitive ground;
    ground.kind = PrimitiveKind::Box;
    ground.center = Vec3(0.0, 0.0, -0.55);
    ground.size = Vec3(0.85, 0.85, 0.05);
    ground.albedo = Vec3(0.45, 0.6, 0.3);
    ground.feature = label();
    Primitive ball;
    ball.kind = PrimitiveKind::Sphere;
    ball.center = Vec3(0.0, 0.0, -0.1);
    ball.size = Vec3::Constant(0.4);
    ball.albedo = Vec3(0.85, 0.35, 0.2);
    ball.feature = label();
    s.primitives = {ground, ball};
    return s;
}

SceneBundle synth_scene(const SynthSpec& spec) {
    if (spec.primitives.empty()) throw ConfigError("synth: primitive list is empty");
    if (spec.n_views < 1 || spec.n_test_views < 0 || spec.width < 1 || spec.height < 1 || !(spec.focal > 0.0) ||
        spec.feature_downsample < 1 || spec.sparse_points < 0)
        throw ConfigError("synth: invalid view/resolution settings");
    const int c = static_cast<int>(spec.primitives.front().feature.size());
    if (c < 1) throw ConfigError("synth: primitives need a feature label");
    for (const auto& p : spec.primitives)
        if (p.feature.size() != c) throw ConfigError("synth: feature labels must share one length");
    if (!(spec.camera_distance > std::sqrt(3.0))) throw ConfigError("synth: cameras must lie outside the scene cube");

    const Vec3 light = spec.light_direction.normalized();
    const int fw = std::max(1, spec.width / spec.feature_downsample);
    const int fh = std::max(1, spec.height / spec.feature_downsample);

    SceneBundle b;
    const int total = spec.n_views + spec.n_test_views;
    for (int v = 0; v < total; ++v) {
        const bool test = v >= spec.n_views;
        const double phi = test ? 2.0 * std::numbers::pi * ((v - spec.n_views) + 0.5) / spec.n_test_views
                                : 2.0 * std::numbers::pi * v / spec.n_views;
        const double e = spec.camera_elevation;
        const Vec3 pos =
            spec.camera_distance * Vec3(std::cos(e) * std::cos(phi), std::cos(e) * std::sin(phi), std::sin(e));
        char name[32];
        std::snprintf(name, sizeof name, "%s_%03d.png", test ? "test" : "view", v);
        Camera cam = look_at_origin(pos, spec.width, spec.height, spec.focal, name);

        Image img{spec.width, spec.height, std::vector<std::uint8_t>(std::size_t(spec.width) * spec.height * 3)};
        FeatureMap depth{spec.height, spec.width, 1, std::vector<float>(std::size_t(spec.width) * spec.height, 0.f)};
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                const Ray ray = generate_ray(cam, {x + 0.5, y + 0.5});
                int idx = -1;
                Vec3 col = spec.background;
                if (auto t = sphere_trace(spec.primitives, ray, &idx)) {
                    const Primitive& p = spec.primitives[idx];
                    const Vec3 n = p.gradient(ray.origin + *t * ray.direction);
                    const double lit = spec.ambient + (1.0 - spec.ambient) * std::max(0.0, n.dot(light));
                    col = (p.albedo * lit).cwiseMin(1.0).cwiseMax(0.0);
                    depth.data[std::size_t(y) * spec.width + x] = static_cast<float>(*t);
                }
                for (int k = 0; k < 3; ++k)
                    img.rgb[(std::size_t(y) * spec.width + x) * 3 + k] =
                        static_cast<std::uint8_t>(std::lround(col(k) * 255.0));
            }
        }
        FeatureMap feat{fh, fw, c, std::vector<float>(std::size_t(fw) * fh * c, 0.f)};
        for (int y = 0; y < fh; ++y) {
            for (int x = 0; x < fw; ++x) {
                const double u = (x + 0.5) * spec.width / fw, vv = (y + 0.5) * spec.height / fh;
                int idx = -1;
                if (sphere_trace(spec.primitives, generate_ray(cam, {u, vv}), &idx)) {
                    for (int k = 0; k < c; ++k)
                        feat.data[(std::size_t(y) * fw + x) * c + k] =
                            static_cast<float>(spec.primitives[idx].feature(k));
                }
            }
        }
        b.cameras.push_back(std::move(cam));
        b.images.push_back(std::move(img));
        b.features.push_back(std::move(feat));
        b.depths.push_back(std::move(depth));
        b.held_out.push_back(test);
    }
    b.sparse_points = sample_surface_points(spec.primitives, spec.sparse_points, spec.seed);
    // One row along x through the middle of the scene, so plot extraction
    // has something to work on.
    PlotSpec row;
    row.id = "row_0";
    row.endpoint_a = Vec3(-0.5, 0.0, -0.5);
    row.endpoint_b = Vec3(0.5, 0.0, -0.5);
    b.plots.push_back(row);
    validate_bundle(b);
    return b;
}

SynthSpec synth_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synth spec: malformed JSON: ") + e.what());
    }
    try {
        const int c = j.value("feature_channels", 64);
        const std::uint64_t seed = j.value("seed", std::uint64_t{0});
        SynthSpec s = sphere_on_plane_spec(c, seed);
        if (j.contains("primitives")) {
            s.primitives.clear();
            for (const auto& e : j["primitives"]) {
                Primitive p;
                const std::string kind = e.at("kind").get<std::string>();
                if (kind == "sphere") {
                    p.kind = PrimitiveKind::Sphere;
                    p.size = Vec3::Constant(e.at("radius").get<double>());
                } else if (kind == "box") {
                    p.kind = PrimitiveKind::Box;
                    p.size = vec_from_json(e.at("half_extents"), "box half_extents");
                } else if (kind == "plane") {
                    p.kind = PrimitiveKind::Plane;
                    p.normal = vec_from_json(e.at("normal"), "plane normal");
                } else {
                    throw ConfigError("synth spec: unknown primitive kind '" + kind + "'");
                }
                p.center = vec_from_json(e.at(kind == "plane" ? "point" : "center"), kind + " position");
                if (e.contains("albedo")) p.albedo = vec_from_json(e["albedo"], kind + " albedo");
                const auto f = e.at("feature").get<std::vector<double>>();
                p.feature = Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
                s.primitives.push_back(std::move(p));
            }
        }
        s.n_views = j.value("n_views", s.n_views);
        s.n_test_views = j.value("n_test_views", s.n_test_views);
        s.width = j.value("width", s.width);
        s.height = j.value("height", s.height);
        s.focal = j.value("focal", s.focal);
        s.camera_distance = j.value("camera_distance", s.camera_distance);
        s.camera_elevation = j.value("camera_elevation", s.camera_elevation);
        s.feature_downsample = j.value("feature_downsample", s.feature_downsample);
        s.sparse_points = j.value("sparse_points", s.sparse_points);
        s.ambient = j.value("ambient", s.ambient);
        if (j.contains("light_direction")) s.light_direction = vec_from_json(j["light_direction"], "light_direction");
        if (j.contains("background")) s.background = vec_from_json(j["background"], "background");
        return s;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synth spec: ") + e.what());
    } catch (const DataError& e) {
        throw ConfigError(std::string("synth spec: ") + e.what());
    }
}

// --- plots ------------------------------------------------------------------------------

namespace {

struct RowFrame {
    Vec3 center;
    Vec3 dir;
};

RowFrame row_frame(const PlotSpec& plot) {
    const Vec3 d = plot.endpoint_b - plot.endpoint_a;
    if (d.norm() == 0.0) throw DataError("plot '" + plot.id + "': coincident endpoints");
    return {(plot.endpoint_a + plot.endpoint_b) / 2.0, d.normalized()};
}

}  // namespace

std::vector<std::size_t> extract_plot_views(const std::vector<Vec3>& positions, const PlotSpec& plot) {
    if (!(plot.along_threshold > 0.0) || !(plot.lateral_threshold > 0.0))
        throw DataError("plot '" + plot.id + "': thresholds must be positive");
    const RowFrame f = row_frame(plot);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const Vec3 d = positions[i] - f.center;
        if (std::abs(d.dot(f.dir)) <= plot.along_threshold && d.cross(f.dir).norm() <= plot.lateral_threshold)
            out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> crop_plot_points(const Tensor& points, const PlotSpec& plot, double half_length,
                                          double half_width) {
    if (points.size() > 0 && points.cols() != 3) throw ShapeError("crop_plot_points: points must be k x 3");
    const RowFrame f = row_frame(plot);
    std::vector<std::size_t> out;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const Vec3 d = points.row(i).transpose() - f.center;
        if (std::abs(d.dot(f.dir)) <= half_length && d.cross(f.dir).norm() <= half_width)
            out.push_back(static_cast<std::size_t>(i));
    }
    return out;
}

}  // namespace neffbio
