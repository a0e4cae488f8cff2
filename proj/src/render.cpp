// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace neffbio {

namespace {

constexpr double kPhiFloor = 1e-12;

double logistic(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

bool intersect_scene_cube(const Vec3& origin, const Vec3& direction, double& t_near, double& t_far) {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (std::abs(direction[a]) < 1e-15) {
            if (origin[a] < -1.0 || origin[a] > 1.0) return false;
            continue;
        }
        double t0 = (-1.0 - origin[a]) / direction[a];
        double t1 = (1.0 - origin[a]) / direction[a];
        if (t0 > t1) std::swap(t0, t1);
        lo = std::max(lo, t0);
        hi = std::min(hi, t1);
    }
    lo = std::max(lo, 0.0);
    if (!(hi > lo)) return false;
    t_near = lo;
    t_far = hi;
    return true;
}

Ray generate_ray(const Camera& camera, Pixel pixel) {
    if (!(camera.fx > 0.0) || !(camera.fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
    const Vec3 local((pixel.u - camera.cx) / camera.fx, (pixel.v - camera.cy) / camera.fy, 1.0);
    Ray ray;
    ray.origin = camera.center();
    ray.direction = (camera.rotation() * local).normalized();
    if (!intersect_scene_cube(ray.origin, ray.direction, ray.t_near, ray.t_far)) {
        ray.degenerate = true;
        ray.t_near = 0.0;
        ray.t_far = 1.0;
    }
    return ray;
}

std::vector<Ray> generate_rays(const Camera& camera, std::span<const Pixel> pixels) {
    std::vector<Ray> rays;
    rays.reserve(pixels.size());
    for (const Pixel& p : pixels) {
        if (p.u < -0.5 || p.v < -0.5 || p.u > camera.width - 0.5 || p.v > camera.height - 0.5) {
            throw DataError("pixel (" + std::to_string(p.u) + ", " + std::to_string(p.v) + ") outside image " +
                            std::to_string(camera.width) + "x" + std::to_string(camera.height));
        }
        rays.push_back(generate_ray(camera, p));
    }
    return rays;
}

Pixel project(const Camera& camera, const Vec3& world) {
    const Vec3 local = camera.rotation().transpose() * (world - camera.center());
    return {camera.fx * local.x() / local.z() + camera.cx, camera.fy * local.y() / local.z() + camera.cy};
}

RaySamples sample_ray(const Ray& ray, int n, SampleMode mode, std::mt19937_64& rng) {
    if (n < 2) throw ConfigError("sample_ray: need at least 2 samples per ray");
    RaySamples s;
    s.t.resize(static_cast<std::size_t>(n));
    s.dt.resize(static_cast<std::size_t>(n));
    s.x.resize(static_cast<std::size_t>(n));
    const double bin = (ray.t_far - ray.t_near) / n;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        const double u = mode == SampleMode::Uniform ? 0.5 : unit(rng);
        s.t[static_cast<std::size_t>(i)] = ray.t_near + (i + u) * bin;
    }
    for (int i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        s.dt[k] = (i + 1 < n ? s.t[k + 1] : ray.t_far) - s.t[k];
        s.x[k] = ray.origin + s.t[k] * ray.direction;
    }
    return s;
}

RaySamples sample_ray(const Ray& ray, int n, SampleMode mode, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_ray(ray, n, mode, rng);
}

double alpha_from_sdf(double sdf, double sdf_next, double scale) {
    const double p = std::max(logistic(scale * sdf), kPhiFloor);
    const double q = logistic(scale * sdf_next);
    return std::max((p - q) / p, 0.0);
}

double sigma_from_sdf(double sdf, double sdf_slope, double scale) {
    // dPhi(k s)/dt = k Phi (1 - Phi) ds/dt, so -Phi'/Phi = -k (1 - Phi) ds/dt.
    const double phi = logistic(scale * sdf);
    return std::max(-scale * (1.0 - phi) * sdf_slope, 0.0);
}

Compositing composite_alpha(std::span<const double> alphas) {
    Compositing c;
    c.weights.resize(alphas.size());
    c.transmittance.resize(alphas.size());
    double t = 1.0;
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        c.transmittance[i] = t;
        c.weights[i] = t * alphas[i];
        t *= 1.0 - alphas[i];
    }
    return c;
}

Compositing composite_sigma(std::span<const double> sigmas, std::span<const double> dt) {
    if (sigmas.size() != dt.size()) throw ShapeError("composite_sigma: sigma and dt lengths differ");
    std::vector<double> alphas(sigmas.size());
    for (std::size_t i = 0; i < sigmas.size(); ++i) alphas[i] = 1.0 - std::exp(-sigmas[i] * dt[i]);
    return composite_alpha(alphas);
}

// ---------------------------------------------------------------------------

diff::Var sdf_alpha(diff::Var sdf, diff::Var scale) {
    diff::Graph& g = *sdf.graph;
    if (scale.rows() != 1 || scale.cols() != 1) throw ShapeError("sdf_alpha: scale must be 1x1");
    const Tensor& s = sdf.value();
    if (s.cols() < 2) throw ShapeError("sdf_alpha: need at least two SDF samples per ray");
    const double k = scale.scalar();
    const Eigen::Index rays = s.rows(), n = s.cols() - 1;
    Tensor alpha(rays, n);
    for (Eigen::Index r = 0; r < rays; ++r) {
        for (Eigen::Index i = 0; i < n; ++i) alpha(r, i) = alpha_from_sdf(s(r, i), s(r, i + 1), k);
    }
    const diff::NodeId si = sdf.id, ki = scale.id;
    return g.custom(diff::Op::Custom, {si, ki}, std::move(alpha), [si, ki](diff::Graph& gr, diff::NodeId self) {
        const Tensor& s = gr.value(si);
        const double k = gr.value(ki)(0, 0);
        const Tensor& a = gr.value(self);
        const Tensor& ga = gr.grad_ref(self);
        const bool want_s = gr.requires_grad(si), want_k = gr.requires_grad(ki);
        Tensor* gs = want_s ? &gr.grad_ref(si) : nullptr;
        double gk = 0.0;
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            for (Eigen::Index i = 0; i < a.cols(); ++i) {
                if (!(a(r, i) > 0.0)) continue;
                const double phi_raw = logistic(k * s(r, i));
                const bool floored = phi_raw < kPhiFloor;
                const double p = floored ? kPhiFloor : phi_raw;
                const double q = logistic(k * s(r, i + 1));
                const double g = ga(r, i);
                // alpha = 1 - q / p
                const double dq = -g / p;                        // d alpha / d q
                const double dp = floored ? 0.0 : g * q / (p * p);  // d alpha / d p
                const double dq_dz = q * (1.0 - q);
                const double dp_dz = p * (1.0 - p);
                if (want_s) {
                    (*gs)(r, i) += dp * dp_dz * k;
                    (*gs)(r, i + 1) += dq * dq_dz * k;
                }
                if (want_k) gk += dp * dp_dz * s(r, i) + dq * dq_dz * s(r, i + 1);
            }
        }
        if (want_k) gr.grad_ref(ki)(0, 0) += gk;
    });
}

diff::Var composite_weights(diff::Var alpha) {
    diff::Graph& g = *alpha.graph;
    const Tensor& a = alpha.value();
    Tensor w(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        double t = 1.0;
        for (Eigen::Index i = 0; i < a.cols(); ++i) {
            w(r, i) = t * a(r, i);
            t *= 1.0 - a(r, i);
        }
    }
    const diff::NodeId ai = alpha.id;
    return g.custom(diff::Op::Custom, {ai}, std::move(w), [ai](diff::Graph& gr, diff::NodeId self) {
        const Tensor& a = gr.value(ai);
        const Tensor& gw = gr.grad_ref(self);
        Tensor& ga = gr.grad_ref(ai);
        const Eigen::Index n = a.cols();
        std::vector<double> trans(static_cast<std::size_t>(n));
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            double t = 1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                trans[static_cast<std::size_t>(i)] = t;
                t *= 1.0 - a(r, i);
            }
            // dL/dalpha_k = T_k (gw_k - U_k), U_k = sum_{i>k} gw_i alpha_i prod_{k<j<i} (1 - alpha_j)
            double u = 0.0;
            for (Eigen::Index k = n; k-- > 0;) {
                ga(r, k) += trans[static_cast<std::size_t>(k)] * (gw(r, k) - u);
                u = gw(r, k) * a(r, k) + (1.0 - a(r, k)) * u;
            }
        }
    });
}

diff::Var integrate_samples(diff::Var weights, diff::Var values) {
    diff::Graph& g = *weights.graph;
    const Tensor& w = weights.value();
    const Tensor& v = values.value();
    const Eigen::Index rays = w.rows(), n = w.cols(), k = v.cols();
    if (v.rows() != rays * n) {
        throw ShapeError("integrate_samples: values have " + std::to_string(v.rows()) + " rows, expected " +
                         std::to_string(rays * n));
    }
    Tensor out(rays, k);
    for (Eigen::Index r = 0; r < rays; ++r) {
        out.row(r).noalias() = w.row(r) * v.middleRows(r * n, n);
    }
    const diff::NodeId wi = weights.id, vi = values.id;
    return g.custom(diff::Op::Custom, {wi, vi}, std::move(out), [wi, vi](diff::Graph& gr, diff::NodeId self) {
        const Tensor& w = gr.value(wi);
        const Tensor& v = gr.value(vi);
        const Tensor& go = gr.grad_ref(self);
        const Eigen::Index n = w.cols();
        if (gr.requires_grad(wi)) {
            Tensor& gw = gr.grad_ref(wi);
            for (Eigen::Index r = 0; r < w.rows(); ++r) {
                gw.row(r).noalias() += go.row(r) * v.middleRows(r * n, n).transpose();
            }
        }
        if (gr.requires_grad(vi)) {
            Tensor& gv = gr.grad_ref(vi);
            for (Eigen::Index r = 0; r < w.rows(); ++r) {
                gv.middleRows(r * n, n).noalias() += w.row(r).transpose() * go.row(r);
            }
        }
    });
}

// ---------------------------------------------------------------------------

namespace {

struct RayLayout {
    Tensor points;      // R (n+1) x 3, ray-major; row n of each ray is at t_far
    Tensor directions;  // R n x 3
    Tensor t;           // R x n
    Tensor mask;        // R x 1, zero for degenerate rays
    std::vector<Eigen::Index> sample_rows;
    bool any_degenerate = false;
};

RayLayout layout_rays(std::span<const Ray> rays, const RenderOptions& options, std::mt19937_64& rng) {
    const int n = options.samples;
    const auto R = static_cast<Eigen::Index>(rays.size());
    RayLayout L;
    L.points.resize(R * (n + 1), 3);
    L.directions.resize(R * n, 3);
    L.t.resize(R, n);
    L.mask = Tensor::Ones(R, 1);
    L.sample_rows.reserve(static_cast<std::size_t>(R * n));
    for (Eigen::Index r = 0; r < R; ++r) {
        Ray ray = rays[static_cast<std::size_t>(r)];
        if (ray.degenerate) {
            L.mask(r, 0) = 0.0;
            L.any_degenerate = true;
            // Park the samples at the cube centre; their weight is masked out.
            ray.origin = Vec3::Zero();
            ray.t_near = 0.0;
            ray.t_far = 1e-3;
        }
        const RaySamples s = sample_ray(ray, n, options.mode, rng);
        for (int i = 0; i < n; ++i) {
            const Eigen::Index row = r * (n + 1) + i;
            L.points.row(row) = s.x[static_cast<std::size_t>(i)].transpose();
            L.directions.row(r * n + i) = ray.direction.transpose();
            L.t(r, i) = s.t[static_cast<std::size_t>(i)];
            L.sample_rows.push_back(row);
        }
        L.points.row(r * (n + 1) + n) = (ray.origin + ray.t_far * ray.direction).transpose();
    }
    return L;
}

Tensor expected_depth(const Tensor& w, const Tensor& t, std::span<const Ray> rays) {
    Tensor depth(w.rows(), 1);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const Ray& ray = rays[static_cast<std::size_t>(r)];
        if (ray.degenerate) {
            depth(r, 0) = ray.t_far;
            continue;
        }
        const double acc = w.row(r).sum();
        depth(r, 0) = w.row(r).dot(t.row(r)) / std::max(acc, 1e-8);
    }
    return depth;
}

Tensor transmittance_of(const Tensor& alpha) {
    Tensor tr(alpha.rows(), alpha.cols());
    for (Eigen::Index r = 0; r < alpha.rows(); ++r) {
        double t = 1.0;
        for (Eigen::Index i = 0; i < alpha.cols(); ++i) {
            tr(r, i) = t;
            t *= 1.0 - alpha(r, i);
        }
    }
    return tr;
}

}  // namespace

BatchRender render_batch(diff::Graph& g, FieldSet& fields, std::span<const Ray> rays, const RenderOptions& options,
                         std::mt19937_64& rng) {
    if (rays.empty()) throw DataError("render_batch: empty ray batch");
    const int n = options.samples;
    const auto R = static_cast<Eigen::Index>(rays.size());
    RayLayout L = layout_rays(rays, options, rng);

    Tensor sample_points(R * n, 3);
    for (std::size_t i = 0; i < L.sample_rows.size(); ++i) {
        sample_points.row(static_cast<Eigen::Index>(i)) = L.points.row(L.sample_rows[i]);
    }
    auto geo = fields.geometry(g, g.constant(std::move(L.points)));
    diff::Var sdf = diff::reshape(geo.sdf, R, n + 1);
    diff::Var alpha = sdf_alpha(sdf, fields.density_scale(g));
    if (L.any_degenerate) alpha = diff::mul(alpha, g.constant(L.mask));
    diff::Var weights = composite_weights(alpha);

    diff::Var geo_feat = diff::gather_rows(geo.feature, L.sample_rows);
    diff::Var rgb = fields.radiance(g, g.constant(std::move(sample_points)), g.constant(std::move(L.directions)), geo_feat);

    BatchRender out;
    diff::Var acc = diff::row_sum(weights);
    Tensor bg = options.background.transpose();
    diff::Var background = diff::mul(diff::shift(diff::scale(acc, -1.0), 1.0), g.constant(bg));
    out.color = diff::add(integrate_samples(weights, rgb), background);
    if (options.with_feature) out.feature = integrate_samples(weights, fields.feature(g, geo_feat));
    out.weights = weights;
    out.depth = expected_depth(weights.value(), L.t, rays);
    out.transmittance = transmittance_of(alpha.value());
    out.t = std::move(L.t);
    return out;
}

RenderResult render_ray(FieldSet& fields, const Ray& ray, int n, std::uint64_t seed, const RenderOptions& options) {
    RenderOptions opts = options;
    opts.samples = n;
    std::mt19937_64 rng(seed);
    diff::Graph g;
    const Ray rays[] = {ray};
    BatchRender b = render_batch(g, fields, rays, opts, rng);
    RenderResult res;
    res.color = b.color.value().row(0).transpose();
    if (opts.with_feature) res.feature = b.feature.value().row(0).transpose();
    res.depth = b.depth(0, 0);
    const Tensor& w = b.weights.value();
    res.weights.assign(w.data(), w.data() + w.size());
    res.transmittance.assign(b.transmittance.data(), b.transmittance.data() + b.transmittance.size());
    res.sigma.resize(res.weights.size());
    for (int i = 0; i < n; ++i) {
        const double dt = (i + 1 < n ? b.t(0, i + 1) : ray.t_far) - b.t(0, i);
        const double t_i = res.transmittance[static_cast<std::size_t>(i)];
        const double a = t_i > 0.0 ? res.weights[static_cast<std::size_t>(i)] / t_i : 0.0;
        res.sigma[static_cast<std::size_t>(i)] = a < 1.0 ? -std::log1p(-a) / dt : std::numeric_limits<double>::infinity();
    }
    return res;
}

void render_rays_inference(const FieldSet& fields, std::span<const Ray> rays, const RenderOptions& options,
                           std::uint64_t seed, Tensor& colors, Tensor& depths, Tensor* features) {
    const int n = options.samples;
    const auto total = static_cast<Eigen::Index>(rays.size());
    const int c = fields.config().feature_dim;
    colors.resize(total, 3);
    depths.resize(total, 1);
    if (features != nullptr) features->resize(total, c);
    std::mt19937_64 rng(seed);
    const double scale = fields.density_scale();
    constexpr Eigen::Index chunk = 256;
    for (Eigen::Index start = 0; start < total; start += chunk) {
        const Eigen::Index count = std::min(chunk, total - start);
        const auto sub = rays.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(count));
        RayLayout L = layout_rays(sub, options, rng);
        Tensor sdf, geo;
        fields.infer(L.points, &sdf, &geo, nullptr);
        Tensor alpha(count, n);
        for (Eigen::Index r = 0; r < count; ++r) {
            for (int i = 0; i < n; ++i) {
                alpha(r, i) = L.mask(r, 0) * alpha_from_sdf(sdf(r * (n + 1) + i, 0), sdf(r * (n + 1) + i + 1, 0), scale);
            }
        }
        Tensor w(count, n);
        for (Eigen::Index r = 0; r < count; ++r) {
            double t = 1.0;
            for (int i = 0; i < n; ++i) {
                w(r, i) = t * alpha(r, i);
                t *= 1.0 - alpha(r, i);
            }
        }
        Tensor sample_geo(count * n, geo.cols());
        Tensor sample_points(count * n, 3);
        for (std::size_t i = 0; i < L.sample_rows.size(); ++i) {
            sample_geo.row(static_cast<Eigen::Index>(i)) = geo.row(L.sample_rows[i]);
            sample_points.row(static_cast<Eigen::Index>(i)) = L.points.row(L.sample_rows[i]);
        }
        const Tensor rgb = fields.infer_radiance(sample_points, L.directions, sample_geo);
        Tensor feat;
        if (features != nullptr) {
            feat = fields.feature_net().infer(fields.parameters(), sample_geo);
        }
        const Tensor depth = expected_depth(w, L.t, sub);
        for (Eigen::Index r = 0; r < count; ++r) {
            const double acc = w.row(r).sum();
            colors.row(start + r) = w.row(r) * rgb.middleRows(r * n, n) + (1.0 - acc) * options.background.transpose();
            depths(start + r, 0) = depth(r, 0);
            if (features != nullptr) features->row(start + r) = w.row(r) * feat.middleRows(r * n, n);
        }
    }
}

}  // namespace neffbio
