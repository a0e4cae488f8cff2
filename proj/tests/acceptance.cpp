// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// Acceptance harness. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.

#include "neffbio/config.hpp"
#include "neffbio/eval.hpp"
#include "support/gradcheck.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

using namespace neffbio;
using diff::Var;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format_line(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Ray ray_between(const Vec3& from, const Vec3& to) {
    Ray r;
    r.origin = from;
    r.direction = (to - from).normalized();
    if (!intersect_scene_cube(r.origin, r.direction, r.t_near, r.t_far)) r.degenerate = true;
    return r;
}

FieldConfig small_fields() {
    FieldConfig c;
    c.geometry_width = 12;
    c.geometry_feature_dim = 6;
    c.feature_width = 8;
    c.feature_dim = 3;
    c.radiance_width = 8;
    c.geometry_layers = 3;
    c.feature_layers = 1;
    c.radiance_layers = 2;
    return c;
}

// --- 1: gradient suite ------------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, double>> worst;  // name, error / tolerance
    bool ok = true;
    auto record = [&](const std::string& name, const test::GradCheckResult& r, double tol) {
        worst.emplace_back(name, r.max_rel_error / tol);
        if (!(r.max_rel_error < tol) || r.probes < 100) ok = false;
    };

    FieldConfig fc = small_fields();
    FieldSet fs(fc, 3);
    std::mt19937_64 rng(1);
    const Tensor pts = test::random_tensor(20, 3, rng, -0.9, 0.9);
    Tensor dirs = test::random_tensor(20, 3, rng);
    dirs.rowwise().normalize();
    const std::string geo_prefix = "fg", rad_prefix = "fc", feat_prefix = "ff";
    record("geometry",
           test::check_parameter_gradients(
               fs.parameters(),
               [&](diff::Graph& g) {
                   auto geo = fs.geometry(g, g.constant(pts));
                   return diff::add(diff::sum(diff::sin(geo.sdf)), diff::mean(diff::square(geo.feature)));
               },
               100, 2, 1e-5, 1e-6, geo_prefix),
           1e-4);
    record("radiance",
           test::check_parameter_gradients(
               fs.parameters(),
               [&](diff::Graph& g) {
                   auto geo = fs.geometry(g, g.constant(pts));
                   return diff::sum(diff::square(fs.radiance(g, g.constant(pts), g.constant(dirs), geo.feature)));
               },
               100, 3, 1e-5, 1e-6, rad_prefix),
           1e-4);
    record("feature",
           test::check_parameter_gradients(
               fs.parameters(),
               [&](diff::Graph& g) {
                   auto geo = fs.geometry(g, g.constant(pts));
                   return diff::sum(diff::sin(fs.feature(g, geo.feature)));
               },
               100, 4, 1e-5, 1e-6, feat_prefix),
           1e-4);

    std::vector<Ray> rays;
    for (int k = 0; k < 4; ++k) rays.push_back(ray_between(Vec3(2.5, 0.4 * k - 0.6, 0.3), Vec3(0, 0, 0.1 * k)));
    RenderOptions opt;
    opt.samples = 16;
    opt.mode = SampleMode::Uniform;
    const Tensor gt = test::random_tensor(4, 3, rng, 0.0, 1.0);
    record("render",
           test::check_parameter_gradients(
               fs.parameters(),
               [&](diff::Graph& g) {
                   std::mt19937_64 r(0);
                   BatchRender b = render_batch(g, fs, rays, opt, r);
                   return diff::add(diff::mean(diff::square(diff::sub(b.color, g.constant(gt)))),
                                    diff::mean(diff::square(b.feature)));
               },
               100, 5),
           1e-3);

    const Tensor gtc = test::random_tensor(6, 3, rng, 0.0, 1.0), gtf = test::random_tensor(6, 3, rng);
    record("neff loss",
           test::check_gradients(
               {test::random_tensor(6, 3, rng, 0.0, 1.0), test::random_tensor(6, 3, rng),
                test::random_tensor(10, 1, rng, -0.2, 0.2), Tensor::Constant(1, 1, 0.3)},
               [&](diff::Graph&, std::vector<Var>& p) {
                   return neff_loss(p[0], p[1], gtc, gtf, p[2], p[3], LossWeights{0.7, 0.2, 0.1}).total;
               },
               100, 6),
           1e-4);
    const Tensor eik_pts = test::random_tensor(16, 3, rng, -0.8, 0.8);
    record("eikonal",
           test::check_parameter_gradients(
               fs.parameters(), [&](diff::Graph& g) { return eikonal_loss(g, fs, eik_pts); }, 100, 7, 1e-5, 1e-6,
               geo_prefix),
           1e-4);
    Tensor x(1, 8);
    x << -2.5, -0.6, -0.2, 0.1, 0.4, 0.8, 1.3, 3.0;
    record("smooth-l1",
           test::check_gradients({x}, [](diff::Graph&, std::vector<Var>& p) { return diff::sum(smooth_l1(p[0])); },
                                 100, 8),
           1e-4);
    const std::vector<double> labels = {12.0, 300.0, 45.5, 800.0};
    Tensor pred(4, 1);
    pred << 14.0, 280.0, 45.2, 850.0;
    record("biomass loss",
           test::check_gradients({pred}, [&](diff::Graph&, std::vector<Var>& p) { return biomass_loss(p[0], labels); },
                                 100, 9),
           1e-4);

    const double elapsed = seconds_since(t0);
    if (elapsed > 120.0) ok = false;
    std::ostringstream d;
    d << "worst err/tol:";
    for (auto& [n, r] : worst) d << ' ' << n << ' ' << format_line("%.2g", r) << ',';
    d << format_line(" %.1f s (< 120 s)", elapsed);
    return {ok, d.str()};
}

// --- 2: volume rendering invariants --------------------------------------------------

Outcome render_invariants() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> len(4, 128);
    int bad_weight = 0, bad_sum = 0, bad_trans = 0;
    const int trials = 100000;
    for (int k = 0; k < trials; ++k) {
        // Random smooth SDF along a unit ray: linear part plus two sinusoids.
        const int n = len(rng);
        const double scale = std::exp(std::log(1.0) + u(rng) * std::log(2000.0));
        const double a0 = u(rng) - 0.5, slope = 2.0 * (u(rng) - 0.5), b1 = 0.3 * u(rng), f1 = 20.0 * u(rng),
                     b2 = 0.1 * u(rng), f2 = 60.0 * u(rng);
        auto sdf = [&](double t) { return a0 + slope * t + b1 * std::sin(f1 * t) + b2 * std::cos(f2 * t); };
        std::vector<double> alpha(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) alpha[i] = alpha_from_sdf(sdf(double(i) / n), sdf(double(i + 1) / n), scale);
        const auto c = composite_alpha(alpha);
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            if (!(c.weights[i] >= 0.0)) ++bad_weight;
            total += c.weights[i];
            if (i > 0 && c.transmittance[i] > c.transmittance[i - 1]) ++bad_trans;
        }
        if (total > 1.0 + 1e-6) ++bad_sum;
    }

    Ray r;
    r.t_near = 0.0;
    r.t_far = 1.0;
    const RaySamples s = sample_ray(r, 256, SampleMode::Uniform, 0);
    double worst_const = 0.0;
    for (double sigma : {0.1, 0.5, 1.0, 2.0, 4.0, 8.0}) {
        auto c = composite_sigma(std::vector<double>(256, sigma), s.dt);
        const double total = std::accumulate(c.weights.begin(), c.weights.end(), 0.0);
        worst_const = std::max(worst_const, std::abs(1.0 - total - std::exp(-sigma)));
    }

    // Linear SDF s(t) = t_cross - t along random rays through the cube.
    int crossing_misses = 0, crossings = 0;
    std::normal_distribution<double> nd;
    for (int k = 0; k < 2000; ++k) {
        const Ray ray = ray_between(Vec3(nd(rng), nd(rng), nd(rng)).normalized() * 3.0,
                                    Vec3(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5));
        if (ray.degenerate) continue;
        const int n = 64;
        const RaySamples rs = sample_ray(ray, n, SampleMode::Uniform, 0);
        const double spacing = (ray.t_far - ray.t_near) / n;
        const double t_cross = ray.t_near + (0.1 + 0.8 * u(rng)) * (ray.t_far - ray.t_near);
        const double scale = 20.0 + 200.0 * u(rng);
        std::vector<double> alpha(n);
        for (int i = 0; i < n; ++i) {
            const double tn = i + 1 < n ? rs.t[i + 1] : ray.t_far;
            alpha[i] = alpha_from_sdf(t_cross - rs.t[i], t_cross - tn, scale);
        }
        const auto c = composite_alpha(alpha);
        const auto arg = std::max_element(c.weights.begin(), c.weights.end()) - c.weights.begin();
        ++crossings;
        if (std::abs(rs.t[static_cast<std::size_t>(arg)] - t_cross) > spacing) ++crossing_misses;
    }
    const double elapsed = seconds_since(t0);
    const bool ok = bad_weight == 0 && bad_sum == 0 && bad_trans == 0 && worst_const < 1e-3 && crossing_misses == 0 &&
                    elapsed < 60.0;
    return {ok, format_line("%d rays: negative w %d, sum>1 %d, T increases %d; constant sigma err %.2e (< 1e-3); "
                    "crossing misses %d/%d; %.1f s (< 60 s)",
                    trials, bad_weight, bad_sum, bad_trans, worst_const, crossing_misses, crossings, elapsed)};
}

// --- 3 and 4: NeFF training ---------------------------------------------------------

struct NeffRun {
    NeffEvaluation eval;
    double seconds = 0.0;
};

NeffRun neff_run(std::uint64_t seed, double beta) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig rc = default_run_config();
    const int channels = 64;
    const SynthSpec spec = sphere_on_plane_spec(channels, seed);
    const SceneBundle bundle = synth_scene(spec);
    NeffTrainConfig cfg = rc.neff;
    cfg.seed = seed;
    cfg.weights.beta = beta;
    cfg.field.feature_dim = channels;
    cfg.checkpoint_every = 0;
    const FieldSet fields = train_neff(bundle, cfg, nullptr, [&](const StepLog& s) {
        if (s.step % 1000 == 0)
            std::fprintf(stderr, "  [seed %llu beta %.2g] step %d loss %.4f %.0f s\n",
                         static_cast<unsigned long long>(seed), beta, s.step, s.total, s.seconds);
    });
    const Tensor surface = sample_surface_points(spec.primitives, 1000, 12345 + seed);
    NeffRun out;
    out.eval = evaluate_neff(fields, bundle, surface, rc.render_samples);
    out.seconds = seconds_since(t0);
    return out;
}

std::map<std::pair<std::uint64_t, double>, NeffRun> g_neff_runs;

const NeffRun& cached_neff_run(std::uint64_t seed, double beta) {
    auto it = g_neff_runs.find({seed, beta});
    if (it == g_neff_runs.end()) it = g_neff_runs.emplace(std::make_pair(seed, beta), neff_run(seed, beta)).first;
    return it->second;
}

Outcome neff_training() {
    const NeffRun& r = cached_neff_run(0, 0.1);
    const NeffEvaluation& e = r.eval;
    const bool ok = e.psnr >= 24.0 && e.feature_cosine >= 0.95 && e.surface_sdf <= 0.01 && r.seconds <= 1800.0;
    return {ok, format_line("PSNR %.2f dB (>= 24), feature cosine %.4f (>= 0.95), mean |sdf| %.4f (<= 0.01), "
                    "SSIM %.3f, %.0f s (<= 1800 s)",
                    e.psnr, e.feature_cosine, e.surface_sdf, e.ssim, r.seconds)};
}

Outcome geometry_ablation(int seeds) {
    bool ok = true;
    std::ostringstream d;
    for (int s = 0; s < seeds; ++s) {
        const double with = cached_neff_run(static_cast<std::uint64_t>(s), 0.1).eval.surface_sdf;
        const double without = cached_neff_run(static_cast<std::uint64_t>(s), 0.0).eval.surface_sdf;
        const double ratio = without / with;
        if (!(ratio >= 2.0)) ok = false;
        d << format_line("seed %d: %.4f vs %.4f (x%.2f); ", s, without, with, ratio);
    }
    d << "need beta=0 / beta=0.1 >= 2 on every seed";
    return {ok, d.str()};
}

// --- 5: sparse convolution ----------------------------------------------------------

Outcome sparse_conv_oracle() {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> dim(1, 16), ch(1, 4);
    std::uniform_real_distribution<double> dens(0.02, 0.4), u(0.0, 1.0);
    double worst_sub = 0.0, worst_str = 0.0;
    int site_mismatch = 0;
    const int grids = 200;
    for (int t = 0; t < grids; ++t) {
        SparseVoxelGrid g;
        g.dims = {dim(rng), dim(rng), dim(rng)};
        const double p = dens(rng);
        for (int i = 0; i < g.dims[0]; ++i)
            for (int j = 0; j < g.dims[1]; ++j)
                for (int k = 0; k < g.dims[2]; ++k)
                    if (u(rng) < p) g.sites.push_back({i, j, k});
        if (g.sites.empty()) g.sites.push_back({0, 0, 0});
        const int cin = ch(rng), cout = ch(rng);
        g.values = test::random_tensor(static_cast<Eigen::Index>(g.sites.size()), cin, rng);
        const Tensor kernel = test::random_tensor(27 * cin, cout, rng), bias = test::random_tensor(1, cout, rng);

        // Dense volume and dense convolution, stride 1 and 2, zero padding 1.
        const auto [X, Y, Z] = g.dims;
        std::vector<double> vol(static_cast<std::size_t>(X) * Y * Z * cin, 0.0);
        auto at = [&](int i, int j, int k, int c) -> double& {
            return vol[((static_cast<std::size_t>(i) * Y + j) * Z + k) * cin + c];
        };
        for (std::size_t s = 0; s < g.sites.size(); ++s)
            for (int c = 0; c < cin; ++c) at(g.sites[s][0], g.sites[s][1], g.sites[s][2], c) = g.values(Eigen::Index(s), c);
        auto dense = [&](int stride, int i, int j, int k) {
            Eigen::RowVectorXd out = bias.row(0);
            for (int a = -1; a <= 1; ++a)
                for (int b = -1; b <= 1; ++b)
                    for (int c = -1; c <= 1; ++c) {
                        const int x = stride * i + a, y = stride * j + b, z = stride * k + c;
                        if (x < 0 || y < 0 || z < 0 || x >= X || y >= Y || z >= Z) continue;
                        for (int q = 0; q < cin; ++q)
                            out += at(x, y, z, q) * kernel.row(kernel_tap(a, b, c) * cin + q);
                    }
            return out;
        };

        const SparseVoxelGrid sub = sparse_conv3d(g, kernel, bias, ConvMode::Submanifold);
        if (sub.sites != g.sites) ++site_mismatch;
        for (std::size_t s = 0; s < sub.size(); ++s) {
            const auto& q = sub.sites[s];
            worst_sub = std::max(worst_sub,
                                 (sub.values.row(Eigen::Index(s)) - dense(1, q[0], q[1], q[2])).cwiseAbs().maxCoeff());
        }

        // Strided: the dense result re-sparsified onto the image of the input
        // sites under floor(p / 2).
        const SparseVoxelGrid str = sparse_conv3d(g, kernel, bias, ConvMode::Strided);
        std::set<Index3> image;
        for (const auto& s : g.sites) image.insert({s[0] / 2, s[1] / 2, s[2] / 2});
        if (std::set<Index3>(str.sites.begin(), str.sites.end()) != image) ++site_mismatch;
        for (std::size_t s = 0; s < str.size(); ++s) {
            const auto& q = str.sites[s];
            worst_str = std::max(worst_str,
                                 (str.values.row(Eigen::Index(s)) - dense(2, q[0], q[1], q[2])).cwiseAbs().maxCoeff());
        }
    }
    const bool ok = worst_sub < 1e-9 && worst_str < 1e-9 && site_mismatch == 0;
    return {ok, format_line("%d grids: submanifold max err %.2e, strided max err %.2e (< 1e-9), site mismatches %d", grids,
                    worst_sub, worst_str, site_mismatch)};
}

// --- 6: transformer -------------------------------------------------------------------

BioNetConfig small_bionet() {
    BioNetConfig c;
    c.levels = 2;
    c.base_channels = 2;
    c.d_model = 8;
    c.heads = 2;
    c.ffn = 12;
    c.encoder_layers = 2;
    c.dropout = 0.0;
    c.head_hidden = {6, 4};
    c.voxel.dims = {8, 8, 4};
    c.voxel.voxel_size = Vec3::Constant(0.25);
    return c;
}

Outcome transformer_invariance() {
    BioNet net(small_bionet(), 2, 6);
    std::mt19937_64 rng(6);
    const int L = net.token_count(), d = small_bionet().d_model;
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const Tensor tokens = test::random_tensor(L, d, rng), pos = test::random_tensor(L, d, rng);
        std::vector<int> perm(L - 1);
        std::iota(perm.begin(), perm.end(), 1);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor pt = tokens, pp = pos;
        for (int i = 0; i < L - 1; ++i) {
            pt.row(i + 1) = tokens.row(perm[i]);
            pp.row(i + 1) = pos.row(perm[i]);
        }
        diff::Graph g;
        const double a = net.transformer_predict(g, {g.constant(tokens), g.constant(pos)}, nullptr).scalar();
        const double b = net.transformer_predict(g, {g.constant(pt), g.constant(pp)}, nullptr).scalar();
        worst = std::max(worst, std::abs(a - b));
    }
    // Readout gradients: encoder, final norm, head and the Biomass token.
    const Tensor tokens = test::random_tensor(L, d, rng);
    auto readout = [&](diff::Graph& g) {
        auto& pos = net.parameters().get("tokens.pos_embed");
        auto& bio = net.parameters().get("tokens.biomass");
        Var body = g.constant(Tensor(tokens.bottomRows(L - 1)));
        const Var parts[] = {g.param(bio), body};
        return net.transformer_predict(g, {diff::concat(parts, diff::Axis::Rows), g.param(pos)}, nullptr);
    };
    double grad_err = 0.0;
    int probes = 0;
    for (const char* prefix : {"enc", "final_norm", "head", "tokens.biomass"}) {
        const auto r = test::check_parameter_gradients(net.parameters(), readout, 100, 60, 1e-5, 1e-6, prefix);
        grad_err = std::max(grad_err, r.max_rel_error);
        probes += r.probes;
    }
    const bool ok = worst < 1e-9 && grad_err < 1e-4;
    return {ok, format_line("permutation change %.2e (< 1e-9), readout gradient rel err %.2e (< 1e-4) over %d probes", worst,
                    grad_err, probes)};
}

// --- 7: biomass loss ------------------------------------------------------------------

Outcome biomass_loss_values() {
    const double e2 = std::exp(2.0);
    const BiomassSample zero[] = {{100.0, 100.0}, {250.0, 250.0}};
    const BiomassSample quarter[] = {{e2, e2 + 1.0}};        // x = 0.5
    const BiomassSample big[] = {{e2, e2 + 4.0}};             // x = 2
    const double l0 = biomass_loss(zero), l1 = biomass_loss(quarter), l2 = biomass_loss(big);
    bool exact = l0 == 0.0 && std::abs(l1 - 0.125) < 1e-15 && std::abs(l2 - 1.5) < 1e-15;
    int violations = 0;
    for (double err : {0.5, 3.0, 10.0, -10.0, 100.0}) {
        double prev = std::numeric_limits<double>::infinity();
        for (int k = 1; k < 400; ++k) {
            const double m = std::exp(1.0 + 7.0 * k / 400.0);
            const BiomassSample s[] = {{m, m + err}};
            const double l = biomass_loss(s);
            if (l > prev) ++violations;
            prev = l;
        }
    }
    return {exact && violations == 0,
            format_line("values %.17g, %.17g, %.17g (want 0, 0.125, 1.5); monotonicity violations %d", l0, l1, l2, violations)};
}

// --- 8: BioNet overfit --------------------------------------------------------------------

Outcome bionet_overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<BioPlot> plots;
    for (int i = 0; i < 16; ++i) {
        BioPlot p;
        p.id = "plot" + std::to_string(i);
        p.cloud = synthetic_plot(static_cast<std::uint64_t>(i), 8);
        p.biomass = 0.5 * static_cast<double>(p.cloud.size());
        plots.push_back(std::move(p));
    }
    BioTrainConfig cfg = default_run_config().bionet;
    cfg.iterations = 2000;
    cfg.checkpoint_every = 0;
    std::vector<BioStepLog> log;
    const BioNet net = train_bionet(plots, cfg, &log, [](const BioStepLog& s) {
        if (s.step % 500 == 0) std::fprintf(stderr, "  [bionet] step %d loss %.4f %.0f s\n", s.step, s.loss, s.seconds);
    });
    const std::vector<double> pred = predict_plots(net, plots);
    std::vector<double> gt;
    for (const auto& p : plots) gt.push_back(p.biomass);
    const MetricReport m = regression_metrics(pred, gt);
    const double elapsed = seconds_since(t0);
    // Smoothed loss: mean over 100-step windows.
    auto window = [&](std::size_t end) {
        double s = 0.0;
        for (std::size_t i = end - 100; i < end; ++i) s += log[i].loss;
        return s / 100.0;
    };
    const double drop = window(200) / window(log.size());
    return {m.mare < 0.05 && elapsed < 600.0,
            format_line("training MARE %.4f (< 0.05), MAE %.2f g, smoothed loss drop x%.1f, %.0f s (< 600 s)", m.mare, m.mae,
                drop, elapsed)};
}

// --- 9: plot extraction ------------------------------------------------------------------

bool in_window(const Vec3& q, const Vec3& a, const Vec3& b, double along, double lateral) {
    const double len = std::sqrt((b - a).squaredNorm());
    const double ux = (b.x() - a.x()) / len, uy = (b.y() - a.y()) / len, uz = (b.z() - a.z()) / len;
    const double dx = q.x() - 0.5 * (a.x() + b.x()), dy = q.y() - 0.5 * (a.y() + b.y()), dz = q.z() - 0.5 * (a.z() + b.z());
    const double s = dx * ux + dy * uy + dz * uz;
    const double px = dx - s * ux, py = dy - s * uy, pz = dz - s * uz;
    return std::fabs(s) <= along && std::sqrt(px * px + py * py + pz * pz) <= lateral;
}

Outcome plot_extraction() {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-15.0, 15.0);
    int mismatches = 0, swap_mismatches = 0, selected = 0;
    for (int trial = 0; trial < 40; ++trial) {
        PlotSpec p{"r", Vec3(u(rng), u(rng), 0.2 * u(rng)), Vec3(u(rng), u(rng), 0.2 * u(rng)), 1.5, 7.5,
                   std::nullopt};
        std::vector<Vec3> cams(500);
        for (auto& c : cams) c = Vec3(u(rng), u(rng), 0.5 * u(rng));
        std::vector<std::size_t> expect;
        for (std::size_t i = 0; i < cams.size(); ++i)
            if (in_window(cams[i], p.endpoint_a, p.endpoint_b, p.along_threshold, p.lateral_threshold))
                expect.push_back(i);
        selected += static_cast<int>(expect.size());
        if (extract_plot_views(cams, p) != expect) ++mismatches;
        Tensor cloud(2000, 3);
        for (Eigen::Index i = 0; i < cloud.size(); ++i) cloud.data()[i] = u(rng);
        std::vector<std::size_t> crop;
        for (Eigen::Index i = 0; i < cloud.rows(); ++i)
            if (in_window(cloud.row(i).transpose(), p.endpoint_a, p.endpoint_b, 2.0, 1.0))
                crop.push_back(static_cast<std::size_t>(i));
        if (crop_plot_points(cloud, p, 2.0, 1.0) != crop) ++mismatches;
        std::swap(p.endpoint_a, p.endpoint_b);
        if (extract_plot_views(cams, p) != expect || crop_plot_points(cloud, p, 2.0, 1.0) != crop) ++swap_mismatches;
    }
    return {mismatches == 0 && swap_mismatches == 0 && selected > 0,
            format_line("40 plots x 500 poses: %d selected, oracle mismatches %d, endpoint-swap mismatches %d", selected,
                mismatches, swap_mismatches)};
}

// --- 10: metrics ------------------------------------------------------------------------

double reference_ssim(const Tensor& a, const Tensor& b, int w, int h) {
    double kern[11][11], ksum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) ksum += kern[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
    double total = 0.0;
    for (Eigen::Index ch = 0; ch < a.cols(); ++ch) {
        double acc = 0.0;
        int count = 0;
        for (int y0 = 0; y0 + 11 <= h; ++y0)
            for (int x0 = 0; x0 + 11 <= w; ++x0) {
                double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = kern[i][j] / ksum, va = a((y0 + i) * w + x0 + j, ch),
                                     vb = b((y0 + i) * w + x0 + j, ch);
                        mx += k * va;
                        my += k * vb;
                        xx += k * va * va;
                        yy += k * vb * vb;
                        xy += k * va * vb;
                    }
                const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
                acc += ((2 * mx * my + 1e-4) * (2 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                ++count;
            }
        total += acc / count;
    }
    return total / static_cast<double>(a.cols());
}

Outcome metrics_checks() {
    bool ok = true;
    const double same[] = {100.0, 200.0}, p1[] = {110.0}, g1[] = {100.0}, p2[] = {90.0, 120.0}, g2[] = {100.0, 100.0};
    const MetricReport r0 = regression_metrics(same, same), r1 = regression_metrics(p1, g1),
                       r2 = regression_metrics(p2, g2);
    const bool table = r0.mae == 0.0 && r0.mare == 0.0 && r0.rmse == 0.0 && r1.mae == 10.0 &&
                       std::abs(r1.mare - 0.1) < 1e-15 && r1.rmse == 10.0 && r2.mae == 15.0 &&
                       std::abs(r2.mare - 0.15) < 1e-15 && std::abs(r2.rmse - std::sqrt(250.0)) < 1e-12;
    ok &= table;

    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(1.0, 1000.0);
    std::uniform_int_distribution<int> len(1, 30);
    int rmse_violations = 0;
    for (int t = 0; t < 10000; ++t) {
        const int n = len(rng);
        std::vector<double> p(n), g(n);
        for (int i = 0; i < n; ++i) p[i] = u(rng), g[i] = u(rng);
        const MetricReport r = regression_metrics(p, g);
        if (r.rmse < r.mae * (1.0 - 1e-12)) ++rmse_violations;
    }
    ok &= rmse_violations == 0;

    const double p20 = psnr(Tensor::Constant(64, 3, 0.3), Tensor::Constant(64, 3, 0.4));
    ok &= std::abs(p20 - 20.0) < 1e-9;

    double worst_ssim = 0.0;
    for (int t = 0; t < 20; ++t) {
        const int w = 16 + t % 9, h = 14 + t % 6;
        const Tensor a = test::random_tensor(w * h, 3, rng, 0.0, 1.0);
        const Tensor b = (a + 0.2 * test::random_tensor(w * h, 3, rng)).cwiseMax(0.0).cwiseMin(1.0);
        worst_ssim = std::max(worst_ssim, std::abs(ssim(a, b, w, h) - reference_ssim(a, b, w, h)));
    }
    ok &= worst_ssim < 1e-4;
    return {ok, format_line("tabulated cases %s, RMSE < MAE in %d/10000, PSNR %.9f dB (20), SSIM max diff %.2e (< 1e-4)",
                    table ? "exact" : "WRONG", rmse_violations, p20, worst_ssim)};
}

// --- 11: augmentation ---------------------------------------------------------------------

Outcome augmentation_checks() {
    std::mt19937_64 rng(11);
    const int n = 10000;
    int out_of_range = 0;
    Eigen::ArrayXd d(3 * n);
    std::vector<AugmentParams> params;
    for (int i = 0; i < n; ++i) {
        const AugmentParams p = sample_augment(rng);
        if (std::abs(p.theta) > kMaxTheta || std::abs(p.alpha_rot) > kMaxAlphaRot || std::abs(p.phi) > kMaxPhi)
            ++out_of_range;
        d.segment(3 * i, 3) = p.delta.array();
        if (i < 200) params.push_back(p);
    }
    const double mean = d.mean(), sd = std::sqrt((d - mean).square().mean());

    SurfacePointCloud cloud;
    cloud.points = test::random_tensor(80, 3, rng, -1.0, 1.0);
    cloud.features = test::random_tensor(80, 4, rng);
    double worst = 0.0;
    for (const auto& p : params) {
        const SurfacePointCloud out = augment(cloud, p);
        for (Eigen::Index i = 0; i < 80; ++i)
            for (Eigen::Index j = i + 1; j < 80; ++j)
                worst = std::max(worst, std::abs((cloud.points.row(i) - cloud.points.row(j)).norm() -
                                                 (out.points.row(i) - out.points.row(j)).norm()));
    }
    const bool ok = out_of_range == 0 && worst < 1e-9 && std::abs(mean) < 0.05 && std::abs(sd - 1.0) < 0.05;
    return {ok, format_line("%d samples: out of range %d; pairwise distance change %.2e (< 1e-9); translation mean %.4f, "
                    "std %.4f (within 5%% of 0 and 1)",
                    n, out_of_range, worst, mean, sd)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neffbio acceptance checks"};
    std::vector<int> only;
    int seeds = 3;
    app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
    app.add_option("--seeds", seeds, "Seeds for the geometry ablation")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    std::set<int> selected(only.begin(), only.end());
    if (selected.empty())
        for (int i = 1; i <= 11; ++i) selected.insert(i);

    const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria = {
        {1, {"gradient suite", gradient_suite}},
        {2, {"volume rendering invariants", render_invariants}},
        {3, {"synthetic NeFF training", neff_training}},
        {4, {"geometry supervision ablation", [&] { return geometry_ablation(seeds); }}},
        {5, {"sparse conv oracle", sparse_conv_oracle}},
        {6, {"transformer invariance", transformer_invariance}},
        {7, {"biomass loss", biomass_loss_values}},
        {8, {"BioNet overfit", bionet_overfit}},
        {9, {"plot extraction", plot_extraction}},
        {10, {"metrics", metrics_checks}},
        {11, {"augmentation", augmentation_checks}},
    };
    tune_allocator();
    int failures = 0;
    for (int id : selected) {
        const auto& [name, run] = criteria.at(id);
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        std::printf("criterion %2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
        std::fflush(stdout);
        failures += !o.pass;
    }
    return failures == 0 ? 0 : 1;
}
