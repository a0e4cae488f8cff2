// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/bionet.hpp"

#include <Eigen/Geometry>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

namespace neffbio {

namespace fs = std::filesystem;
using diff::Var;

// --- surface extraction -------------------------------------------------------------

SurfacePointCloud extract_surface_features(const SurfaceQuery& query, int grid_res, double tau) {
    if (grid_res < 16) throw ConfigError("grid_res must be >= 16");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    const double step = 2.0 / (grid_res - 1);
    std::vector<double> pts, feats;
    Eigen::Index c = -1;
    Tensor slice(static_cast<Eigen::Index>(grid_res) * grid_res, 3), sdf, f;
    for (int k = 0; k < grid_res; ++k) {
        Eigen::Index r = 0;
        for (int i = 0; i < grid_res; ++i) {
            for (int j = 0; j < grid_res; ++j, ++r) {
                slice(r, 0) = -1.0 + i * step;
                slice(r, 1) = -1.0 + j * step;
                slice(r, 2) = -1.0 + k * step;
            }
        }
        query(slice, sdf, f);
        if (sdf.rows() != slice.rows() || f.rows() != slice.rows())
            throw ShapeError("surface query returned the wrong number of rows");
        c = f.cols();
        for (Eigen::Index q = 0; q < slice.rows(); ++q) {
            if (!(std::abs(sdf(q, 0)) < tau)) continue;
            pts.insert(pts.end(), {slice(q, 0), slice(q, 1), slice(q, 2)});
            feats.insert(feats.end(), f.row(q).data(), f.row(q).data() + c);
        }
    }
    if (pts.empty())
        throw DataError("surface extraction kept no points at tau=" + std::to_string(tau) +
                        "; increase tau or grid_res");
    SurfacePointCloud cloud;
    const auto n = static_cast<Eigen::Index>(pts.size() / 3);
    cloud.points = Eigen::Map<Tensor>(pts.data(), n, 3);
    cloud.features = Eigen::Map<Tensor>(feats.data(), n, c);
    return cloud;
}

SurfacePointCloud extract_surface_features(const FieldSet& fields, int grid_res, double tau) {
    return extract_surface_features(
        [&fields](const Tensor& p, Tensor& sdf, Tensor& feat) { fields.infer(p, &sdf, nullptr, &feat); }, grid_res,
        tau);
}

void write_ply(const fs::path& path, const SurfacePointCloud& cloud) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    const Eigen::Index c = cloud.features.cols();
    out << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.rows() << "\n";
    out << "property double x\nproperty double y\nproperty double z\n";
    for (Eigen::Index k = 0; k < c; ++k) out << "property double f" << k << "\n";
    out << "end_header\n";
    char buf[32];
    for (Eigen::Index i = 0; i < cloud.points.rows(); ++i) {
        for (int k = 0; k < 3; ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", cloud.points(i, k));
            out << (k ? " " : "") << buf;
        }
        for (Eigen::Index k = 0; k < c; ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", cloud.features(i, k));
            out << ' ' << buf;
        }
        out << '\n';
    }
}

SurfacePointCloud read_ply(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "ply") throw DataError(path.string() + ": not a PLY file");
    long n = -1;
    int props = 0;
    while (std::getline(in, line) && line != "end_header") {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt != "ascii") throw DataError(path.string() + ": only ASCII PLY is supported");
        } else if (key == "element") {
            std::string what;
            ls >> what >> n;
        } else if (key == "property") {
            ++props;
        }
    }
    if (n < 0 || props < 3) throw DataError(path.string() + ": missing vertex element or xyz properties");
    SurfacePointCloud cloud;
    cloud.points.resize(n, 3);
    cloud.features.resize(n, props - 3);
    for (long i = 0; i < n; ++i) {
        for (int k = 0; k < props; ++k) {
            double v;
            if (!(in >> v)) throw DataError(path.string() + ": truncated vertex " + std::to_string(i));
            if (k < 3) cloud.points(i, k) = v;
            else cloud.features(i, k - 3) = v;
        }
    }
    return cloud;
}

// --- voxels ----------------------------------------------------------------------------

namespace {

std::int64_t site_key(const Index3& dims, int i, int j, int k) {
    return (std::int64_t(i) * dims[1] + j) * dims[2] + k;
}

}  // namespace

SiteIndex::SiteIndex(const Index3& dims, const std::vector<Index3>& sites) : dims_(dims) {
    map_.reserve(sites.size() * 2);
    for (std::size_t s = 0; s < sites.size(); ++s)
        map_.emplace(site_key(dims, sites[s][0], sites[s][1], sites[s][2]), static_cast<int>(s));
}

int SiteIndex::find(int i, int j, int k) const {
    if (i < 0 || j < 0 || k < 0 || i >= dims_[0] || j >= dims_[1] || k >= dims_[2]) return -1;
    const auto it = map_.find(site_key(dims_, i, j, k));
    return it == map_.end() ? -1 : it->second;
}

Vec3 anchored_origin(const SurfacePointCloud& cloud, const VoxelSpec& spec) {
    if (cloud.points.rows() == 0) throw DataError("anchored_origin: empty cloud");
    const Vec3 centroid = cloud.points.colwise().mean().transpose();
    Vec3 lower;
    lower.x() = centroid.x() - 0.5 * spec.dims[0] * spec.voxel_size.x();
    lower.y() = centroid.y() - 0.5 * spec.dims[1] * spec.voxel_size.y();
    lower.z() = cloud.points.col(2).minCoeff();
    for (int a = 0; a < 3; ++a) lower(a) = std::floor(lower(a) / spec.voxel_size(a)) * spec.voxel_size(a);
    return lower;
}

SparseVoxelGrid voxelize(const SurfacePointCloud& cloud, const VoxelSpec& spec, const Vec3& origin,
                         std::size_t* dropped) {
    if (spec.dims[0] <= 0 || spec.dims[1] <= 0 || spec.dims[2] <= 0) throw ConfigError("voxel dims must be positive");
    if (!(spec.voxel_size.minCoeff() > 0.0)) throw ConfigError("voxel size must be positive");
    if (cloud.points.rows() == 0) throw DataError("voxelize: empty cloud");
    if (cloud.features.rows() != cloud.points.rows()) throw ShapeError("voxelize: points/features row mismatch");
    const int off = spec.include_offsets ? 3 : 0;
    const Eigen::Index ch = off + cloud.features.cols();
    std::map<std::int64_t, std::pair<Index3, std::vector<double>>> acc;  // ordered: canonical site order
    std::map<std::int64_t, long> counts;
    std::size_t lost = 0;
    for (Eigen::Index p = 0; p < cloud.points.rows(); ++p) {
        Index3 idx;
        Vec3 rel;
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
            rel(a) = (cloud.points(p, a) - origin(a)) / spec.voxel_size(a);
            const double f = std::floor(rel(a));
            if (!(f >= 0.0 && f < spec.dims[a])) inside = false;
            idx[a] = inside ? static_cast<int>(f) : 0;
        }
        if (!inside) {
            ++lost;
            continue;
        }
        const std::int64_t key = site_key(spec.dims, idx[0], idx[1], idx[2]);
        auto& slot = acc[key];
        if (slot.second.empty()) {
            slot.first = idx;
            slot.second.assign(static_cast<std::size_t>(ch), 0.0);
        }
        ++counts[key];
        for (int a = 0; a < off; ++a) slot.second[a] += rel(a) - idx[a] - 0.5;
        for (Eigen::Index k = 0; k < cloud.features.cols(); ++k) slot.second[off + k] += cloud.features(p, k);
    }
    if (dropped) *dropped = lost;
    SparseVoxelGrid g;
    g.dims = spec.dims;
    g.values.resize(static_cast<Eigen::Index>(acc.size()), ch);
    Eigen::Index r = 0;
    for (const auto& [key, slot] : acc) {
        g.sites.push_back(slot.first);
        const double n = static_cast<double>(counts[key]);
        for (Eigen::Index k = 0; k < ch; ++k) g.values(r, k) = slot.second[k] / n;
        ++r;
    }
    return g;
}

SparseVoxelGrid voxelize(const SurfacePointCloud& cloud, const VoxelSpec& spec) {
    return voxelize(cloud, spec, anchored_origin(cloud, spec));
}

// --- sparse convolution ---------------------------------------------------------------

ConvRulebook build_rulebook(const Index3& dims, const std::vector<Index3>& sites, ConvMode mode) {
    ConvRulebook rb;
    const SiteIndex in_index(dims, sites);
    if (mode == ConvMode::Submanifold) {
        rb.out_dims = dims;
        rb.out_sites = sites;
    } else {
        for (int a = 0; a < 3; ++a) rb.out_dims[a] = (dims[a] + 1) / 2;
        std::map<std::int64_t, Index3> outs;
        for (const auto& s : sites) {
            const Index3 q{s[0] / 2, s[1] / 2, s[2] / 2};
            outs.emplace(site_key(rb.out_dims, q[0], q[1], q[2]), q);
        }
        for (const auto& [key, q] : outs) rb.out_sites.push_back(q);
    }
    const int stride = mode == ConvMode::Submanifold ? 1 : 2;
    for (std::size_t r = 0; r < rb.out_sites.size(); ++r) {
        const Index3& q = rb.out_sites[r];
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz) {
                    const int s = in_index.find(stride * q[0] + dx, stride * q[1] + dy, stride * q[2] + dz);
                    if (s < 0) continue;
                    const int t = kernel_tap(dx, dy, dz);
                    rb.in_rows[t].push_back(s);
                    rb.out_rows[t].push_back(static_cast<Eigen::Index>(r));
                }
    }
    return rb;
}

namespace {

Tensor gather(const Tensor& x, const std::vector<Eigen::Index>& rows) {
    Tensor out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    return out;
}

}  // namespace

Var sparse_conv(Var x, Var kernel, Var bias, const ConvRulebook& rules) {
    diff::Graph& g = *x.graph;
    const Eigen::Index cin = x.cols(), cout = kernel.cols();
    if (kernel.rows() != 27 * cin)
        throw ShapeError("sparse_conv: kernel has " + std::to_string(kernel.rows()) + " rows, expected 27x" +
                         std::to_string(cin));
    if (bias.rows() != 1 || bias.cols() != cout) throw ShapeError("sparse_conv: bias must be 1 x out");
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    Tensor y(static_cast<Eigen::Index>(rules.out_sites.size()), cout);
    y.rowwise() = bias.value().row(0);
    for (int t = 0; t < 27; ++t) {
        if (rules.in_rows[t].empty()) continue;
        const Tensor part = gather(xv, rules.in_rows[t]) * kv.middleRows(t * cin, cin);
        for (std::size_t i = 0; i < rules.out_rows[t].size(); ++i)
            y.row(rules.out_rows[t][i]) += part.row(static_cast<Eigen::Index>(i));
    }
    auto rb = std::make_shared<ConvRulebook>(rules);
    const diff::NodeId xi = x.id, ki = kernel.id, bi = bias.id;
    return g.custom(diff::Op::Custom, {xi, ki, bi}, std::move(y), [rb, xi, ki, bi, cin](diff::Graph& gr, diff::NodeId self) {
        const Tensor& gy = gr.grad_ref(self);
        const Tensor& xv = gr.value(xi);
        const Tensor& kv = gr.value(ki);
        const bool want_x = gr.requires_grad(xi), want_k = gr.requires_grad(ki);
        if (gr.requires_grad(bi)) gr.accumulate(bi, gy.colwise().sum());
        if (!want_x && !want_k) return;
        Tensor* gx = want_x ? &gr.grad_ref(xi) : nullptr;
        Tensor* gk = want_k ? &gr.grad_ref(ki) : nullptr;
        for (int t = 0; t < 27; ++t) {
            if (rb->in_rows[t].empty()) continue;
            const Tensor gyt = gather(gy, rb->out_rows[t]);
            if (want_k) gk->middleRows(t * cin, cin).noalias() += gather(xv, rb->in_rows[t]).transpose() * gyt;
            if (want_x) {
                const Tensor gxt = gyt * kv.middleRows(t * cin, cin).transpose();
                for (std::size_t i = 0; i < rb->in_rows[t].size(); ++i)
                    gx->row(rb->in_rows[t][i]) += gxt.row(static_cast<Eigen::Index>(i));
            }
        }
    });
}

SparseVoxelGrid sparse_conv3d(const SparseVoxelGrid& grid, const Tensor& kernel, const Tensor& bias, ConvMode mode) {
    if (kernel.rows() != 27 * grid.channels())
        throw ShapeError("sparse_conv3d: kernel in-channels do not match the grid's " +
                         std::to_string(grid.channels()) + " channels");
    const ConvRulebook rb = build_rulebook(grid.dims, grid.sites, mode);
    diff::Graph g;
    const Var y = sparse_conv(g.constant(grid.values), g.constant(kernel), g.constant(bias), rb);
    return {rb.out_dims, rb.out_sites, y.value()};
}

// --- network -----------------------------------------------------------------------------

namespace {

constexpr const char* kBioMeta = "bionet.meta";

double softplus_inverse(double y) { return std::log(std::expm1(y)); }

}  // namespace

BioNet::BioNet(const BioNetConfig& config, int feature_channels, std::uint64_t seed)
    : config_(config), feature_channels_(feature_channels) {
    const auto& c = config_;
    if (c.levels < 1 || c.base_channels < 1 || c.d_model < 1 || c.heads < 1 || c.ffn < 1 || c.encoder_layers < 0)
        throw ConfigError("bionet sizes must be positive");
    if (c.d_model % c.heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (feature_channels < 0) throw ConfigError("feature channel count must be >= 0");
    for (int h : c.head_hidden)
        if (h < 1) throw ConfigError("head hidden sizes must be positive");
    for (int a = 0; a < 3; ++a)
        if (c.voxel.dims[a] < 1) throw ConfigError("voxel dims must be positive");
    const Index3 tg = token_grid();
    if (tg[2] != 1)
        throw ConfigError("voxel height " + std::to_string(c.voxel.dims[2]) + " does not reduce to 1 in " +
                          std::to_string(c.levels) + " halvings");
    if (c.voxel.dims[2] != (1 << c.levels))
        spdlog::info("voxel height {} padded to {} by ceil halving", c.voxel.dims[2], 1 << c.levels);

    std::mt19937_64 rng(seed);
    stem_ = add_conv("stem", input_channels(), c.base_channels, rng);
    int ch = c.base_channels;
    for (int l = 0; l < c.levels; ++l) {
        const std::string p = "level" + std::to_string(l);
        Level lv;
        ResBlock* blocks[2] = {&lv.b1, &lv.b2};
        for (int b = 0; b < 2; ++b) {
            const std::string q = p + ".block" + std::to_string(b);
            blocks[b]->c1 = add_conv(q + ".conv1", ch, ch, rng);
            blocks[b]->n1 = add_norm(q + ".norm1", ch, false);
            blocks[b]->c2 = add_conv(q + ".conv2", ch, ch, rng);
            blocks[b]->n2 = add_norm(q + ".norm2", ch, false);
        }
        lv.down = add_conv(p + ".down", ch, 2 * ch, rng);
        ch *= 2;
        levels_.push_back(lv);
    }
    token_proj_ = add_dense("tokens.proj", ch, c.d_model, rng);
    std::normal_distribution<double> small(0.0, 0.02);
    Tensor tok(1, c.d_model), pos(token_count(), c.d_model);
    for (Eigen::Index i = 0; i < tok.size(); ++i) tok.data()[i] = small(rng);
    for (Eigen::Index i = 0; i < pos.size(); ++i) pos.data()[i] = small(rng);
    params_.add("tokens.biomass", tok);
    biomass_token_ = params_.size() - 1;
    params_.add("tokens.pos_embed", pos);
    pos_embed_ = params_.size() - 1;
    for (int e = 0; e < c.encoder_layers; ++e) {
        const std::string p = "enc" + std::to_string(e);
        Encoder en;
        en.ln1 = add_norm(p + ".ln1", c.d_model, true);
        en.q = add_dense(p + ".q", c.d_model, c.d_model, rng);
        en.k = add_dense(p + ".k", c.d_model, c.d_model, rng);
        en.v = add_dense(p + ".v", c.d_model, c.d_model, rng);
        en.o = add_dense(p + ".o", c.d_model, c.d_model, rng);
        en.ln2 = add_norm(p + ".ln2", c.d_model, true);
        en.f1 = add_dense(p + ".ffn1", c.d_model, c.ffn, rng);
        en.f2 = add_dense(p + ".ffn2", c.ffn, c.d_model, rng);
        encoders_.push_back(en);
    }
    final_norm_ = add_norm("final_norm", c.d_model, true);
    int prev = c.d_model;
    for (std::size_t h = 0; h <= c.head_hidden.size(); ++h) {
        const int next = h == c.head_hidden.size() ? 1 : c.head_hidden[h];
        head_.push_back(add_dense("head.l" + std::to_string(h), prev, next, rng));
        prev = next;
    }
    // Start near output_scale: small last layer, bias at softplus^-1(1).
    params_[head_.back().w].value *= 0.1;
    params_[head_.back().b].value(0, 0) = softplus_inverse(1.0);
}

BioNet::Conv BioNet::add_conv(const std::string& name, int in, int out, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (27.0 * in)));
    Tensor k(27 * in, out);
    for (Eigen::Index i = 0; i < k.size(); ++i) k.data()[i] = nd(rng);
    params_.add(name + ".kernel", std::move(k));
    const std::size_t ki = params_.size() - 1;
    params_.add(name + ".bias", Tensor::Zero(1, out));
    return {ki, params_.size() - 1};
}

BioNet::Norm BioNet::add_norm(const std::string& name, int channels, bool) {
    params_.add(name + ".gamma", Tensor::Ones(1, channels));
    const std::size_t gi = params_.size() - 1;
    params_.add(name + ".beta", Tensor::Zero(1, channels));
    return {gi, params_.size() - 1};
}

BioNet::Dense BioNet::add_dense(const std::string& name, int in, int out, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> u(-a, a);
    Tensor w(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    params_.add(name + ".w", std::move(w));
    const std::size_t wi = params_.size() - 1;
    params_.add(name + ".b", Tensor::Zero(1, out));
    return {wi, params_.size() - 1};
}

int BioNet::input_channels() const { return (config_.voxel.include_offsets ? 3 : 0) + feature_channels_; }

Index3 BioNet::token_grid() const {
    Index3 d = config_.voxel.dims;
    for (int l = 0; l < config_.levels; ++l)
        for (int a = 0; a < 3; ++a) d[a] = (d[a] + 1) / 2;
    return d;
}

int BioNet::token_count() const {
    const Index3 d = token_grid();
    return 1 + d[0] * d[1];
}

std::vector<int> BioNet::level_channels() const {
    std::vector<int> out;
    for (int l = 0; l < config_.levels; ++l) out.push_back(config_.base_channels << l);
    return out;
}

void BioNet::set_output_scale(double s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("output scale must be positive");
    output_scale_ = s;
}

Var BioNet::conv(diff::Graph& g, const Conv& c, Var x, const ConvRulebook& rules) const {
    auto& ps = const_cast<diff::ParameterSet&>(params_);
    return sparse_conv(x, g.param(ps[c.kernel]), g.param(ps[c.bias]), rules);
}

Var BioNet::norm(diff::Graph& g, const Norm& n, Var x, diff::NormAxis axis) const {
    auto& ps = const_cast<diff::ParameterSet&>(params_);
    return diff::layer_norm(x, g.param(ps[n.gamma]), g.param(ps[n.beta]), axis);
}

Var BioNet::dense(diff::Graph& g, const Dense& d, Var x) const {
    auto& ps = const_cast<diff::ParameterSet&>(params_);
    return diff::linear(x, g.param(ps[d.w]), g.param(ps[d.b]));
}

Var BioNet::dropout(diff::Graph& g, Var x, std::mt19937_64* rng) const {
    if (rng == nullptr || config_.dropout == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - config_.dropout);
    Tensor mask(x.rows(), x.cols());
    const double s = 1.0 / (1.0 - config_.dropout);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : 0.0;
    return diff::mul(x, g.constant(std::move(mask)));
}

TokenSequence BioNet::backbone(diff::Graph& g, const SparseVoxelGrid& grid) const {
    if (grid.dims != config_.voxel.dims) throw ShapeError("backbone: grid dims differ from the configured voxel dims");
    if (grid.channels() != input_channels())
        throw ShapeError("backbone: grid has " + std::to_string(grid.channels()) + " channels, expected " +
                         std::to_string(input_channels()));
    if (grid.size() == 0) throw DataError("backbone: empty voxel grid");
    Index3 dims = grid.dims;
    std::vector<Index3> sites = grid.sites;
    ConvRulebook rules = build_rulebook(dims, sites, ConvMode::Submanifold);
    Var x = diff::relu(conv(g, stem_, g.constant(grid.values), rules));
    for (const Level& lv : levels_) {
        for (const ResBlock* b : {&lv.b1, &lv.b2}) {
            Var h = diff::relu(norm(g, b->n1, conv(g, b->c1, x, rules), diff::NormAxis::PerColumn));
            h = norm(g, b->n2, conv(g, b->c2, h, rules), diff::NormAxis::PerColumn);
            x = diff::relu(diff::add(h, x));
        }
        const ConvRulebook down = build_rulebook(dims, sites, ConvMode::Strided);
        x = diff::relu(conv(g, lv.down, x, down));
        dims = down.out_dims;
        sites = down.out_sites;
        rules = build_rulebook(dims, sites, ConvMode::Submanifold);
    }
    // Densify the h = 1 map into h^t * w^t tokens, row-major over (x, y).
    const Index3 tg = token_grid();
    std::vector<Eigen::Index> rows;
    rows.reserve(sites.size());
    for (const auto& s : sites) rows.push_back(static_cast<Eigen::Index>(s[0]) * tg[1] + s[1]);
    const Var dense_map = diff::scatter_rows(x, rows, static_cast<Eigen::Index>(tg[0]) * tg[1]);
    const Var toks = dense(g, token_proj_, dense_map);
    auto& ps = const_cast<diff::ParameterSet&>(params_);
    const Var parts[] = {g.param(ps[biomass_token_]), toks};
    return {diff::concat(parts, diff::Axis::Rows), g.param(ps[pos_embed_])};
}

Var BioNet::transformer_predict(diff::Graph& g, const TokenSequence& seq, std::mt19937_64* rng) const {
    const int d = config_.d_model, heads = config_.heads, dk = d / heads;
    if (seq.tokens.cols() != d || seq.pos_embed.rows() != seq.tokens.rows() || seq.pos_embed.cols() != d)
        throw ShapeError("transformer_predict: token and position shapes disagree");
    const Eigen::Index L = seq.tokens.rows();
    Var x = diff::add(seq.tokens, seq.pos_embed);
    for (const Encoder& en : encoders_) {
        const Var h = norm(g, en.ln1, x, diff::NormAxis::PerRow);
        const Var q = dense(g, en.q, h), k = dense(g, en.k, h), v = dense(g, en.v, h);
        std::vector<Var> outs;
        for (int hd = 0; hd < heads; ++hd) {
            const Var qh = diff::slice(q, 0, L, hd * dk, dk);
            const Var kh = diff::slice(k, 0, L, hd * dk, dk);
            const Var vh = diff::slice(v, 0, L, hd * dk, dk);
            const Var att = diff::softmax(diff::scale(diff::matmul(qh, diff::transpose(kh)), 1.0 / std::sqrt(dk)));
            outs.push_back(diff::matmul(att, vh));
        }
        const Var a = dense(g, en.o, heads == 1 ? outs[0] : diff::concat(outs, diff::Axis::Cols));
        x = diff::add(x, dropout(g, a, rng));
        const Var h2 = norm(g, en.ln2, x, diff::NormAxis::PerRow);
        const Var f = dense(g, en.f2, diff::relu(dense(g, en.f1, h2)));
        x = diff::add(x, dropout(g, f, rng));
    }
    x = norm(g, final_norm_, x, diff::NormAxis::PerRow);
    Var r = diff::slice(x, 0, 1, 0, d);
    for (std::size_t i = 0; i < head_.size(); ++i) {
        r = dense(g, head_[i], r);
        if (i + 1 < head_.size()) r = diff::relu(r);
    }
    r = diff::softplus(r);
    return output_scale_ == 1.0 ? r : diff::scale(r, output_scale_);
}

Var BioNet::predict(diff::Graph& g, const SparseVoxelGrid& grid, std::mt19937_64* rng) const {
    return transformer_predict(g, backbone(g, grid), rng);
}

double BioNet::predict(const SparseVoxelGrid& grid) const {
    diff::Graph g;
    return predict(g, grid, nullptr).scalar();
}

std::vector<CheckpointRecord> BioNet::to_records() const {
    auto records = neffbio::to_records(params_);
    const auto& c = config_;
    CheckpointRecord meta;
    meta.name = kBioMeta;
    meta.data = {double(c.levels), double(c.base_channels), double(c.d_model), double(c.heads), double(c.ffn),
                 double(c.encoder_layers), c.dropout, double(c.voxel.dims[0]), double(c.voxel.dims[1]),
                 double(c.voxel.dims[2]), c.voxel.voxel_size.x(), c.voxel.voxel_size.y(), c.voxel.voxel_size.z(),
                 double(c.voxel.include_offsets), double(feature_channels_), output_scale_,
                 double(c.head_hidden.size())};
    for (int h : c.head_hidden) meta.data.push_back(h);
    meta.dims = {static_cast<std::uint32_t>(meta.data.size())};
    records.insert(records.begin(), std::move(meta));
    return records;
}

BioNet BioNet::from_records(const std::vector<CheckpointRecord>& records) {
    const CheckpointRecord* meta = find_record(records, kBioMeta);
    if (meta == nullptr || meta->data.size() < 17 ||
        meta->data.size() != 17 + static_cast<std::size_t>(meta->data[16]))
        throw DataError("checkpoint has no usable '" + std::string(kBioMeta) + "' record");
    const auto& m = meta->data;
    BioNetConfig c;
    c.levels = int(m[0]);
    c.base_channels = int(m[1]);
    c.d_model = int(m[2]);
    c.heads = int(m[3]);
    c.ffn = int(m[4]);
    c.encoder_layers = int(m[5]);
    c.dropout = m[6];
    c.voxel.dims = {int(m[7]), int(m[8]), int(m[9])};
    c.voxel.voxel_size = Vec3(m[10], m[11], m[12]);
    c.voxel.include_offsets = m[13] != 0.0;
    c.head_hidden.clear();
    for (std::size_t i = 17; i < m.size(); ++i) c.head_hidden.push_back(int(m[i]));
    BioNet net(c, int(m[14]), 0);
    net.output_scale_ = m[15];
    load_records(net.params_, records);
    return net;
}

std::vector<std::string> BioNet::encoder_parameter_names() const {
    std::vector<std::string> out;
    for (const auto& p : params_)
        if (p.name.rfind("enc", 0) == 0) out.push_back(p.name);
    return out;
}

// --- augmentation ------------------------------------------------------------------------

AugmentParams sample_augment(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> t(-kMaxTheta, kMaxTheta), a(-kMaxAlphaRot, kMaxAlphaRot),
        p(-kMaxPhi, kMaxPhi);
    std::normal_distribution<double> nd(0.0, 1.0);
    AugmentParams out;
    out.theta = t(rng);
    out.alpha_rot = a(rng);
    out.phi = p(rng);
    out.delta = Vec3(nd(rng), nd(rng), nd(rng));
    return out;
}

SurfacePointCloud augment(const SurfacePointCloud& cloud, const AugmentParams& prm) {
    if (std::abs(prm.theta) > kMaxTheta || std::abs(prm.alpha_rot) > kMaxAlphaRot || std::abs(prm.phi) > kMaxPhi)
        throw ConfigError("augmentation angles outside (+-pi/18, +-pi/18, +-pi/12)");
    if (!prm.delta.allFinite()) throw ConfigError("augmentation translation must be finite");
    SurfacePointCloud out = cloud;
    if (cloud.points.rows() == 0) return out;
    // Exact identity, avoiding (p - c) + c rounding.
    if (prm.theta == 0.0 && prm.alpha_rot == 0.0 && prm.phi == 0.0 && prm.delta.isZero(0.0)) return out;
    const Eigen::Matrix3d R = (Eigen::AngleAxisd(prm.phi, Vec3::UnitZ()) *
                               Eigen::AngleAxisd(prm.alpha_rot, Vec3::UnitY()) *
                               Eigen::AngleAxisd(prm.theta, Vec3::UnitX()))
                                  .toRotationMatrix();
    const Eigen::RowVector3d centroid = cloud.points.colwise().mean();
    // Row form: p' = (p - c) R^T + c + delta.
    out.points = ((cloud.points.rowwise() - centroid) * R.transpose()).rowwise() + (centroid + prm.delta.transpose());
    return out;
}

}  // namespace neffbio
