// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/fields.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace neffbio {

namespace {

constexpr double kSmoothReluBeta = 100.0;

Tensor activate(const Tensor& x, Activation act) {
    switch (act) {
        case Activation::Relu: return x.cwiseMax(0.0);
        case Activation::SmoothRelu: {
            const auto z = kSmoothReluBeta * x.array();
            return ((z.max(0.0) + (1.0 + (-z.abs()).exp()).log()) / kSmoothReluBeta).matrix();
        }
        case Activation::Identity: return x;
    }
    return x;
}

diff::Var activate(diff::Var x, Activation act) {
    switch (act) {
        case Activation::Relu: return diff::relu(x);
        case Activation::SmoothRelu: return diff::softplus(x, kSmoothReluBeta);
        case Activation::Identity: return x;
    }
    return x;
}

Tensor gaussian(Eigen::Index rows, Eigen::Index cols, double mean, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    Tensor t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
    return t;
}

constexpr const char* kMetaName = "meta.fields";

}  // namespace

// ---------------------------------------------------------------------------

Tensor positional_encode(const Tensor& points, int frequencies, bool include_raw) {
    const Eigen::Index d = points.cols();
    Tensor out(points.rows(), encoded_dim(static_cast<int>(d), frequencies, include_raw));
    Eigen::Index col = 0;
    if (include_raw) {
        out.leftCols(d) = points;
        col = d;
    }
    if (frequencies == 0) return out;
    // Octaves by the double-angle identities; only the first one calls
    // sin/cos, which Eigen does not vectorise for doubles.
    Eigen::ArrayXXd sn = (points.array() * std::numbers::pi).sin();
    Eigen::ArrayXXd cs = (points.array() * std::numbers::pi).cos();
    for (int k = 0; k < frequencies; ++k) {
        if (k > 0) {
            Eigen::ArrayXXd next_sn = 2.0 * sn * cs;
            cs = (cs - sn) * (cs + sn);
            sn = std::move(next_sn);
        }
        out.middleCols(col, d) = sn.matrix();
        out.middleCols(col + d, d) = cs.matrix();
        col += 2 * d;
    }
    return out;
}

diff::Var positional_encode(diff::Var points, int frequencies, bool include_raw) {
    diff::Graph& g = *points.graph;
    if (!g.requires_grad(points.id)) {
        return g.constant(positional_encode(points.value(), frequencies, include_raw));
    }
    std::vector<diff::Var> parts;
    if (include_raw) parts.push_back(points);
    for (int k = 0; k < frequencies; ++k) {
        diff::Var scaled = diff::scale(points, std::ldexp(std::numbers::pi, k));
        parts.push_back(diff::sin(scaled));
        parts.push_back(diff::cos(scaled));
    }
    return diff::concat(parts, diff::Axis::Cols);
}

Eigen::VectorXd positional_encode(const Eigen::VectorXd& p, const EncodingSpec& spec, EncodingKind kind) {
    const int freq = kind == EncodingKind::Position ? spec.position_frequencies : spec.direction_frequencies;
    Tensor row = p.transpose();
    return positional_encode(row, freq, spec.include_raw).row(0).transpose();
}

// ---------------------------------------------------------------------------

Mlp::Mlp(diff::ParameterSet& params, const std::string& prefix, int in, int hidden_layers, int width,
         int out, Activation hidden)
    : in_(in), out_(out), hidden_(hidden) {
    int prev = in;
    for (int i = 0; i <= hidden_layers; ++i) {
        const int next = i == hidden_layers ? out : width;
        const std::string base = prefix + ".l" + std::to_string(i);
        params.add(base + ".w", Tensor::Zero(prev, next));
        const std::size_t wi = params.size() - 1;
        params.add(base + ".b", Tensor::Zero(1, next));
        layers_.emplace_back(wi, params.size() - 1);
        prev = next;
    }
}

diff::Var Mlp::forward(diff::Graph& g, diff::ParameterSet& params, diff::Var x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = diff::linear(x, g.param(params[layers_[i].first]), g.param(params[layers_[i].second]));
        if (i + 1 < layers_.size()) x = activate(x, hidden_);
    }
    return x;
}

Tensor Mlp::infer(const diff::ParameterSet& params, const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Tensor next(h.rows(), params[layers_[i].first].value.cols());
        next.noalias() = h * params[layers_[i].first].value;
        next.rowwise() += params[layers_[i].second].value.row(0);
        h = i + 1 < layers_.size() ? activate(next, hidden_) : std::move(next);
    }
    return h;
}

// ---------------------------------------------------------------------------

FieldSet::FieldSet(const FieldConfig& config, std::uint64_t seed) : config_(config) {
    const auto& c = config_;
    if (c.geometry_layers < 1 || c.feature_layers < 1 || c.radiance_layers < 1 || c.geometry_width < 1 ||
        c.feature_width < 1 || c.radiance_width < 1 || c.feature_dim < 1 || c.geometry_feature_dim < 1) {
        throw ConfigError("field networks need positive layer counts and widths");
    }
    if (c.encoding.position_frequencies < 0 || c.encoding.direction_frequencies < 0) {
        throw ConfigError("encoding frequencies must be >= 0");
    }
    if (!(c.init_radius > 0.0) || !(c.init_density_std > 0.0)) {
        throw ConfigError("init_radius and init_density_std must be > 0");
    }
    geometry_net_ = Mlp(params_, "fg", position_dim(), c.geometry_layers, c.geometry_width,
                        1 + c.geometry_feature_dim, Activation::SmoothRelu);
    feature_net_ = Mlp(params_, "ff", c.geometry_feature_dim, c.feature_layers, c.feature_width,
                       c.feature_dim, Activation::Relu);
    radiance_net_ = Mlp(params_, "fc", position_dim() + direction_dim() + c.geometry_feature_dim,
                        c.radiance_layers, c.radiance_width, 3, Activation::Relu);
    // Logistic density with scale s has standard deviation pi / (sqrt(3) s).
    const double s0 = std::numbers::pi / (std::sqrt(3.0) * c.init_density_std);
    params_.add("density_scale", Tensor::Constant(1, 1, std::log(s0)));
    log_scale_index_ = params_.size() - 1;
    geometric_init(seed);
}

int FieldSet::position_dim() const {
    return encoded_dim(3, config_.encoding.position_frequencies, config_.encoding.include_raw);
}

int FieldSet::direction_dim() const {
    return encoded_dim(3, config_.encoding.direction_frequencies, config_.encoding.include_raw);
}

void FieldSet::geometric_init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double pi = std::numbers::pi;

    // Geometry: near-isotropic ReLU-like stack whose output approximates
    // |x| - r. Only the raw xyz inputs of the first layer are non-zero.
    for (std::size_t i = 0; i < geometry_net_.layer_count(); ++i) {
        auto [wi, bi] = geometry_net_.layer(i);
        Tensor& w = params_[wi].value;
        Tensor& b = params_[bi].value;
        const auto in = w.rows(), out = w.cols();
        b.setZero();
        if (i + 1 == geometry_net_.layer_count()) {
            w = gaussian(in, out, 0.0, 1.0 / std::sqrt(static_cast<double>(in)), rng);
            w.col(0) = gaussian(in, 1, std::sqrt(pi) / std::sqrt(static_cast<double>(in)), 1e-4, rng);
            b(0, 0) = -config_.init_radius;
        } else if (i == 0) {
            w.setZero();
            const Eigen::Index raw = config_.encoding.include_raw ? 3 : 0;
            if (raw > 0) {
                w.topRows(raw) = gaussian(raw, out, 0.0, std::sqrt(2.0) / std::sqrt(static_cast<double>(out)), rng);
            } else {
                w = gaussian(in, out, 0.0, std::sqrt(2.0) / std::sqrt(static_cast<double>(out)), rng);
            }
        } else {
            w = gaussian(in, out, 0.0, std::sqrt(2.0) / std::sqrt(static_cast<double>(out)), rng);
        }
    }
    calibrate_sdf_head(rng);

    // Feature and radiance: He-normal hidden layers, small output layer.
    for (const Mlp* net : {&feature_net_, &radiance_net_}) {
        for (std::size_t i = 0; i < net->layer_count(); ++i) {
            auto [wi, bi] = net->layer(i);
            Tensor& w = params_[wi].value;
            const double fan_in = static_cast<double>(w.rows());
            const double std_dev = i + 1 == net->layer_count() ? 1.0 / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
            w = gaussian(w.rows(), w.cols(), 0.0, std_dev, rng);
            params_[bi].value.setZero();
        }
    }
}

// The random stack only matches |x| - r in expectation; depth and the
// softplus offset leave errors of several tenths near the cube corners.
// Refit the SDF column of the output layer by ridge regression towards
// |x| - r, pulled towards the random weights so the head stays small.
void FieldSet::calibrate_sdf_head(std::mt19937_64& rng) {
    const Eigen::Index n = std::max<Eigen::Index>(2048, 8 * config_.geometry_width);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor pts(n, 3);
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
    const auto& e = config_.encoding;
    Tensor h = positional_encode(pts, e.position_frequencies, e.include_raw);
    const std::size_t last = geometry_net_.layer_count() - 1;
    for (std::size_t i = 0; i < last; ++i) {
        auto [wi, bi] = geometry_net_.layer(i);
        Tensor next = h * params_[wi].value;
        next.rowwise() += params_[bi].value.row(0);
        h = activate(next, Activation::SmoothRelu);
    }
    auto [wi, bi] = geometry_net_.layer(last);
    const Eigen::Index k = h.cols();
    Eigen::MatrixXd a(n, k + 1);
    a.leftCols(k) = h;
    a.col(k).setOnes();
    Eigen::VectorXd y = pts.rowwise().norm().array() - config_.init_radius;
    Eigen::VectorXd prior(k + 1);
    prior.head(k) = params_[wi].value.col(0);
    prior(k) = -config_.init_radius;
    const double lambda = 1e-7 * static_cast<double>(n) / static_cast<double>(k);
    Eigen::MatrixXd lhs = a.transpose() * a;
    lhs.diagonal().array() += lambda;
    const Eigen::VectorXd rhs = a.transpose() * y + lambda * prior;
    const Eigen::VectorXd sol = lhs.ldlt().solve(rhs);
    if (!sol.allFinite()) throw NumericalError("geometric initialisation: SDF head calibration failed");
    params_[wi].value.col(0) = sol.head(k);
    params_[bi].value(0, 0) = sol(k);
}

Tensor FieldSet::checked_points(const Tensor& points) const {
    if (points.cols() != 3) throw ShapeError("field points must be N x 3");
    if (!points.allFinite()) throw NumericalError("non-finite field query point");
    constexpr double slack = 1e-9;
    if (config_.strict_bounds) {
        if (points.size() > 0 && points.cwiseAbs().maxCoeff() > 1.0 + slack) {
            throw DataError("field query point outside the scene cube [-1,1]^3");
        }
        return points;
    }
    return points.cwiseMax(-1.0).cwiseMin(1.0);
}

FieldSet::GeometryVars FieldSet::geometry(diff::Graph& g, diff::Var points) {
    const Tensor& pv = points.value();
    if (pv.cols() != 3) throw ShapeError("geometry: points must be N x 3");
    if (config_.strict_bounds) {
        checked_points(pv);
    } else if (pv.size() > 0 && pv.cwiseAbs().maxCoeff() > 1.0) {
        // Clamp through the tape: min(max(x, -1), 1) has zero slope outside.
        Tensor clamped = pv.cwiseMax(-1.0).cwiseMin(1.0);
        Tensor mask = (pv.array().abs() <= 1.0).cast<double>();
        const diff::NodeId pi = points.id;
        points = g.custom(diff::Op::Custom, {pi}, std::move(clamped), [pi, mask](diff::Graph& gr, diff::NodeId self) {
            gr.grad_ref(pi).array() += gr.grad_ref(self).array() * mask.array();
        });
    }
    diff::Var enc = positional_encode(points, config_.encoding.position_frequencies, config_.encoding.include_raw);
    diff::Var out = geometry_net_.forward(g, params_, enc);
    const Eigen::Index n = out.rows();
    return {diff::slice(out, 0, n, 0, 1), diff::slice(out, 0, n, 1, config_.geometry_feature_dim)};
}

diff::Var FieldSet::feature(diff::Graph& g, diff::Var geometry_feature) {
    if (geometry_feature.cols() != config_.geometry_feature_dim) {
        throw ShapeError("feature: geometry feature has " + std::to_string(geometry_feature.cols()) +
                         " columns, expected " + std::to_string(config_.geometry_feature_dim));
    }
    return feature_net_.forward(g, params_, geometry_feature);
}

diff::Var FieldSet::radiance(diff::Graph& g, diff::Var points, diff::Var directions, diff::Var geometry_feature) {
    const Tensor& dv = directions.value();
    if (dv.cols() != 3 || dv.rows() != points.rows() || geometry_feature.rows() != points.rows()) {
        throw ShapeError("radiance: points, directions and geometry features must have matching rows");
    }
    for (Eigen::Index r = 0; r < dv.rows(); ++r) {
        if (std::abs(dv.row(r).norm() - 1.0) > 1e-6) {
            throw DataError("radiance: viewing direction is not unit length (|v| = " +
                            std::to_string(dv.row(r).norm()) + ")");
        }
    }
    if (config_.strict_bounds) checked_points(points.value());
    const auto& e = config_.encoding;
    diff::Var pos;
    if (!g.requires_grad(points.id)) {
        pos = g.constant(positional_encode(checked_points(points.value()), e.position_frequencies, e.include_raw));
    } else {
        pos = positional_encode(points, e.position_frequencies, e.include_raw);
    }
    diff::Var dir = positional_encode(directions, e.direction_frequencies, e.include_raw);
    const diff::Var parts[] = {pos, dir, geometry_feature};
    diff::Var x = diff::concat(parts, diff::Axis::Cols);
    return diff::sigmoid(radiance_net_.forward(g, params_, x));
}

diff::Var FieldSet::density_scale(diff::Graph& g) {
    return diff::exp(g.param(params_[log_scale_index_]));
}

double FieldSet::density_scale() const { return std::exp(params_[log_scale_index_].value(0, 0)); }

void FieldSet::infer(const Tensor& points, Tensor* sdf, Tensor* geometry_feature, Tensor* feature) const {
    const Tensor p = checked_points(points);
    const auto& e = config_.encoding;
    Tensor out = geometry_net_.infer(params_, positional_encode(p, e.position_frequencies, e.include_raw));
    if (sdf != nullptr) *sdf = out.leftCols(1);
    if (feature != nullptr) *feature = feature_net_.infer(params_, out.rightCols(config_.geometry_feature_dim));
    if (geometry_feature != nullptr) *geometry_feature = out.rightCols(config_.geometry_feature_dim);
}

Tensor FieldSet::infer_radiance(const Tensor& points, const Tensor& directions, const Tensor& geometry_feature) const {
    const auto& e = config_.encoding;
    Tensor in(points.rows(), position_dim() + direction_dim() + config_.geometry_feature_dim);
    in << positional_encode(checked_points(points), e.position_frequencies, e.include_raw),
        positional_encode(directions, e.direction_frequencies, e.include_raw), geometry_feature;
    Tensor out = radiance_net_.infer(params_, in);
    return out.unaryExpr([](double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); });
}

GeometrySample FieldSet::eval_geometry(const Vec3& x) const {
    Tensor p = x.transpose();
    Tensor s, gf;
    infer(p, &s, &gf, nullptr);
    return {s(0, 0), gf.row(0).transpose()};
}

Eigen::VectorXd FieldSet::eval_feature(const Eigen::VectorXd& geometry_feature) const {
    if (geometry_feature.size() != config_.geometry_feature_dim) {
        throw ShapeError("eval_feature: geometry feature dimension mismatch");
    }
    Tensor gf = geometry_feature.transpose();
    return feature_net_.infer(params_, gf).row(0).transpose();
}

Vec3 FieldSet::eval_radiance(const Vec3& x, const Vec3& v, const Eigen::VectorXd& geometry_feature) const {
    if (std::abs(v.norm() - 1.0) > 1e-6) throw DataError("eval_radiance: viewing direction is not unit length");
    if (geometry_feature.size() != config_.geometry_feature_dim) {
        throw ShapeError("eval_radiance: geometry feature dimension mismatch");
    }
    const auto& e = config_.encoding;
    Tensor p = checked_points(Tensor(x.transpose()));
    Tensor d = v.transpose();
    Tensor in(1, position_dim() + direction_dim() + config_.geometry_feature_dim);
    in << positional_encode(p, e.position_frequencies, e.include_raw),
        positional_encode(d, e.direction_frequencies, e.include_raw), geometry_feature.transpose();
    Tensor out = radiance_net_.infer(params_, in);
    return out.row(0).transpose().unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
}

// ---------------------------------------------------------------------------

std::vector<CheckpointRecord> FieldSet::to_records() const {
    auto records = neffbio::to_records(params_);
    const auto& c = config_;
    CheckpointRecord meta;
    meta.name = kMetaName;
    meta.data = {double(c.encoding.position_frequencies), double(c.encoding.direction_frequencies),
                 double(c.encoding.include_raw), double(c.geometry_layers), double(c.geometry_width),
                 double(c.geometry_feature_dim), double(c.feature_layers), double(c.feature_width),
                 double(c.feature_dim), double(c.radiance_layers), double(c.radiance_width),
                 c.init_radius, c.init_density_std, double(c.strict_bounds)};
    meta.dims = {static_cast<std::uint32_t>(meta.data.size())};
    records.insert(records.begin(), std::move(meta));
    return records;
}

FieldSet FieldSet::from_records(const std::vector<CheckpointRecord>& records) {
    const CheckpointRecord* meta = find_record(records, kMetaName);
    if (meta == nullptr || meta->data.size() != 14) {
        throw DataError("checkpoint has no usable '" + std::string(kMetaName) + "' record");
    }
    const auto& m = meta->data;
    FieldConfig c;
    c.encoding.position_frequencies = static_cast<int>(m[0]);
    c.encoding.direction_frequencies = static_cast<int>(m[1]);
    c.encoding.include_raw = m[2] != 0.0;
    c.geometry_layers = static_cast<int>(m[3]);
    c.geometry_width = static_cast<int>(m[4]);
    c.geometry_feature_dim = static_cast<int>(m[5]);
    c.feature_layers = static_cast<int>(m[6]);
    c.feature_width = static_cast<int>(m[7]);
    c.feature_dim = static_cast<int>(m[8]);
    c.radiance_layers = static_cast<int>(m[9]);
    c.radiance_width = static_cast<int>(m[10]);
    c.init_radius = m[11];
    c.init_density_std = m[12];
    c.strict_bounds = m[13] != 0.0;
    FieldSet fields(c, 0);
    load_records(fields.params_, records);
    return fields;
}

Vec3 direction_from_angles(double polar, double azimuth) {
    return {std::sin(polar) * std::cos(azimuth), std::sin(polar) * std::sin(azimuth), std::cos(polar)};
}

std::pair<double, double> angles_from_direction(const Vec3& v) {
    const Vec3 u = v.normalized();
    return {std::acos(std::clamp(u.z(), -1.0, 1.0)), std::atan2(u.y(), u.x())};
}

}  // namespace neffbio
