// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/loss.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <string>

namespace neffbio {

NeffLoss neff_loss(diff::Var color, std::optional<diff::Var> feature, const Tensor& gt_colors,
                   const Tensor& gt_features, std::optional<diff::Var> sparse_sdf,
                   std::optional<diff::Var> eikonal_term, const LossWeights& weights) {
    diff::Graph& g = *color.graph;
    if (color.rows() == 0) throw DataError("neff_loss: empty ray batch");
    if (weights.alpha < 0.0 || weights.beta < 0.0 || weights.eikonal < 0.0) {
        throw ConfigError("neff_loss: loss weights must be >= 0");
    }
    if (gt_colors.rows() != color.rows() || gt_colors.cols() != color.cols()) {
        throw ShapeError("neff_loss: ground-truth colours do not match the rendered batch");
    }
    if (gt_colors.size() > 0 && (gt_colors.minCoeff() < 0.0 || gt_colors.maxCoeff() > 1.0)) {
        throw DataError("neff_loss: ground-truth colours must lie in [0,1]");
    }

    NeffLoss out;
    diff::Var lc = diff::mean(diff::abs(diff::sub(color, g.constant(gt_colors))));
    out.color = lc.scalar();
    diff::Var total = diff::scale(lc, weights.alpha);

    if (feature) {
        if (gt_features.rows() != feature->rows() || gt_features.cols() != feature->cols()) {
            throw ShapeError("neff_loss: ground-truth features do not match the rendered batch");
        }
        diff::Var lf = diff::mean(diff::abs(diff::sub(*feature, g.constant(gt_features))));
        out.feature = lf.scalar();
        total = diff::add(total, lf);
    }

    if (sparse_sdf && sparse_sdf->rows() > 0) {
        diff::Var lg = diff::mean(diff::abs(*sparse_sdf));
        out.geometry = lg.scalar();
        total = diff::add(total, diff::scale(lg, weights.beta));
    } else if (weights.beta > 0.0) {
        spdlog::warn("neff_loss: no sparse points given, geometry term is 0");
    }

    if (eikonal_term && weights.eikonal > 0.0) {
        out.eikonal = eikonal_term->scalar();
        total = diff::add(total, diff::scale(*eikonal_term, weights.eikonal));
    }
    out.total = total;
    return out;
}

diff::Var eikonal_loss(diff::Graph& g, FieldSet& fields, const Tensor& points, double eps) {
    const Eigen::Index m = points.rows();
    if (m == 0) throw DataError("eikonal_loss: no points");
    // Six offset copies stacked: +x, -x, +y, -y, +z, -z.
    Tensor probes(6 * m, 3);
    for (int axis = 0; axis < 3; ++axis) {
        for (int sign = 0; sign < 2; ++sign) {
            Tensor block = points;
            block.col(axis).array() += sign == 0 ? eps : -eps;
            probes.middleRows((2 * axis + sign) * m, m) = block;
        }
    }
    diff::Var sdf = fields.geometry(g, g.constant(std::move(probes))).sdf;
    std::vector<diff::Var> comps;
    for (int axis = 0; axis < 3; ++axis) {
        diff::Var plus = diff::slice(sdf, (2 * axis) * m, m, 0, 1);
        diff::Var minus = diff::slice(sdf, (2 * axis + 1) * m, m, 0, 1);
        comps.push_back(diff::scale(diff::sub(plus, minus), 1.0 / (2.0 * eps)));
    }
    diff::Var grad = diff::concat(comps, diff::Axis::Cols);
    diff::Var norm = diff::sqrt(diff::shift(diff::row_sum(diff::square(grad)), 1e-12));
    return diff::mean(diff::square(diff::shift(norm, -1.0)));
}

double smooth_l1(double x, double threshold) {
    const double a = std::abs(x);
    return a < threshold ? 0.5 * x * x : a - 0.5 * threshold;
}

diff::Var smooth_l1(diff::Var x, double threshold) {
    Tensor y = x.value().unaryExpr([threshold](double v) { return smooth_l1(v, threshold); });
    const diff::NodeId xi = x.id;
    return x.graph->custom(diff::Op::Custom, {xi}, std::move(y), [xi, threshold](diff::Graph& gr, diff::NodeId self) {
        const Tensor& xv = gr.value(xi);
        gr.grad_ref(xi).array() += gr.grad_ref(self).array() * xv.array().unaryExpr([threshold](double v) {
            return std::abs(v) < threshold ? v : (v > 0.0 ? 1.0 : -1.0);
        });
    });
}

namespace {

void check_biomass(double m) {
    if (!(m > 1.0) || !std::isfinite(m)) {
        throw DataError("biomass ground truth must be > 1 (grams expected), got " + std::to_string(m));
    }
}

}  // namespace

double biomass_loss(std::span<const BiomassSample> batch) {
    if (batch.empty()) throw DataError("biomass_loss: empty batch");
    double total = 0.0;
    for (const auto& s : batch) {
        check_biomass(s.m);
        total += smooth_l1((s.m_hat - s.m) / std::log(s.m));
    }
    return total / static_cast<double>(batch.size());
}

diff::Var biomass_loss(diff::Var predictions, std::span<const double> ground_truth) {
    diff::Graph& g = *predictions.graph;
    if (predictions.cols() != 1 || predictions.rows() != static_cast<Eigen::Index>(ground_truth.size())) {
        throw ShapeError("biomass_loss: predictions must be N x 1 with N ground-truth values");
    }
    if (ground_truth.empty()) throw DataError("biomass_loss: empty batch");
    Tensor m(predictions.rows(), 1), inv_log(predictions.rows(), 1);
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
        check_biomass(ground_truth[i]);
        m(static_cast<Eigen::Index>(i), 0) = ground_truth[i];
        inv_log(static_cast<Eigen::Index>(i), 0) = 1.0 / std::log(ground_truth[i]);
    }
    diff::Var residual = diff::mul(diff::sub(predictions, g.constant(m)), g.constant(inv_log));
    return diff::mean(smooth_l1(residual));
}

}  // namespace neffbio
