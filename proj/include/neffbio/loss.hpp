// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "neffbio/diff.hpp"
#include "neffbio/fields.hpp"

#include <optional>
#include <span>

namespace neffbio {

struct LossWeights {
    double alpha = 1.0;    // colour term
    double beta = 0.1;     // sparse-point geometry term
    double eikonal = 0.1;  // unit-gradient regulariser, 0 disables it
};

struct NeffLoss {
    diff::Var total;
    double color = 0.0;
    double feature = 0.0;
    double geometry = 0.0;
    double eikonal = 0.0;
};

// total = L_f + alpha L_c + beta L_g (+ eikonal weight * L_eik).
//   L_c: mean absolute error over rays and colour channels
//   L_f: mean absolute error over rays and feature channels
//   L_g: mean |F_g(x)| over the sparse points (0 when none are given)
// `feature` may be left unset when features are not rendered; then L_f = 0.
NeffLoss neff_loss(diff::Var color, std::optional<diff::Var> feature, const Tensor& gt_colors,
                   const Tensor& gt_features, std::optional<diff::Var> sparse_sdf,
                   std::optional<diff::Var> eikonal_term, const LossWeights& weights);

// Mean (|grad F_g| - 1)^2 with the spatial gradient taken by central
// differences of step `eps`; differentiable with respect to the field
// parameters.
diff::Var eikonal_loss(diff::Graph& g, FieldSet& fields, const Tensor& points, double eps = 5e-3);

double smooth_l1(double x, double threshold = 1.0);
diff::Var smooth_l1(diff::Var x, double threshold = 1.0);

struct BiomassSample {
    double m = 0.0;      // ground truth, grams
    double m_hat = 0.0;  // prediction, grams
};

// Mean over the batch of smooth_l1((m_hat - m) / ln m).
double biomass_loss(std::span<const BiomassSample> batch);
// Differentiable form; predictions is N x 1.
diff::Var biomass_loss(diff::Var predictions, std::span<const double> ground_truth);

}  // namespace neffbio
