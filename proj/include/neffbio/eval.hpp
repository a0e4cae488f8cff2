// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "neffbio/diff.hpp"
#include "neffbio/errors.hpp"

#include <span>

namespace neffbio {

struct MetricReport {
    double mae = 0.0;   // grams
    double mare = 0.0;  // ratio
    double rmse = 0.0;  // grams
    std::size_t n = 0;
};

// Throws DataError on length mismatch, empty input or non-positive ground truth.
MetricReport regression_metrics(std::span<const double> predictions, std::span<const double> ground_truth);

// Images are (w*h) x channels tensors, row-major pixels, values in [0,1].
double psnr(const Tensor& a, const Tensor& b);
// 11x11 Gaussian window (sigma 1.5) over fully contained windows,
// C1 = 0.01^2, C2 = 0.03^2, averaged over channels.
double ssim(const Tensor& a, const Tensor& b, int width, int height);

struct ImageMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
};
ImageMetrics image_metrics(const Tensor& a, const Tensor& b, int width, int height);

struct FeaturePca {
    Tensor components;        // c x 3, unit columns (zero where rank-deficient)
    Tensor projected;         // n x 3, centred scores
    Eigen::Vector3d variance; // per component
    int rank = 0;             // usable components, at most 3
};

FeaturePca feature_pca(const Tensor& features);
// Top-3 principal components, each min-max normalised to [0,1]. Channels
// beyond the covariance rank are zeroed with a warning.
Tensor feature_pca_rgb(const Tensor& features);

}  // namespace neffbio
