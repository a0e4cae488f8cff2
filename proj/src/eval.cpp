// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/eval.hpp"

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include <cmath>
#include <string>

namespace neffbio {

MetricReport regression_metrics(std::span<const double> pred, std::span<const double> gt) {
    if (pred.size() != gt.size())
        throw DataError("regression_metrics: " + std::to_string(pred.size()) + " predictions vs " +
                        std::to_string(gt.size()) + " ground-truth values");
    if (gt.empty()) throw DataError("regression_metrics: no samples");
    MetricReport r;
    r.n = gt.size();
    double sq = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (!(gt[i] > 0.0)) throw DataError("regression_metrics: MARE undefined for non-positive ground truth");
        const double e = std::abs(gt[i] - pred[i]);
        r.mae += e;
        r.mare += e / gt[i];
        sq += e * e;
    }
    const double n = static_cast<double>(r.n);
    r.mae /= n;
    r.mare /= n;
    r.rmse = std::sqrt(sq / n);
    return r;
}

double psnr(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.size() == 0)
        throw ShapeError("psnr: image dimensions differ");
    const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

Eigen::Matrix<double, kWindow, 1> gaussian_window() {
    Eigen::Matrix<double, kWindow, 1> w;
    for (int i = 0; i < kWindow; ++i) {
        const double d = i - kWindow / 2;
        w(i) = std::exp(-d * d / (2.0 * kSigma * kSigma));
    }
    return w / w.sum();
}

// Separable "valid" filtering of an h x w plane.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& img, const Eigen::Matrix<double, kWindow, 1>& k) {
    const Eigen::Index h = img.rows(), w = img.cols();
    Eigen::MatrixXd tmp = Eigen::MatrixXd::Zero(h - kWindow + 1, w);
    for (int i = 0; i < kWindow; ++i) tmp += k(i) * img.middleRows(i, h - kWindow + 1);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h - kWindow + 1, w - kWindow + 1);
    for (int i = 0; i < kWindow; ++i) out += k(i) * tmp.middleCols(i, w - kWindow + 1);
    return out;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, int width, int height) {
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != static_cast<Eigen::Index>(width) * height)
        throw ShapeError("ssim: image dimensions differ");
    if (width < kWindow || height < kWindow) throw ShapeError("ssim: images must be at least 11x11");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto k = gaussian_window();
    double total = 0.0;
    for (Eigen::Index ch = 0; ch < a.cols(); ++ch) {
        Eigen::MatrixXd x(height, width), y(height, width);
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c) {
                x(r, c) = a(static_cast<Eigen::Index>(r) * width + c, ch);
                y(r, c) = b(static_cast<Eigen::Index>(r) * width + c, ch);
            }
        const Eigen::ArrayXXd mx = filter_valid(x, k).array(), my = filter_valid(y, k).array();
        const Eigen::ArrayXXd sxx = filter_valid(x.cwiseProduct(x), k).array() - mx * mx;
        const Eigen::ArrayXXd syy = filter_valid(y.cwiseProduct(y), k).array() - my * my;
        const Eigen::ArrayXXd sxy = filter_valid(x.cwiseProduct(y), k).array() - mx * my;
        const Eigen::ArrayXXd map =
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        total += map.mean();
    }
    return total / static_cast<double>(a.cols());
}

ImageMetrics image_metrics(const Tensor& a, const Tensor& b, int width, int height) {
    return {psnr(a, b), ssim(a, b, width, height)};
}

FeaturePca feature_pca(const Tensor& f) {
    if (f.cols() < 3) throw ShapeError("feature_pca: need at least 3 channels");
    if (f.rows() == 0) throw ShapeError("feature_pca: no pixels");
    const Eigen::RowVectorXd mean = f.colwise().mean();
    const Eigen::MatrixXd centred = f.rowwise() - mean;
    const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(f.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::Index c = f.cols();
    FeaturePca out;
    out.components = Tensor::Zero(c, 3);
    out.variance.setZero();
    const double top = std::max(es.eigenvalues()(c - 1), 0.0);
    for (int k = 0; k < 3; ++k) {
        const double ev = es.eigenvalues()(c - 1 - k);
        if (!(ev > 1e-12 * std::max(top, 1e-300)) || top == 0.0) break;
        Eigen::VectorXd v = es.eigenvectors().col(c - 1 - k);
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0) v = -v;  // deterministic sign
        out.components.col(k) = v;
        out.variance(k) = ev;
        out.rank = k + 1;
    }
    out.projected = centred * out.components;
    return out;
}

Tensor feature_pca_rgb(const Tensor& features) {
    const FeaturePca p = feature_pca(features);
    if (p.rank < 3) spdlog::warn("feature_pca_rgb: covariance rank {} < 3, zeroing remaining channels", p.rank);
    Tensor rgb = Tensor::Zero(features.rows(), 3);
    for (int k = 0; k < p.rank; ++k) {
        const double lo = p.projected.col(k).minCoeff(), hi = p.projected.col(k).maxCoeff();
        if (hi > lo) rgb.col(k) = (p.projected.col(k).array() - lo) / (hi - lo);
    }
    return rgb;
}

}  // namespace neffbio
