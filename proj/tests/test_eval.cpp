// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/eval.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <set>

using namespace neffbio;

namespace {

// Direct per-window SSIM: explicit 2D Gaussian weights and weighted moments
// for every fully contained 11x11 window.
double reference_ssim(const Tensor& a, const Tensor& b, int w, int h) {
    double kern[11][11], ksum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            kern[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2.0 * 1.5 * 1.5));
            ksum += kern[i][j];
        }
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    for (Eigen::Index ch = 0; ch < a.cols(); ++ch) {
        double acc = 0.0;
        int count = 0;
        for (int y0 = 0; y0 + 11 <= h; ++y0) {
            for (int x0 = 0; x0 + 11 <= w; ++x0) {
                double mx = 0, my = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = kern[i][j] / ksum;
                        mx += k * a((y0 + i) * w + x0 + j, ch);
                        my += k * b((y0 + i) * w + x0 + j, ch);
                    }
                double vx = 0, vy = 0, cxy = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = kern[i][j] / ksum;
                        const double dx = a((y0 + i) * w + x0 + j, ch) - mx;
                        const double dy = b((y0 + i) * w + x0 + j, ch) - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        }
        total += acc / count;
    }
    return total / static_cast<double>(a.cols());
}

}  // namespace

TEST(Regression, TabulatedCases) {
    const double same[] = {100.0, 200.0};
    auto r = regression_metrics(same, same);
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_EQ(r.mare, 0.0);
    EXPECT_EQ(r.rmse, 0.0);

    const double p1[] = {110.0}, g1[] = {100.0};
    r = regression_metrics(p1, g1);
    EXPECT_DOUBLE_EQ(r.mae, 10.0);
    EXPECT_DOUBLE_EQ(r.mare, 0.1);
    EXPECT_DOUBLE_EQ(r.rmse, 10.0);
    EXPECT_EQ(r.n, 1u);

    const double p2[] = {90.0, 120.0}, g2[] = {100.0, 100.0};
    r = regression_metrics(p2, g2);
    EXPECT_DOUBLE_EQ(r.mae, 15.0);
    EXPECT_DOUBLE_EQ(r.mare, 0.15);
    EXPECT_NEAR(r.rmse, std::sqrt(250.0), 1e-12);
}

TEST(Regression, Errors) {
    const double a[] = {1.0, 2.0}, b[] = {1.0};
    EXPECT_THROW(regression_metrics(a, b), DataError);
    EXPECT_THROW(regression_metrics(std::span<const double>(), std::span<const double>()), DataError);
    const double zero[] = {0.0, 2.0};
    EXPECT_THROW(regression_metrics(a, zero), DataError);
}

TEST(Regression, RmseDominatesMaeAndOrderDoesNotMatter) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(1.0, 1000.0);
    std::uniform_int_distribution<int> len(1, 20);
    for (int t = 0; t < 10000; ++t) {
        const int n = len(rng);
        std::vector<double> p(n), g(n);
        for (int i = 0; i < n; ++i) {
            p[i] = u(rng);
            g[i] = u(rng);
        }
        const auto r = regression_metrics(p, g);
        ASSERT_GE(r.rmse, r.mae * (1.0 - 1e-12));
        if (t < 50) {
            std::vector<int> order(n);
            for (int i = 0; i < n; ++i) order[i] = i;
            std::shuffle(order.begin(), order.end(), rng);
            std::vector<double> p2(n), g2(n);
            for (int i = 0; i < n; ++i) {
                p2[i] = p[order[i]];
                g2[i] = g[order[i]];
            }
            const auto r2 = regression_metrics(p2, g2);
            EXPECT_NEAR(r2.mae, r.mae, 1e-9 * r.mae);
            EXPECT_NEAR(r2.rmse, r.rmse, 1e-9 * r.rmse);
        }
    }
}

TEST(Psnr, CapAndUniformOffset) {
    const Tensor a = Tensor::Constant(100, 3, 0.3);
    EXPECT_EQ(psnr(a, a), 100.0);
    EXPECT_NEAR(psnr(a, Tensor::Constant(100, 3, 0.4)), 20.0, 1e-9);
    EXPECT_THROW(psnr(a, Tensor::Constant(99, 3, 0.3)), ShapeError);
}

TEST(Psnr, DecreasesWithNoiseAmplitude) {
    std::mt19937_64 rng(4);
    const Tensor base = test::random_tensor(400, 3, rng, 0.2, 0.8);
    const Tensor noise = test::random_tensor(400, 3, rng, -1.0, 1.0);
    double prev = 101.0;
    for (double amp : {0.001, 0.01, 0.05, 0.1, 0.2}) {
        const double p = psnr(base, base + amp * noise);
        EXPECT_LT(p, prev);
        prev = p;
    }
}

TEST(Ssim, IdenticalIsOne) {
    std::mt19937_64 rng(5);
    const Tensor a = test::random_tensor(20 * 16, 3, rng, 0.0, 1.0);
    EXPECT_NEAR(ssim(a, a, 20, 16), 1.0, 1e-12);
}

TEST(Ssim, MatchesReferenceImplementation) {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 20; ++t) {
        const int w = 16 + t % 7, h = 14 + t % 5;
        const Tensor a = test::random_tensor(w * h, 3, rng, 0.0, 1.0);
        Tensor b = (a + 0.2 * test::random_tensor(w * h, 3, rng)).cwiseMax(0.0).cwiseMin(1.0);
        EXPECT_NEAR(ssim(a, b, w, h), reference_ssim(a, b, w, h), 1e-10);
    }
}

TEST(Pca, TwoClustersGiveTwoColours) {
    std::mt19937_64 rng(7);
    const Tensor u = test::random_tensor(1, 8, rng);
    Tensor f = Tensor::Zero(50, 8);
    for (int i = 0; i < 50; i += 3) f.row(i) = u;
    const Tensor rgb = feature_pca_rgb(f);
    std::set<std::tuple<double, double, double>> colours;
    for (Eigen::Index i = 0; i < rgb.rows(); ++i) colours.emplace(rgb(i, 0), rgb(i, 1), rgb(i, 2));
    EXPECT_EQ(colours.size(), 2u);
    EXPECT_EQ(feature_pca(f).rank, 1);
}

TEST(Pca, OutputInUnitRange) {
    std::mt19937_64 rng(8);
    const Tensor rgb = feature_pca_rgb(test::random_tensor(300, 6, rng, -5.0, 5.0));
    EXPECT_GE(rgb.minCoeff(), 0.0);
    EXPECT_LE(rgb.maxCoeff(), 1.0);
    EXPECT_THROW(feature_pca_rgb(Tensor::Zero(10, 2)), ShapeError);
}

TEST(Pca, BeatsRandomProjections) {
    std::mt19937_64 rng(9);
    Tensor f = test::random_tensor(400, 10, rng);
    // Anisotropic cloud so the top directions matter.
    for (int k = 0; k < 10; ++k) f.col(k) *= 1.0 + k;
    const FeaturePca p = feature_pca(f);
    const double captured = p.variance.sum();
    const Tensor centred = f.rowwise() - f.colwise().mean();
    for (int t = 0; t < 100; ++t) {
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(test::random_tensor(10, 3, rng))
                                      .householderQ() *
                                  Eigen::MatrixXd::Identity(10, 3);
        const double var = (centred * q).squaredNorm() / 400.0;
        EXPECT_GE(captured, var - 1e-9);
    }
    EXPECT_NEAR((centred * p.components).squaredNorm() / 400.0, captured, 1e-9);
}
