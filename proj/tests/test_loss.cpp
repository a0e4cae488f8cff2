// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/loss.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace neffbio;
using diff::Var;

TEST(NeffLoss, PerfectFitIsZero) {
    std::mt19937_64 rng(1);
    const Tensor c = test::random_tensor(5, 3, rng, 0.0, 1.0);
    const Tensor f = test::random_tensor(5, 4, rng);
    diff::Graph g;
    auto l = neff_loss(g.constant(c), g.constant(f), c, f, g.constant(Tensor::Zero(7, 1)), std::nullopt, {});
    EXPECT_EQ(l.total.scalar(), 0.0);
}

TEST(NeffLoss, AnalyticSphereOnItsSurface) {
    // Exact sphere SDF at points on the sphere.
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    Tensor sdf(50, 1);
    for (int i = 0; i < 50; ++i) {
        Vec3 p(nd(rng), nd(rng), nd(rng));
        p = 0.4 * p.normalized();
        sdf(i, 0) = p.norm() - 0.4;
    }
    EXPECT_LT(sdf.cwiseAbs().maxCoeff(), 1e-15);
    diff::Graph g;
    const Tensor c = Tensor::Constant(1, 3, 0.5);
    auto l = neff_loss(g.constant(c), std::nullopt, c, Tensor(), g.constant(sdf), std::nullopt, {});
    EXPECT_LT(l.geometry, 1e-15);
}

TEST(NeffLoss, MeanL1Arithmetic) {
    diff::Graph g;
    const Tensor gt = Tensor::Constant(1, 3, 0.4);
    const Tensor pred = Tensor::Constant(1, 3, 0.5);
    const Tensor f = Tensor::Ones(1, 2);
    auto l = neff_loss(g.constant(pred), g.constant(f), gt, f, std::nullopt, std::nullopt, {.alpha = 1.0});
    EXPECT_NEAR(l.total.scalar(), 0.1, 1e-15);
    EXPECT_NEAR(l.color, 0.1, 1e-15);
}

TEST(NeffLoss, AlphaScalesColourTermLinearly) {
    std::mt19937_64 rng(3);
    const Tensor pred = test::random_tensor(6, 3, rng, 0.0, 1.0);
    const Tensor gt = test::random_tensor(6, 3, rng, 0.0, 1.0);
    const Tensor fp = test::random_tensor(6, 2, rng);
    const Tensor fg = test::random_tensor(6, 2, rng);
    const Tensor s = test::random_tensor(9, 1, rng);
    auto total = [&](double alpha) {
        diff::Graph g;
        return neff_loss(g.constant(pred), g.constant(fp), gt, fg, g.constant(s), std::nullopt,
                         {.alpha = alpha, .beta = 0.1, .eikonal = 0.0})
            .total.scalar();
    };
    diff::Graph g;
    const double lc = neff_loss(g.constant(pred), std::nullopt, gt, Tensor(), std::nullopt, std::nullopt, {}).color;
    EXPECT_NEAR(total(2.0) - total(1.0), lc, 1e-14);
    EXPECT_NEAR(total(4.0) - total(2.0), 2.0 * lc, 1e-14);
}

TEST(NeffLoss, Validation) {
    diff::Graph g;
    const Tensor c = Tensor::Constant(2, 3, 0.5);
    EXPECT_THROW(neff_loss(g.constant(Tensor(0, 3)), std::nullopt, Tensor(0, 3), Tensor(), std::nullopt,
                           std::nullopt, {}),
                 DataError);
    EXPECT_THROW(neff_loss(g.constant(c), std::nullopt, Tensor::Constant(2, 3, 1.5), Tensor(), std::nullopt,
                           std::nullopt, {}),
                 DataError);
    EXPECT_THROW(neff_loss(g.constant(c), std::nullopt, c, Tensor(), std::nullopt, std::nullopt, {.alpha = -1.0}),
                 ConfigError);
    // No sparse points: geometry term is zero, not an error.
    auto l = neff_loss(g.constant(c), std::nullopt, c, Tensor(), std::nullopt, std::nullopt, {});
    EXPECT_EQ(l.geometry, 0.0);
}

TEST(NeffLoss, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(4);
    const Tensor gt = test::random_tensor(5, 3, rng, 0.0, 1.0);
    const Tensor fg = test::random_tensor(5, 4, rng);
    auto res = test::check_gradients(
        {test::random_tensor(5, 3, rng, 0.0, 1.0), test::random_tensor(5, 4, rng), test::random_tensor(11, 1, rng)},
        [&](diff::Graph&, std::vector<Var>& p) {
            return neff_loss(p[0], p[1], gt, fg, p[2], std::nullopt, {.alpha = 1.3, .beta = 0.7}).total;
        },
        100, 5);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Eikonal, GradientsMatchFiniteDifferences) {
    FieldConfig c;
    c.geometry_width = 10;
    c.geometry_layers = 2;
    c.geometry_feature_dim = 4;
    c.feature_width = 4;
    c.feature_dim = 2;
    c.radiance_width = 4;
    FieldSet fs(c, 3);
    std::mt19937_64 rng(6);
    const Tensor pts = test::random_tensor(12, 3, rng, -0.8, 0.8);
    auto res = test::check_parameter_gradients(
        fs.parameters(), [&](diff::Graph& g) { return eikonal_loss(g, fs, pts); }, 100, 7);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(SmoothL1, TabulatedValues) {
    EXPECT_EQ(smooth_l1(0.0), 0.0);
    EXPECT_EQ(smooth_l1(0.5), 0.125);
    EXPECT_EQ(smooth_l1(2.0), 1.5);
    EXPECT_EQ(smooth_l1(-2.0), 1.5);
}

TEST(SmoothL1, GradientMatchesFiniteDifferences) {
    // Probes kept off the |x| = 1 kink.
    Tensor x(1, 8);
    x << -2.5, -0.6, -0.2, 0.1, 0.4, 0.8, 1.3, 3.0;
    auto res = test::check_gradients(
        {x}, [](diff::Graph&, std::vector<Var>& p) { return diff::sum(smooth_l1(p[0])); }, 100, 8);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(BiomassLoss, TabulatedValues) {
    const BiomassSample exact[] = {{100.0, 100.0}, {250.0, 250.0}};
    EXPECT_EQ(biomass_loss(exact), 0.0);
    const double m = std::exp(2.0);
    const BiomassSample one[] = {{m, m + 1.0}};
    EXPECT_NEAR(biomass_loss(one), 0.125, 1e-15);
}

TEST(BiomassLoss, LargerBiomassPenalisedLess) {
    const double e2 = std::exp(2.0), e4 = std::exp(4.0);
    const BiomassSample small[] = {{e2, e2 + 10.0}};
    const BiomassSample large[] = {{e4, e4 + 10.0}};
    EXPECT_LT(biomass_loss(large), biomass_loss(small));
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= 200; ++k) {
        const double m = std::exp(1.0 + 7.0 * k / 200.0);
        const BiomassSample s[] = {{m, m - 3.0}};
        const double l = biomass_loss(s);
        EXPECT_LE(l, prev);
        prev = l;
    }
}

TEST(BiomassLoss, RejectsNonGramLabels) {
    const BiomassSample bad[] = {{0.8, 1.0}};
    try {
        biomass_loss(bad);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("grams"), std::string::npos);
    }
}

TEST(BiomassLoss, DifferentiableFormAgrees) {
    const std::vector<double> m = {12.0, 300.0, 45.5};
    Tensor pred(3, 1);
    pred << 14.0, 280.0, 45.0;
    diff::Graph g;
    const double v = biomass_loss(g.constant(pred), m).scalar();
    const BiomassSample s[] = {{12.0, 14.0}, {300.0, 280.0}, {45.5, 45.0}};
    EXPECT_NEAR(v, biomass_loss(s), 1e-15);
    auto res = test::check_gradients(
        {pred}, [&](diff::Graph&, std::vector<Var>& p) { return biomass_loss(p[0], m); }, 100, 9);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}
