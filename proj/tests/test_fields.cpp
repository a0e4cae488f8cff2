// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/fields.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace neffbio;
using diff::Var;

namespace {

FieldConfig tiny_config() {
    FieldConfig c;
    c.geometry_width = 16;
    c.geometry_feature_dim = 8;
    c.feature_width = 16;
    c.feature_dim = 4;
    c.radiance_width = 16;
    return c;
}

Tensor random_points(int n, std::uint64_t seed, double lo = -0.9, double hi = 0.9) {
    std::mt19937_64 rng(seed);
    return test::random_tensor(n, 3, rng, lo, hi);
}

Tensor random_directions(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    Tensor v(n, 3);
    for (int i = 0; i < n; ++i) {
        Vec3 x(d(rng), d(rng), d(rng));
        v.row(i) = x.normalized().transpose();
    }
    return v;
}

}  // namespace

TEST(Encoding, ZeroInput) {
    EncodingSpec spec;
    const Eigen::VectorXd e = positional_encode(Eigen::VectorXd::Zero(3), spec, EncodingKind::Position);
    ASSERT_EQ(e.size(), 39);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(e(k), 0.0);
    for (int l = 0; l < 6; ++l) {
        for (int k = 0; k < 3; ++k) {
            EXPECT_EQ(e(3 + 6 * l + k), 0.0);
            EXPECT_EQ(e(3 + 6 * l + 3 + k), 1.0);
        }
    }
}

TEST(Encoding, DirectionDimension) {
    EncodingSpec spec;
    EXPECT_EQ(positional_encode(Eigen::VectorXd::Ones(3), spec, EncodingKind::Direction).size(), 27);
    EXPECT_EQ(encoded_dim(3, 6, true), 39);
    EXPECT_EQ(encoded_dim(3, 4, false), 24);
}

TEST(Encoding, Parity) {
    EncodingSpec spec;
    const Eigen::VectorXd p = Eigen::Vector3d(0.3, -0.7, 0.11);
    const Eigen::VectorXd a = positional_encode(p, spec, EncodingKind::Position);
    const Eigen::VectorXd b = positional_encode(Eigen::VectorXd(-p), spec, EncodingKind::Position);
    for (int l = 0; l < 6; ++l) {
        for (int k = 0; k < 3; ++k) {
            EXPECT_DOUBLE_EQ(a(3 + 6 * l + k), -b(3 + 6 * l + k));
            EXPECT_DOUBLE_EQ(a(3 + 6 * l + 3 + k), b(3 + 6 * l + 3 + k));
        }
    }
}

TEST(Encoding, MatchesClosedForm) {
    const Eigen::VectorXd p = Eigen::Vector3d(0.25, -0.5, 0.9);
    const Eigen::VectorXd e = positional_encode(p, EncodingSpec{}, EncodingKind::Position);
    for (int l = 0; l < 6; ++l) {
        const double f = std::ldexp(std::numbers::pi, l);
        for (int k = 0; k < 3; ++k) {
            EXPECT_NEAR(e(3 + 6 * l + k), std::sin(f * p(k)), 1e-12);
            EXPECT_NEAR(e(3 + 6 * l + 3 + k), std::cos(f * p(k)), 1e-12);
        }
    }
}

TEST(Geometry, DeterministicQueries) {
    FieldSet fs(tiny_config(), 3);
    const Vec3 x(0.1, -0.2, 0.3);
    auto a = fs.eval_geometry(x);
    auto b = fs.eval_geometry(x);
    EXPECT_EQ(a.sdf, b.sdf);
    EXPECT_EQ(a.feature, b.feature);
    FieldSet again(tiny_config(), 3);
    EXPECT_EQ(again.eval_geometry(x).sdf, a.sdf);
}

TEST(Geometry, InitialisedNearSphere) {
    FieldSet fs(FieldConfig{}, 42);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor pts(1000, 3);
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
    Tensor sdf;
    fs.infer(pts, &sdf, nullptr, nullptr);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) worst = std::max(worst, std::abs(sdf(i, 0) - (pts.row(i).norm() - 0.5)));
    EXPECT_LT(worst, 0.1);
}

TEST(Geometry, SpatialGradientMatchesFiniteDifferences) {
    FieldSet fs(tiny_config(), 5);
    const Tensor pts = random_points(40, 9);
    auto res = test::check_gradients(
        {pts},
        [&](diff::Graph& g, std::vector<Var>& p) { return diff::sum(fs.geometry(g, p[0]).sdf); }, 100, 4);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Geometry, ParameterGradientMatchesFiniteDifferences) {
    FieldSet fs(tiny_config(), 6);
    const Tensor pts = random_points(30, 10);
    auto res = test::check_parameter_gradients(
        fs.parameters(),
        [&](diff::Graph& g) {
            auto geo = fs.geometry(g, g.constant(pts));
            return diff::add(diff::mean(diff::square(geo.sdf)), diff::mean(diff::sin(geo.feature)));
        },
        100, 5);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Geometry, StrictBoundsRejectAndPermissiveClamps) {
    FieldConfig c = tiny_config();
    c.strict_bounds = true;
    FieldSet strict(c, 1);
    EXPECT_THROW(strict.eval_geometry(Vec3(1.5, 0, 0)), DataError);
    c.strict_bounds = false;
    FieldSet loose(c, 1);
    EXPECT_EQ(loose.eval_geometry(Vec3(1.5, 0, 0)).sdf, loose.eval_geometry(Vec3(1.0, 0, 0)).sdf);
}

TEST(Feature, ViewIndependentAndShaped) {
    FieldSet fs(tiny_config(), 7);
    const Vec3 x(0.2, 0.1, -0.4);
    auto geo = fs.eval_geometry(x);
    const Eigen::VectorXd f1 = fs.eval_feature(geo.feature);
    // The radiance query with a different direction must not touch f.
    (void)fs.eval_radiance(x, Vec3::UnitX(), geo.feature);
    (void)fs.eval_radiance(x, Vec3::UnitZ(), geo.feature);
    const Eigen::VectorXd f2 = fs.eval_feature(fs.eval_geometry(x).feature);
    EXPECT_EQ(f1, f2);
    EXPECT_EQ(f1.size(), 4);
    EXPECT_EQ(FieldSet(FieldConfig{}, 1).eval_feature(Eigen::VectorXd::Zero(256)).size(), 64);
}

TEST(Feature, ZeroWeightsGiveBias) {
    FieldSet fs(tiny_config(), 8);
    const auto& net = fs.feature_net();
    for (std::size_t i = 0; i < net.layer_count(); ++i) fs.parameters()[net.layer(i).first].value.setZero();
    Tensor& bias = fs.parameters()[net.layer(net.layer_count() - 1).second].value;
    bias << 0.5, -1.0, 2.0, 3.25;
    std::mt19937_64 rng(2);
    for (int k = 0; k < 5; ++k) {
        const Eigen::VectorXd f = fs.eval_feature(test::random_tensor(8, 1, rng));
        EXPECT_EQ(f, Eigen::VectorXd(bias.row(0).transpose()));
    }
}

TEST(Feature, RejectsWrongDimension) {
    FieldSet fs(tiny_config(), 8);
    EXPECT_THROW(fs.eval_feature(Eigen::VectorXd::Zero(5)), ShapeError);
}

TEST(Radiance, OutputInUnitCube) {
    FieldSet fs(tiny_config(), 11);
    const Tensor pts = random_points(10000, 12, -1.0, 1.0);
    const Tensor dirs = random_directions(10000, 13);
    Tensor geo;
    fs.infer(pts, nullptr, &geo, nullptr);
    const Tensor rgb = fs.infer_radiance(pts, dirs, geo);
    EXPECT_GE(rgb.minCoeff(), 0.0);
    EXPECT_LE(rgb.maxCoeff(), 1.0);
}

TEST(Radiance, DependsOnViewDirection) {
    FieldSet fs(tiny_config(), 14);
    const Vec3 x(0.3, 0.3, 0.3);
    auto geo = fs.eval_geometry(x);
    EXPECT_NE(fs.eval_radiance(x, Vec3::UnitX(), geo.feature), fs.eval_radiance(x, -Vec3::UnitY(), geo.feature));
}

TEST(Radiance, RejectsNonUnitDirection) {
    FieldSet fs(tiny_config(), 14);
    auto geo = fs.eval_geometry(Vec3::Zero());
    EXPECT_THROW(fs.eval_radiance(Vec3::Zero(), Vec3(1.0, 1e-2, 0.0), geo.feature), DataError);
}

TEST(Radiance, ParameterGradientMatchesFiniteDifferences) {
    FieldSet fs(tiny_config(), 15);
    const Tensor pts = random_points(20, 16);
    const Tensor dirs = random_directions(20, 17);
    auto res = test::check_parameter_gradients(
        fs.parameters(),
        [&](diff::Graph& g) {
            auto geo = fs.geometry(g, g.constant(pts));
            Var rgb = fs.radiance(g, g.constant(pts), g.constant(dirs), geo.feature);
            Var f = fs.feature(g, geo.feature);
            return diff::add(diff::mean(diff::square(rgb)), diff::mean(diff::square(f)));
        },
        100, 6);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(DensityScale, InitialValueAndPositivity) {
    FieldSet fs(tiny_config(), 1);
    // Logistic standard deviation pi / (sqrt(3) s) equals 0.3.
    EXPECT_NEAR(std::numbers::pi / (std::sqrt(3.0) * fs.density_scale()), 0.3, 1e-12);
    fs.parameters().get("density_scale").value(0, 0) = -50.0;
    EXPECT_GT(fs.density_scale(), 0.0);
}

TEST(Checkpoint, FieldsRoundTrip) {
    FieldSet fs(tiny_config(), 21);
    FieldSet back = FieldSet::from_records(fs.to_records());
    ASSERT_EQ(back.parameters().size(), fs.parameters().size());
    for (std::size_t i = 0; i < fs.parameters().size(); ++i) {
        EXPECT_EQ(back.parameters()[i].name, fs.parameters()[i].name);
        EXPECT_EQ(back.parameters()[i].value, fs.parameters()[i].value);
    }
    EXPECT_EQ(back.config().feature_dim, 4);
}

TEST(Directions, AnglesRoundTrip) {
    for (double polar : {0.3, 1.2, 2.8}) {
        for (double az : {-2.0, 0.0, 1.0, 3.0}) {
            const Vec3 v = direction_from_angles(polar, az);
            EXPECT_NEAR(v.norm(), 1.0, 1e-12);
            auto [p2, a2] = angles_from_direction(v);
            EXPECT_NEAR(p2, polar, 1e-12);
            EXPECT_NEAR(a2, az, 1e-12);
        }
    }
}
