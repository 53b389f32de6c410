#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <neuron_lens/elastic_net.hpp>

#include "test_util.hpp"

namespace nl = neuron_lens;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nl::ErrorKind;

namespace {

// Proximal gradient with a Frobenius-norm step, run until iterates stop moving.
VectorXd ista(const MatrixXd& P, const VectorXd& q, double lambda, double eta, double tol = 1e-10)
{
    const double t = 1.0 / (2.0 * P.squaredNorm() + lambda * (1.0 - eta));
    VectorXd w = VectorXd::Zero(P.rows());
    for (int it = 0; it < 5'000'000; ++it) {
        VectorXd z = w - t * (2.0 * P * (P.transpose() * w - q) + lambda * (1.0 - eta) * w);
        const double thr = t * lambda * eta;
        z = z.unaryExpr([thr](double v) { return v > thr ? v - thr : (v < -thr ? v + thr : 0.0); });
        const double move = (z - w).norm() / t;
        w = z;
        if (move <= tol) break;
    }
    return w;
}

double objective(const MatrixXd& P, const VectorXd& q, const VectorXd& w, double lambda, double eta)
{
    return (P.transpose() * w - q).squaredNorm() + lambda * ((1 - eta) / 2 * w.squaredNorm() + eta * w.lpNorm<1>());
}

MatrixXd random_P(nl::SplitMix64& rng, Eigen::Index m, Eigen::Index n)
{
    MatrixXd P(m, n);
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = rng.uniform();
    return P;
}

} // namespace

TEST(ElasticNet, ExactInterpolation)
{
    const MatrixXd P = MatrixXd::Identity(2, 2);
    const VectorXd q = (VectorXd(2) << 1, 0).finished();
    nl::ElasticNetConfig cfg;
    cfg.lambda = 0.0;
    const auto r = nl::solve(P, q, cfg);
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.weights.values(0), 1.0, 1e-8);
    EXPECT_EQ(r.weights.values(1), 0.0);
    EXPECT_EQ(r.weights.nnz(), 1u);
}

TEST(ElasticNet, FullShrinkageAboveBound)
{
    nl::SplitMix64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const MatrixXd P = random_P(rng, 6, 12);
        VectorXd q(12);
        for (auto& v : q) v = rng.normal();
        const double lam_max = (P * q).cwiseAbs().maxCoeff();
        nl::ElasticNetConfig cfg;
        cfg.lambda = 10.0 * lam_max;
        EXPECT_EQ(nl::solve(P, q, cfg).weights.nnz(), 0u);
        // The exact threshold of the solver's objective.
        const nl::GramDesign d(P);
        const nl::GramTarget t(d, q);
        cfg.lambda = nl::elastic_net_lambda_zero(d, t, cfg.eta);
        EXPECT_EQ(nl::solve(d, t, cfg).weights.nnz(), 0u);
        cfg.lambda *= 0.9;
        EXPECT_GT(nl::solve(d, t, cfg).weights.nnz(), 0u);
    }
}

TEST(ElasticNet, MatchesIstaOracle)
{
    nl::SplitMix64 rng(2);
    const MatrixXd P = random_P(rng, 10, 20);
    VectorXd q(20);
    for (auto& v : q) v = rng.normal();
    nl::ElasticNetConfig cfg;
    cfg.lambda = 0.1;
    cfg.eta = 0.99;
    const auto r = nl::solve(P, q, cfg);
    const VectorXd oracle = ista(P, q, cfg.lambda, cfg.eta);
    EXPECT_NEAR(objective(P, q, r.weights.values, cfg.lambda, cfg.eta), objective(P, q, oracle, cfg.lambda, cfg.eta),
                1e-6);
    EXPECT_NEAR(r.objective, objective(P, q, r.weights.values, cfg.lambda, cfg.eta), 1e-9);
}

TEST(ElasticNet, OptimalityResidualWithinTolerance)
{
    nl::SplitMix64 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const MatrixXd P = random_P(rng, 1 + Eigen::Index(rng.below(15)), 5 + Eigen::Index(rng.below(40)));
        VectorXd q(P.cols());
        for (auto& v : q) v = rng.normal();
        nl::ElasticNetConfig cfg;
        cfg.eta = rng.uniform(0.1, 1.0);
        cfg.lambda = rng.uniform(0.001, 2.0);
        const nl::GramDesign d(P);
        const nl::GramTarget t(d, q);
        const auto r = nl::solve(d, t, cfg);
        ASSERT_TRUE(r.converged);
        EXPECT_LE(nl::elastic_net_residual(d, t, r.weights.values, cfg.lambda, cfg.eta), cfg.tol);
    }
}

TEST(ElasticNet, IstaAndFistaAgree)
{
    nl::SplitMix64 rng(4);
    const MatrixXd P = random_P(rng, 8, 25);
    VectorXd q(25);
    for (auto& v : q) v = rng.normal();
    nl::ElasticNetConfig cfg;
    cfg.lambda = 0.5;
    const auto fast = nl::solve(P, q, cfg);
    cfg.accelerate = false;
    const auto slow = nl::solve(P, q, cfg);
    EXPECT_NEAR(fast.objective, slow.objective, 1e-8);
    EXPECT_LE(fast.iterations, slow.iterations);
}

TEST(ElasticNet, RowPermutationEquivariance)
{
    nl::SplitMix64 rng(5);
    const MatrixXd P = random_P(rng, 12, 30);
    VectorXd q(30);
    for (auto& v : q) v = rng.normal();
    std::vector<int> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    MatrixXd Pp(12, 30);
    for (int i = 0; i < 12; ++i) Pp.row(i) = P.row(perm[std::size_t(i)]);
    nl::ElasticNetConfig cfg;
    cfg.lambda = 0.2;
    const auto a = nl::solve(P, q, cfg), b = nl::solve(Pp, q, cfg);
    for (int i = 0; i < 12; ++i) EXPECT_NEAR(b.weights.values(i), a.weights.values(perm[std::size_t(i)]), 1e-6);
}

TEST(ElasticNet, ZeroVarianceTargetIsFlagged)
{
    nl::SplitMix64 rng(6);
    const MatrixXd P = random_P(rng, 4, 10);
    const auto r = nl::solve(P, VectorXd::Constant(10, 2.0), {});
    EXPECT_TRUE(r.zero_variance_target);
    EXPECT_EQ(r.weights.nnz(), 0u);
}

TEST(ElasticNet, ConstantRowsStayZero)
{
    nl::SplitMix64 rng(7);
    MatrixXd P = random_P(rng, 5, 20);
    P.row(2).setConstant(0.7);
    VectorXd q = 3.0 * P.row(0).transpose();
    q.array() += 1.0;
    nl::ElasticNetConfig cfg;
    cfg.lambda = 0.01;
    const auto r = nl::solve(P, q, cfg);
    EXPECT_EQ(r.weights.values(2), 0.0);
    EXPECT_EQ(r.dropped, std::vector<nl::Index>{2});
}

TEST(ElasticNet, InvalidConfigAndInputs)
{
    nl::ElasticNetConfig cfg;
    cfg.eta = 1.5;
    EXPECT_ERROR_KIND(cfg.validate(), ErrorKind::invalid_argument);
    cfg = {};
    cfg.lambda = -1;
    EXPECT_ERROR_KIND(cfg.validate(), ErrorKind::invalid_argument);
    cfg = {};
    cfg.tol = 0;
    EXPECT_ERROR_KIND(cfg.validate(), ErrorKind::invalid_argument);

    MatrixXd P = MatrixXd::Ones(2, 3);
    EXPECT_ERROR_KIND(nl::solve(P, VectorXd::Ones(4), {}), ErrorKind::dimension_mismatch);
    P(0, 0) = std::nan("");
    EXPECT_ERROR_KIND(nl::solve(P, VectorXd::Ones(3), {}), ErrorKind::non_finite);
}

TEST(ElasticNetPath, PlantedSupportIsTopTwo)
{
    nl::SplitMix64 rng(8);
    const Eigen::Index m = 30, n = 400;
    const MatrixXd P = random_P(rng, m, n);
    VectorXd q = 3.0 * P.row(4).transpose() + 1.0 * P.row(17).transpose();
    for (auto& v : q) v += 0.05 * rng.normal();
    const auto r = nl::solve_path(P.leftCols(300), q.head(300), P.rightCols(100), q.tail(100), {});
    ASSERT_FALSE(r.uninformative);
    std::vector<Eigen::Index> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](auto a, auto b) { return std::abs(r.weights.values(a)) > std::abs(r.weights.values(b)); });
    std::vector<Eigen::Index> top(order.begin(), order.begin() + 2);
    std::sort(top.begin(), top.end());
    EXPECT_EQ(top, (std::vector<Eigen::Index>{4, 17}));
    EXPECT_LE(r.weights.nnz(), 50u);
}

TEST(ElasticNetPath, NnzNonIncreasingInLambda)
{
    nl::SplitMix64 rng(9);
    const MatrixXd P = random_P(rng, 25, 200);
    VectorXd q = 2.0 * P.row(1).transpose() - P.row(7).transpose() + 0.5 * P.row(20).transpose();
    for (auto& v : q) v += 0.3 * rng.normal();
    const auto r = nl::solve_path(P.leftCols(150), q.head(150), P.rightCols(50), q.tail(50), {});
    ASSERT_EQ(r.path.size(), 20u);
    for (std::size_t k = 1; k < r.path.size(); ++k) {
        EXPECT_LT(r.path[k].lambda, r.path[k - 1].lambda);
        EXPECT_GE(r.path[k].nnz, r.path[k - 1].nnz) << "step " << k;
        EXPECT_TRUE(r.path[k].converged);
    }
    EXPECT_NEAR(r.path.back().lambda / r.path.front().lambda, 1e-3, 1e-12);
}

TEST(ElasticNetPath, ConstantTargetIsUninformative)
{
    nl::SplitMix64 rng(10);
    const MatrixXd P = random_P(rng, 5, 40);
    const auto r = nl::solve_path(P.leftCols(30), VectorXd::Constant(30, 1.0), P.rightCols(10), VectorXd::Ones(10), {});
    EXPECT_TRUE(r.uninformative);
    EXPECT_EQ(r.weights.nnz(), 0u);
}

TEST(ElasticNetPath, NeedsTwoPoints)
{
    nl::ElasticNetConfig cfg;
    cfg.path_length = 1;
    const MatrixXd P = MatrixXd::Identity(2, 2);
    EXPECT_ERROR_KIND(nl::solve_path(P, VectorXd::Ones(2), P, VectorXd::Ones(2), cfg), ErrorKind::invalid_argument);
}
