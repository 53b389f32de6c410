#include <gtest/gtest.h>

#include <cmath>

#include <neuron_lens/ablate.hpp>

#include "test_util.hpp"

namespace nl = neuron_lens;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nl::ErrorKind;

namespace {

struct Toy
{
    nl::LinearHeadModel head;
    nl::MatrixF A;
    std::vector<std::int64_t> labels;
};

// A random head on random activations, labels from the head's own noisy predictions.
Toy make_toy(std::uint64_t seed, Eigen::Index neurons = 4, Eigen::Index classes = 3, Eigen::Index inputs = 60)
{
    nl::SplitMix64 rng(seed);
    Toy t;
    t.head.W.resize(classes, neurons);
    t.head.bias.resize(classes);
    for (Eigen::Index i = 0; i < t.head.W.size(); ++i) t.head.W.data()[i] = rng.normal();
    for (auto& b : t.head.bias) b = 0.3 * rng.normal();
    t.head.temperature = 1.3;
    t.A.resize(neurons, inputs);
    for (Eigen::Index i = 0; i < t.A.size(); ++i) t.A.data()[i] = static_cast<float>(std::abs(rng.normal()));
    for (Eigen::Index x = 0; x < inputs; ++x) {
        const VectorXd z = t.head.W * t.A.col(x).cast<double>() + t.head.bias;
        const VectorXd p = nl::softmax(z, t.head.temperature);
        double u = rng.uniform(), acc = 0.0;
        std::int64_t y = classes - 1;
        for (Eigen::Index c = 0; c < classes; ++c)
            if ((acc += p(c)) >= u) {
                y = c;
                break;
            }
        t.labels.push_back(y);
    }
    t.head.mu = t.A.cast<double>().rowwise().mean();
    return t;
}

// Forward pass from scratch with row k of A replaced by `values`.
double brute_loss(const Toy& t, Eigen::Index x, Eigen::Index k, double value, bool* correct = nullptr)
{
    VectorXd a = t.A.col(x).cast<double>();
    a(k) = value;
    const VectorXd z = t.head.W * a + t.head.bias;
    const VectorXd zs = z / t.head.temperature;
    const double lse = std::log((zs.array() - zs.maxCoeff()).exp().sum()) + zs.maxCoeff();
    Eigen::Index best;
    z.maxCoeff(&best);
    if (correct) *correct = best == t.labels[std::size_t(x)];
    return lse - zs(t.labels[std::size_t(x)]);
}

nl::SplitAssignment toy_split(std::size_t n, std::uint64_t seed = 5) { return nl::make_split(n, seed); }

} // namespace

TEST(Head, SoftmaxAndCrossEntropy)
{
    const VectorXd z = (VectorXd(3) << 1.0, 2.0, -0.5).finished();
    const VectorXd p = nl::softmax(z, 0.7);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_NEAR(nl::cross_entropy(z, 1, 0.7), -std::log(p(1)), 1e-12);
    const VectorXd big = (VectorXd(2) << 1000.0, 0.0).finished();
    EXPECT_NEAR(nl::cross_entropy(big, 0, 1.0), 0.0, 1e-12);
    EXPECT_NEAR(nl::cross_entropy(big, 1, 1.0), 1000.0, 1e-9);
    EXPECT_EQ(nl::argmax((VectorXd(3) << 2.0, 2.0, 1.0).finished()), 0);
}

TEST(Head, LoadSaveRoundTrip)
{
    TempDir dir;
    auto t = make_toy(1);
    t.head.temperature = 0.8;
    t.head.save(dir.path / "head");
    const auto back = nl::LinearHeadModel::load(dir.path / "head");
    EXPECT_TRUE(back.W.isApprox(t.head.W.cast<float>().cast<double>()));
    EXPECT_TRUE(back.bias.isApprox(t.head.bias.cast<float>().cast<double>()));
    EXPECT_TRUE(back.mu.isApprox(t.head.mu.cast<float>().cast<double>()));
    EXPECT_EQ(back.temperature, 0.8);

    std::filesystem::remove(dir.path / "head" / "meta.json");
    const auto bare = nl::LinearHeadModel::load(dir.path / "head");
    EXPECT_EQ(bare.temperature, 1.0);
    EXPECT_EQ(bare.mu.size(), 0);
}

TEST(Head, ValidationAndLabels)
{
    auto t = make_toy(2);
    t.head.bias.resize(2);
    EXPECT_ERROR_KIND(t.head.validate(), ErrorKind::dimension_mismatch);
    t = make_toy(2);
    t.head.temperature = 0.0;
    EXPECT_ERROR_KIND(t.head.validate(), ErrorKind::invalid_argument);
    t = make_toy(2);
    t.labels[4] = 3;
    EXPECT_ERROR_KIND(nl::HeadEvaluation(t.head, t.A, t.labels), ErrorKind::degenerate);
    t.labels.pop_back();
    EXPECT_ERROR_KIND(nl::HeadEvaluation(t.head, t.A, t.labels), ErrorKind::dimension_mismatch);
}

TEST(Head, MuFromTrainSplit)
{
    auto t = make_toy(3);
    const auto split = toy_split(60);
    t.head.set_mu(t.A, split.train);
    for (Eigen::Index k = 0; k < 4; ++k) {
        double acc = 0.0;
        for (auto i : split.train) acc += t.A(k, Eigen::Index(i));
        EXPECT_NEAR(t.head.mu(k), acc / double(split.train.size()), 1e-12);
    }
}

TEST(Impact, MatchesBruteForceForwardPass)
{
    const auto t = make_toy(4);
    const nl::HeadEvaluation eval(t.head, t.A, t.labels);
    double total_correct = 0.0, total_loss = 0.0;
    for (Eigen::Index x = 0; x < 60; ++x) {
        bool ok = false;
        total_loss += brute_loss(t, x, 0, t.A(0, x), &ok);
        total_correct += ok;
    }
    for (std::size_t k = 0; k < 4; ++k) {
        const auto rec = nl::neuron_impacts(eval, k);
        for (Eigen::Index x = 0; x < 60; ++x) {
            bool ok0 = false, ok1 = false;
            const double l0 = brute_loss(t, x, Eigen::Index(k), t.A(Eigen::Index(k), x), &ok0);
            const double l1 = brute_loss(t, x, Eigen::Index(k), 0.0, &ok1);
            const double expected = 0.5 * ((double(ok0) - double(ok1)) / total_correct - (l0 - l1) / total_loss);
            EXPECT_NEAR(rec.impact[std::size_t(x)], expected, 1e-12);
        }
    }
}

TEST(Impact, ZeroColumnHasNoImpact)
{
    auto t = make_toy(5);
    t.head.W.col(2).setZero();
    const nl::HeadEvaluation eval(t.head, t.A, t.labels);
    const auto rec = nl::neuron_impacts(eval, 2);
    for (double v : rec.impact) EXPECT_EQ(v, 0.0);
    const auto row = t.A.row(2);
    const auto ti = nl::top_impact(rec, std::span<const float>(row.data(), 60), 0.1);
    EXPECT_TRUE(ti.flagged);
}

TEST(Impact, HelpfulNeuronHasPositiveImpact)
{
    // One neuron, two classes: the neuron pushes toward the true class on every input.
    nl::LinearHeadModel head;
    head.W = (MatrixXd(2, 1) << 2.0, -2.0).finished();
    head.bias = VectorXd::Zero(2);
    nl::MatrixF A(1, 5);
    A << 1, 2, 0.5f, 3, 1.5f;
    const nl::HeadEvaluation eval(head, A, {0, 0, 0, 0, 0});
    const auto rec = nl::neuron_impacts(eval, 0);
    for (double v : rec.impact) EXPECT_GT(v, 0.0);
}

TEST(TopImpact, HandExamples)
{
    nl::ImpactRecord rec;
    rec.impact = {0.1, -0.3, 0.4, 0.2};
    const std::vector<float> act = {0.0f, 5.0f, 9.0f, 1.0f};  // order by activation: 2, 1, 3, 0
    EXPECT_NEAR(nl::top_impact(rec, act, 0.5).value, 0.7, 1e-12);
    EXPECT_EQ(nl::top_impact(rec, act, 0.0).value, 0.0);
    EXPECT_NEAR(nl::top_impact(rec, act, 1.0).value, 1.0, 1e-12);
    EXPECT_NEAR(nl::top_impact(rec, act, 0.25).value, 0.4, 1e-12);
    EXPECT_NEAR(nl::top_impact(rec, act, 0.74).value, 0.7, 1e-12);  // floor(2.96) = 2
    EXPECT_ERROR_KIND(nl::top_impact(rec, act, 1.5), ErrorKind::invalid_argument);
}

TEST(TopImpact, MonotoneInBeta)
{
    nl::SplitMix64 rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        nl::ImpactRecord rec;
        std::vector<float> act(200);
        for (std::size_t i = 0; i < 200; ++i) {
            rec.impact.push_back(rng.normal());
            act[i] = static_cast<float>(rng.uniform());
        }
        double prev = 0.0;
        for (double beta = 0.0; beta <= 1.0; beta += 0.01) {
            const double v = nl::top_impact(rec, act, beta).value;
            EXPECT_GE(v, prev - 1e-15);
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0 + 1e-12);
            prev = v;
        }
    }
}

TEST(Temperature, NeverWorseThanOne)
{
    nl::SplitMix64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        nl::MatrixF logits(100, 4);
        std::vector<std::int64_t> y(100);
        for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = static_cast<float>(3.0 * rng.normal());
        for (auto& v : y) v = std::int64_t(rng.below(4));
        const auto fit = nl::fit_temperature(logits, y);
        EXPECT_LE(fit.nll, nl::mean_nll(logits, y, 1.0) + 1e-12);
        EXPECT_GE(fit.temperature, 0.05);
        EXPECT_LE(fit.temperature, 20.0);
    }
}

TEST(Temperature, RecoversPlantedScale)
{
    for (double T : {1.0, 2.0}) {
        nl::SplitMix64 rng(8);
        const Eigen::Index n = 20000, classes = 5;
        nl::MatrixF logits(n, classes);
        std::vector<std::int64_t> y(std::size_t(n), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            VectorXd u(classes);
            for (auto& v : u) v = 2.0 * rng.normal();
            const VectorXd p = nl::softmax(u, 1.0);
            double r = rng.uniform(), acc = 0.0;
            y[std::size_t(i)] = classes - 1;
            for (Eigen::Index c = 0; c < classes; ++c)
                if ((acc += p(c)) >= r) {
                    y[std::size_t(i)] = c;
                    break;
                }
            logits.row(i) = (T * u).cast<float>().transpose();
        }
        EXPECT_NEAR(nl::fit_temperature(logits, y).temperature, T, 0.05 * T);
    }
}

TEST(NormScaling, FormulaOracle)
{
    VectorXd q(5);
    q << 1, 4, 2, 8, 5;
    auto sc = nl::norm_scaling(q, q);
    EXPECT_NEAR(sc.c, 1.0, 1e-12);
    EXPECT_NEAR(sc.d, 0.0, 1e-12);
    const VectorXd s2 = (2.0 * q).array() + 3.0;
    sc = nl::norm_scaling(s2, q);
    EXPECT_NEAR(sc.c, 0.5, 1e-12);
    EXPECT_NEAR(sc.d, -1.5, 1e-12);

    nl::SplitMix64 rng(9);
    VectorXd s(30), r(30);
    for (Eigen::Index i = 0; i < 30; ++i) {
        s(i) = rng.normal();
        r(i) = 0.3 * s(i) + rng.normal() + 2.0;
    }
    const double ms = s.mean(), mr = r.mean();
    const double cov = ((s.array() - ms) * (r.array() - mr)).mean();
    const double vs = (s.array() - ms).square().mean();
    sc = nl::norm_scaling(s, r);
    EXPECT_NEAR(sc.c, cov / vs, 1e-9);
    EXPECT_NEAR(sc.d, mr - cov / vs * ms, 1e-9);

    sc = nl::norm_scaling(VectorXd::Constant(5, 2.0), q);
    EXPECT_EQ(sc.c, 0.0);
    EXPECT_NEAR(sc.d, 4.0, 1e-12);
}

TEST(Ablation, EndpointsAndBruteForce)
{
    const auto t = make_toy(10, 4, 3, 200);
    const nl::HeadEvaluation eval(t.head, t.A, t.labels);
    const auto split = toy_split(200);
    for (std::size_t k = 0; k < 4; ++k) {
        const double mu = t.head.mu(Eigen::Index(k));
        VectorXd q(Eigen::Index(split.val.size())), s(q.size());
        nl::SplitMix64 rng(k);
        for (std::size_t j = 0; j < split.val.size(); ++j) {
            q(Eigen::Index(j)) = t.A(Eigen::Index(k), Eigen::Index(split.val[j]));
            s(Eigen::Index(j)) = q(Eigen::Index(j)) + 0.3 * rng.normal();
        }
        EXPECT_NEAR(nl::ablation_alpha_init(eval, k, split.val, q, 1.0, 0.0, mu), 1.0, 1e-12);
        EXPECT_NEAR(nl::ablation_alpha_init(eval, k, split.val, s, 0.0, mu, mu), 0.0, 1e-12);

        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < split.val.size(); ++j) {
            const auto x = Eigen::Index(split.val[j]);
            const double base = brute_loss(t, x, Eigen::Index(k), t.A(Eigen::Index(k), x));
            num += std::abs(brute_loss(t, x, Eigen::Index(k), 1.1 * s(Eigen::Index(j)) - 0.2) - base);
            den += std::abs(brute_loss(t, x, Eigen::Index(k), mu) - base);
        }
        EXPECT_NEAR(nl::ablation_alpha_init(eval, k, split.val, s, 1.1, -0.2, mu), 1.0 - num / den, 1e-9);
    }
}

TEST(Ablation, ZeroDenominatorIsAnError)
{
    auto t = make_toy(11);
    t.head.W.col(1).setZero();
    const nl::HeadEvaluation eval(t.head, t.A, t.labels);
    const auto split = toy_split(60);
    EXPECT_ERROR_KIND(nl::ablation_score(eval, 1, VectorXd::Ones(60), split, nl::ScalingMethod::norm),
                      ErrorKind::degenerate);
}

TEST(Ablation, OptimNeverBelowNorm)
{
    for (std::uint64_t seed = 12; seed < 20; ++seed) {
        const auto t = make_toy(seed, 4, 3, 200);
        const nl::HeadEvaluation eval(t.head, t.A, t.labels);
        const auto split = toy_split(200, seed);
        nl::SplitMix64 rng(seed);
        for (std::size_t k = 0; k < 4; ++k) {
            VectorXd s(200);
            for (Eigen::Index x = 0; x < 200; ++x) s(x) = 0.5 * t.A(Eigen::Index(k), x) + rng.normal();
            const auto norm = nl::ablation_score(eval, k, s, split, nl::ScalingMethod::norm);
            const auto optim = nl::ablation_score(eval, k, s, split, nl::ScalingMethod::optim);
            EXPECT_EQ(optim.norm_alpha_val, norm.alpha_init_val);
            EXPECT_GE(optim.alpha_init_val, norm.alpha_init_val);
            EXPECT_EQ(optim.scaling.method, nl::ScalingMethod::optim);
            EXPECT_LE(norm.alpha, 1.0);
        }
    }
}

TEST(Ablation, PerfectSimulationScoresOne)
{
    const auto t = make_toy(21, 3, 3, 150);
    const nl::HeadEvaluation eval(t.head, t.A, t.labels);
    const auto split = toy_split(150);
    for (std::size_t k = 0; k < 3; ++k) {
        const VectorXd s = (t.A.row(Eigen::Index(k)).cast<double>().transpose() * 4.0).array() + 1.0;
        for (auto m : {nl::ScalingMethod::norm, nl::ScalingMethod::optim})
            EXPECT_NEAR(nl::ablation_score(eval, k, s, split, m).alpha, 1.0, 1e-6);
    }
}

TEST(Ablation, NeedsMu)
{
    auto t = make_toy(22);
    t.head.mu.resize(0);
    const nl::HeadEvaluation eval(t.head, t.A, t.labels);
    EXPECT_ERROR_KIND(nl::ablation_score(eval, 0, VectorXd::Ones(60), toy_split(60), nl::ScalingMethod::norm),
                      ErrorKind::invalid_argument);
    EXPECT_ERROR_KIND(nl::parse_scaling("max"), ErrorKind::invalid_argument);
}
