#include <gtest/gtest.h>

#include <cmath>

#include <neuron_lens/fixture.hpp>
#include <neuron_lens/simulate.hpp>

#include "test_util.hpp"

namespace nl = neuron_lens;
using Eigen::VectorXd;
using nl::ErrorKind;

namespace {

nl::Explanation make_expl(std::int64_t id, std::vector<nl::Term> terms)
{
    nl::Explanation e;
    e.neuron_id = id;
    e.terms = std::move(terms);
    return e;
}

nl::SimulatorSource source_abc(const nl::MatrixF& P)
{
    return nl::SimulatorSource::from_matrix(P, nl::ConceptSet({"a", "b", "c"}));
}

std::vector<nl::Index> all_inputs(std::size_t n)
{
    std::vector<nl::Index> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

nl::FixtureConfig small_fixture()
{
    nl::FixtureConfig cfg;
    cfg.neurons = 12;
    cfg.concepts = 40;
    cfg.inputs = 600;
    cfg.embed_dim = 16;
    return cfg;
}

} // namespace

TEST(Simulate, SingleTermIsProbabilityRow)
{
    nl::MatrixF P(3, 4);
    P << 0.1f, 0.2f, 0.3f, 0.4f,
         0.5f, 0.5f, 0.5f, 0.5f,
         0.9f, 0.0f, 1.0f, 0.25f;
    const auto s = nl::simulate_activations(make_expl(0, {{1.0f, "c"}}), source_abc(P), all_inputs(4));
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(s(j), P(2, j));
}

TEST(Simulate, HandWeightedSum)
{
    nl::MatrixF P = nl::MatrixF::Constant(3, 1, 0.5f);
    const auto s = nl::simulate_activations(make_expl(0, {{2.0f, "a"}, {-1.0f, "b"}}), source_abc(P), all_inputs(1));
    EXPECT_DOUBLE_EQ(s(0), 0.5);
}

TEST(Simulate, MatchesMatrixProductOracle)
{
    nl::SplitMix64 rng(1);
    nl::MatrixF P(3, 50);
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = static_cast<float>(rng.uniform());
    const auto src = source_abc(P);
    const auto e = make_expl(0, {{0.7f, "b"}, {-1.3f, "a"}, {2.2f, "c"}});
    const Eigen::Vector3d w(-1.3, 0.7, 2.2);
    const VectorXd oracle = P.cast<double>().transpose() * w;
    const VectorXd s = nl::simulate_all(e, src);
    EXPECT_LT((s - oracle).cwiseAbs().maxCoeff(), 1e-6);
    const std::vector<nl::Index> some{3, 17, 49};
    const auto part = nl::simulate_activations(e, src, some);
    for (std::size_t j = 0; j < some.size(); ++j) EXPECT_DOUBLE_EQ(part(Eigen::Index(j)), s(Eigen::Index(some[j])));
}

TEST(Simulate, LinearInWeights)
{
    nl::SplitMix64 rng(2);
    nl::MatrixF P(3, 30);
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = static_cast<float>(rng.uniform());
    const auto src = source_abc(P);
    const VectorXd a = nl::simulate_all(make_expl(0, {{1.5f, "a"}}), src);
    const VectorXd b = nl::simulate_all(make_expl(0, {{-0.25f, "c"}}), src);
    const VectorXd ab = nl::simulate_all(make_expl(0, {{1.5f, "a"}, {-0.25f, "c"}}), src);
    EXPECT_LT((ab - a - b).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_TRUE(nl::simulate_all(make_expl(0, {}), src).isZero());
}

TEST(Simulate, UnresolvableConceptsAreListed)
{
    const auto src = source_abc(nl::MatrixF::Constant(3, 2, 0.5f));
    try {
        nl::simulate_all(make_expl(4, {{1.0f, "a"}, {1.0f, "zebra"}, {1.0f, "yak"}}), src);
        FAIL() << "expected an error";
    } catch (const nl::Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::not_found);
        EXPECT_NE(std::string(e.what()).find("zebra, yak"), std::string::npos) << e.what();
    }
}

TEST(Simulate, RejectsOutOfRangeProbabilities)
{
    EXPECT_ERROR_KIND(source_abc(nl::MatrixF::Constant(3, 2, 1.5f)), ErrorKind::malformed);
    EXPECT_ERROR_KIND(nl::SimulatorSource::from_matrix(nl::MatrixF::Zero(2, 2), nl::ConceptSet({"a", "b", "c"})),
                      ErrorKind::dimension_mismatch);
}

TEST(Simulate, EmbeddingSourceMatchesConceptMatrix)
{
    const auto f = nl::generate_fixture(small_fixture());
    const auto emb = nl::SimulatorSource::from_embeddings(nl::EmbeddingMatrix(f.sim_text_emb),
                                                          nl::EmbeddingMatrix(f.sim_img_emb), f.simulator_params,
                                                          f.concepts);
    for (std::size_t c : {0u, 7u, 39u}) {
        const VectorXd row = emb.row(f.concepts[c]);
        for (Eigen::Index x = 0; x < 600; x += 37) EXPECT_NEAR(row(x), f.P_sim(Eigen::Index(c), x), 1e-5);
    }
}

TEST(Correlation, PerfectAndInverted)
{
    VectorXd q(6);
    q << 1, 3, 2, 5, 4, 0;
    EXPECT_NEAR(nl::correlation_score(q, q), 1.0, 1e-12);
    EXPECT_NEAR(nl::correlation_score(VectorXd(-q), q), -1.0, 1e-12);
    EXPECT_EQ(nl::correlation_score(VectorXd::Ones(6), q), 0.0);
    EXPECT_ERROR_KIND(nl::correlation_score(VectorXd::Ones(2), VectorXd::Ones(2)), ErrorKind::invalid_argument);
}

TEST(Correlation, AffineInvariance)
{
    nl::SplitMix64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        VectorXd s(40), q(40);
        for (Eigen::Index i = 0; i < 40; ++i) {
            s(i) = rng.normal();
            q(i) = s(i) + rng.normal();
        }
        const double a = rng.uniform(0.01, 100.0), b = rng.uniform(-50.0, 50.0);
        const VectorXd s2 = (a * s).array() + b;
        EXPECT_NEAR(nl::correlation_score(s2, q), nl::correlation_score(s, q), 1e-9);
        // Against an explicit standardise-and-average oracle.
        const VectorXd zs = (s.array() - s.mean()) / std::sqrt((s.array() - s.mean()).square().mean());
        const VectorXd zq = (q.array() - q.mean()) / std::sqrt((q.array() - q.mean()).square().mean());
        EXPECT_NEAR(nl::correlation_score(s, q), zs.dot(zq) / 40.0, 1e-9);
    }
}

TEST(ScoreExplanations, UsesOnlyTestSplit)
{
    const auto f = nl::generate_fixture(small_fixture());
    const auto src = nl::SimulatorSource::from_matrix(f.P_sim, f.concepts);
    const auto base = nl::score_explanations(f.ground_truth, src, f.Q, f.split);
    nl::MatrixF Q2 = f.Q;
    for (auto i : f.split.train) Q2.col(Eigen::Index(i)).setConstant(123.0f);
    for (auto i : f.split.val) Q2.col(Eigen::Index(i)) *= -4.0f;
    const auto moved = nl::score_explanations(f.ground_truth, src, Q2, f.split);
    for (std::size_t k = 0; k < base.neurons.size(); ++k) EXPECT_EQ(base.neurons[k].score, moved.neurons[k].score);
}

TEST(ScoreExplanations, MatchesDirectComputation)
{
    const auto f = nl::generate_fixture(small_fixture());
    const auto src = nl::SimulatorSource::from_matrix(f.P_sim, f.concepts);
    const auto r = nl::score_explanations(f.ground_truth, src, f.Q, f.split, 3);
    EXPECT_EQ(r.metric, "correlation");
    for (std::size_t k = 0; k < r.neurons.size(); ++k) {
        VectorXd s = VectorXd::Zero(Eigen::Index(f.split.test.size())), q = s;
        for (std::size_t j = 0; j < f.split.test.size(); ++j) {
            const auto x = Eigen::Index(f.split.test[j]);
            q(Eigen::Index(j)) = f.Q(Eigen::Index(k), x);
            for (const auto& t : f.ground_truth[k].terms)
                s(Eigen::Index(j)) += double(t.weight) * f.P_sim(Eigen::Index(*f.concepts.find(t.name)), x);
        }
        ASSERT_TRUE(r.neurons[k].score.has_value());
        EXPECT_NEAR(*r.neurons[k].score, nl::stats::pearson(s, q), 1e-9);
    }
}

TEST(ScoreExplanations, ShuffledExplanationsScoreLower)
{
    auto cfg = small_fixture();
    cfg.neurons = 30;
    const auto f = nl::generate_fixture(cfg);
    const auto src = nl::SimulatorSource::from_matrix(f.P_sim, f.concepts);
    auto shuffled = f.ground_truth;
    for (std::size_t k = 0; k < shuffled.size(); ++k) shuffled[k].terms = f.ground_truth[(k + 1) % 30].terms;
    const auto truth = nl::score_explanations(f.ground_truth, src, f.Q, f.split);
    const auto control = nl::score_explanations(shuffled, src, f.Q, f.split);
    EXPECT_GT(truth.summary.mean, 0.8);
    EXPECT_LT(control.summary.mean, 0.3);
    EXPECT_GT(truth.summary.mean - control.summary.mean, 0.5);
}

TEST(ScoreExplanations, DeadAndSkippedNeurons)
{
    const auto f = nl::generate_fixture(small_fixture());
    const auto src = nl::SimulatorSource::from_matrix(f.P_sim, f.concepts);
    nl::MatrixF Q = f.Q;
    Q.row(0).setZero();
    std::vector<nl::Explanation> ex(f.ground_truth.begin() + 2, f.ground_truth.end());
    const auto r = nl::score_explanations(ex, src, Q, f.split);
    EXPECT_EQ(r.neurons[0].status, nl::ScoreStatus::dead);
    EXPECT_EQ(r.neurons[1].status, nl::ScoreStatus::skipped);
    EXPECT_FALSE(r.neurons[1].score.has_value());
    ASSERT_EQ(r.warnings.size(), 1u);
    EXPECT_NE(r.warnings[0].find("neuron 1"), std::string::npos);
    EXPECT_EQ(r.summary.dead, 1u);
    EXPECT_EQ(r.summary.skipped, 1u);
    EXPECT_EQ(r.summary.scored, 10u);

    double mean = 0.0;
    for (std::size_t k = 2; k < 12; ++k) mean += *r.neurons[k].score / 10.0;
    EXPECT_NEAR(r.summary.mean, mean, 1e-12);
}

TEST(ScoreExplanations, ReportJsonRoundTrip)
{
    const auto f = nl::generate_fixture(small_fixture());
    const auto src = nl::SimulatorSource::from_matrix(f.P_sim, f.concepts);
    nl::MatrixF Q = f.Q;
    Q.row(3).setZero();
    const auto r = nl::score_explanations(f.ground_truth, src, Q, f.split);
    const auto back = nl::score_report_from_json(nl::score_report_to_json(r));
    ASSERT_EQ(back.neurons.size(), r.neurons.size());
    for (std::size_t k = 0; k < r.neurons.size(); ++k) {
        EXPECT_EQ(back.neurons[k].status, r.neurons[k].status);
        EXPECT_EQ(back.neurons[k].score, r.neurons[k].score);
    }
    EXPECT_EQ(back.summary.mean, r.summary.mean);
    EXPECT_ERROR_KIND(nl::score_report_from_json(nl::json{{"neurons", nl::json::array()}}), ErrorKind::malformed);

    auto expl = f.ground_truth;
    nl::attach_scores(expl, r);
    EXPECT_EQ(expl[5].correlation, r.neurons[5].score);
    EXPECT_FALSE(expl[5].ablation.has_value());
}
