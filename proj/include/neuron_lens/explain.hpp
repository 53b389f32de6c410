#pragma once

// Linear explanations: elastic-net ranking, greedy concept search scored on the
// validation split, and an unregularised least-squares refit on the train split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include <neuron_lens/elastic_net.hpp>
#include <neuron_lens/error.hpp>
#include <neuron_lens/parallel.hpp>
#include <neuron_lens/stats.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

/// Neurons whose largest |activation| is below this are reported as dead.
inline constexpr double dead_activation_threshold = 0.01;

struct GreedyConfig
{
    int v = 10;             // max concepts
    int r = 10;             // candidates tested per round
    double epsilon = 0.02;  // required validation-correlation gain

    void validate() const
    {
        require(v >= 1 && r >= 1 && epsilon >= 0, ErrorKind::invalid_argument,
                "greedy config needs v >= 1, r >= 1, epsilon >= 0");
    }
};

struct OlsFit
{
    std::vector<Index> kept;       // selection order, dependent rows removed
    Eigen::VectorXd weights;       // aligned with kept
    std::vector<Index> dropped;
};

/// Least squares without intercept restricted to `selected` rows, from Gram statistics.
/// A row that is linearly dependent on earlier kept rows (relative Schur pivot below
/// 1e-10) is dropped. Normal equations carry a 1e-8 ridge jitter.
inline OlsFit ols_refit(const Eigen::MatrixXd& gram, const Eigen::VectorXd& corr,
                        std::span<const Index> selected, double jitter = 1e-8)
{
    OlsFit fit;
    Eigen::MatrixXd L(0, 0);
    for (Index j : selected) {
        require(static_cast<Eigen::Index>(j) < gram.rows(), ErrorKind::invalid_argument, "selected index out of range");
        const double gjj = gram(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j));
        const auto k = static_cast<Eigen::Index>(fit.kept.size());
        Eigen::VectorXd g(k);
        for (Eigen::Index a = 0; a < k; ++a)
            g(a) = gram(static_cast<Eigen::Index>(fit.kept[static_cast<std::size_t>(a)]), static_cast<Eigen::Index>(j));
        Eigen::VectorXd y = k > 0 ? Eigen::VectorXd(L.triangularView<Eigen::Lower>().solve(g)) : Eigen::VectorXd(0);
        const double pivot = gjj - y.squaredNorm();
        if (!(gjj > 0.0) || pivot <= 1e-10 * gjj) {
            fit.dropped.push_back(j);
            continue;
        }
        Eigen::MatrixXd grown = Eigen::MatrixXd::Zero(k + 1, k + 1);
        grown.topLeftCorner(k, k) = L;
        grown.block(k, 0, 1, k) = y.transpose();
        grown(k, k) = std::sqrt(pivot);
        L = std::move(grown);
        fit.kept.push_back(j);
    }

    const auto k = static_cast<Eigen::Index>(fit.kept.size());
    Eigen::MatrixXd A(k, k);
    Eigen::VectorXd rhs(k);
    for (Eigen::Index a = 0; a < k; ++a) {
        const auto ia = static_cast<Eigen::Index>(fit.kept[static_cast<std::size_t>(a)]);
        rhs(a) = corr(ia);
        for (Eigen::Index b = 0; b < k; ++b)
            A(a, b) = gram(ia, static_cast<Eigen::Index>(fit.kept[static_cast<std::size_t>(b)]));
        A(a, a) += jitter;
    }
    fit.weights = k > 0 ? Eigen::VectorXd(A.llt().solve(rhs)) : Eigen::VectorXd(0);
    return fit;
}

/// Least squares of q on the rows of `rows` (k x samples).
inline OlsFit ols_refit(const Eigen::MatrixXd& rows, const Eigen::VectorXd& q)
{
    require(rows.rows() >= 1, ErrorKind::invalid_argument, "ols_refit needs at least one row");
    require(rows.cols() == q.size(), ErrorKind::dimension_mismatch, "rows and target differ in length");
    std::vector<Index> all(static_cast<std::size_t>(rows.rows()));
    std::iota(all.begin(), all.end(), Index{0});
    return ols_refit(Eigen::MatrixXd(rows * rows.transpose()), Eigen::VectorXd(rows * q), all);
}

/// Train/validation data shared by every neuron explained against one concept matrix.
class ExplainContext
{
public:
    ExplainContext(const MatrixF& P, SplitAssignment split)
        : split_(std::move(split)),
          design_(select_columns(P, split_.train)),
          P_val_(select_columns(P, split_.val)),
          inputs_(static_cast<std::size_t>(P.cols()))
    {
        require(split_.n == inputs_, ErrorKind::dimension_mismatch,
                "split size " + std::to_string(split_.n) + " does not match " + std::to_string(inputs_) + " inputs");
    }

    const SplitAssignment& split() const { return split_; }
    const GramDesign& design() const { return design_; }
    const Eigen::MatrixXd& P_val() const { return P_val_; }
    std::size_t inputs() const { return inputs_; }
    std::size_t concepts() const { return design_.concepts(); }

    Eigen::VectorXd gather(std::span<const float> q, std::span<const Index> idx) const
    {
        Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = q[idx[i]];
        return out;
    }

private:
    SplitAssignment split_;
    GramDesign design_;
    Eigen::MatrixXd P_val_;
    std::size_t inputs_;
};

enum class GreedyOutcome { bad, tested, accepted };

struct GreedyEvaluation
{
    int round = 0;
    Index concept_index = 0;
    double correlation = 0.0;
    GreedyOutcome outcome = GreedyOutcome::tested;
};

struct GreedyResult
{
    std::vector<Index> selected;
    Eigen::VectorXd weights;
    double val_correlation = 0.0;
    std::vector<double> accepted_correlations;
    std::vector<GreedyEvaluation> trace;
    bool uninformative = false;
};

namespace detail {

inline double subset_val_correlation(const ExplainContext& ctx, const GramTarget& target,
                                     const Eigen::VectorXd& q_val, std::span<const Index> subset)
{
    const auto fit = ols_refit(ctx.design().gram(), target.corr, subset);
    Eigen::VectorXd pred = Eigen::VectorXd::Zero(q_val.size());
    for (std::size_t a = 0; a < fit.kept.size(); ++a)
        pred.noalias() += fit.weights(static_cast<Eigen::Index>(a)) * ctx.P_val().row(static_cast<Eigen::Index>(fit.kept[a])).transpose();
    return stats::pearson(pred, q_val);
}

} // namespace detail

/// Greedy concept search.
///
/// Each round tests the r highest-weighted concepts (nonzero heuristic weight, not yet
/// selected or rejected; ties broken by lower index). A candidate whose validation
/// correlation, fitted together with the current selection, is below best + epsilon is
/// rejected for good. The best remaining candidate is accepted, otherwise the search
/// stops. Final weights come from a least-squares refit on the train split.
inline GreedyResult greedy_search(const Eigen::VectorXd& heuristic, const ExplainContext& ctx,
                                  const GramTarget& target, const Eigen::VectorXd& q_val,
                                  const GreedyConfig& cfg)
{
    cfg.validate();
    require(static_cast<std::size_t>(heuristic.size()) == ctx.concepts(), ErrorKind::dimension_mismatch,
            "heuristic weight length must equal concept count");

    const std::size_t m = ctx.concepts();
    std::vector<char> excluded(m, 0);  // selected or bad
    std::vector<char> bad(m, 0);
    GreedyResult out;
    double best = 0.0;

    std::vector<Index> order;
    for (Index i = 0; i < m; ++i)
        if (heuristic(static_cast<Eigen::Index>(i)) != 0.0) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return heuristic(static_cast<Eigen::Index>(a)) > heuristic(static_cast<Eigen::Index>(b));
    });

    int round = 0;
    while (out.selected.size() < static_cast<std::size_t>(cfg.v)) {
        std::vector<Index> pool;
        for (Index i : order) {
            if (pool.size() >= static_cast<std::size_t>(cfg.r)) break;
            if (!excluded[i]) pool.push_back(i);
        }
        if (pool.empty()) break;

        double round_best = best;
        std::optional<Index> best_concept;
        std::vector<Index> subset = out.selected;
        subset.push_back(0);
        for (Index j : pool) {
            subset.back() = j;
            const double rho = detail::subset_val_correlation(ctx, target, q_val, subset);
            GreedyEvaluation ev{round, j, rho, GreedyOutcome::tested};
            if (rho < best + cfg.epsilon) {
                bad[j] = 1;
                excluded[j] = 1;
                ev.outcome = GreedyOutcome::bad;
            } else if (rho > round_best) {
                round_best = rho;
                best_concept = j;
            }
            out.trace.push_back(ev);
        }
        if (round_best < best + cfg.epsilon || !best_concept) break;

        out.selected.push_back(*best_concept);
        excluded[*best_concept] = 1;
        best = round_best;
        out.accepted_correlations.push_back(best);
        for (auto it = out.trace.rbegin(); it != out.trace.rend() && it->round == round; ++it)
            if (it->concept_index == *best_concept) it->outcome = GreedyOutcome::accepted;
        ++round;
    }

    out.val_correlation = best;
    if (out.selected.empty()) {
        out.uninformative = true;
        out.weights = Eigen::VectorXd(0);
        return out;
    }
    auto fit = ols_refit(ctx.design().gram(), target.corr, out.selected);
    out.selected = fit.kept;
    out.weights = fit.weights;
    return out;
}

struct ExplainConfig
{
    ElasticNetConfig elastic_net{};
    GreedyConfig greedy{};
    std::string method = "LE";
};

inline bool is_dead(std::span<const float> q)
{
    float hi = 0.0f;
    for (float v : q) hi = std::max(hi, std::abs(v));
    return hi < dead_activation_threshold;
}

/// Full pipeline for one neuron: dead check, elastic-net path, greedy search, refit.
/// Terms are sorted by |weight| descending, ties by concept index.
inline Explanation explain_neuron(const ExplainContext& ctx, std::span<const float> q, std::int64_t neuron_id,
                                  const ConceptSet& names, const ExplainConfig& cfg = {})
{
    require(q.size() == ctx.inputs(), ErrorKind::dimension_mismatch, "activation length does not match inputs");
    require(names.size() == ctx.concepts(), ErrorKind::dimension_mismatch, "concept names do not match matrix rows");
    for (float v : q) require(std::isfinite(v), ErrorKind::non_finite, "activations contain non-finite values");

    Explanation e;
    e.neuron_id = neuron_id;
    e.method = cfg.method;
    if (is_dead(q)) {
        e.status = ExplanationStatus::dead;
        return e;
    }

    const Eigen::VectorXd q_train = ctx.gather(q, ctx.split().train);
    const Eigen::VectorXd q_val = ctx.gather(q, ctx.split().val);
    const GramTarget target(ctx.design(), q_train);
    const auto path = solve_path(ctx.design(), target, ctx.P_val(), q_val, cfg.elastic_net);
    if (path.uninformative) {
        e.status = ExplanationStatus::uninformative;
        return e;
    }
    e.lambda = path.lambda;

    const auto greedy = greedy_search(path.weights.values, ctx, target, q_val, cfg.greedy);
    e.val_correlation = greedy.val_correlation;
    if (greedy.uninformative) {
        e.status = ExplanationStatus::uninformative;
        return e;
    }

    std::vector<std::size_t> order(greedy.selected.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double wa = std::abs(greedy.weights(static_cast<Eigen::Index>(a)));
        const double wb = std::abs(greedy.weights(static_cast<Eigen::Index>(b)));
        if (wa != wb) return wa > wb;
        return greedy.selected[a] < greedy.selected[b];
    });
    for (auto a : order)
        e.terms.push_back({static_cast<float>(greedy.weights(static_cast<Eigen::Index>(a))), names[greedy.selected[a]]});
    return e;
}

inline Explanation explain_neuron(const MatrixF& P, std::span<const float> q, const SplitAssignment& split,
                                  const ConceptSet& names, const ExplainConfig& cfg = {}, std::int64_t neuron_id = 0)
{
    const ExplainContext ctx(P, split);
    return explain_neuron(ctx, q, neuron_id, names, cfg);
}

/// Explains every row of Q (neurons x inputs); output is ordered by neuron id.
inline std::vector<Explanation> explain_all(const MatrixF& P, const MatrixF& Q, const SplitAssignment& split,
                                            const ConceptSet& names, const ExplainConfig& cfg = {},
                                            unsigned threads = 1)
{
    require(P.cols() == Q.cols(), ErrorKind::dimension_mismatch,
            "concept matrix and activations disagree on input count");
    cfg.elastic_net.validate();
    cfg.greedy.validate();
    const ExplainContext ctx(P, split);
    std::vector<Explanation> out(static_cast<std::size_t>(Q.rows()));
    parallel_for(out.size(), threads, [&](std::size_t k) {
        const auto row = Q.row(static_cast<Eigen::Index>(k));
        out[k] = explain_neuron(ctx, std::span<const float>(row.data(), static_cast<std::size_t>(row.size())),
                                static_cast<std::int64_t>(k), names, cfg);
    });
    return out;
}

} // namespace neuron_lens
