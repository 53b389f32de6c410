#pragma once

// Elastic-net least squares on a concept-activation matrix:
//
//   F(w) = || w^T P - q^T ||_2^2 + lambda * ((1 - eta)/2 ||w||_2^2 + eta ||w||_1)
//
// P is concepts x samples. The solver works on the Gram form (P P^T, P q, q^T q),
// so one factorisation of the design is shared by every neuron.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include <neuron_lens/error.hpp>
#include <neuron_lens/stats.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

struct ElasticNetConfig
{
    double lambda = 0.0;
    double eta = 0.99;
    int max_iters = 200000;
    double tol = 1e-8;          // bound on the proximal-gradient fixed-point residual
    int path_length = 20;
    double min_ratio = 1e-3;    // smallest lambda on the path relative to the first
    std::size_t max_nnz = 50;   // path solutions denser than this are not eligible
    bool accelerate = true;

    void validate() const
    {
        require(lambda >= 0 && std::isfinite(lambda), ErrorKind::invalid_argument, "lambda must be >= 0");
        require(eta >= 0 && eta <= 1, ErrorKind::invalid_argument, "eta must lie in [0, 1]");
        require(tol > 0, ErrorKind::invalid_argument, "tol must be positive");
        require(max_iters > 0, ErrorKind::invalid_argument, "max_iters must be positive");
        require(min_ratio > 0 && min_ratio < 1, ErrorKind::invalid_argument, "min_ratio must lie in (0, 1)");
    }
};

struct WeightVector
{
    Eigen::VectorXd values;

    std::size_t nnz() const
    {
        return static_cast<std::size_t>((values.array() != 0.0).count());
    }
};

/// Design side of the problem: P (concepts x samples) and its Gram matrix.
class GramDesign
{
public:
    GramDesign() = default;

    explicit GramDesign(Eigen::MatrixXd P) : P_(std::move(P))
    {
        require(P_.allFinite(), ErrorKind::non_finite, "concept matrix contains non-finite values");
        gram_ = P_ * P_.transpose();
        constant_.assign(static_cast<std::size_t>(P_.rows()), false);
        for (Eigen::Index i = 0; i < P_.rows(); ++i) {
            const auto row = P_.row(i);
            constant_[static_cast<std::size_t>(i)] =
                P_.cols() == 0 || (row.array() == row(0)).all();
        }
        if (gram_.rows() > 0) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram_, Eigen::EigenvaluesOnly);
            top_eigenvalue_ = std::max(0.0, eig.eigenvalues().maxCoeff());
        }
    }

    const Eigen::MatrixXd& P() const { return P_; }
    const Eigen::MatrixXd& gram() const { return gram_; }
    std::size_t concepts() const { return static_cast<std::size_t>(P_.rows()); }
    std::size_t samples() const { return static_cast<std::size_t>(P_.cols()); }
    double top_eigenvalue() const { return top_eigenvalue_; }

    /// Rows that are constant over the samples; these are held at zero.
    const std::vector<bool>& constant_rows() const { return constant_; }

    std::vector<Index> dropped() const
    {
        std::vector<Index> out;
        for (std::size_t i = 0; i < constant_.size(); ++i)
            if (constant_[i]) out.push_back(i);
        return out;
    }

private:
    Eigen::MatrixXd P_;
    Eigen::MatrixXd gram_;
    std::vector<bool> constant_;
    double top_eigenvalue_ = 0.0;
};

/// Target side: P q and q^T q for one neuron.
struct GramTarget
{
    Eigen::VectorXd corr;
    double q_sq = 0.0;
    double q_var = 0.0;

    GramTarget() = default;

    GramTarget(const GramDesign& design, const Eigen::VectorXd& q)
    {
        require(static_cast<std::size_t>(q.size()) == design.samples(), ErrorKind::dimension_mismatch,
                "target length must equal the number of samples");
        require(q.allFinite(), ErrorKind::non_finite, "target contains non-finite values");
        corr = design.P() * q;
        q_sq = q.squaredNorm();
        q_var = stats::pop_stddev(q);
        q_var *= q_var;
    }
};

struct ElasticNetResult
{
    WeightVector weights;
    int iterations = 0;
    double objective = 0.0;
    double residual = 0.0;
    bool converged = false;
    bool zero_variance_target = false;
    std::vector<Index> dropped;
};

namespace detail {

// G x using only the nonzeros of x.
inline Eigen::VectorXd sparse_gram_product(const Eigen::MatrixXd& G, const Eigen::VectorXd& x)
{
    Eigen::VectorXd out = Eigen::VectorXd::Zero(G.rows());
    for (Eigen::Index j = 0; j < x.size(); ++j)
        if (x(j) != 0.0) out.noalias() += x(j) * G.col(j);
    return out;
}

inline double soft_threshold(double v, double thr)
{
    if (v > thr) return v - thr;
    if (v < -thr) return v + thr;
    return 0.0;
}

struct ProxGradient
{
    const GramDesign& design;
    const GramTarget& target;
    double lambda;
    double eta;
    double step;

    Eigen::VectorXd gradient(const Eigen::VectorXd& w) const
    {
        return 2.0 * (sparse_gram_product(design.gram(), w) - target.corr) + lambda * (1.0 - eta) * w;
    }

    Eigen::VectorXd prox_step(const Eigen::VectorXd& w, const Eigen::VectorXd& grad) const
    {
        const double thr = step * lambda * eta;
        Eigen::VectorXd out(w.size());
        const auto& fixed = design.constant_rows();
        for (Eigen::Index i = 0; i < w.size(); ++i)
            out(i) = fixed[static_cast<std::size_t>(i)] ? 0.0 : soft_threshold(w(i) - step * grad(i), thr);
        return out;
    }

    double residual(const Eigen::VectorXd& w) const
    {
        return (w - prox_step(w, gradient(w))).lpNorm<Eigen::Infinity>();
    }
};

} // namespace detail

inline double elastic_net_objective(const GramDesign& design, const GramTarget& target,
                                    const Eigen::VectorXd& w, double lambda, double eta)
{
    const double fit = w.dot(detail::sparse_gram_product(design.gram(), w)) - 2.0 * w.dot(target.corr) + target.q_sq;
    return fit + lambda * ((1.0 - eta) * 0.5 * w.squaredNorm() + eta * w.lpNorm<1>());
}

/// Step size 1/L with L the Lipschitz constant of the smooth part.
inline double elastic_net_step(const GramDesign& design, double lambda, double eta)
{
    const double L = 2.0 * design.top_eigenvalue() + lambda * (1.0 - eta);
    return L > 0 ? 1.0 / L : 1.0;
}

/// ||w - prox(w - s grad g(w))||_inf at step s = 1/L.
inline double elastic_net_residual(const GramDesign& design, const GramTarget& target,
                                   const Eigen::VectorXd& w, double lambda, double eta)
{
    detail::ProxGradient pg{design, target, lambda, eta, elastic_net_step(design, lambda, eta)};
    return pg.residual(w);
}

/// Smallest lambda for which w = 0 is optimal: 2 max|<P_i, q>| / eta over non-constant rows.
inline double elastic_net_lambda_zero(const GramDesign& design, const GramTarget& target, double eta)
{
    double m = 0.0;
    for (std::size_t i = 0; i < design.concepts(); ++i)
        if (!design.constant_rows()[i]) m = std::max(m, std::abs(target.corr(static_cast<Eigen::Index>(i))));
    if (m == 0.0) return 0.0;
    require(eta > 0, ErrorKind::invalid_argument, "a zero-solution lambda needs eta > 0");
    return 2.0 * m / eta;
}

/// FISTA with gradient-based adaptive restart (plain ISTA when cfg.accelerate is false).
inline ElasticNetResult solve(const GramDesign& design, const GramTarget& target, const ElasticNetConfig& cfg,
                              const Eigen::VectorXd* warm_start = nullptr)
{
    cfg.validate();
    const auto m = static_cast<Eigen::Index>(design.concepts());
    require(target.corr.size() == m, ErrorKind::dimension_mismatch, "target does not match design");

    ElasticNetResult res;
    res.dropped = design.dropped();
    res.weights.values = Eigen::VectorXd::Zero(m);
    if (target.q_var <= 0.0) {
        res.zero_variance_target = true;
        res.converged = true;
        res.objective = elastic_net_objective(design, target, res.weights.values, cfg.lambda, cfg.eta);
        return res;
    }

    const detail::ProxGradient pg{design, target, cfg.lambda, cfg.eta,
                                  elastic_net_step(design, cfg.lambda, cfg.eta)};

    Eigen::VectorXd x = Eigen::VectorXd::Zero(m);
    if (warm_start) {
        require(warm_start->size() == m, ErrorKind::dimension_mismatch, "warm start has wrong length");
        x = *warm_start;
        for (Eigen::Index i = 0; i < m; ++i)
            if (design.constant_rows()[static_cast<std::size_t>(i)]) x(i) = 0.0;
    }

    double residual = pg.residual(x);
    Eigen::VectorXd y = x;
    double t = 1.0;
    int it = 0;
    while (residual > cfg.tol && it < cfg.max_iters) {
        ++it;
        const Eigen::VectorXd x_prev = x;
        x = pg.prox_step(y, pg.gradient(y));
        if (cfg.accelerate) {
            if ((y - x).dot(x - x_prev) > 0.0) {
                t = 1.0;
                y = x;
            } else {
                const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
                y = x + ((t - 1.0) / t_next) * (x - x_prev);
                t = t_next;
            }
        } else {
            y = x;
        }
        residual = pg.residual(x);
    }

    res.weights.values = std::move(x);
    res.iterations = it;
    res.residual = residual;
    res.converged = residual <= cfg.tol;
    res.objective = elastic_net_objective(design, target, res.weights.values, cfg.lambda, cfg.eta);
    return res;
}

/// Convenience overload on raw data: P_train is concepts x samples.
inline ElasticNetResult solve(const Eigen::MatrixXd& P_train, const Eigen::VectorXd& q_train,
                              const ElasticNetConfig& cfg)
{
    require(P_train.cols() == q_train.size(), ErrorKind::dimension_mismatch,
            "P_train columns must equal q_train length");
    const GramDesign design(P_train);
    return solve(design, GramTarget(design, q_train), cfg);
}

struct PathPoint
{
    double lambda = 0.0;
    std::size_t nnz = 0;
    double val_correlation = 0.0;
    bool converged = false;
};

struct PathResult
{
    WeightVector weights;
    double lambda = 0.0;
    double val_correlation = 0.0;
    bool uninformative = false;
    std::vector<PathPoint> path;
};

/// Geometric lambda grid from the zero-solution lambda down by `min_ratio`, solved with
/// warm starts. Returns the solution with the best validation correlation among those with
/// 1 <= nnz <= max_nnz (earlier, larger lambda wins ties).
inline PathResult solve_path(const GramDesign& design, const GramTarget& target,
                             const Eigen::MatrixXd& P_val, const Eigen::VectorXd& q_val,
                             const ElasticNetConfig& cfg)
{
    cfg.validate();
    require(cfg.path_length >= 2, ErrorKind::invalid_argument, "path_length must be at least 2");
    require(P_val.rows() == static_cast<Eigen::Index>(design.concepts()) && P_val.cols() == q_val.size(),
            ErrorKind::dimension_mismatch, "validation data does not match design");

    PathResult out;
    out.weights.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(design.concepts()));
    out.uninformative = true;
    if (target.q_var <= 0.0) return out;
    const double lam0 = elastic_net_lambda_zero(design, target, cfg.eta);
    if (lam0 <= 0.0) return out;

    ElasticNetConfig step_cfg = cfg;
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(design.concepts()));
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < cfg.path_length; ++k) {
        step_cfg.lambda = lam0 * std::pow(cfg.min_ratio, static_cast<double>(k) / (cfg.path_length - 1));
        const auto res = solve(design, target, step_cfg, &w);
        w = res.weights.values;

        PathPoint pt;
        pt.lambda = step_cfg.lambda;
        pt.nnz = res.weights.nnz();
        pt.converged = res.converged;
        if (pt.nnz > 0) {
            const Eigen::VectorXd pred = P_val.transpose() * w;
            pt.val_correlation = stats::pearson(pred, q_val);
        }
        if (pt.nnz >= 1 && pt.nnz <= cfg.max_nnz && pt.val_correlation > best) {
            best = pt.val_correlation;
            out.weights = res.weights;
            out.lambda = pt.lambda;
            out.val_correlation = pt.val_correlation;
            out.uninformative = false;
        }
        out.path.push_back(pt);
    }
    return out;
}

/// Convenience overload on raw train/validation slices.
inline PathResult solve_path(const Eigen::MatrixXd& P_train, const Eigen::VectorXd& q_train,
                             const Eigen::MatrixXd& P_val, const Eigen::VectorXd& q_val,
                             const ElasticNetConfig& cfg)
{
    const GramDesign design(P_train);
    return solve_path(design, GramTarget(design, q_train), P_val, q_val, cfg);
}

} // namespace neuron_lens
