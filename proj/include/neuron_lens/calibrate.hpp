#pragma once

// Concept-activation matrices: from binary labels, or from encoder embeddings
// through a fitted sigmoid P = sigma(a * dot + a * b).

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include <neuron_lens/error.hpp>
#include <neuron_lens/stats.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

struct CalibrationParams
{
    double a = 1.0;
    double b = 0.0;

    void validate() const
    {
        require(std::isfinite(a) && std::isfinite(b), ErrorKind::non_finite, "calibration params not finite");
        require(a > 0, ErrorKind::invalid_argument, "calibration scale a must be positive");
    }

    /// Probability for one similarity value.
    double probability(double dot) const { return stats::sigmoid(a * dot + a * b); }
};

inline json calibration_to_json(const CalibrationParams& p) { return json{{"a", p.a}, {"b", p.b}}; }

inline CalibrationParams calibration_from_json(const json& j)
{
    CalibrationParams p;
    try {
        p.a = j.at("a").get<double>();
        p.b = j.at("b").get<double>();
    } catch (const json::exception& e) {
        fail(ErrorKind::malformed, std::string("calibration params: ") + e.what());
    }
    p.validate();
    return p;
}

/// Rows are L2-normalised on construction so dot products are cosine similarities.
class EmbeddingMatrix
{
public:
    EmbeddingMatrix() = default;

    explicit EmbeddingMatrix(MatrixF rows) : rows_(std::move(rows))
    {
        for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
            const double norm = rows_.row(i).cast<double>().norm();
            require(norm > 0.0 && std::isfinite(norm), ErrorKind::degenerate,
                    "embedding row " + std::to_string(i) + " has zero norm");
            rows_.row(i) = (rows_.row(i).cast<double>() / norm).cast<float>();
        }
    }

    static EmbeddingMatrix load(const fs::path& path) { return EmbeddingMatrix(read_matrix(path)); }

    std::size_t rows() const { return static_cast<std::size_t>(rows_.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(rows_.cols()); }
    const MatrixF& data() const { return rows_; }

private:
    MatrixF rows_;
};

struct CalibrationOptions
{
    int iters = 500;
    double lr = 1.0;
    double init_a = 10.0;
    double init_b = 0.0;
};

struct CalibrationFit
{
    CalibrationParams params;
    std::vector<double> loss_history;  // mean BCE, starting with the initial point
    int iterations = 0;
};

namespace detail {

struct BceProblem
{
    std::vector<float> dots;
    std::vector<std::uint8_t> labels;

    // Loss in the (slope, intercept) = (a, a*b) parameterisation, where it is convex.
    double loss(double slope, double icpt) const
    {
        double acc = 0.0;
        for (std::size_t i = 0; i < dots.size(); ++i) {
            const double z = slope * dots[i] + icpt;
            acc += stats::softplus(z) - (labels[i] ? z : 0.0);
        }
        return acc / static_cast<double>(dots.size());
    }
};

} // namespace detail

/// Mean-BCE fit of (a, b) on every (input, class) pair.
///
/// The objective is minimised in the equivalent convex coordinates (a, a*b) by
/// Newton-preconditioned gradient descent: each iteration steps lr * H^-1 g and
/// halves the step until the loss does not increase, so the recorded loss is
/// non-increasing. Falls back to the raw gradient if the Hessian is singular.
inline CalibrationFit fit_calibration(const EmbeddingMatrix& text_emb, const EmbeddingMatrix& img_emb,
                                      const LabelMatrix& labels, const CalibrationOptions& opt = {})
{
    require(text_emb.dim() == img_emb.dim(), ErrorKind::dimension_mismatch,
            "text and image embeddings have different dimensions");
    require(text_emb.rows() == labels.cols(), ErrorKind::dimension_mismatch,
            "text embedding rows must equal label columns");
    require(img_emb.rows() == labels.rows(), ErrorKind::dimension_mismatch,
            "image embedding rows must equal label rows");
    const std::size_t total = labels.rows() * labels.cols();
    const std::size_t pos = labels.positives();
    require(total > 0, ErrorKind::invalid_argument, "no label pairs");
    require(pos > 0 && pos < total, ErrorKind::degenerate,
            "labels are all 0 or all 1; calibration bias is unbounded");
    require(opt.iters >= 0 && opt.lr > 0, ErrorKind::invalid_argument, "bad calibration options");

    const MatrixF sims = img_emb.data() * text_emb.data().transpose();  // N x C
    detail::BceProblem prob;
    prob.dots.assign(sims.data(), sims.data() + sims.size());
    prob.labels.resize(total);
    for (std::size_t i = 0; i < labels.rows(); ++i)
        for (std::size_t c = 0; c < labels.cols(); ++c) prob.labels[i * labels.cols() + c] = labels(i, c);

    double slope = opt.init_a;
    double icpt = opt.init_a * opt.init_b;
    double loss = prob.loss(slope, icpt);

    CalibrationFit fit;
    fit.loss_history.push_back(loss);
    const double n = static_cast<double>(total);

    for (int it = 0; it < opt.iters; ++it) {
        double g0 = 0, g1 = 0, h00 = 0, h01 = 0, h11 = 0;
        for (std::size_t i = 0; i < total; ++i) {
            const double d = prob.dots[i];
            const double p = stats::sigmoid(slope * d + icpt);
            const double r = p - (prob.labels[i] ? 1.0 : 0.0);
            const double w = p * (1.0 - p);
            g0 += r * d;
            g1 += r;
            h00 += w * d * d;
            h01 += w * d;
            h11 += w;
        }
        g0 /= n; g1 /= n; h00 /= n; h01 /= n; h11 /= n;
        if (std::max(std::abs(g0), std::abs(g1)) < 1e-14) break;

        double s0 = g0, s1 = g1;
        const double det = h00 * h11 - h01 * h01;
        if (det > 1e-300) {
            s0 = (h11 * g0 - h01 * g1) / det;
            s1 = (h00 * g1 - h01 * g0) / det;
        }

        double step = opt.lr;
        bool moved = false;
        while (step > 1e-12) {
            const double ns = slope - step * s0;
            const double ni = icpt - step * s1;
            const double nl = prob.loss(ns, ni);
            if (nl <= loss) {
                moved = nl < loss || ns != slope || ni != icpt;
                slope = ns;
                icpt = ni;
                loss = nl;
                break;
            }
            step *= 0.5;
        }
        fit.iterations = it + 1;
        fit.loss_history.push_back(loss);
        if (!moved) break;
    }

    require(std::isfinite(slope) && std::isfinite(icpt), ErrorKind::non_finite, "calibration diverged");
    require(slope > 0, ErrorKind::degenerate,
            "fitted calibration scale is not positive; similarities do not align with labels");
    fit.params = {slope, icpt / slope};
    return fit;
}

/// Mean BCE of the given parameters; used to compare fits.
inline double calibration_loss(const CalibrationParams& p, const EmbeddingMatrix& text_emb,
                               const EmbeddingMatrix& img_emb, const LabelMatrix& labels)
{
    const MatrixF sims = img_emb.data() * text_emb.data().transpose();
    detail::BceProblem prob;
    prob.dots.assign(sims.data(), sims.data() + sims.size());
    prob.labels.resize(labels.rows() * labels.cols());
    for (std::size_t i = 0; i < labels.rows(); ++i)
        for (std::size_t c = 0; c < labels.cols(); ++c) prob.labels[i * labels.cols() + c] = labels(i, c);
    return prob.loss(p.a, p.a * p.b);
}

namespace detail {

// Keeps sigmoid outputs strictly inside (0, 1) after rounding to float.
inline float open_unit(double p)
{
    constexpr float lo = std::numeric_limits<float>::denorm_min();
    const float hi = std::nextafter(1.0f, 0.0f);
    return std::clamp(static_cast<float>(p), lo, hi);
}

} // namespace detail

/// M x N matrix of sigma(a * <t_i, x_j> + a * b).
inline MatrixF build_concept_matrix(const CalibrationParams& params, const EmbeddingMatrix& text_emb,
                                    const EmbeddingMatrix& img_emb)
{
    params.validate();
    require(text_emb.dim() == img_emb.dim(), ErrorKind::dimension_mismatch,
            "text and image embeddings have different dimensions");
    MatrixF P = text_emb.data() * img_emb.data().transpose();
    for (Eigen::Index i = 0; i < P.size(); ++i)
        P.data()[i] = detail::open_unit(params.probability(P.data()[i]));
    return P;
}

/// Concepts x inputs view of a label matrix.
inline MatrixF build_label_matrix_P(const LabelMatrix& labels)
{
    MatrixF P(static_cast<Eigen::Index>(labels.cols()), static_cast<Eigen::Index>(labels.rows()));
    for (std::size_t i = 0; i < labels.rows(); ++i)
        for (std::size_t c = 0; c < labels.cols(); ++c)
            P(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) = labels(i, c);
    return P;
}

struct FilteredConcepts
{
    MatrixF matrix;
    ConceptSet concepts;
    std::vector<Index> kept;
};

/// Mean of the `k` largest entries of a row.
inline double top_k_mean(const MatrixF& P, Index row, std::size_t k)
{
    std::vector<float> v(P.row(static_cast<Eigen::Index>(row)).begin(), P.row(static_cast<Eigen::Index>(row)).end());
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) acc += v[i];
    return acc / static_cast<double>(k);
}

/// Keeps concepts whose five highest activations average at least `threshold`.
inline FilteredConcepts filter_concepts(const MatrixF& P, const ConceptSet& names, double threshold = 0.5)
{
    require(static_cast<std::size_t>(P.rows()) == names.size(), ErrorKind::dimension_mismatch,
            "concept matrix rows must equal concept count");
    require(P.cols() >= 5, ErrorKind::invalid_argument, "filter_concepts needs at least 5 inputs");

    FilteredConcepts out;
    std::vector<std::string> kept_names;
    for (Index i = 0; i < names.size(); ++i) {
        if (top_k_mean(P, i, 5) >= threshold) {
            out.kept.push_back(i);
            kept_names.push_back(names[i]);
        }
    }
    out.matrix.resize(static_cast<Eigen::Index>(out.kept.size()), P.cols());
    for (std::size_t r = 0; r < out.kept.size(); ++r)
        out.matrix.row(static_cast<Eigen::Index>(r)) = P.row(static_cast<Eigen::Index>(out.kept[r]));
    out.concepts = ConceptSet(std::move(kept_names));
    return out;
}

} // namespace neuron_lens
