#pragma once

// Causal evaluation against a final linear classification head. Because the
// explained layer feeds the head directly, replacing neuron k's activation a_k by v
// shifts the logits by W[:, k] * (v - a_k) and nothing else has to be recomputed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include <neuron_lens/error.hpp>
#include <neuron_lens/parallel.hpp>
#include <neuron_lens/simulate.hpp>
#include <neuron_lens/stats.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

struct LinearHeadModel
{
    Eigen::MatrixXd W;       // classes x neurons
    Eigen::VectorXd bias;    // classes
    double temperature = 1.0;
    Eigen::VectorXd mu;      // per-neuron mean activation on the train split

    std::size_t classes() const { return static_cast<std::size_t>(W.rows()); }
    std::size_t neurons() const { return static_cast<std::size_t>(W.cols()); }

    void validate() const
    {
        require(W.rows() > 0 && W.cols() > 0, ErrorKind::invalid_argument, "head weight matrix is empty");
        require(bias.size() == W.rows(), ErrorKind::dimension_mismatch, "bias length must equal class count");
        require(temperature > 0 && std::isfinite(temperature), ErrorKind::invalid_argument, "temperature must be > 0");
        require(mu.size() == 0 || mu.size() == W.cols(), ErrorKind::dimension_mismatch,
                "mu length must equal neuron count");
        require(W.allFinite() && bias.allFinite() && mu.allFinite(), ErrorKind::non_finite, "head is not finite");
    }

    /// Sets mu to the per-neuron mean of A (neurons x inputs) over the train indices.
    void set_mu(const MatrixF& A, std::span<const Index> train)
    {
        require(static_cast<std::size_t>(A.rows()) == neurons(), ErrorKind::dimension_mismatch,
                "activation rows must equal head neuron count");
        require(!train.empty(), ErrorKind::invalid_argument, "empty train split");
        mu.resize(A.rows());
        for (Eigen::Index k = 0; k < A.rows(); ++k) {
            double acc = 0.0;
            for (Index i : train) acc += A(k, static_cast<Eigen::Index>(i));
            mu(k) = acc / static_cast<double>(train.size());
        }
    }

    /// Head directory: W.let (classes x neurons), bias.let, meta.json with
    /// {"temperature": T, "mu": "<file>"}; both meta keys are optional.
    static LinearHeadModel load(const fs::path& dir)
    {
        LinearHeadModel h;
        h.W = read_matrix(dir / "W.let").cast<double>();
        const auto b = read_tensor(dir / "bias.let").to_floats();
        h.bias = Eigen::Map<const Eigen::VectorXf>(b.data(), static_cast<Eigen::Index>(b.size())).cast<double>();
        if (fs::exists(dir / "meta.json")) {
            const auto meta = read_json(dir / "meta.json");
            h.temperature = meta.value("temperature", 1.0);
            if (meta.contains("mu") && meta["mu"].is_string()) {
                const auto m = read_tensor(dir / meta["mu"].get<std::string>()).to_floats();
                h.mu = Eigen::Map<const Eigen::VectorXf>(m.data(), static_cast<Eigen::Index>(m.size())).cast<double>();
            }
        }
        h.validate();
        return h;
    }

    void save(const fs::path& dir) const
    {
        validate();
        write_matrix(W.cast<float>(), dir / "W.let");
        const Eigen::VectorXf b = bias.cast<float>();
        write_tensor(Tensor::from_vector(std::span<const float>(b.data(), static_cast<std::size_t>(b.size()))),
                     dir / "bias.let");
        json meta{{"temperature", temperature}};
        if (mu.size() > 0) {
            const Eigen::VectorXf m = mu.cast<float>();
            write_tensor(Tensor::from_vector(std::span<const float>(m.data(), static_cast<std::size_t>(m.size()))),
                         dir / "mu.let");
            meta["mu"] = "mu.let";
        }
        write_json(meta, dir / "meta.json");
    }
};

/// Cross-entropy of softmax(z / T) against class y.
template <class Vec>
double cross_entropy(const Vec& z, std::int64_t y, double T)
{
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < z.size(); ++c) hi = std::max(hi, static_cast<double>(z(c)) / T);
    double acc = 0.0;
    for (Eigen::Index c = 0; c < z.size(); ++c) acc += std::exp(static_cast<double>(z(c)) / T - hi);
    return hi + std::log(acc) - static_cast<double>(z(static_cast<Eigen::Index>(y))) / T;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z, double T)
{
    Eigen::VectorXd p = (z / T).array() - (z / T).maxCoeff();
    p = p.array().exp();
    return p / p.sum();
}

/// argmax with ties to the lowest class index.
template <class Vec>
Eigen::Index argmax(const Vec& z)
{
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < z.size(); ++c)
        if (z(c) > z(best)) best = c;
    return best;
}

inline std::vector<std::int64_t> check_labels(std::vector<std::int64_t> labels, std::size_t n, std::size_t classes)
{
    require(labels.size() == n, ErrorKind::dimension_mismatch,
            "label count " + std::to_string(labels.size()) + " does not match " + std::to_string(n) + " inputs");
    require(n > 0, ErrorKind::degenerate, "no labelled inputs");
    for (auto y : labels)
        require(y >= 0 && static_cast<std::size_t>(y) < classes, ErrorKind::degenerate,
                "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    return labels;
}

// ---------------------------------------------------------------------------
// Temperature
// ---------------------------------------------------------------------------

struct TemperatureFit
{
    double temperature = 1.0;
    double nll = 0.0;
    double nll_at_one = 0.0;
};

inline double mean_nll(const MatrixF& logits, std::span<const std::int64_t> labels, double T)
{
    double acc = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        acc += cross_entropy(logits.row(i).transpose(), labels[static_cast<std::size_t>(i)], T);
    return acc / static_cast<double>(logits.rows());
}

/// Golden-section search for the NLL-minimising temperature on [0.05, 20].
/// Never returns a temperature worse than T = 1.
inline TemperatureFit fit_temperature(const MatrixF& logits, std::span<const std::int64_t> labels)
{
    require(logits.allFinite(), ErrorKind::non_finite, "logits contain non-finite values");
    const auto y = check_labels({labels.begin(), labels.end()}, static_cast<std::size_t>(logits.rows()),
                                static_cast<std::size_t>(logits.cols()));
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double lo = 0.05, hi = 20.0;
    double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
    double f1 = mean_nll(logits, y, x1), f2 = mean_nll(logits, y, x2);
    while (hi - lo > 1e-7) {
        if (f1 <= f2) {
            hi = x2; x2 = x1; f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = mean_nll(logits, y, x1);
        } else {
            lo = x1; x1 = x2; f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = mean_nll(logits, y, x2);
        }
    }
    TemperatureFit fit;
    fit.temperature = 0.5 * (lo + hi);
    fit.nll = mean_nll(logits, y, fit.temperature);
    fit.nll_at_one = mean_nll(logits, y, 1.0);
    if (fit.nll_at_one < fit.nll) {
        fit.temperature = 1.0;
        fit.nll = fit.nll_at_one;
    }
    return fit;
}

// ---------------------------------------------------------------------------
// Head evaluation
// ---------------------------------------------------------------------------

/// Base logits, losses and correctness of the head on a fixed activation matrix.
class HeadEvaluation
{
public:
    HeadEvaluation(const LinearHeadModel& head, const MatrixF& A, std::vector<std::int64_t> labels)
        : head_(head), A_(A)
    {
        head_.validate();
        require(static_cast<std::size_t>(A.rows()) == head.neurons(), ErrorKind::dimension_mismatch,
                "activation rows must equal head neuron count");
        require(A.allFinite(), ErrorKind::non_finite, "activations contain non-finite values");
        labels_ = check_labels(std::move(labels), static_cast<std::size_t>(A.cols()), head.classes());
        logits_ = (head.W * A.cast<double>()).colwise() + head.bias;
        base_loss_.resize(labels_.size());
        base_correct_.resize(labels_.size());
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            const auto z = logits_.col(static_cast<Eigen::Index>(i));
            base_loss_[i] = cross_entropy(z, labels_[i], head.temperature);
            base_correct_[i] = argmax(z) == labels_[i];
        }
    }

    const LinearHeadModel& head() const { return head_; }
    const MatrixF& activations() const { return A_; }
    const std::vector<std::int64_t>& labels() const { return labels_; }
    std::size_t inputs() const { return labels_.size(); }
    double base_loss(std::size_t i) const { return base_loss_[i]; }
    bool base_correct(std::size_t i) const { return base_correct_[i]; }
    double activation(std::size_t k, std::size_t i) const
    {
        return A_(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i));
    }

    /// Logits on input i with neuron k's activation replaced by v.
    Eigen::VectorXd logits_with(std::size_t i, std::size_t k, double v) const
    {
        return logits_.col(static_cast<Eigen::Index>(i)) +
               head_.W.col(static_cast<Eigen::Index>(k)) * (v - activation(k, i));
    }

    double loss_with(std::size_t i, std::size_t k, double v) const
    {
        return cross_entropy(logits_with(i, k, v), labels_[i], head_.temperature);
    }

    /// d loss / d v at the replaced value.
    double loss_slope(std::size_t i, std::size_t k, double v) const
    {
        Eigen::VectorXd p = softmax(logits_with(i, k, v), head_.temperature);
        p(static_cast<Eigen::Index>(labels_[i])) -= 1.0;
        return p.dot(head_.W.col(static_cast<Eigen::Index>(k))) / head_.temperature;
    }

private:
    LinearHeadModel head_;
    const MatrixF& A_;
    std::vector<std::int64_t> labels_;
    Eigen::MatrixXd logits_;
    std::vector<double> base_loss_;
    std::vector<char> base_correct_;
};

// ---------------------------------------------------------------------------
// Impact and Top Impact
// ---------------------------------------------------------------------------

struct ImpactRecord
{
    std::int64_t neuron_id = 0;
    std::vector<double> impact;      // (delta_acc - delta_loss) / 2 per input
    std::vector<double> delta_acc;
    std::vector<double> delta_loss;
};

/// Per-input impact of zeroing neuron k, with accuracy and loss changes normalised by
/// the dataset totals of correct predictions and loss.
inline ImpactRecord neuron_impacts(const HeadEvaluation& eval, std::size_t k)
{
    require(k < eval.head().neurons(), ErrorKind::invalid_argument, "neuron index out of range");
    const std::size_t n = eval.inputs();
    double total_correct = 0.0, total_loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total_correct += eval.base_correct(i) ? 1.0 : 0.0;
        total_loss += eval.base_loss(i);
    }
    require(total_correct > 0, ErrorKind::degenerate, "head classifies no input correctly");
    require(total_loss > 0, ErrorKind::degenerate, "head has zero total loss");

    ImpactRecord rec;
    rec.neuron_id = static_cast<std::int64_t>(k);
    rec.impact.resize(n);
    rec.delta_acc.resize(n);
    rec.delta_loss.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::VectorXd z = eval.logits_with(i, k, 0.0);
        const double ablated_correct = argmax(z) == eval.labels()[i] ? 1.0 : 0.0;
        const double ablated_loss = cross_entropy(z, eval.labels()[i], eval.head().temperature);
        rec.delta_acc[i] = ((eval.base_correct(i) ? 1.0 : 0.0) - ablated_correct) / total_correct;
        rec.delta_loss[i] = (eval.base_loss(i) - ablated_loss) / total_loss;
        rec.impact[i] = 0.5 * (rec.delta_acc[i] - rec.delta_loss[i]);
    }
    return rec;
}

struct TopImpact
{
    double value = 0.0;
    bool flagged = false;  // total |impact| was zero
};

/// Share of total |impact| carried by the floor(beta * N) highest-activating inputs
/// (descending activation, ties by input index).
inline TopImpact top_impact(const ImpactRecord& rec, std::span<const float> activations, double beta)
{
    require(beta >= 0.0 && beta <= 1.0, ErrorKind::invalid_argument, "beta must lie in [0, 1]");
    require(activations.size() == rec.impact.size(), ErrorKind::dimension_mismatch,
            "activation and impact lengths differ");
    const std::size_t n = rec.impact.size();
    double total = 0.0;
    for (double v : rec.impact) total += std::abs(v);
    if (total == 0.0) return {0.0, true};

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return activations[a] > activations[b]; });
    const auto count = std::min(n, static_cast<std::size_t>(std::floor(beta * static_cast<double>(n) + 1e-9)));
    double top = 0.0;
    for (std::size_t i = 0; i < count; ++i) top += std::abs(rec.impact[order[i]]);
    return {top / total, false};
}

// ---------------------------------------------------------------------------
// Ablation scoring
// ---------------------------------------------------------------------------

enum class ScalingMethod { optim, norm };

inline std::string to_string(ScalingMethod m) { return m == ScalingMethod::optim ? "optim" : "norm"; }

inline ScalingMethod parse_scaling(const std::string& s)
{
    if (s == "optim") return ScalingMethod::optim;
    if (s == "norm") return ScalingMethod::norm;
    fail(ErrorKind::invalid_argument, "unknown scaling method: " + s);
}

struct AblationScaling
{
    double c = 1.0;
    double d = 0.0;
    ScalingMethod method = ScalingMethod::norm;
};

/// Closed-form scaling that matches mean and (correlation-weighted) spread of the true
/// activations: c = rho * sd(q) / sd(s), d = mean(q) - c * mean(s), population sd.
template <class A, class B>
AblationScaling norm_scaling(const A& s_val, const B& q_val)
{
    require(static_cast<std::size_t>(s_val.size()) == static_cast<std::size_t>(q_val.size()),
            ErrorKind::dimension_mismatch, "norm_scaling: length mismatch");
    require(s_val.size() >= 3, ErrorKind::invalid_argument, "norm_scaling needs at least 3 values");
    const double sd_s = stats::pop_stddev(s_val);
    const double mu_q = stats::mean(q_val);
    if (sd_s == 0.0) return {0.0, mu_q, ScalingMethod::norm};
    const double c = stats::pearson(s_val, q_val) * stats::pop_stddev(q_val) / sd_s;
    return {c, mu_q - c * stats::mean(s_val), ScalingMethod::norm};
}

namespace detail {

struct AblationObjective
{
    const HeadEvaluation& eval;
    std::size_t k;
    std::span<const Index> inputs;
    const Eigen::VectorXd& s;  // aligned with inputs
    double denom = 0.0;

    AblationObjective(const HeadEvaluation& e, std::size_t neuron, std::span<const Index> idx,
                      const Eigen::VectorXd& sim, double mu)
        : eval(e), k(neuron), inputs(idx), s(sim)
    {
        require(static_cast<std::size_t>(sim.size()) == idx.size(), ErrorKind::dimension_mismatch,
                "simulated values must align with inputs");
        for (Index i : inputs) denom += std::abs(eval.loss_with(i, k, mu) - eval.base_loss(i));
        require(denom > 0.0, ErrorKind::degenerate,
                "mean ablation of neuron " + std::to_string(k) + " does not change the loss; ablation score undefined");
    }

    double numerator(double c, double d) const
    {
        double acc = 0.0;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
            const double v = c * s(static_cast<Eigen::Index>(j)) + d;
            acc += std::abs(eval.loss_with(inputs[j], k, v) - eval.base_loss(inputs[j]));
        }
        return acc;
    }

    double alpha(double c, double d) const { return 1.0 - numerator(c, d) / denom; }

    // Gradient of the smoothed numerator/denominator (|u| ~ sqrt(u^2 + eps^2)).
    Eigen::Vector2d smooth_gradient(double c, double d, double eps = 1e-6) const
    {
        Eigen::Vector2d g = Eigen::Vector2d::Zero();
        for (std::size_t j = 0; j < inputs.size(); ++j) {
            const double sj = s(static_cast<Eigen::Index>(j));
            const double v = c * sj + d;
            const double u = eval.loss_with(inputs[j], k, v) - eval.base_loss(inputs[j]);
            const double w = u / std::sqrt(u * u + eps * eps) * eval.loss_slope(inputs[j], k, v);
            g(0) += w * sj;
            g(1) += w;
        }
        return g / denom;
    }
};

} // namespace detail

/// 1 - sum|L(f_{k<-c s + d}) - L(f)| / sum|L(f_{k<-mu}) - L(f)| over `inputs`.
inline double ablation_alpha_init(const HeadEvaluation& eval, std::size_t k, std::span<const Index> inputs,
                                  const Eigen::VectorXd& s, double c, double d, double mu)
{
    return detail::AblationObjective(eval, k, inputs, s, mu).alpha(c, d);
}

struct OptimSettings
{
    int steps = 100;
    double step_size = 0.05;
    double smoothing = 1e-6;
};

/// Gradient descent on the smoothed validation objective starting from the norm
/// scaling. A step that lowers the exact validation alpha is rejected and the step size
/// halved, so the result is never worse than the starting point.
inline AblationScaling optim_scaling(const HeadEvaluation& eval, std::size_t k, std::span<const Index> val,
                                     const Eigen::VectorXd& s_val, const Eigen::VectorXd& q_val, double mu,
                                     const OptimSettings& opt = {})
{
    const detail::AblationObjective obj(eval, k, val, s_val, mu);
    AblationScaling cur = norm_scaling(s_val, q_val);
    cur.method = ScalingMethod::optim;
    double cur_alpha = obj.alpha(cur.c, cur.d);
    double step = opt.step_size;
    for (int it = 0; it < opt.steps; ++it) {
        const Eigen::Vector2d g = obj.smooth_gradient(cur.c, cur.d, opt.smoothing);
        if (!g.allFinite() || g.isZero(0.0)) break;
        const double c = cur.c - step * g(0);
        const double d = cur.d - step * g(1);
        const double a = obj.alpha(c, d);
        if (a >= cur_alpha) {
            cur.c = c;
            cur.d = d;
            cur_alpha = a;
        } else {
            step *= 0.5;
        }
    }
    return cur;
}

struct AblationResult
{
    double alpha = 0.0;           // test split, chosen scaling
    double alpha_init_val = 0.0;  // validation split, chosen scaling
    double norm_alpha_val = 0.0;  // validation split, norm scaling
    AblationScaling scaling;
};

/// Ablation score of neuron k given simulated activations over all inputs.
inline AblationResult ablation_score(const HeadEvaluation& eval, std::size_t k, const Eigen::VectorXd& s_all,
                                     const SplitAssignment& split, ScalingMethod method, const OptimSettings& opt = {})
{
    require(static_cast<std::size_t>(s_all.size()) == eval.inputs() && split.n == eval.inputs(),
            ErrorKind::dimension_mismatch, "simulated activations, split and head evaluation disagree on inputs");
    require(eval.head().mu.size() == static_cast<Eigen::Index>(eval.head().neurons()), ErrorKind::invalid_argument,
            "head has no per-neuron means");
    const double mu = eval.head().mu(static_cast<Eigen::Index>(k));

    auto gather = [&](std::span<const Index> idx, auto&& value) {
        Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) out(static_cast<Eigen::Index>(j)) = value(idx[j]);
        return out;
    };
    const Eigen::VectorXd s_val = gather(split.val, [&](Index i) { return s_all(static_cast<Eigen::Index>(i)); });
    const Eigen::VectorXd q_val = gather(split.val, [&](Index i) { return eval.activation(k, i); });
    const Eigen::VectorXd s_test = gather(split.test, [&](Index i) { return s_all(static_cast<Eigen::Index>(i)); });

    AblationResult res;
    const AblationScaling norm = norm_scaling(s_val, q_val);
    res.norm_alpha_val = ablation_alpha_init(eval, k, split.val, s_val, norm.c, norm.d, mu);
    res.scaling = method == ScalingMethod::norm ? norm : optim_scaling(eval, k, split.val, s_val, q_val, mu, opt);
    res.alpha_init_val = method == ScalingMethod::norm
                             ? res.norm_alpha_val
                             : ablation_alpha_init(eval, k, split.val, s_val, res.scaling.c, res.scaling.d, mu);
    res.alpha = ablation_alpha_init(eval, k, split.test, s_test, res.scaling.c, res.scaling.d, mu);
    return res;
}

/// Ablation score for every neuron of the head, using explanations and a simulator.
inline ScoreReport score_ablation(std::span<const Explanation> explanations, const SimulatorSource& src,
                                  const HeadEvaluation& eval, const SplitAssignment& split, ScalingMethod method,
                                  unsigned threads = 1)
{
    require(src.inputs() == eval.inputs(), ErrorKind::dimension_mismatch,
            "simulator and activations disagree on input count");
    const auto by_id = detail::index_explanations(explanations);
    const MatrixF& A = eval.activations();

    ScoreReport report;
    report.metric = "ablation";
    report.scaling = to_string(method);
    report.neurons.resize(eval.head().neurons());
    std::vector<std::string> warn(report.neurons.size());

    parallel_for(report.neurons.size(), threads, [&](std::size_t k) {
        auto& out = report.neurons[k];
        out.neuron_id = static_cast<std::int64_t>(k);
        const auto q = detail::activation_row(A, k);
        const auto it = by_id.find(out.neuron_id);
        if ((it != by_id.end() && it->second->status == ExplanationStatus::dead) ||
            (it == by_id.end() && is_dead(q))) {
            out.status = ScoreStatus::dead;
            if (it != by_id.end()) out.method = it->second->method;
            return;
        }
        if (it == by_id.end()) {
            out.status = ScoreStatus::skipped;
            warn[k] = "no explanation for live neuron " + std::to_string(k);
            return;
        }
        out.method = it->second->method;
        out.score = ablation_score(eval, k, simulate_all(*it->second, src), split, method).alpha;
    });

    for (auto& w : warn)
        if (!w.empty()) report.warnings.push_back(std::move(w));
    report.summary = summarize_scores(report.neurons);
    return report;
}

} // namespace neuron_lens
