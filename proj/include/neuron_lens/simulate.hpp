#pragma once

// Simulated activations s(x) = sum_i w_i P_sim(c_i | x) and correlation scoring
// on the test split.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include <neuron_lens/calibrate.hpp>
#include <neuron_lens/error.hpp>
#include <neuron_lens/explain.hpp>
#include <neuron_lens/parallel.hpp>
#include <neuron_lens/stats.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

/// Concept probabilities used by the simulator. Either a precomputed concepts x inputs
/// matrix (encoder output or labels), or simulator embeddings with calibration params.
class SimulatorSource
{
public:
    static SimulatorSource from_matrix(MatrixF P_sim, ConceptSet names)
    {
        require(static_cast<std::size_t>(P_sim.rows()) == names.size(), ErrorKind::dimension_mismatch,
                "simulator matrix rows must equal concept count");
        for (Eigen::Index i = 0; i < P_sim.size(); ++i) {
            const float p = P_sim.data()[i];
            require(p >= 0.0f && p <= 1.0f, ErrorKind::malformed, "simulator probabilities must lie in [0, 1]");
        }
        SimulatorSource s;
        s.names_ = std::move(names);
        s.inputs_ = static_cast<std::size_t>(P_sim.cols());
        s.source_ = std::move(P_sim);
        return s;
    }

    static SimulatorSource from_embeddings(EmbeddingMatrix text_emb, EmbeddingMatrix img_emb,
                                           CalibrationParams params, ConceptSet names)
    {
        params.validate();
        require(text_emb.rows() == names.size(), ErrorKind::dimension_mismatch,
                "simulator text embedding rows must equal concept count");
        require(text_emb.dim() == img_emb.dim(), ErrorKind::dimension_mismatch,
                "simulator text and image embeddings have different dimensions");
        SimulatorSource s;
        s.names_ = std::move(names);
        s.inputs_ = img_emb.rows();
        s.source_ = Embedded{std::move(text_emb), std::move(img_emb), params};
        return s;
    }

    std::size_t inputs() const { return inputs_; }
    const ConceptSet& concepts() const { return names_; }

    bool resolves(std::string_view name) const { return names_.find(name).has_value(); }

    /// P_sim(concept | x) for every input.
    Eigen::VectorXd row(std::string_view name) const
    {
        const auto idx = names_.find(name);
        if (!idx) fail(ErrorKind::not_found, "simulator cannot resolve concept: " + std::string(name));
        Eigen::VectorXd out(static_cast<Eigen::Index>(inputs_));
        if (const auto* m = std::get_if<MatrixF>(&source_)) {
            out = m->row(static_cast<Eigen::Index>(*idx)).cast<double>().transpose();
        } else {
            const auto& e = std::get<Embedded>(source_);
            const Eigen::VectorXf dots = e.img.data() * e.text.data().row(static_cast<Eigen::Index>(*idx)).transpose();
            for (Eigen::Index j = 0; j < dots.size(); ++j)
                out(j) = detail::open_unit(e.params.probability(dots(j)));
        }
        return out;
    }

private:
    struct Embedded
    {
        EmbeddingMatrix text;
        EmbeddingMatrix img;
        CalibrationParams params;
    };

    ConceptSet names_;
    std::size_t inputs_ = 0;
    std::variant<MatrixF, Embedded> source_;
};

/// s[j] = sum over terms of w * P_sim(c | inputs[j]). Explanations without terms give zeros.
inline Eigen::VectorXd simulate_activations(const Explanation& e, const SimulatorSource& src,
                                            std::span<const Index> inputs)
{
    std::vector<std::string> missing;
    for (const auto& t : e.terms)
        if (!src.resolves(t.name)) missing.push_back(t.name);
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        fail(ErrorKind::not_found, "neuron " + std::to_string(e.neuron_id) + ": unresolvable concepts: " + list);
    }

    Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(inputs.size()));
    for (const auto& t : e.terms) {
        const Eigen::VectorXd p = src.row(t.name);
        for (std::size_t j = 0; j < inputs.size(); ++j) {
            require(inputs[j] < src.inputs(), ErrorKind::invalid_argument, "input index out of range");
            s(static_cast<Eigen::Index>(j)) += static_cast<double>(t.weight) * p(static_cast<Eigen::Index>(inputs[j]));
        }
    }
    return s;
}

/// Simulated activations over every input.
inline Eigen::VectorXd simulate_all(const Explanation& e, const SimulatorSource& src)
{
    std::vector<Index> all(src.inputs());
    std::iota(all.begin(), all.end(), Index{0});
    return simulate_activations(e, src, all);
}

/// Pearson correlation of simulated and true activations (standardised on the vectors
/// themselves). Zero when either side has no variance.
template <class A, class B>
double correlation_score(const A& s, const B& q)
{
    require(static_cast<std::size_t>(s.size()) == static_cast<std::size_t>(q.size()), ErrorKind::dimension_mismatch,
            "correlation_score: length mismatch");
    require(s.size() >= 3, ErrorKind::invalid_argument, "correlation_score needs at least 3 values");
    return stats::pearson(s, q);
}

enum class ScoreStatus { scored, dead, skipped };

inline std::string to_string(ScoreStatus s)
{
    switch (s) {
        case ScoreStatus::scored: return "scored";
        case ScoreStatus::dead: return "dead";
        case ScoreStatus::skipped: return "skipped";
    }
    return "scored";
}

struct NeuronScore
{
    std::int64_t neuron_id = 0;
    std::string method;
    ScoreStatus status = ScoreStatus::scored;
    std::optional<double> score;
};

struct ScoreSummary
{
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t scored = 0;
    std::size_t dead = 0;
    std::size_t skipped = 0;
};

struct ScoreReport
{
    std::string metric;        // "correlation" or "ablation"
    std::string scaling;       // ablation only
    std::vector<NeuronScore> neurons;
    ScoreSummary summary;
    std::vector<std::string> warnings;
};

inline ScoreSummary summarize_scores(std::span<const NeuronScore> neurons)
{
    ScoreSummary s;
    std::vector<double> vals;
    for (const auto& n : neurons) {
        if (n.status == ScoreStatus::dead) ++s.dead;
        else if (n.status == ScoreStatus::skipped) ++s.skipped;
        else vals.push_back(*n.score);
    }
    s.scored = vals.size();
    s.mean = stats::mean(vals);
    s.stderr_ = stats::standard_error(vals);
    return s;
}

inline json score_report_to_json(const ScoreReport& r)
{
    json arr = json::array();
    for (const auto& n : r.neurons) {
        json j{{"neuron_id", n.neuron_id}, {"method", n.method}, {"status", to_string(n.status)}};
        j["score"] = n.score ? json(*n.score) : json(nullptr);
        arr.push_back(std::move(j));
    }
    json out{{"metric", r.metric}, {"neurons", arr},
             {"summary", {{"mean", r.summary.mean}, {"stderr", r.summary.stderr_}, {"scored", r.summary.scored},
                          {"dead", r.summary.dead}, {"skipped", r.summary.skipped}}}};
    if (!r.scaling.empty()) out["scaling"] = r.scaling;
    if (!r.warnings.empty()) out["warnings"] = r.warnings;
    return out;
}

inline ScoreReport score_report_from_json(const json& j)
{
    ScoreReport r;
    try {
        r.metric = j.at("metric").get<std::string>();
        r.scaling = j.value("scaling", std::string{});
        for (const auto& n : j.at("neurons")) {
            NeuronScore s;
            s.neuron_id = n.at("neuron_id").get<std::int64_t>();
            s.method = n.value("method", std::string{});
            const auto st = n.value("status", std::string("scored"));
            s.status = st == "dead" ? ScoreStatus::dead : st == "skipped" ? ScoreStatus::skipped : ScoreStatus::scored;
            if (n.contains("score") && !n["score"].is_null()) s.score = n["score"].get<double>();
            require(s.status != ScoreStatus::scored || s.score.has_value(), ErrorKind::malformed,
                    "scored neuron without a score");
            r.neurons.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::malformed, std::string("score file: ") + e.what());
    }
    r.summary = summarize_scores(r.neurons);
    return r;
}

namespace detail {

inline std::map<std::int64_t, const Explanation*> index_explanations(std::span<const Explanation> explanations)
{
    std::map<std::int64_t, const Explanation*> by_id;
    for (const auto& e : explanations) by_id[e.neuron_id] = &e;
    return by_id;
}

inline std::span<const float> activation_row(const MatrixF& Q, std::size_t k)
{
    return {Q.row(static_cast<Eigen::Index>(k)).data(), static_cast<std::size_t>(Q.cols())};
}

} // namespace detail

/// Correlation score for every neuron (row) of Q on the test split. Dead neurons are
/// excluded from the mean and counted; a live neuron without an explanation is skipped
/// with a warning.
inline ScoreReport score_explanations(std::span<const Explanation> explanations, const SimulatorSource& src,
                                      const MatrixF& Q, const SplitAssignment& split, unsigned threads = 1)
{
    require(static_cast<std::size_t>(Q.cols()) == split.n && src.inputs() == split.n, ErrorKind::dimension_mismatch,
            "activations, simulator and split disagree on input count");
    const auto by_id = detail::index_explanations(explanations);

    ScoreReport report;
    report.metric = "correlation";
    report.neurons.resize(static_cast<std::size_t>(Q.rows()));
    std::vector<std::string> warn(report.neurons.size());

    parallel_for(report.neurons.size(), threads, [&](std::size_t k) {
        auto& out = report.neurons[k];
        out.neuron_id = static_cast<std::int64_t>(k);
        const auto q = detail::activation_row(Q, k);
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
        const Eigen::VectorXd s = simulate_activations(*it->second, src, split.test);
        Eigen::VectorXd q_test(static_cast<Eigen::Index>(split.test.size()));
        for (std::size_t j = 0; j < split.test.size(); ++j) q_test(static_cast<Eigen::Index>(j)) = q[split.test[j]];
        out.score = correlation_score(s, q_test);
    });

    for (auto& w : warn)
        if (!w.empty()) report.warnings.push_back(std::move(w));
    report.summary = summarize_scores(report.neurons);
    return report;
}

/// Copies scores from a report onto matching explanations.
inline void attach_scores(std::vector<Explanation>& explanations, const ScoreReport& report)
{
    std::map<std::int64_t, const NeuronScore*> by_id;
    for (const auto& n : report.neurons) by_id[n.neuron_id] = &n;
    for (auto& e : explanations) {
        const auto it = by_id.find(e.neuron_id);
        if (it == by_id.end() || !it->second->score) continue;
        if (report.metric == "ablation") e.ablation = *it->second->score;
        else e.correlation = *it->second->score;
    }
}

} // namespace neuron_lens
