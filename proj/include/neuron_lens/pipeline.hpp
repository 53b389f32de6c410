#pragma once

// End-to-end run: validate inputs, explain every neuron, simulate and score,
// optionally ablate against the linear head, then write reports.

#include <cstdint>
#include <algorithm>
#include <cstdio>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <neuron_lens/ablate.hpp>
#include <neuron_lens/calibrate.hpp>
#include <neuron_lens/explain.hpp>
#include <neuron_lens/report.hpp>
#include <neuron_lens/simulate.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

struct PipelineConfig
{
    fs::path matrix;
    fs::path concepts;
    fs::path activations;
    fs::path split;                       // empty: generate from split_seed
    std::uint64_t split_seed = 0;

    fs::path sim_matrix;                  // precomputed simulator probabilities, or
    fs::path sim_text_emb, sim_img_emb, sim_params;
    fs::path explainer_text_emb, explainer_img_emb;  // only used for the identity check

    fs::path head;                        // optional: enables ablation scoring
    fs::path labels;                      // class index per input (1-D) or binary N x C
    fs::path class_names;

    double eta = 0.99;
    int path_length = 20;
    int v = 10;
    int r = 10;
    double eps = 0.02;
    ScalingMethod scaling = ScalingMethod::optim;
    std::size_t charts = 8;               // area charts for the first N live neurons
    fs::path out = "out";
    unsigned threads = 1;

    /// Keys mirror the CLI flags (hyphens or underscores). Relative paths resolve
    /// against `base`.
    static PipelineConfig from_json(const json& j, const fs::path& base = {})
    {
        PipelineConfig c;
        c.merge_json(j, base);
        return c;
    }

    void merge_json(const json& raw, const fs::path& base)
    {
        require(raw.is_object(), ErrorKind::malformed, "pipeline config must be a JSON object");
        json j = json::object();
        for (const auto& [key, value] : raw.items()) {
            std::string k = key;
            std::replace(k.begin(), k.end(), '-', '_');
            j[k] = value;
        }
        auto path = [&](const char* key, fs::path& dst) {
            if (!j.contains(key)) return;
            const fs::path p = j[key].get<std::string>();
            dst = p.is_relative() && !base.empty() ? base / p : p;
        };
        try {
            path("matrix", matrix);
            path("concepts", concepts);
            path("activations", activations);
            path("split", split);
            path("sim_matrix", sim_matrix);
            path("sim_text_emb", sim_text_emb);
            path("sim_img_emb", sim_img_emb);
            path("sim_params", sim_params);
            path("explainer_text_emb", explainer_text_emb);
            path("explainer_img_emb", explainer_img_emb);
            path("head", head);
            path("labels", labels);
            path("class_names", class_names);
            path("out", out);
            if (j.contains("split_seed")) split_seed = j["split_seed"].get<std::uint64_t>();
            if (j.contains("seed")) split_seed = j["seed"].get<std::uint64_t>();
            if (j.contains("eta")) eta = j["eta"].get<double>();
            if (j.contains("path_length")) path_length = j["path_length"].get<int>();
            if (j.contains("v")) v = j["v"].get<int>();
            if (j.contains("r")) r = j["r"].get<int>();
            if (j.contains("eps")) eps = j["eps"].get<double>();
            if (j.contains("scaling")) scaling = parse_scaling(j["scaling"].get<std::string>());
            if (j.contains("charts")) charts = j["charts"].get<std::size_t>();
            if (j.contains("threads")) threads = j["threads"].get<unsigned>();
        } catch (const json::exception& e) {
            fail(ErrorKind::malformed, std::string("pipeline config: ") + e.what());
        }
    }

    ExplainConfig explain_config() const
    {
        ExplainConfig ec;
        ec.elastic_net.eta = eta;
        ec.elastic_net.path_length = path_length;
        ec.greedy = {v, r, eps};
        return ec;
    }
};

struct PipelineSummary
{
    std::size_t neurons = 0;
    std::size_t explained = 0;
    ScoreReport correlation;
    std::optional<ScoreReport> ablation;
    LengthStats lengths;
    std::vector<std::string> warnings;
};

namespace detail {

/// Everything the pipeline reads, loaded and cross-checked before any compute.
struct PipelineInputs
{
    MatrixF P;
    ConceptSet concepts;
    MatrixF Q;
    SplitAssignment split;
    std::optional<SimulatorSource> simulator;
    std::optional<LinearHeadModel> head;
    std::optional<LabelMatrix> label_matrix;
    std::vector<std::int64_t> class_labels;
    std::vector<std::string> class_names;
    std::vector<std::string> warnings;
};

inline void require_file(const fs::path& p, const char* what)
{
    require(!p.empty(), ErrorKind::invalid_argument, std::string("missing required input: ") + what);
    require(fs::exists(p), ErrorKind::io, std::string(what) + " not found: " + p.string());
}

inline PipelineInputs load_pipeline_inputs(const PipelineConfig& cfg)
{
    require_file(cfg.matrix, "matrix");
    require_file(cfg.concepts, "concepts");
    require_file(cfg.activations, "activations");
    if (!cfg.split.empty()) require_file(cfg.split, "split");
    const bool sim_from_matrix = !cfg.sim_matrix.empty();
    if (sim_from_matrix) {
        require_file(cfg.sim_matrix, "sim_matrix");
    } else {
        require_file(cfg.sim_text_emb, "sim_text_emb");
        require_file(cfg.sim_img_emb, "sim_img_emb");
        require_file(cfg.sim_params, "sim_params");
    }
    if (!cfg.head.empty()) {
        require_file(cfg.head / "W.let", "head W.let");
        require_file(cfg.head / "bias.let", "head bias.let");
        require_file(cfg.labels, "labels");
    }
    if (!cfg.class_names.empty()) {
        require_file(cfg.class_names, "class_names");
        require_file(cfg.labels, "labels");
    }
    cfg.explain_config().elastic_net.validate();
    cfg.explain_config().greedy.validate();

    PipelineInputs in;
    in.P = read_matrix(cfg.matrix);
    in.concepts = read_concepts(cfg.concepts);
    in.Q = read_matrix(cfg.activations);
    require(static_cast<std::size_t>(in.P.rows()) == in.concepts.size(), ErrorKind::dimension_mismatch,
            "matrix has " + std::to_string(in.P.rows()) + " rows but " + std::to_string(in.concepts.size()) + " concepts");
    require(in.P.cols() == in.Q.cols(), ErrorKind::dimension_mismatch, "matrix and activations disagree on input count");
    const auto n = static_cast<std::size_t>(in.P.cols());
    in.split = cfg.split.empty() ? make_split(n, cfg.split_seed) : read_split(cfg.split);
    require(in.split.n == n, ErrorKind::dimension_mismatch, "split size does not match input count");

    if (sim_from_matrix) {
        in.simulator = SimulatorSource::from_matrix(read_matrix(cfg.sim_matrix), in.concepts);
        if (file_fingerprint(cfg.sim_matrix) == file_fingerprint(cfg.matrix))
            in.warnings.push_back("simulator matrix is identical to the explainer matrix; scores may be inflated");
    } else {
        in.simulator = SimulatorSource::from_embeddings(EmbeddingMatrix::load(cfg.sim_text_emb),
                                                        EmbeddingMatrix::load(cfg.sim_img_emb),
                                                        calibration_from_json(read_json(cfg.sim_params)), in.concepts);
        for (const auto& [sim, expl] : {std::pair{cfg.sim_text_emb, cfg.explainer_text_emb},
                                        std::pair{cfg.sim_img_emb, cfg.explainer_img_emb}}) {
            if (!expl.empty() && fs::exists(expl) && file_fingerprint(sim) == file_fingerprint(expl))
                in.warnings.push_back("simulator input " + sim.string() + " is identical to explainer input " +
                                      expl.string() + "; scores may be inflated");
        }
    }
    require(in.simulator->inputs() == n, ErrorKind::dimension_mismatch, "simulator input count does not match");

    if (!cfg.labels.empty()) {
        const auto t = read_tensor(cfg.labels);
        if (t.shape.size() == 1) {
            in.class_labels = LabelMatrix::class_indices(t);
            require(in.class_labels.size() == n, ErrorKind::dimension_mismatch, "label count does not match inputs");
        }
        if (!cfg.class_names.empty()) {
            in.class_names = read_concepts(cfg.class_names).names();
            in.label_matrix = LabelMatrix::from_tensor(t, t.shape.size() == 1 ? std::optional(in.class_names.size())
                                                                              : std::nullopt);
            require(in.label_matrix->rows() == n, ErrorKind::dimension_mismatch, "label rows do not match inputs");
            require(in.label_matrix->cols() == in.class_names.size(), ErrorKind::dimension_mismatch,
                    "label columns do not match class names");
        }
    }
    if (!cfg.head.empty()) {
        in.head = LinearHeadModel::load(cfg.head);
        require(in.head->neurons() == static_cast<std::size_t>(in.Q.rows()), ErrorKind::dimension_mismatch,
                "head neuron count does not match activations");
        require(!in.class_labels.empty(), ErrorKind::invalid_argument,
                "ablation needs 1-D class labels (one class index per input)");
        if (in.head->mu.size() == 0) in.head->set_mu(in.Q, in.split.train);
    }
    return in;
}

template <class F>
auto run_stage(const char* stage, F&& f)
{
    try {
        return f();
    } catch (const Error& e) {
        throw Error(e.kind(), std::string("[") + stage + "] " + e.what());
    } catch (const std::exception& e) {
        throw Error(ErrorKind::io, std::string("[") + stage + "] " + e.what());
    }
}

inline std::string fmt(double v, int digits = 4)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string summary_markdown(const PipelineSummary& s)
{
    std::ostringstream md;
    md << "# Linear explanation summary\n\n";
    md << "| quantity | value |\n|---|---|\n";
    md << "| neurons | " << s.neurons << " |\n";
    md << "| explained (non-empty) | " << s.lengths.counted << " |\n";
    md << "| dead | " << s.lengths.dead << " |\n";
    md << "| uninformative | " << s.lengths.empty << " |\n";
    md << "| mean explanation length | " << (s.lengths.mean ? fmt(*s.lengths.mean, 3) : std::string("n/a")) << " |\n";
    md << "| mean correlation score | " << fmt(s.correlation.summary.mean) << " ± "
       << fmt(s.correlation.summary.stderr_) << " (n=" << s.correlation.summary.scored << ") |\n";
    if (s.ablation)
        md << "| mean ablation score (" << s.ablation->scaling << ") | " << fmt(s.ablation->summary.mean) << " ± "
           << fmt(s.ablation->summary.stderr_) << " (n=" << s.ablation->summary.scored << ") |\n";
    md << "\n## Explanation length histogram\n\n| length | neurons |\n|---|---|\n";
    for (const auto& [len, count] : s.lengths.histogram) md << "| " << len << " | " << count << " |\n";
    if (!s.warnings.empty()) {
        md << "\n## Warnings\n\n";
        for (const auto& w : s.warnings) md << "- " << w << "\n";
    }
    return md.str();
}

} // namespace detail

/// Runs every stage, writing outputs into cfg.out as each stage completes. Errors are
/// re-thrown with the failing stage as a prefix; files written so far are kept.
inline PipelineSummary run_pipeline(const PipelineConfig& cfg, std::ostream& log)
{
    auto in = detail::run_stage("validate", [&] { return detail::load_pipeline_inputs(cfg); });
    for (const auto& w : in.warnings) log << "warning: " << w << "\n";

    PipelineSummary summary;
    summary.neurons = static_cast<std::size_t>(in.Q.rows());
    summary.warnings = in.warnings;
    fs::create_directories(cfg.out);

    auto explanations = detail::run_stage("explain", [&] {
        auto ex = explain_all(in.P, in.Q, in.split, in.concepts, cfg.explain_config(), cfg.threads);
        write_explanations(ex, cfg.out / "explanations.json");
        return ex;
    });
    summary.lengths = length_stats(explanations);
    log << "explained " << summary.lengths.counted << " of " << summary.neurons << " neurons\n";

    summary.correlation = detail::run_stage("simulate", [&] {
        auto rep = score_explanations(explanations, *in.simulator, in.Q, in.split, cfg.threads);
        write_json(score_report_to_json(rep), cfg.out / "scores.json");
        return rep;
    });
    attach_scores(explanations, summary.correlation);
    for (const auto& w : summary.correlation.warnings) summary.warnings.push_back(w);
    log << "mean correlation " << detail::fmt(summary.correlation.summary.mean) << "\n";

    if (in.head) {
        summary.ablation = detail::run_stage("ablate", [&] {
            const HeadEvaluation eval(*in.head, in.Q, in.class_labels);
            auto rep = score_ablation(explanations, *in.simulator, eval, in.split, cfg.scaling, cfg.threads);
            write_json(score_report_to_json(rep), cfg.out / "ablation.json");
            return rep;
        });
        attach_scores(explanations, *summary.ablation);
        log << "mean ablation " << detail::fmt(summary.ablation->summary.mean) << "\n";
    }

    detail::run_stage("report", [&] {
        write_explanations(explanations, cfg.out / "explanations.json");
        write_json(length_stats_to_json(summary.lengths), cfg.out / "length_stats.json");
        if (summary.ablation) {
            const auto rows = scatter_corr_vs_ablation(summary.correlation, *summary.ablation);
            detail::write_file(cfg.out / "scatter.csv", scatter_csv(rows));
        }
        if (in.label_matrix) {
            std::size_t drawn = 0;
            for (std::size_t k = 0; k < summary.neurons && drawn < cfg.charts; ++k) {
                const auto q = detail::activation_row(in.Q, k);
                if (is_dead(q) || *std::max_element(q.begin(), q.end()) <= 0.0f) continue;
                const auto chart = area_chart(static_cast<std::int64_t>(k), q, *in.label_matrix, in.class_names);
                char name[32];
                std::snprintf(name, sizeof name, "neuron_%04zu", k);
                detail::write_file(cfg.out / "charts" / (std::string(name) + ".svg"), area_chart_svg(chart));
                write_json(area_chart_to_json(chart), cfg.out / "charts" / (std::string(name) + ".json"));
                ++drawn;
            }
        }
        detail::write_file(cfg.out / "summary.md", detail::summary_markdown(summary));
        return 0;
    });
    return summary;
}

} // namespace neuron_lens
