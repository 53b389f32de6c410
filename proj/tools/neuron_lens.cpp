// neuron-lens: command-line front end over the header-only library.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <neuron_lens/neuron_lens.hpp>

namespace nl = neuron_lens;
using nl::fs::path;

namespace {

struct Common
{
    std::uint64_t seed = 0;
    std::optional<unsigned> threads;

    unsigned thread_count() const { return nl::resolve_threads(threads); }
};

void add_common(CLI::App* sub, Common& c)
{
    sub->add_option("--seed", c.seed, "Random seed (default 0)");
    sub->add_option("--threads", c.threads, "Worker threads (default: NEURON_LENS_THREADS or 1)");
}

// Simulator inputs shared by simulate and ablation-score.
struct SimulatorArgs
{
    path sim_matrix, sim_text_emb, sim_img_emb, sim_params, concepts;
    path explainer_matrix, explainer_text_emb, explainer_img_emb;

    void add(CLI::App* sub)
    {
        sub->add_option("--sim-matrix", sim_matrix, "Precomputed simulator concept matrix (LET, M x N)");
        sub->add_option("--sim-text-emb", sim_text_emb, "Simulator concept embeddings (LET, M x d)");
        sub->add_option("--sim-img-emb", sim_img_emb, "Simulator input embeddings (LET, N x d)");
        sub->add_option("--sim-params", sim_params, "Simulator calibration params (JSON)");
        sub->add_option("--concepts", concepts, "Concept names, one per line")->required();
        sub->add_option("--explainer-matrix", explainer_matrix, "Explainer matrix, only checked for identity");
        sub->add_option("--explainer-text-emb", explainer_text_emb, "Explainer text embeddings, identity check");
        sub->add_option("--explainer-img-emb", explainer_img_emb, "Explainer image embeddings, identity check");
    }

    nl::SimulatorSource load() const
    {
        auto names = nl::read_concepts(concepts);
        auto same = [](const path& a, const path& b) {
            return !a.empty() && !b.empty() && nl::fs::exists(b) && nl::file_fingerprint(a) == nl::file_fingerprint(b);
        };
        if (!sim_matrix.empty()) {
            if (same(sim_matrix, explainer_matrix))
                std::cerr << "warning: simulator matrix is identical to the explainer matrix\n";
            return nl::SimulatorSource::from_matrix(nl::read_matrix(sim_matrix), std::move(names));
        }
        nl::require(!sim_text_emb.empty() && !sim_img_emb.empty() && !sim_params.empty(),
                    nl::ErrorKind::invalid_argument,
                    "give --sim-matrix, or all of --sim-text-emb, --sim-img-emb and --sim-params");
        if (same(sim_text_emb, explainer_text_emb) || same(sim_img_emb, explainer_img_emb))
            std::cerr << "warning: simulator embeddings are identical to the explainer's\n";
        return nl::SimulatorSource::from_embeddings(nl::EmbeddingMatrix::load(sim_text_emb),
                                                    nl::EmbeddingMatrix::load(sim_img_emb),
                                                    nl::calibration_from_json(nl::read_json(sim_params)),
                                                    std::move(names));
    }
};

void print_summary(const nl::ScoreReport& r)
{
    std::printf("%s: mean %.4f +- %.4f over %zu neurons (%zu dead, %zu skipped)\n", r.metric.c_str(),
                r.summary.mean, r.summary.stderr_, r.summary.scored, r.summary.dead, r.summary.skipped);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

std::vector<std::int64_t> load_class_labels(const path& p)
{
    return nl::LabelMatrix::class_indices(nl::read_tensor(p));
}

std::vector<double> parse_betas(const std::string& s)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const double b = std::stod(item, &used);
            nl::require(used == item.size(), nl::ErrorKind::invalid_argument, "bad beta: " + item);
            out.push_back(b);
        } catch (const std::logic_error&) {
            nl::fail(nl::ErrorKind::invalid_argument, "bad beta: " + item);
        }
    }
    nl::require(!out.empty(), nl::ErrorKind::invalid_argument, "no betas given");
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Linear explanations and simulation scoring for individual neurons"};
    app.require_subcommand(1);
    std::map<std::string, std::function<void()>> actions;

    // calibrate
    Common cal_c;
    path cal_text, cal_img, cal_labels, cal_out;
    nl::CalibrationOptions cal_opt;
    {
        auto* s = app.add_subcommand("calibrate", "Fit the sigmoid calibration of embedding similarity");
        add_common(s, cal_c);
        s->add_option("--text-emb", cal_text, "Concept (label) embeddings, C x d")->required();
        s->add_option("--img-emb", cal_img, "Input embeddings, N x d")->required();
        s->add_option("--labels", cal_labels, "Binary N x C labels, or 1-D class indices")->required();
        s->add_option("--out", cal_out, "Output params JSON")->required();
        s->add_option("--iters", cal_opt.iters, "Iterations (default 500)");
        actions["calibrate"] = [&] {
            const auto text = nl::EmbeddingMatrix::load(cal_text);
            const auto img = nl::EmbeddingMatrix::load(cal_img);
            const auto t = nl::read_tensor(cal_labels);
            const auto labels = nl::LabelMatrix::from_tensor(
                t, t.shape.size() == 1 ? std::optional(text.rows()) : std::nullopt);
            const auto fit = nl::fit_calibration(text, img, labels, cal_opt);
            nl::write_json(nl::calibration_to_json(fit.params), cal_out);
            std::printf("a=%.6g b=%.6g loss=%.6g iterations=%d\n", fit.params.a, fit.params.b,
                        fit.loss_history.empty() ? 0.0 : fit.loss_history.back(), fit.iterations);
        };
    }

    // concept-matrix
    Common cm_c;
    path cm_params, cm_text, cm_img, cm_out;
    {
        auto* s = app.add_subcommand("concept-matrix", "Build the calibrated concept activation matrix P");
        add_common(s, cm_c);
        s->add_option("--params", cm_params, "Calibration params JSON")->required();
        s->add_option("--text-emb", cm_text, "Concept embeddings, M x d")->required();
        s->add_option("--img-emb", cm_img, "Input embeddings, N x d")->required();
        s->add_option("--out", cm_out, "Output matrix (LET, M x N)")->required();
        actions["concept-matrix"] = [&] {
            const auto params = nl::calibration_from_json(nl::read_json(cm_params));
            nl::write_matrix(nl::build_concept_matrix(params, nl::EmbeddingMatrix::load(cm_text),
                                                      nl::EmbeddingMatrix::load(cm_img)),
                             cm_out);
        };
    }

    // filter-concepts
    Common fc_c;
    path fc_matrix, fc_concepts, fc_out_matrix, fc_out_concepts;
    double fc_min = 0.5;
    {
        auto* s = app.add_subcommand("filter-concepts", "Drop concepts whose top-5 mean activation is low");
        add_common(s, fc_c);
        s->add_option("--matrix", fc_matrix, "Concept matrix (LET)")->required();
        s->add_option("--concepts", fc_concepts, "Concept names")->required();
        s->add_option("--min-top5", fc_min, "Minimum mean of the 5 largest activations (default 0.5)");
        s->add_option("--out-matrix", fc_out_matrix, "Filtered matrix")->required();
        s->add_option("--out-concepts", fc_out_concepts, "Filtered names")->required();
        actions["filter-concepts"] = [&] {
            const auto f = nl::filter_concepts(nl::read_matrix(fc_matrix), nl::read_concepts(fc_concepts), fc_min);
            nl::write_matrix(f.matrix, fc_out_matrix);
            nl::write_concepts(f.concepts, fc_out_concepts);
            std::printf("kept %zu concepts\n", f.concepts.size());
        };
    }

    // split
    Common sp_c;
    std::size_t sp_n = 0;
    path sp_out;
    {
        auto* s = app.add_subcommand("split", "Seeded 70/10/20 train/val/test split");
        add_common(s, sp_c);
        s->add_option("--n", sp_n, "Number of inputs")->required();
        s->add_option("--out", sp_out, "Output split JSON")->required();
        actions["split"] = [&] { nl::write_split(nl::make_split(sp_n, sp_c.seed), sp_out); };
    }

    // explain
    Common ex_c;
    path ex_matrix, ex_act, ex_concepts, ex_split, ex_out;
    nl::ExplainConfig ex_cfg;
    {
        auto* s = app.add_subcommand("explain", "Learn linear explanations for every neuron");
        add_common(s, ex_c);
        s->add_option("--matrix", ex_matrix, "Concept matrix P (LET, M x N)")->required();
        s->add_option("--activations", ex_act, "Neuron activations Q (LET, K x N)")->required();
        s->add_option("--concepts", ex_concepts, "Concept names")->required();
        s->add_option("--split", ex_split, "Split JSON (default: generated from --seed)");
        s->add_option("--eta", ex_cfg.elastic_net.eta, "L1 share of the penalty (default 0.99)");
        s->add_option("--path-length", ex_cfg.elastic_net.path_length, "Lambda path length (default 20)");
        s->add_option("--v", ex_cfg.greedy.v, "Maximum concepts (default 10)");
        s->add_option("--r", ex_cfg.greedy.r, "Candidates per round (default 10)");
        s->add_option("--eps", ex_cfg.greedy.epsilon, "Required correlation gain (default 0.02)");
        s->add_option("--out", ex_out, "Output explanations JSON")->required();
        actions["explain"] = [&] {
            const auto P = nl::read_matrix(ex_matrix);
            const auto Q = nl::read_matrix(ex_act);
            const auto names = nl::read_concepts(ex_concepts);
            const auto split = ex_split.empty() ? nl::make_split(static_cast<std::size_t>(P.cols()), ex_c.seed)
                                                : nl::read_split(ex_split);
            const auto ex = nl::explain_all(P, Q, split, names, ex_cfg, ex_c.thread_count());
            nl::write_explanations(ex, ex_out);
            std::printf("explained %zu of %zu neurons\n", nl::length_stats(ex).counted, ex.size());
        };
    }

    // simulate
    Common si_c;
    SimulatorArgs si_sim;
    path si_expl, si_act, si_split, si_out;
    {
        auto* s = app.add_subcommand("simulate", "Simulate activations from explanations and score correlation");
        add_common(s, si_c);
        si_sim.add(s);
        s->add_option("--explanations", si_expl, "Explanations JSON")->required();
        s->add_option("--activations", si_act, "Neuron activations Q (LET, K x N)")->required();
        s->add_option("--split", si_split, "Split JSON")->required();
        s->add_option("--out", si_out, "Output scores JSON")->required();
        actions["simulate"] = [&] {
            const auto expl = nl::read_explanations(si_expl);
            const auto Q = nl::read_matrix(si_act);
            const auto split = nl::read_split(si_split);
            const auto src = si_sim.load();
            const auto rep = nl::score_explanations(expl, src, Q, split, si_c.thread_count());
            nl::write_json(nl::score_report_to_json(rep), si_out);
            print_summary(rep);
        };
    }

    // ablation-score
    Common ab_c;
    SimulatorArgs ab_sim;
    path ab_expl, ab_head, ab_act, ab_labels, ab_split, ab_out;
    std::string ab_scaling = "optim";
    {
        auto* s = app.add_subcommand("ablation-score", "Score explanations by replacing neurons with simulations");
        add_common(s, ab_c);
        ab_sim.add(s);
        s->add_option("--explanations", ab_expl, "Explanations JSON")->required();
        s->add_option("--head", ab_head, "Head directory (W.let, bias.let, meta.json)")->required();
        s->add_option("--activations", ab_act, "Neuron activations Q (LET, K x N)")->required();
        s->add_option("--labels", ab_labels, "Class index per input (LET, i64, N)")->required();
        s->add_option("--split", ab_split, "Split JSON")->required();
        s->add_option("--scaling", ab_scaling, "optim or norm (default optim)");
        s->add_option("--out", ab_out, "Output scores JSON")->required();
        actions["ablation-score"] = [&] {
            const auto method = nl::parse_scaling(ab_scaling);
            const auto expl = nl::read_explanations(ab_expl);
            const auto Q = nl::read_matrix(ab_act);
            const auto split = nl::read_split(ab_split);
            auto head = nl::LinearHeadModel::load(ab_head);
            if (head.mu.size() == 0) head.set_mu(Q, split.train);
            const auto src = ab_sim.load();
            const nl::HeadEvaluation eval(head, Q, load_class_labels(ab_labels));
            const auto rep = nl::score_ablation(expl, src, eval, split, method, ab_c.thread_count());
            nl::write_json(nl::score_report_to_json(rep), ab_out);
            print_summary(rep);
        };
    }

    // impact
    Common im_c;
    path im_head, im_act, im_labels, im_logits, im_out;
    std::string im_betas = "0.0003,0.002,0.02,0.1,0.5";
    {
        auto* s = app.add_subcommand("impact", "Top Impact of highest-activating inputs, averaged over neurons");
        add_common(s, im_c);
        s->add_option("--head", im_head, "Head directory")->required();
        s->add_option("--activations", im_act, "Neuron activations Q (LET, K x N)")->required();
        s->add_option("--labels", im_labels, "Class index per input (LET, i64, N)")->required();
        s->add_option("--logits", im_logits, "Logits (LET, N x C) used to fit the temperature");
        s->add_option("--betas", im_betas, "Comma-separated fractions");
        s->add_option("--out", im_out, "Output CSV")->required();
        actions["impact"] = [&] {
            const auto betas = parse_betas(im_betas);
            for (double b : betas)
                nl::require(b >= 0 && b <= 1, nl::ErrorKind::invalid_argument, "betas must lie in [0, 1]");
            auto head = nl::LinearHeadModel::load(im_head);
            const auto Q = nl::read_matrix(im_act);
            const auto labels = load_class_labels(im_labels);
            if (!im_logits.empty()) {
                const auto fit = nl::fit_temperature(nl::read_matrix(im_logits), labels);
                head.temperature = fit.temperature;
                std::printf("temperature %.6g (nll %.6g, at T=1 %.6g)\n", fit.temperature, fit.nll, fit.nll_at_one);
            }
            const nl::HeadEvaluation eval(head, Q, labels);
            const std::size_t K = head.neurons();
            std::vector<std::vector<nl::TopImpact>> ti(K);
            nl::parallel_for(K, im_c.thread_count(), [&](std::size_t k) {
                const auto rec = nl::neuron_impacts(eval, k);
                for (double b : betas) ti[k].push_back(nl::top_impact(rec, nl::detail::activation_row(Q, k), b));
            });
            std::ostringstream csv;
            csv << "beta,top_impact_percent,neurons,flagged\n";
            for (std::size_t j = 0; j < betas.size(); ++j) {
                double sum = 0;
                std::size_t flagged = 0;
                for (std::size_t k = 0; k < K; ++k) {
                    sum += ti[k][j].value;
                    flagged += ti[k][j].flagged ? 1 : 0;
                }
                char line[128];
                std::snprintf(line, sizeof line, "%.6g,%.4f,%zu,%zu\n", betas[j], 100.0 * sum / static_cast<double>(K),
                              K, flagged);
                csv << line;
            }
            nl::detail::write_file(im_out, csv.str());
            std::cout << csv.str();
        };
    }

    // area-chart
    Common ac_c;
    std::size_t ac_neuron = 0;
    path ac_act, ac_labels, ac_names, ac_out, ac_data;
    {
        auto* s = app.add_subcommand("area-chart", "Label share per activation bucket for one neuron");
        add_common(s, ac_c);
        s->add_option("--neuron", ac_neuron, "Neuron index")->required();
        s->add_option("--activations", ac_act, "Neuron activations Q (LET, K x N)")->required();
        s->add_option("--labels", ac_labels, "Binary N x C labels, or 1-D class indices")->required();
        s->add_option("--class-names", ac_names, "Label names, one per line")->required();
        s->add_option("--out", ac_out, "Output SVG")->required();
        s->add_option("--out-data", ac_data, "Output chart data JSON");
        actions["area-chart"] = [&] {
            const auto Q = nl::read_matrix(ac_act);
            nl::require(ac_neuron < static_cast<std::size_t>(Q.rows()), nl::ErrorKind::invalid_argument,
                        "neuron index out of range");
            const auto names = nl::read_concepts(ac_names).names();
            const auto t = nl::read_tensor(ac_labels);
            const auto labels =
                nl::LabelMatrix::from_tensor(t, t.shape.size() == 1 ? std::optional(names.size()) : std::nullopt);
            const auto chart = nl::area_chart(static_cast<std::int64_t>(ac_neuron),
                                              nl::detail::activation_row(Q, ac_neuron), labels, names);
            nl::detail::write_file(ac_out, nl::area_chart_svg(chart));
            if (!ac_data.empty()) nl::write_json(nl::area_chart_to_json(chart), ac_data);
            if (chart.negatives_clamped > 0)
                std::cerr << "warning: " << chart.negatives_clamped << " negative activations placed in bucket 1\n";
        };
    }

    // stats
    Common st_c;
    path st_expl, st_out;
    {
        auto* s = app.add_subcommand("stats", "Explanation length statistics");
        add_common(s, st_c);
        s->add_option("--explanations", st_expl, "Explanations JSON")->required();
        s->add_option("--out", st_out, "Output JSON (default: stdout)");
        actions["stats"] = [&] {
            const auto j = nl::length_stats_to_json(nl::length_stats(nl::read_explanations(st_expl)));
            if (st_out.empty())
                std::cout << j.dump(2) << "\n";
            else
                nl::write_json(j, st_out);
        };
    }

    // scatter
    Common sc_c;
    path sc_corr, sc_abl, sc_out;
    {
        auto* s = app.add_subcommand("scatter", "Join correlation and ablation scores per neuron");
        add_common(s, sc_c);
        s->add_option("--corr", sc_corr, "Correlation scores JSON")->required();
        s->add_option("--abl", sc_abl, "Ablation scores JSON")->required();
        s->add_option("--out", sc_out, "Output CSV")->required();
        actions["scatter"] = [&] {
            const auto rows = nl::scatter_corr_vs_ablation(nl::score_report_from_json(nl::read_json(sc_corr)),
                                                           nl::score_report_from_json(nl::read_json(sc_abl)));
            nl::detail::write_file(sc_out, nl::scatter_csv(rows));
        };
    }

    // pipeline
    Common pl_c;
    path pl_config;
    std::map<std::string, std::string> pl_paths;
    std::optional<double> pl_eta, pl_eps;
    std::optional<int> pl_path_length, pl_v, pl_r;
    std::optional<std::string> pl_scaling;
    std::optional<std::size_t> pl_charts;
    CLI::App* pl_cmd = nullptr;
    {
        auto* s = pl_cmd = app.add_subcommand("pipeline", "Explain, simulate, ablate and report in one run");
        add_common(s, pl_c);
        s->add_option("--config", pl_config, "Pipeline config JSON; flags override it");
        for (const char* key : {"matrix", "concepts", "activations", "split", "sim-matrix", "sim-text-emb",
                                "sim-img-emb", "sim-params", "explainer-text-emb", "explainer-img-emb", "head",
                                "labels", "class-names", "out"})
            s->add_option(std::string("--") + key, pl_paths[key], std::string("Path override: ") + key);
        s->add_option("--eta", pl_eta, "L1 share of the penalty");
        s->add_option("--path-length", pl_path_length, "Lambda path length");
        s->add_option("--v", pl_v, "Maximum concepts");
        s->add_option("--r", pl_r, "Candidates per round");
        s->add_option("--eps", pl_eps, "Required correlation gain");
        s->add_option("--scaling", pl_scaling, "optim or norm");
        s->add_option("--charts", pl_charts, "Number of area charts");
        actions["pipeline"] = [&] {
            nl::PipelineConfig cfg;
            cfg.threads = pl_c.thread_count();
            if (!pl_config.empty()) {
                const auto base = pl_config.parent_path();
                cfg.merge_json(nl::read_json(pl_config), base.empty() ? path(".") : base);
            }
            nl::json over = nl::json::object();
            for (const auto& [key, value] : pl_paths)
                if (!value.empty()) over[key] = value;
            if (pl_cmd->count("--seed")) over["split_seed"] = pl_c.seed;
            if (pl_eta) over["eta"] = *pl_eta;
            if (pl_eps) over["eps"] = *pl_eps;
            if (pl_path_length) over["path_length"] = *pl_path_length;
            if (pl_v) over["v"] = *pl_v;
            if (pl_r) over["r"] = *pl_r;
            if (pl_scaling) over["scaling"] = *pl_scaling;
            if (pl_charts) over["charts"] = *pl_charts;
            if (pl_c.threads) over["threads"] = *pl_c.threads;
            cfg.merge_json(over, {});
            const auto summary = nl::run_pipeline(cfg, std::cerr);
            std::printf("neurons %zu, explained %zu, mean correlation %.4f", summary.neurons, summary.lengths.counted,
                        summary.correlation.summary.mean);
            if (summary.ablation) std::printf(", mean ablation %.4f", summary.ablation->summary.mean);
            std::printf("\noutputs in %s\n", cfg.out.string().c_str());
        };
    }

    // gen-fixture
    Common gf_c;
    nl::FixtureConfig gf_cfg;
    path gf_out;
    {
        auto* s = app.add_subcommand("gen-fixture", "Write a seeded synthetic dataset with planted neurons");
        add_common(s, gf_c);
        s->add_option("--neurons", gf_cfg.neurons, "Neurons (default 64)");
        s->add_option("--concepts", gf_cfg.concepts, "Concepts (default 200)");
        s->add_option("--inputs", gf_cfg.inputs, "Inputs (default 5000)");
        s->add_option("--noise", gf_cfg.noise, "Activation noise sd (default 0.05)");
        s->add_option("--classes", gf_cfg.classes, "Head classes (default 10)");
        s->add_option("--out", gf_out, "Output directory")->required();
        actions["gen-fixture"] = [&] {
            gf_cfg.seed = gf_c.seed;
            nl::write_fixture(nl::generate_fixture(gf_cfg), gf_out);
        };
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        for (auto* sub : app.get_subcommands()) actions.at(sub->get_name())();
    } catch (const nl::Error& e) {
        std::cerr << "error (" << nl::to_string(e.kind()) << "): " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
