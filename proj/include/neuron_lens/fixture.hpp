#pragma once

// Seeded synthetic probe data with planted linear neurons. Stands in for real
// model exports at desk scale and drives the acceptance suite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <neuron_lens/ablate.hpp>
#include <neuron_lens/calibrate.hpp>
#include <neuron_lens/error.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

struct FixtureConfig
{
    std::uint64_t seed = 0;
    std::size_t neurons = 64;
    std::size_t concepts = 200;
    std::size_t inputs = 5000;
    double noise = 0.05;
    std::size_t classes = 10;
    std::size_t embed_dim = 64;
    std::size_t min_terms = 1;
    std::size_t max_terms = 3;
    double min_weight = 0.5;
    double max_weight = 3.0;
    double head_scale = 0.35;
    double sim_perturbation = 0.3;  // relative size of the simulator's embedding noise

    void validate() const
    {
        require(inputs >= 50, ErrorKind::invalid_argument, "fixture needs at least 50 inputs");
        require(neurons >= 1 && classes >= 2 && embed_dim >= 2, ErrorKind::invalid_argument,
                "fixture needs >= 1 neuron, >= 2 classes, embedding dim >= 2");
        require(min_terms >= 1 && min_terms <= max_terms && max_terms <= concepts, ErrorKind::invalid_argument,
                "fixture term counts must satisfy 1 <= min <= max <= concepts");
        require(noise >= 0 && min_weight <= max_weight, ErrorKind::invalid_argument, "bad fixture noise or weights");
    }
};

struct Fixture
{
    FixtureConfig config;
    ConceptSet concepts;
    MatrixF text_emb, img_emb;
    MatrixF sim_text_emb, sim_img_emb;
    CalibrationParams explainer_params{20.0, -0.1};
    CalibrationParams simulator_params{20.0, -0.1};
    MatrixF P;       // explainer concept matrix
    MatrixF P_sim;   // simulator concept matrix
    MatrixF Q;       // neurons x inputs
    std::vector<Explanation> ground_truth;
    LinearHeadModel head;
    std::vector<std::int64_t> labels;
    std::vector<std::string> class_names;
    MatrixF logits;  // inputs x classes
    SplitAssignment split;
};

namespace detail {

inline MatrixF random_unit_rows(SplitMix64& rng, std::size_t rows, std::size_t dim)
{
    MatrixF m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
    return EmbeddingMatrix(std::move(m)).data();
}

inline MatrixF perturb_rows(SplitMix64& rng, const MatrixF& base, double scale)
{
    MatrixF m = base;
    const double s = scale / std::sqrt(static_cast<double>(base.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += static_cast<float>(s * rng.normal());
    return EmbeddingMatrix(std::move(m)).data();
}

} // namespace detail

/// Planted neuron k: q = sum_i w_i P[c_i, :] + noise * N(0, 1), with 1-3 distinct concepts
/// and weights uniform in [min_weight, max_weight]. With noise = 0 the ground-truth
/// weights reproduce Q exactly (same f64 accumulation, rounded to f32). Class labels are
/// drawn from softmax of a random linear head over Q, so the head is calibrated at T = 1.
inline Fixture generate_fixture(const FixtureConfig& cfg)
{
    cfg.validate();
    SplitMix64 rng(cfg.seed);
    Fixture f;
    f.config = cfg;

    std::vector<std::string> names;
    for (std::size_t i = 0; i < cfg.concepts; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "concept_%03zu", i);
        names.emplace_back(buf);
    }
    f.concepts = ConceptSet(names);

    f.text_emb = detail::random_unit_rows(rng, cfg.concepts, cfg.embed_dim);
    f.img_emb = detail::random_unit_rows(rng, cfg.inputs, cfg.embed_dim);
    f.sim_text_emb = detail::perturb_rows(rng, f.text_emb, cfg.sim_perturbation);
    f.sim_img_emb = detail::perturb_rows(rng, f.img_emb, cfg.sim_perturbation);
    f.P = build_concept_matrix(f.explainer_params, EmbeddingMatrix(f.text_emb), EmbeddingMatrix(f.img_emb));
    f.P_sim = build_concept_matrix(f.simulator_params, EmbeddingMatrix(f.sim_text_emb), EmbeddingMatrix(f.sim_img_emb));

    f.Q.resize(static_cast<Eigen::Index>(cfg.neurons), static_cast<Eigen::Index>(cfg.inputs));
    for (std::size_t k = 0; k < cfg.neurons; ++k) {
        const std::size_t n_terms = cfg.min_terms + rng.below(cfg.max_terms - cfg.min_terms + 1);
        std::vector<Index> chosen;
        while (chosen.size() < n_terms) {
            const auto c = static_cast<Index>(rng.below(cfg.concepts));
            if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) chosen.push_back(c);
        }
        Explanation e;
        e.neuron_id = static_cast<std::int64_t>(k);
        e.method = "ground_truth";
        for (Index c : chosen)
            e.terms.push_back({static_cast<float>(rng.uniform(cfg.min_weight, cfg.max_weight)), names[c]});

        for (std::size_t j = 0; j < cfg.inputs; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < chosen.size(); ++t)
                acc += static_cast<double>(e.terms[t].weight) *
                       static_cast<double>(f.P(static_cast<Eigen::Index>(chosen[t]), static_cast<Eigen::Index>(j)));
            if (cfg.noise > 0) acc += cfg.noise * rng.normal();
            f.Q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = static_cast<float>(acc);
        }
        f.ground_truth.push_back(std::move(e));
    }

    f.head.W.resize(static_cast<Eigen::Index>(cfg.classes), static_cast<Eigen::Index>(cfg.neurons));
    for (Eigen::Index i = 0; i < f.head.W.size(); ++i) f.head.W.data()[i] = cfg.head_scale * rng.normal();
    // Centre the logits so every class stays plausible.
    const Eigen::VectorXd q_mean = f.Q.cast<double>().rowwise().mean();
    f.head.bias = -(f.head.W * q_mean);
    f.head.W = f.head.W.cast<float>().cast<double>();
    f.head.bias = f.head.bias.cast<float>().cast<double>();
    f.head.temperature = 1.0;

    const Eigen::MatrixXd logits = (f.head.W * f.Q.cast<double>()).colwise() + f.head.bias;
    f.logits = logits.transpose().cast<float>();
    f.labels.resize(cfg.inputs);
    for (std::size_t j = 0; j < cfg.inputs; ++j) {
        const Eigen::VectorXd p = softmax(logits.col(static_cast<Eigen::Index>(j)), 1.0);
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t y = cfg.classes - 1;
        for (std::size_t c = 0; c < cfg.classes; ++c) {
            acc += p(static_cast<Eigen::Index>(c));
            if (u < acc) {
                y = c;
                break;
            }
        }
        f.labels[j] = static_cast<std::int64_t>(y);
    }
    for (std::size_t c = 0; c < cfg.classes; ++c) f.class_names.push_back("class_" + std::to_string(c));

    f.split = make_split(cfg.inputs, cfg.seed);
    return f;
}

/// Writes every fixture file plus a pipeline config (config.json) into `dir`.
inline void write_fixture(const Fixture& f, const fs::path& dir)
{
    fs::create_directories(dir);
    write_concepts(f.concepts, dir / "concepts.txt");
    write_matrix(f.text_emb, dir / "text_emb.let");
    write_matrix(f.img_emb, dir / "img_emb.let");
    write_matrix(f.sim_text_emb, dir / "sim_text_emb.let");
    write_matrix(f.sim_img_emb, dir / "sim_img_emb.let");
    write_json(calibration_to_json(f.explainer_params), dir / "params.json");
    write_json(calibration_to_json(f.simulator_params), dir / "sim_params.json");
    write_matrix(f.P, dir / "P.let");
    write_matrix(f.P_sim, dir / "P_sim.let");
    write_matrix(f.Q, dir / "Q.let");
    write_explanations(f.ground_truth, dir / "ground_truth.json");
    f.head.save(dir / "head");
    write_tensor(Tensor::from_vector(std::span<const std::int64_t>(f.labels)), dir / "labels.let");
    write_concepts(ConceptSet(f.class_names), dir / "class_names.txt");
    write_matrix(f.logits, dir / "logits.let");
    write_split(f.split, dir / "split.json");

    const auto& c = f.config;
    write_json(json{{"seed", c.seed}, {"neurons", c.neurons}, {"concepts", c.concepts}, {"inputs", c.inputs},
                    {"noise", c.noise}, {"classes", c.classes}, {"embed_dim", c.embed_dim}},
               dir / "fixture.json");
    write_json(json{{"matrix", "P.let"},
                    {"concepts", "concepts.txt"},
                    {"activations", "Q.let"},
                    {"split", "split.json"},
                    {"explainer_text_emb", "text_emb.let"},
                    {"explainer_img_emb", "img_emb.let"},
                    {"sim_text_emb", "sim_text_emb.let"},
                    {"sim_img_emb", "sim_img_emb.let"},
                    {"sim_params", "sim_params.json"},
                    {"head", "head"},
                    {"labels", "labels.let"},
                    {"class_names", "class_names.txt"},
                    {"scaling", "optim"},
                    {"charts", 8},
                    {"out", "out"}},
               dir / "config.json");
}

} // namespace neuron_lens
