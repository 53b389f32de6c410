#pragma once

// Human-facing outputs: activation area charts, explanation-length statistics and
// correlation-vs-ablation scatter rows.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <neuron_lens/error.hpp>
#include <neuron_lens/simulate.hpp>
#include <neuron_lens/tensor_io.hpp>

namespace neuron_lens {

inline constexpr std::size_t area_chart_buckets = 8;

struct BucketShare
{
    Index label = 0;
    double fraction = 0.0;
};

struct AreaChartData
{
    std::int64_t neuron_id = 0;
    std::array<double, area_chart_buckets + 1> edges{};
    std::array<std::size_t, area_chart_buckets> counts{};
    // Per bucket, label shares in label-index order; empty buckets have none.
    std::array<std::vector<BucketShare>, area_chart_buckets> shares;
    std::vector<std::string> label_names;
    std::size_t negatives_clamped = 0;
};

/// Bucket of an activation: the highest bucket whose lower edge it reaches. Values on an
/// interior edge go up; the maximum lands in the last bucket; negatives go to the first.
inline std::size_t bucket_of(double value, const std::array<double, area_chart_buckets + 1>& edges)
{
    std::size_t b = 0;
    for (std::size_t i = 1; i < area_chart_buckets; ++i)
        if (value >= edges[i]) b = i;
    return b;
}

/// Eight equal-width activation buckets on [0, max]. Within a bucket each label's share
/// is its count of positive entries over all positive entries (one-hot labels give the
/// fraction of inputs; class + superclass rows count both).
inline AreaChartData area_chart(std::int64_t neuron_id, std::span<const float> q, const LabelMatrix& labels,
                                const std::vector<std::string>& label_names)
{
    require(labels.rows() == q.size(), ErrorKind::dimension_mismatch, "label rows must equal activation count");
    require(labels.cols() == label_names.size(), ErrorKind::dimension_mismatch,
            "label columns must equal class-name count");
    double hi = -std::numeric_limits<double>::infinity();
    for (float v : q) hi = std::max(hi, static_cast<double>(v));
    require(hi > 0.0, ErrorKind::degenerate, "area chart needs a positive maximum activation");

    AreaChartData out;
    out.neuron_id = neuron_id;
    out.label_names = label_names;
    for (std::size_t b = 0; b <= area_chart_buckets; ++b)
        out.edges[b] = hi * static_cast<double>(b) / static_cast<double>(area_chart_buckets);

    std::array<std::vector<std::size_t>, area_chart_buckets> tallies;
    for (auto& t : tallies) t.assign(labels.cols(), 0);
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] < 0.0f) ++out.negatives_clamped;
        const auto b = bucket_of(q[i], out.edges);
        ++out.counts[b];
        for (std::size_t c = 0; c < labels.cols(); ++c)
            if (labels(i, c)) ++tallies[b][c];
    }
    for (std::size_t b = 0; b < area_chart_buckets; ++b) {
        std::size_t total = 0;
        for (auto t : tallies[b]) total += t;
        if (total == 0) continue;
        for (std::size_t c = 0; c < labels.cols(); ++c)
            if (tallies[b][c] > 0)
                out.shares[b].push_back({c, static_cast<double>(tallies[b][c]) / static_cast<double>(total)});
    }
    return out;
}

inline json area_chart_to_json(const AreaChartData& d)
{
    json buckets = json::array();
    for (std::size_t b = 0; b < area_chart_buckets; ++b) {
        json fr = json::object();
        for (const auto& s : d.shares[b]) fr[d.label_names[s.label]] = s.fraction;
        buckets.push_back({{"lo", d.edges[b]}, {"hi", d.edges[b + 1]}, {"count", d.counts[b]}, {"fractions", fr}});
    }
    return json{{"neuron_id", d.neuron_id}, {"edges", d.edges}, {"buckets", buckets},
                {"negatives_clamped", d.negatives_clamped}};
}

namespace detail {

inline std::string num(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string xml_escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string palette_color(const std::string& name)
{
    static constexpr const char* palette[] = {
        "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
        "#b07aa1", "#ff9da7", "#9c755f", "#17becf", "#bcbd22", "#8c564b",
    };
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return palette[h % (sizeof palette / sizeof palette[0])];
}

} // namespace detail

/// Stacked-area SVG of label shares over activation buckets. The `max_series` labels with
/// the largest summed share are drawn individually, the rest as "other". Output is a pure
/// function of the data.
inline std::string area_chart_svg(const AreaChartData& d, std::size_t max_series = 10)
{
    const std::size_t n_labels = d.label_names.size();
    std::vector<double> totals(n_labels, 0.0);
    for (const auto& bucket : d.shares)
        for (const auto& s : bucket) totals[s.label] += s.fraction;

    std::vector<Index> order;
    for (Index c = 0; c < n_labels; ++c)
        if (totals[c] > 0) order.push_back(c);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return totals[a] > totals[b]; });
    const bool has_other = order.size() > max_series;
    if (has_other) order.resize(max_series);
    std::vector<Index> series(order.begin(), order.end());
    std::sort(series.begin(), series.end());

    // share[s][b] for drawn series plus an optional trailing "other" row.
    const std::size_t rows = series.size() + (has_other ? 1 : 0);
    std::vector<std::array<double, area_chart_buckets>> share(rows);
    for (auto& r : share) r.fill(0.0);
    for (std::size_t b = 0; b < area_chart_buckets; ++b) {
        for (const auto& s : d.shares[b]) {
            const auto it = std::lower_bound(series.begin(), series.end(), s.label);
            if (it != series.end() && *it == s.label)
                share[static_cast<std::size_t>(it - series.begin())][b] += s.fraction;
            else if (has_other)
                share.back()[b] += s.fraction;
        }
    }

    const double W = 720, H = 420, left = 60, right = 200, top = 40, bottom = 50;
    const double pw = W - left - right, ph = H - top - bottom;
    auto x_at = [&](std::size_t b) {
        return left + pw * (static_cast<double>(b) + 0.5) / static_cast<double>(area_chart_buckets);
    };
    auto y_at = [&](double frac) { return top + ph * (1.0 - frac); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::num(W) << "\" height=\"" << detail::num(H)
        << "\" viewBox=\"0 0 " << detail::num(W) << ' ' << detail::num(H) << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << detail::num(left) << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">Neuron "
        << d.neuron_id << "</text>\n";

    std::array<double, area_chart_buckets> base{};
    for (std::size_t r = 0; r < rows; ++r) {
        const bool other = has_other && r + 1 == rows;
        const std::string name = other ? "other" : d.label_names[series[r]];
        const std::string color = other ? "#bab0ac" : detail::palette_color(name);
        std::ostringstream pts;
        for (std::size_t b = 0; b < area_chart_buckets; ++b)
            pts << detail::num(x_at(b)) << ',' << detail::num(y_at(base[b] + share[r][b])) << ' ';
        for (std::size_t b = area_chart_buckets; b-- > 0;)
            pts << detail::num(x_at(b)) << ',' << detail::num(y_at(base[b])) << (b ? " " : "");
        svg << "<polygon points=\"" << pts.str() << "\" fill=\"" << color << "\" stroke=\"white\" stroke-width=\"0.5\">"
            << "<title>" << detail::xml_escape(name) << "</title></polygon>\n";
        for (std::size_t b = 0; b < area_chart_buckets; ++b) base[b] += share[r][b];

        const double ly = top + 16.0 * static_cast<double>(r);
        svg << "<rect x=\"" << detail::num(left + pw + 12) << "\" y=\"" << detail::num(ly) << "\" width=\"10\" height=\"10\" fill=\""
            << color << "\"/>\n";
        svg << "<text x=\"" << detail::num(left + pw + 28) << "\" y=\"" << detail::num(ly + 9)
            << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::xml_escape(name) << "</text>\n";
    }

    svg << "<line x1=\"" << detail::num(left) << "\" y1=\"" << detail::num(top + ph) << "\" x2=\"" << detail::num(left + pw)
        << "\" y2=\"" << detail::num(top + ph) << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << detail::num(left) << "\" y1=\"" << detail::num(top) << "\" x2=\"" << detail::num(left)
        << "\" y2=\"" << detail::num(top + ph) << "\" stroke=\"black\"/>\n";
    for (std::size_t b = 0; b <= area_chart_buckets; ++b) {
        const double x = left + pw * static_cast<double>(b) / static_cast<double>(area_chart_buckets);
        svg << "<text x=\"" << detail::num(x) << "\" y=\"" << detail::num(top + ph + 16)
            << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" << detail::num(d.edges[b])
            << "</text>\n";
    }
    for (std::size_t b = 0; b < area_chart_buckets; ++b) {
        svg << "<text x=\"" << detail::num(x_at(b)) << "\" y=\"" << detail::num(top - 4)
            << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">n=" << d.counts[b] << "</text>\n";
    }
    svg << "<text x=\"" << detail::num(left + pw / 2) << "\" y=\"" << detail::num(H - 10)
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">activation</text>\n";
    svg << "<text x=\"14\" y=\"" << detail::num(top + ph / 2) << "\" font-family=\"sans-serif\" font-size=\"12\" "
        << "text-anchor=\"middle\" transform=\"rotate(-90 14 " << detail::num(top + ph / 2) << ")\">fraction</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

// ---------------------------------------------------------------------------
// Explanation length statistics
// ---------------------------------------------------------------------------

struct LengthStats
{
    std::size_t total = 0;
    std::size_t dead = 0;
    std::size_t empty = 0;   // live but uninformative
    std::size_t counted = 0;
    std::optional<double> mean;
    std::optional<double> median;
    std::map<std::size_t, std::size_t> histogram;  // length -> neurons
};

inline LengthStats length_stats(std::span<const Explanation> explanations)
{
    LengthStats s;
    std::vector<std::size_t> lengths;
    for (const auto& e : explanations) {
        ++s.total;
        if (e.status == ExplanationStatus::dead) ++s.dead;
        else if (e.terms.empty()) ++s.empty;
        else lengths.push_back(e.terms.size());
    }
    s.counted = lengths.size();
    for (auto l : lengths) ++s.histogram[l];
    if (!lengths.empty()) {
        double acc = 0.0;
        for (auto l : lengths) acc += static_cast<double>(l);
        s.mean = acc / static_cast<double>(lengths.size());
        std::sort(lengths.begin(), lengths.end());
        const std::size_t mid = lengths.size() / 2;
        s.median = lengths.size() % 2 ? static_cast<double>(lengths[mid])
                                      : 0.5 * static_cast<double>(lengths[mid - 1] + lengths[mid]);
    }
    return s;
}

inline json length_stats_to_json(const LengthStats& s)
{
    json hist = json::object();
    for (const auto& [len, count] : s.histogram) hist[std::to_string(len)] = count;
    return json{{"total", s.total}, {"dead", s.dead}, {"empty", s.empty}, {"counted", s.counted},
                {"mean", s.mean ? json(*s.mean) : json("n/a")},
                {"median", s.median ? json(*s.median) : json("n/a")}, {"histogram", hist}};
}

// ---------------------------------------------------------------------------
// Correlation vs ablation
// ---------------------------------------------------------------------------

struct ScatterRow
{
    std::int64_t neuron_id = 0;
    std::string method;
    double rho = 0.0;
    double alpha = 0.0;
};

/// One row per neuron scored in both reports. The reports must list the same neuron ids.
inline std::vector<ScatterRow> scatter_corr_vs_ablation(const ScoreReport& corr, const ScoreReport& abl)
{
    std::map<std::int64_t, const NeuronScore*> a, b;
    for (const auto& n : corr.neurons) a[n.neuron_id] = &n;
    for (const auto& n : abl.neurons) b[n.neuron_id] = &n;

    std::vector<std::int64_t> only_corr, only_abl;
    for (const auto& [id, _] : a)
        if (!b.count(id)) only_corr.push_back(id);
    for (const auto& [id, _] : b)
        if (!a.count(id)) only_abl.push_back(id);
    if (!only_corr.empty() || !only_abl.empty()) {
        auto list = [](const std::vector<std::int64_t>& v) {
            std::string s;
            for (auto id : v) s += (s.empty() ? "" : ",") + std::to_string(id);
            return s.empty() ? std::string("none") : s;
        };
        fail(ErrorKind::dimension_mismatch, "neuron ids differ; only in correlation file: " + list(only_corr) +
                                                "; only in ablation file: " + list(only_abl));
    }

    std::vector<ScatterRow> rows;
    for (const auto& [id, n] : a) {
        const auto* m = b.at(id);
        if (!n->score || !m->score) continue;
        rows.push_back({id, n->method, *n->score, *m->score});
    }
    return rows;
}

inline std::string scatter_csv(std::span<const ScatterRow> rows)
{
    std::ostringstream out;
    out << "neuron_id,method,rho,alpha\n";
    for (const auto& r : rows) out << r.neuron_id << ',' << r.method << ',' << detail::num(r.rho) << ',' << detail::num(r.alpha) << '\n';
    return out.str();
}

} // namespace neuron_lens
