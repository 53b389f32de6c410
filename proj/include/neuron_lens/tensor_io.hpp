#pragma once

// On-disk data model shared by every command: LET tensor files, concept
// lists, split assignments, label matrices and explanation documents.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <neuron_lens/error.hpp>

namespace neuron_lens {

static_assert(std::endian::native == std::endian::little,
              "LET payloads are memcpy'd and require a little-endian host");

namespace fs = std::filesystem;
using json = nlohmann::json;

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = std::size_t;

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// splitmix64. Used wherever output must be reproducible across languages.
class SplitMix64
{
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next()
    {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound) { return next() % bound; }

    /// Standard normal via Box-Muller (one value per call, the pair's sine half is dropped).
    double normal()
    {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, i64 = 1 };

struct Tensor
{
    std::vector<std::uint64_t> shape;
    std::variant<std::vector<float>, std::vector<std::int64_t>> data;

    DType dtype() const { return data.index() == 0 ? DType::f32 : DType::i64; }

    std::size_t numel() const
    {
        return std::visit([](const auto& v) { return v.size(); }, data);
    }

    const std::vector<float>& f32() const
    {
        require(dtype() == DType::f32, ErrorKind::invalid_argument, "tensor is not f32");
        return std::get<0>(data);
    }
    const std::vector<std::int64_t>& i64() const
    {
        require(dtype() == DType::i64, ErrorKind::invalid_argument, "tensor is not i64");
        return std::get<1>(data);
    }

    bool operator==(const Tensor&) const = default;

    static Tensor from_matrix(const MatrixF& m)
    {
        Tensor t;
        t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
        t.data = std::vector<float>(m.data(), m.data() + m.size());
        return t;
    }

    static Tensor from_vector(std::span<const float> v)
    {
        Tensor t;
        t.shape = {v.size()};
        t.data = std::vector<float>(v.begin(), v.end());
        return t;
    }

    static Tensor from_vector(std::span<const std::int64_t> v)
    {
        Tensor t;
        t.shape = {v.size()};
        t.data = std::vector<std::int64_t>(v.begin(), v.end());
        return t;
    }

    /// 2-D f32 (or i64, converted) tensor as a row-major matrix.
    MatrixF to_matrix() const
    {
        require(shape.size() == 2, ErrorKind::dimension_mismatch,
                "expected a 2-D tensor, got " + std::to_string(shape.size()) + "-D");
        MatrixF m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
        std::visit([&](const auto& v) {
            for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = static_cast<float>(v[i]);
        }, data);
        return m;
    }

    /// 1-D tensor as floats.
    std::vector<float> to_floats() const
    {
        require(shape.size() == 1, ErrorKind::dimension_mismatch, "expected a 1-D tensor");
        return std::visit([](const auto& v) {
            return std::vector<float>(v.begin(), v.end());
        }, data);
    }
};

namespace detail {

inline std::uint64_t checked_numel(std::span<const std::uint64_t> shape)
{
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d)
            fail(ErrorKind::malformed, "tensor shape overflows");
        n *= d;
    }
    return n;
}

inline void put_u64(std::string& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p)
{
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const fs::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "write failed: " + path.string());
}

} // namespace detail

inline constexpr char let_magic[4] = {'L', 'E', 'T', '1'};

inline std::string encode_tensor(const Tensor& t)
{
    require(t.shape.size() <= 255, ErrorKind::invalid_argument, "tensor has more than 255 dims");
    require(detail::checked_numel(t.shape) == t.numel(), ErrorKind::dimension_mismatch,
            "tensor shape does not match element count");
    std::string out(let_magic, 4);
    out.push_back(static_cast<char>(t.dtype()));
    out.push_back(static_cast<char>(t.shape.size()));
    for (auto d : t.shape) detail::put_u64(out, d);
    std::visit([&](const auto& v) {
        const auto* bytes = reinterpret_cast<const char*>(v.data());
        out.append(bytes, v.size() * sizeof(v[0]));
    }, t.data);
    return out;
}

inline Tensor decode_tensor(std::string_view bytes, const std::string& what = "tensor")
{
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 4 || std::memcmp(p, let_magic, 4) != 0)
        fail(ErrorKind::bad_magic, what + ": bad magic (expected LET1)");
    if (bytes.size() < 6) fail(ErrorKind::truncated, what + ": truncated header");
    const auto code = p[4];
    if (code > 1) fail(ErrorKind::unknown_dtype, what + ": unknown dtype code " + std::to_string(code));
    const std::size_t ndim = p[5];
    std::size_t off = 6;
    if (bytes.size() < off + 8 * ndim) fail(ErrorKind::truncated, what + ": truncated shape");

    Tensor t;
    t.shape.resize(ndim);
    for (std::size_t i = 0; i < ndim; ++i, off += 8) t.shape[i] = detail::get_u64(p + off);
    const std::uint64_t n = detail::checked_numel(t.shape);
    const std::size_t elem = 4u * (code == 0 ? 1u : 2u);
    if (n > (bytes.size() - off) / elem) fail(ErrorKind::truncated, what + ": truncated payload");
    if (bytes.size() - off != n * elem)
        fail(ErrorKind::malformed, what + ": trailing bytes after payload");

    if (code == 0) {
        std::vector<float> v(n);
        std::memcpy(v.data(), p + off, n * elem);
        for (std::size_t i = 0; i < n; ++i)
            if (!std::isfinite(v[i]))
                fail(ErrorKind::non_finite, what + ": non-finite value at flat index " + std::to_string(i));
        t.data = std::move(v);
    } else {
        std::vector<std::int64_t> v(n);
        std::memcpy(v.data(), p + off, n * elem);
        t.data = std::move(v);
    }
    return t;
}

inline void write_tensor(const Tensor& t, const fs::path& path)
{
    detail::write_file(path, encode_tensor(t));
}

inline Tensor read_tensor(const fs::path& path)
{
    return decode_tensor(detail::read_file(path), path.string());
}

inline MatrixF read_matrix(const fs::path& path) { return read_tensor(path).to_matrix(); }

inline void write_matrix(const MatrixF& m, const fs::path& path)
{
    write_tensor(Tensor::from_matrix(m), path);
}

/// Selects columns of a row-major matrix, returning a double copy.
inline Eigen::MatrixXd select_columns(const MatrixF& m, std::span<const Index> cols)
{
    Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (std::size_t j = 0; j < cols.size(); ++j)
            out(r, static_cast<Eigen::Index>(j)) = m(r, static_cast<Eigen::Index>(cols[j]));
    return out;
}

/// Selects entries of one matrix row, returning a double vector.
inline Eigen::VectorXd select_row(const MatrixF& m, Index row, std::span<const Index> cols)
{
    Eigen::VectorXd out(static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j)
        out(static_cast<Eigen::Index>(j)) =
            m(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(cols[j]));
    return out;
}

// ---------------------------------------------------------------------------
// Concept sets
// ---------------------------------------------------------------------------

class ConceptSet
{
public:
    ConceptSet() = default;

    explicit ConceptSet(std::vector<std::string> names) : names_(std::move(names))
    {
        std::unordered_set<std::string> seen;
        for (std::size_t i = 0; i < names_.size(); ++i) {
            require(!names_[i].empty(), ErrorKind::malformed,
                    "concept " + std::to_string(i) + " has an empty name");
            require(seen.insert(names_[i]).second, ErrorKind::malformed,
                    "duplicate concept name: " + names_[i]);
        }
    }

    std::size_t size() const { return names_.size(); }
    const std::string& operator[](std::size_t i) const { return names_[i]; }
    const std::vector<std::string>& names() const { return names_; }

    std::optional<Index> find(std::string_view name) const
    {
        auto it = std::find(names_.begin(), names_.end(), name);
        if (it == names_.end()) return std::nullopt;
        return static_cast<Index>(it - names_.begin());
    }

    bool operator==(const ConceptSet&) const = default;

private:
    std::vector<std::string> names_;
};

/// Splits a text file into lines. A final line without LF is accepted; CR before LF is dropped.
inline std::vector<std::string> read_lines(const fs::path& path)
{
    const auto text = detail::read_file(path);
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
        start = end + 1;
    }
    return lines;
}

inline ConceptSet read_concepts(const fs::path& path) { return ConceptSet(read_lines(path)); }

inline void write_concepts(const ConceptSet& set, const fs::path& path)
{
    std::string out;
    for (const auto& n : set.names()) {
        out += n;
        out += '\n';
    }
    detail::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitAssignment
{
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::vector<Index> train;
    std::vector<Index> val;
    std::vector<Index> test;

    bool operator==(const SplitAssignment&) const = default;

    void validate() const
    {
        std::vector<char> seen(n, 0);
        for (const auto* part : {&train, &val, &test}) {
            for (auto i : *part) {
                require(i < n, ErrorKind::malformed, "split index out of range");
                require(!seen[i], ErrorKind::malformed, "split index repeated: " + std::to_string(i));
                seen[i] = 1;
            }
        }
        require(train.size() + val.size() + test.size() == n, ErrorKind::malformed,
                "split does not cover every probe index");
    }
};

/// 70/10/20 split. Sizes use round-half-up on exact integers: train = round(0.7 n),
/// val = round(0.1 n), test = the rest. Indices are shuffled by Fisher-Yates driven by
/// splitmix64(seed) (j = next() mod (i+1), i from n-1 down to 1); each part is then sorted.
inline SplitAssignment make_split(std::size_t n, std::uint64_t seed)
{
    require(n >= 10, ErrorKind::invalid_argument, "make_split: need at least 10 inputs");
    std::vector<Index> perm(n);
    std::iota(perm.begin(), perm.end(), Index{0});
    SplitMix64 rng(seed);
    for (std::size_t i = n - 1; i >= 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i + 1));
        std::swap(perm[i], perm[j]);
    }
    const std::size_t n_train = (7 * n + 5) / 10;
    const std::size_t n_val = (n + 5) / 10;

    SplitAssignment s;
    s.n = n;
    s.seed = seed;
    s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                 perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

inline json split_to_json(const SplitAssignment& s)
{
    return json{{"n", s.n}, {"seed", s.seed}, {"train_idx", s.train},
                {"val_idx", s.val}, {"test_idx", s.test}};
}

inline SplitAssignment split_from_json(const json& j)
{
    SplitAssignment s;
    try {
        s.n = j.at("n").get<std::size_t>();
        s.seed = j.value("seed", std::uint64_t{0});
        s.train = j.at("train_idx").get<std::vector<Index>>();
        s.val = j.at("val_idx").get<std::vector<Index>>();
        s.test = j.at("test_idx").get<std::vector<Index>>();
    } catch (const json::exception& e) {
        fail(ErrorKind::malformed, std::string("split: ") + e.what());
    }
    s.validate();
    return s;
}

inline json read_json(const fs::path& path)
{
    try {
        return json::parse(detail::read_file(path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::malformed, path.string() + ": " + e.what());
    }
}

inline void write_json(const json& j, const fs::path& path)
{
    detail::write_file(path, j.dump(2) + "\n");
}

inline SplitAssignment read_split(const fs::path& path) { return split_from_json(read_json(path)); }

inline void write_split(const SplitAssignment& s, const fs::path& path)
{
    write_json(split_to_json(s), path);
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Binary N x C matrix: entry (i, c) is 1 when input i carries label c.
class LabelMatrix
{
public:
    LabelMatrix() = default;

    LabelMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0)
    {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    std::uint8_t operator()(std::size_t i, std::size_t c) const { return data_[i * cols_ + c]; }
    void set(std::size_t i, std::size_t c, bool on) { data_[i * cols_ + c] = on ? 1 : 0; }

    std::size_t positives() const
    {
        return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
    }

    /// Accepts a 2-D tensor with entries in {0,1}, or a 1-D i64 tensor of class indices
    /// (expanded to one-hot with `num_classes` columns, or max+1 when not given).
    static LabelMatrix from_tensor(const Tensor& t, std::optional<std::size_t> num_classes = std::nullopt)
    {
        if (t.shape.size() == 1) return from_classes(class_indices(t), num_classes);
        require(t.shape.size() == 2, ErrorKind::dimension_mismatch, "labels must be 1-D or 2-D");
        LabelMatrix m(t.shape[0], t.shape[1]);
        std::visit([&](const auto& v) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double x = static_cast<double>(v[i]);
                require(x == 0.0 || x == 1.0, ErrorKind::malformed, "label entries must be 0 or 1");
                m.data_[i] = x == 1.0 ? 1 : 0;
            }
        }, t.data);
        return m;
    }

    static LabelMatrix from_classes(std::span<const std::int64_t> classes,
                                    std::optional<std::size_t> num_classes = std::nullopt)
    {
        std::int64_t hi = -1;
        for (auto c : classes) {
            require(c >= 0, ErrorKind::malformed, "class index must be non-negative");
            hi = std::max(hi, c);
        }
        const std::size_t cols = num_classes.value_or(static_cast<std::size_t>(hi + 1));
        require(hi < static_cast<std::int64_t>(cols), ErrorKind::malformed, "class index out of range");
        LabelMatrix m(classes.size(), cols);
        for (std::size_t i = 0; i < classes.size(); ++i) m.set(i, static_cast<std::size_t>(classes[i]), true);
        return m;
    }

    /// Class index per input from a 1-D integer tensor.
    static std::vector<std::int64_t> class_indices(const Tensor& t)
    {
        require(t.shape.size() == 1, ErrorKind::dimension_mismatch, "class labels must be a 1-D tensor");
        std::vector<std::int64_t> out;
        std::visit([&](const auto& v) {
            out.reserve(v.size());
            for (auto x : v) {
                const auto c = static_cast<std::int64_t>(x);
                require(static_cast<double>(c) == static_cast<double>(x) && c >= 0, ErrorKind::malformed,
                        "class labels must be non-negative integers");
                out.push_back(c);
            }
        }, t.data);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> data_;
};

// ---------------------------------------------------------------------------
// Explanations
// ---------------------------------------------------------------------------

enum class ExplanationStatus { ok, dead, uninformative };

inline std::string to_string(ExplanationStatus s)
{
    switch (s) {
        case ExplanationStatus::ok: return "ok";
        case ExplanationStatus::dead: return "dead";
        case ExplanationStatus::uninformative: return "uninformative";
    }
    return "ok";
}

inline ExplanationStatus parse_status(const std::string& s)
{
    if (s == "ok") return ExplanationStatus::ok;
    if (s == "dead") return ExplanationStatus::dead;
    if (s == "uninformative" || s == "empty") return ExplanationStatus::uninformative;
    fail(ErrorKind::malformed, "unknown explanation status: " + s);
}

struct Term
{
    float weight = 0.0f;
    std::string name;

    bool operator==(const Term&) const = default;
};

struct Explanation
{
    std::int64_t neuron_id = 0;
    std::string method = "LE";
    std::vector<Term> terms;
    ExplanationStatus status = ExplanationStatus::ok;
    std::optional<double> correlation;
    std::optional<double> ablation;
    // Fit diagnostics; not part of the scoring contract.
    std::optional<double> val_correlation;
    std::optional<double> lambda;

    bool operator==(const Explanation&) const = default;

    void validate() const
    {
        require(!terms.empty() || status != ExplanationStatus::ok, ErrorKind::malformed,
                "explanation for neuron " + std::to_string(neuron_id) + " has no terms but is not flagged");
        std::unordered_set<std::string> seen;
        for (const auto& t : terms) {
            require(!t.name.empty(), ErrorKind::malformed, "explanation term with empty concept");
            require(std::isfinite(t.weight), ErrorKind::non_finite, "explanation weight is not finite");
            require(seen.insert(t.name).second, ErrorKind::malformed,
                    "concept repeated in explanation for neuron " + std::to_string(neuron_id) + ": " + t.name);
        }
    }
};

namespace detail {

// Shortest decimal that round-trips the float, stored as the equal double, so JSON
// shows 1.5 rather than the widened binary expansion.
inline double float_for_json(float f)
{
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, f);
    double d = 0.0;
    std::from_chars(buf, res.ptr, d);
    return d;
}

} // namespace detail

inline json explanation_to_json(const Explanation& e)
{
    json terms = json::array();
    for (const auto& t : e.terms) terms.push_back({{"w", detail::float_for_json(t.weight)}, {"c", t.name}});
    json j{{"neuron_id", e.neuron_id}, {"method", e.method}, {"status", to_string(e.status)}, {"terms", terms}};
    json scores = json::object();
    if (e.correlation) scores["correlation"] = *e.correlation;
    if (e.ablation) scores["ablation"] = *e.ablation;
    j["scores"] = scores;
    if (e.val_correlation || e.lambda) {
        json fit = json::object();
        if (e.val_correlation) fit["val_correlation"] = *e.val_correlation;
        if (e.lambda) fit["lambda"] = *e.lambda;
        j["fit"] = fit;
    }
    return j;
}

inline Explanation explanation_from_json(const json& j)
{
    Explanation e;
    try {
        e.neuron_id = j.at("neuron_id").get<std::int64_t>();
        e.method = j.value("method", std::string("unknown"));
        for (const auto& t : j.at("terms")) e.terms.push_back({t.at("w").get<float>(), t.at("c").get<std::string>()});
        e.status = j.contains("status") ? parse_status(j["status"].get<std::string>())
                                        : (e.terms.empty() ? ExplanationStatus::uninformative : ExplanationStatus::ok);
        if (auto it = j.find("scores"); it != j.end() && it->is_object()) {
            if (it->contains("correlation")) e.correlation = (*it)["correlation"].get<double>();
            if (it->contains("ablation")) e.ablation = (*it)["ablation"].get<double>();
        }
        if (auto it = j.find("fit"); it != j.end() && it->is_object()) {
            if (it->contains("val_correlation")) e.val_correlation = (*it)["val_correlation"].get<double>();
            if (it->contains("lambda")) e.lambda = (*it)["lambda"].get<double>();
        }
    } catch (const json::exception& ex) {
        fail(ErrorKind::malformed, std::string("explanation: ") + ex.what());
    }
    e.validate();
    return e;
}

inline json explanations_to_json(std::span<const Explanation> items)
{
    json arr = json::array();
    for (const auto& e : items) arr.push_back(explanation_to_json(e));
    return json{{"explanations", arr}};
}

/// Accepts either {"explanations": [...]} or a bare array. Neuron ids must be unique.
inline std::vector<Explanation> explanations_from_json(const json& j)
{
    const json& arr = j.is_array() ? j : j.at("explanations");
    std::vector<Explanation> out;
    std::unordered_set<std::int64_t> ids;
    for (const auto& item : arr) {
        out.push_back(explanation_from_json(item));
        require(ids.insert(out.back().neuron_id).second, ErrorKind::malformed,
                "duplicate neuron_id " + std::to_string(out.back().neuron_id));
    }
    return out;
}

inline std::vector<Explanation> read_explanations(const fs::path& path)
{
    return explanations_from_json(read_json(path));
}

inline void write_explanations(std::span<const Explanation> items, const fs::path& path)
{
    write_json(explanations_to_json(items), path);
}

/// FNV-1a over file bytes; used to detect identical explainer and simulator inputs.
inline std::uint64_t file_fingerprint(const fs::path& path)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : detail::read_file(path)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace neuron_lens
