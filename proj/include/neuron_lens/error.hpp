#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace neuron_lens {

enum class ErrorKind {
    io,
    bad_magic,
    unknown_dtype,
    truncated,
    malformed,
    non_finite,
    invalid_argument,
    dimension_mismatch,
    degenerate,
    not_found,
};

inline std::string_view to_string(ErrorKind kind)
{
    switch (kind) {
        case ErrorKind::io: return "io";
        case ErrorKind::bad_magic: return "bad_magic";
        case ErrorKind::unknown_dtype: return "unknown_dtype";
        case ErrorKind::truncated: return "truncated";
        case ErrorKind::malformed: return "malformed";
        case ErrorKind::non_finite: return "non_finite";
        case ErrorKind::invalid_argument: return "invalid_argument";
        case ErrorKind::dimension_mismatch: return "dimension_mismatch";
        case ErrorKind::degenerate: return "degenerate";
        case ErrorKind::not_found: return "not_found";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error
{
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind)
    {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what)
{
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what)
{
    if (!cond) fail(kind, what);
}

} // namespace neuron_lens
