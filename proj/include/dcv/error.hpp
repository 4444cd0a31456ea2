#pragma once

#include <stdexcept>
#include <string>

namespace dcv {

/// Root of every exception thrown by the library. `kind()` is a short stable
/// tag ("dimension", "argument", ...) used by the CLI to pick an exit code.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + " error: " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define DCV_DEFINE_ERROR(Name, tag)                                            \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(tag, what) {}           \
    }

DCV_DEFINE_ERROR(DimensionError, "dimension");
DCV_DEFINE_ERROR(ArgumentError, "argument");
DCV_DEFINE_ERROR(StateError, "state");
DCV_DEFINE_ERROR(NumericError, "numeric");
DCV_DEFINE_ERROR(ConfigError, "config");
DCV_DEFINE_ERROR(FormatError, "format");
DCV_DEFINE_ERROR(ParseError, "parse");
DCV_DEFINE_ERROR(SchemaError, "schema");
DCV_DEFINE_ERROR(ValidationError, "validation");
DCV_DEFINE_ERROR(DataError, "data");
DCV_DEFINE_ERROR(GenerationError, "generation");
DCV_DEFINE_ERROR(DegenerateProfileError, "degenerate-profile");

#undef DCV_DEFINE_ERROR

} // namespace dcv
