#pragma once

#include <stdexcept>
#include <string>

namespace omsmon {

/// Base of every error raised by the library. `kind()` is the stable,
/// machine-readable name printed by the CLI as `kind: message`.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define OMSMON_DEFINE_ERROR(Name)                                              \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& message) : Error(#Name, message) {}   \
    }

OMSMON_DEFINE_ERROR(ParseError);
OMSMON_DEFINE_ERROR(SchemaError);
OMSMON_DEFINE_ERROR(IoError);
OMSMON_DEFINE_ERROR(InvalidFractions);
OMSMON_DEFINE_ERROR(DimensionMismatch);
OMSMON_DEFINE_ERROR(UnsupportedLayer);
OMSMON_DEFINE_ERROR(DivergedError);
OMSMON_DEFINE_ERROR(TooFewSamples);
OMSMON_DEFINE_ERROR(NotPositiveDefinite);
OMSMON_DEFINE_ERROR(TooFewDistinctPoints);
OMSMON_DEFINE_ERROR(MissingLayer);
OMSMON_DEFINE_ERROR(EmptyCalibration);
OMSMON_DEFINE_ERROR(NotCalibrated);
OMSMON_DEFINE_ERROR(EmptyClassInputs);
OMSMON_DEFINE_ERROR(OneClassOnly);
OMSMON_DEFINE_ERROR(MissingNet);
OMSMON_DEFINE_ERROR(InvalidParameter);
OMSMON_DEFINE_ERROR(EmptyCategory);

#undef OMSMON_DEFINE_ERROR

}  // namespace omsmon
