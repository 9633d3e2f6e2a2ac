#pragma once

#include <stdexcept>
#include <string>

namespace mvj {

// Error taxonomy for the whole engine. Each condition the library can raise
// carries one of these codes so callers (and the CLI exit-code mapping) can
// dispatch without string matching.
enum class ErrorCode {
    // measure_kit
    EmptySampleSet,
    NonFiniteEntry,
    DimensionMismatch,
    UnsupportedDimension,
    // coefficient_model
    DerivativeMismatch,
    // jump_driver
    InvalidWindow,
    QuadratureFailure,
    NonConvergentLimit,
    // mv_simulator
    BlowUp,
    SchemeInstability,
    LawFlowGap,
    // tangent_flows
    BankTooSmall,
    FixedPointDivergence,
    // malliavin_engine
    NonPSD,
    SingularGamma,
    MissingSecondDerivative,
    MissingDerivativeData,
    InsufficientDecades,
    // pde_lab
    UnsupportedTerminal,
    MissingDerivatives,
    // runner
    ConfigError,
    NumericalFailure,
};

const char* error_code_name(ErrorCode c);

class MvjError : public std::runtime_error {
public:
    MvjError(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

// Convenience thrower so call sites stay one line.
[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
    throw MvjError(code, msg);
}

} // namespace mvj
