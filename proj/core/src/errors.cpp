#include "mvjump/errors.hpp"

namespace mvj {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::EmptySampleSet: return "EmptySampleSet";
        case ErrorCode::NonFiniteEntry: return "NonFiniteEntry";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::UnsupportedDimension: return "UnsupportedDimension";
        case ErrorCode::DerivativeMismatch: return "DerivativeMismatch";
        case ErrorCode::InvalidWindow: return "InvalidWindow";
        case ErrorCode::QuadratureFailure: return "QuadratureFailure";
        case ErrorCode::NonConvergentLimit: return "NonConvergentLimit";
        case ErrorCode::BlowUp: return "BlowUp";
        case ErrorCode::SchemeInstability: return "SchemeInstability";
        case ErrorCode::LawFlowGap: return "LawFlowGap";
        case ErrorCode::BankTooSmall: return "BankTooSmall";
        case ErrorCode::FixedPointDivergence: return "FixedPointDivergence";
        case ErrorCode::NonPSD: return "NonPSD";
        case ErrorCode::SingularGamma: return "SingularGamma";
        case ErrorCode::MissingSecondDerivative: return "MissingSecondDerivative";
        case ErrorCode::MissingDerivativeData: return "MissingDerivativeData";
        case ErrorCode::InsufficientDecades: return "InsufficientDecades";
        case ErrorCode::UnsupportedTerminal: return "UnsupportedTerminal";
        case ErrorCode::MissingDerivatives: return "MissingDerivatives";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::NumericalFailure: return "NumericalFailure";
    }
    return "UnknownError";
}

} // namespace mvj
