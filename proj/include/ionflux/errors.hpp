#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ionflux {

// Base of every domain/solver failure. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateProjectionError : public Error {
public:
    DegenerateProjectionError()
        : Error("degenerate projection: masked valence vector is zero") {}
};

class InvalidFeedError : public Error {
public:
    using Error::Error;
};

class IncompleteModelError : public Error {
public:
    using Error::Error;
};

class IonExceedsPoreError : public Error {
public:
    explicit IonExceedsPoreError(double lambda)
        : Error("ion exceeds pore: lambda = " + std::to_string(lambda)), lambda_(lambda) {}
    double lambda() const noexcept { return lambda_; }

private:
    double lambda_;
};

class InfeasiblePartitioningError : public Error {
public:
    using Error::Error;
};

class InvalidFlowError : public Error {
public:
    using Error::Error;
};

class InvalidStateError : public Error {
public:
    using Error::Error;
};

class InvalidInputError : public Error {
public:
    using Error::Error;
};

// Iterative solves carry the residual trace so callers can diagnose stalls.
class FilmDivergenceError : public Error {
public:
    FilmDivergenceError(const std::string& what, std::vector<double> trace)
        : Error(what), trace_(std::move(trace)) {}
    const std::vector<double>& trace() const noexcept { return trace_; }

private:
    std::vector<double> trace_;
};

class NonConvergenceError : public Error {
public:
    NonConvergenceError(const std::string& what, std::vector<double> history)
        : Error(what), history_(std::move(history)) {}
    const std::vector<double>& history() const noexcept { return history_; }

private:
    std::vector<double> history_;
};

class NumericalBreakdownError : public Error {
public:
    using Error::Error;
};

// Raised by solve_rejection: wraps the failure of one flux point.
class FluxPointError : public Error {
public:
    FluxPointError(double jv, const std::string& cause)
        : Error("solve failed at J_v = " + std::to_string(jv) + " m/s: " + cause), jv_(jv) {}
    double jv() const noexcept { return jv_; }

private:
    double jv_;
};

class CalibrationFailureError : public Error {
public:
    using Error::Error;
};

class NumericalOverflowError : public Error {
public:
    using Error::Error;
};

class IntegrationFailureError : public Error {
public:
    IntegrationFailureError(const std::string& what, double t, std::vector<double> last_state)
        : Error(what), t_(t), last_state_(std::move(last_state)) {}
    double t() const noexcept { return t_; }
    const std::vector<double>& last_state() const noexcept { return last_state_; }

private:
    double t_;
    std::vector<double> last_state_;
};

class UnsupportedSpeciesError : public Error {
public:
    using Error::Error;
};

class UnsupportedDimensionError : public Error {
public:
    using Error::Error;
};

class DataQualityError : public Error {
public:
    using Error::Error;
};

class TrainingAbortError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

}  // namespace ionflux
