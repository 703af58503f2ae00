#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

/**
 * @file error.hpp
 * @brief Exception hierarchy shared by all deconv modules.
 *
 * Every error carries a category so the command-line front end can map it
 * onto an exit code without inspecting messages.
 */

namespace deconv {

enum class ErrorCategory {
    usage,   ///< bad arguments or configuration
    data,    ///< malformed or inconsistent input data
    solver,  ///< numerical failure inside an optimizer
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorCategory::usage, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorCategory::data, what) {}
};

/// Raised when filtering leaves no gene to regress on.
class EmptyBasisError : public DataError {
public:
    explicit EmptyBasisError(const std::string& what) : DataError(what) {}
};

/// Pearson or Kendall correlation on a constant vector.
class UndefinedCorrelationError : public DataError {
public:
    explicit UndefinedCorrelationError(const std::string& what) : DataError(what) {}
};

/// A concentration vector that cannot be normalized (all zero or negative).
class DegenerateSolutionError : public Error {
public:
    explicit DegenerateSolutionError(const std::string& what) : Error(ErrorCategory::solver, what) {}
};

class IllConditionedError : public Error {
public:
    IllConditionedError(const std::string& what, double condition_estimate)
        : Error(ErrorCategory::solver, what), condition_estimate_(condition_estimate) {}

    double condition_estimate() const noexcept { return condition_estimate_; }

private:
    double condition_estimate_;
};

/// The optimizer hit its iteration cap; the best iterate seen is kept.
class NonConvergenceError : public Error {
public:
    NonConvergenceError(const std::string& what, std::vector<double> best_iterate, double best_objective)
        : Error(ErrorCategory::solver, what), best_(std::move(best_iterate)), best_objective_(best_objective) {}

    const std::vector<double>& best_iterate() const noexcept { return best_; }
    double best_objective() const noexcept { return best_objective_; }

private:
    std::vector<double> best_;
    double best_objective_;
};

} // namespace deconv
