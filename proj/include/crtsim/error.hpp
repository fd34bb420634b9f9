#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace crtsim {

// Precondition violations. Derives from std::invalid_argument so callers can
// catch either.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NotPositiveDefinite : public std::runtime_error {
public:
    NotPositiveDefinite(std::size_t pivot, double value)
        : std::runtime_error("matrix is not positive definite at pivot " + std::to_string(pivot) +
                             " (value " + std::to_string(value) + ")"),
          pivot_(pivot), value_(value) {}

    std::size_t pivot() const noexcept { return pivot_; }
    double value() const noexcept { return value_; }

private:
    std::size_t pivot_;
    double value_;
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Hyperparameter search failed; best_point holds the best log-scale point seen.
class InferenceError : public std::runtime_error {
public:
    InferenceError(const std::string& what, std::vector<double> best_point)
        : std::runtime_error(what), best_point_(std::move(best_point)) {}

    const std::vector<double>& best_point() const noexcept { return best_point_; }

private:
    std::vector<double> best_point_;
};

namespace detail {
inline void require(bool ok, const std::string& msg) {
    if (!ok) throw InvalidArgument(msg);
}
}  // namespace detail

}  // namespace crtsim
