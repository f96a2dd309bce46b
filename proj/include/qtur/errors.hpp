// errors.hpp: exception hierarchy shared by all qtur modules

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qtur {

// Base for everything the library throws on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input: non-Hermitian matrices, out-of-range protocol values, bad configs.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Mathematically meaningless argument (beta <= 0, T_c >= T_h, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// Operation precondition not met (uncentered operator, non-faithful state, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

// Quadrature non-convergence, ill-conditioned solves, failed eigendecompositions.
class NumericError : public Error {
public:
    using Error::Error;
};

// Generator has no unique stationary state.
class SteadyStateError : public Error {
public:
    using Error::Error;
};

// Fock-space truncation too small for the requested tolerance.
class TruncationError : public Error {
public:
    TruncationError(const std::string& what, std::size_t suggested_dim)
        : Error(what), suggested_dim_(suggested_dim) {}

    std::size_t suggested_dim() const noexcept { return suggested_dim_; }

private:
    std::size_t suggested_dim_;
};

} // namespace qtur
