// opalg.hpp: Hermitian operators, Gibbs states and the matrix means built on them

#pragma once

#include <complex>
#include <cstddef>
#include <memory>

#include <Eigen/Dense>

namespace qtur {

using cplx = std::complex<double>;
using Matrix = Eigen::MatrixXcd;
using RealMatrix = Eigen::MatrixXd;
using RealVector = Eigen::VectorXd;

namespace opalg {

// Eigenvalues ascending, eigenvectors as orthonormal columns.
struct Spectrum {
    RealVector values;
    Matrix vectors;
    bool identity_basis{false}; // vectors == I (input already diagonal and sorted)
};

// Dense d x d complex Hermitian matrix with a lazily computed, thread-safe
// spectral decomposition. Copies share the cache; the value is immutable.
class HermitianOperator {
public:
    // Symmetrizes (A + A^dagger)/2 when the entrywise asymmetry is below
    // tolerance * max(1, max|A_ij|); throws ValidationError otherwise.
    explicit HermitianOperator(const Matrix& entries, double tolerance = 1e-12);

    static HermitianOperator zero(std::size_t dim);
    static HermitianOperator identity(std::size_t dim);
    static HermitianOperator diagonal(const RealVector& diag);
    // Builds V diag(values) V^dagger and seeds the spectral cache with it.
    static HermitianOperator from_spectrum(const RealVector& values, const Matrix& vectors);

    std::size_t dim() const;
    const Matrix& matrix() const;
    const Spectrum& spectrum() const;

    double trace() const;
    double frobenius_norm() const;
    bool is_zero() const;

    HermitianOperator operator+(const HermitianOperator& other) const;
    HermitianOperator operator-(const HermitianOperator& other) const;
    HermitianOperator operator*(double scale) const;

private:
    struct State;
    explicit HermitianOperator(std::shared_ptr<State> state);
    std::shared_ptr<State> state_;
};

inline HermitianOperator operator*(double scale, const HermitianOperator& op) { return op * scale; }

// tr(A B) for Hermitian A, B (always real).
double trace_product(const HermitianOperator& a, const HermitianOperator& b);
double trace_product(const Matrix& a, const Matrix& b);

// Populations at or below this value make a state non-faithful at working precision.
inline constexpr double kFaithfulFloor = 1e-300;

// pi = exp(-beta H)/Z held in H's eigenbasis. Populations are computed from
// log-weights with the ground energy shifted out, so large beta*E never overflows.
class GibbsState {
public:
    GibbsState(const HermitianOperator& hamiltonian, double beta);

    std::size_t dim() const;
    double beta() const;
    double log_partition() const;
    double free_energy() const;

    const HermitianOperator& pi() const;
    const RealVector& populations() const;      // ascending energy order
    const RealVector& log_populations() const;
    const RealVector& energies() const;
    const Matrix& basis() const;
    bool identity_basis() const;

    bool faithful() const;
    void require_faithful() const; // throws PreconditionError

    double expectation(const HermitianOperator& a) const;

    Matrix to_eigenbasis(const Matrix& a) const;
    Matrix from_eigenbasis(const Matrix& a) const;

    // Kernel matrices K_ij for the mean maps (M A)_ij = A_ij K_ij in the eigenbasis.
    const RealMatrix& log_mean_weights() const;
    const RealMatrix& arith_mean_weights() const;
    const RealMatrix& skew_weights() const; // arithmetic minus logarithmic

private:
    struct State;
    std::shared_ptr<State> state_;
};

GibbsState gibbs_state(const HermitianOperator& hamiltonian, double beta);

// Logarithmic mean of exp(log_x), exp(log_y); Taylor expansion near the diagonal.
double log_mean_from_logs(double log_x, double log_y);
// (x + y)/2 - L(x, y) evaluated without cancellation.
double arith_minus_log_from_logs(double log_x, double log_y);

// J_pi(A) = int_0^1 pi^s A pi^(1-s) ds
HermitianOperator log_mean_apply(const GibbsState& pi, const HermitianOperator& a);
// S_pi(A) = {A, pi}/2
HermitianOperator arith_mean_apply(const GibbsState& pi, const HermitianOperator& a);

// I_pi(A, B) = -1/2 int_0^1 tr([A, pi^s][B, pi^(1-s)]) ds = tr(A (S - J)(B)).
// Symmetric, bilinear, I(A, A) >= 0; vanishes whenever [A, pi] = 0.
double skew_covariance(const GibbsState& pi, const HermitianOperator& a, const HermitianOperator& b);

// A - tr(pi A) 1
HermitianOperator delta_centered(const GibbsState& pi, const HermitianOperator& a);

} // namespace opalg
} // namespace qtur
