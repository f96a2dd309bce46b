// lindblad.hpp: detailed-balanced GKLS generators, their vectorized form and the
// theta-integral (Drazin-type pseudoinverse) used by the slow-driving inner products.
//
// Vectorization is column-stacking throughout: vec(A)[i + d*j] = A(i, j), so that
// vec(X A Y) = (Y^T kron X) vec(A).

#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "qtur/opalg.hpp"

namespace qtur::lindblad {

using opalg::GibbsState;
using opalg::HermitianOperator;
using SparseMatrix = Eigen::SparseMatrix<cplx, Eigen::ColMajor, int>;
using ComplexVector = Eigen::VectorXcd;

ComplexVector vec(const Matrix& a);
Matrix unvec(const ComplexVector& v, std::size_t dim);
// Dense superoperator of A -> X A Y.
Matrix left_right(const Matrix& x, const Matrix& y);

// Truncated Fock-space annihilation operator, a|n> = sqrt(n)|n-1>.
Matrix annihilation(std::size_t dim);

// Dissipator term rate * (J^dagger X J - {J^dagger J, X}/2) in the Heisenberg picture.
struct Jump {
    Matrix op;
    double rate{0.0};
};

// How JumpSpec::rate is turned into the KMS pair for a transition of energy w > 0.
enum class RateConvention {
    kUpward, // gamma_up = rate, gamma_down = rate * exp(beta w)
    kBose,   // gamma_down = rate (N + 1), gamma_up = rate N, N = 1/(exp(beta w) - 1)
};

// Transition between eigenlevels lower < upper of H (ascending eigenvalue order).
struct JumpSpec {
    std::size_t lower{0};
    std::size_t upper{1};
    double rate{0.0};
    RateConvention convention{RateConvention::kUpward};
};

enum class DrazinMethod {
    kFactorized, // bordered sparse LU per Bohr block (default)
    kSpectral,   // eigendecomposition per block, small eigenvalues zeroed
};

// GKLS generator L* (Heisenberg picture) together with the reference Gibbs state
// exp(-beta H)/Z it is meant to leave invariant. Immutable; lazily built caches
// (vectorized matrix, block factorizations, spectrum) are initialized once and are
// safe to query from several threads.
class Lindbladian {
public:
    // Jumps given in the same basis as `hamiltonian`.
    Lindbladian(HermitianOperator hamiltonian, double beta, std::vector<Jump> jumps);

    // Jumps given in the eigenbasis of `hamiltonian` (ascending eigenvalues).
    static Lindbladian in_eigenbasis(HermitianOperator hamiltonian, double beta, std::vector<Jump> jumps);

    std::size_t dim() const;
    const HermitianOperator& hamiltonian() const;
    double beta() const;
    const GibbsState& stationary() const;
    const std::vector<Jump>& jumps() const;

    Matrix heisenberg(const Matrix& x) const;
    Matrix schrodinger(const Matrix& rho) const;

    const SparseMatrix& vectorized() const;            // L*, basis of hamiltonian()
    const SparseMatrix& vectorized_eigenframe() const; // L*, eigenbasis of hamiltonian()

    // Number of invariant blocks of the vectorized generator (connected components
    // of its sparsity graph, i.e. Bohr-frequency sectors for covariant generators).
    std::size_t block_count() const;

    // All eigenvalues of the vectorized generator.
    const ComplexVector& spectrum() const;

    double stationarity_residual() const; // ||L(pi)||_F
    double trace_residual() const;        // ||L*(1)||_F
    double covariance_residual() const;   // ||[Hsup, L*]||_F / ||L*||_F

    // Same Hamiltonian, every rate multiplied by `factor`.
    Lindbladian with_rates_scaled(double factor) const;

    struct Impl;

private:
    explicit Lindbladian(std::shared_ptr<const Impl> impl);
    std::shared_ptr<const Impl> impl_;

    friend double detailed_balance_residual(const Lindbladian&, double);
    friend HermitianOperator heisenberg_propagate(const Lindbladian&, const HermitianOperator&, double);
    friend HermitianOperator theta_integral(const Lindbladian&, const HermitianOperator&, DrazinMethod);
    friend double spectral_gap(const Lindbladian&);
};

// 1/(exp(x) - 1) via expm1; 0 once exp(x) overflows.
double bose_occupation(double beta_omega);

// Smallest dim in {30, 40, ...} whose thermal tail exp(-beta w dim) is below tolerance.
std::size_t suggested_oscillator_dim(double beta_omega, double tail_tolerance = 1e-12);

// Damped harmonic oscillator in the Fock basis of frequency omega:
// H = omega (a^dagger a + 1/2), jumps a at rate Gamma (N + 1) and a^dagger at Gamma N.
// Throws TruncationError (carrying a suggested dim) when exp(-omega/T * dim) >= tail_tolerance.
Lindbladian build_oscillator(double omega, double temperature, double gamma, std::size_t dim,
                             double tail_tolerance = 1e-12);

// Eigenbasis transition jumps |i><j| with KMS-ratio rates. Degenerate spectra and
// disconnected transition graphs are rejected.
Lindbladian build_detailed_balanced(const HermitianOperator& hamiltonian, double beta,
                                    const std::vector<JumpSpec>& specs);

// ||L~_s - (L* - 2 Hsup)||_F / ||L*||_F where L~_s is the s-dual of L* with respect to
// the stationary state. Zero for detailed-balanced generators.
double detailed_balance_residual(const Lindbladian& generator, double s);

// exp(theta L*)(A)
HermitianOperator heisenberg_propagate(const Lindbladian& generator, const HermitianOperator& a, double theta);

// int_0^inf exp(theta L*)(dA) dtheta for centered dA, i.e. the solution R of
// L*(R) = -dA with tr(pi R) = 0.
HermitianOperator theta_integral(const Lindbladian& generator, const HermitianOperator& da,
                                 DrazinMethod method = DrazinMethod::kFactorized);

// Smallest decay rate |Re lambda| over the non-stationary modes.
double spectral_gap(const Lindbladian& generator);

} // namespace qtur::lindblad
