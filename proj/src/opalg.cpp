#include "qtur/opalg.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

#include <Eigen/Eigenvalues>

#include "qtur/errors.hpp"

namespace qtur::opalg {

// ---------------------------------------------------------------------------
// HermitianOperator

struct HermitianOperator::State {
    Matrix entries;
    std::once_flag once;
    Spectrum spectrum;
};

namespace {

Spectrum decompose(const Matrix& a) {
    const auto n = a.rows();
    bool diagonal = true;
    for (Eigen::Index j = 0; j < n && diagonal; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            if (i != j && a(i, j) != cplx(0.0, 0.0)) {
                diagonal = false;
                break;
            }
        }
    }

    Spectrum s;
    if (diagonal) {
        std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) {
            return a(x, x).real() < a(y, y).real();
        });
        s.values.resize(n);
        s.vectors = Matrix::Zero(n, n);
        s.identity_basis = true;
        for (Eigen::Index k = 0; k < n; ++k) {
            const auto src = order[static_cast<std::size_t>(k)];
            s.values(k) = a(src, src).real();
            s.vectors(src, k) = 1.0;
            if (src != k) s.identity_basis = false;
        }
        return s;
    }

    Eigen::SelfAdjointEigenSolver<Matrix> solver(a);
    if (solver.info() != Eigen::Success) {
        throw NumericError("HermitianOperator: eigendecomposition failed");
    }
    s.values = solver.eigenvalues();
    s.vectors = solver.eigenvectors();
    return s;
}

} // namespace

HermitianOperator::HermitianOperator(std::shared_ptr<State> state) : state_(std::move(state)) {}

HermitianOperator::HermitianOperator(const Matrix& entries, double tolerance) {
    if (entries.rows() != entries.cols() || entries.rows() == 0) {
        throw DimensionError("HermitianOperator: matrix must be square and non-empty");
    }
    if (!entries.allFinite()) {
        throw ValidationError("HermitianOperator: non-finite entries");
    }
    const double scale = std::max(1.0, entries.cwiseAbs().maxCoeff());
    const double asym = (entries - entries.adjoint()).cwiseAbs().maxCoeff();
    if (asym > tolerance * scale) {
        std::ostringstream msg;
        msg << "HermitianOperator: matrix is not Hermitian (max |A - A^dagger| = " << asym << ")";
        throw ValidationError(msg.str());
    }
    state_ = std::make_shared<State>();
    state_->entries = 0.5 * (entries + entries.adjoint());
}

HermitianOperator HermitianOperator::zero(std::size_t dim) {
    const auto n = static_cast<Eigen::Index>(dim);
    return HermitianOperator(Matrix::Zero(n, n));
}

HermitianOperator HermitianOperator::identity(std::size_t dim) {
    const auto n = static_cast<Eigen::Index>(dim);
    return HermitianOperator(Matrix::Identity(n, n));
}

HermitianOperator HermitianOperator::diagonal(const RealVector& diag) {
    return HermitianOperator(Matrix(diag.cast<cplx>().asDiagonal()));
}

HermitianOperator HermitianOperator::from_spectrum(const RealVector& values, const Matrix& vectors) {
    if (vectors.rows() != vectors.cols() || vectors.rows() != values.size()) {
        throw DimensionError("HermitianOperator::from_spectrum: shape mismatch");
    }
    auto state = std::make_shared<State>();
    bool identity = vectors.isIdentity(0.0);
    if (identity) {
        state->entries = values.cast<cplx>().asDiagonal();
    } else {
        Matrix m = vectors * values.cast<cplx>().asDiagonal() * vectors.adjoint();
        state->entries = 0.5 * (m + m.adjoint());
    }
    bool sorted = std::is_sorted(values.data(), values.data() + values.size());
    if (sorted) {
        std::call_once(state->once, [&] {
            state->spectrum.values = values;
            state->spectrum.vectors = vectors;
            state->spectrum.identity_basis = identity;
        });
    }
    return HermitianOperator(std::move(state));
}

std::size_t HermitianOperator::dim() const { return static_cast<std::size_t>(state_->entries.rows()); }

const Matrix& HermitianOperator::matrix() const { return state_->entries; }

const Spectrum& HermitianOperator::spectrum() const {
    std::call_once(state_->once, [this] { state_->spectrum = decompose(state_->entries); });
    return state_->spectrum;
}

double HermitianOperator::trace() const { return state_->entries.trace().real(); }

double HermitianOperator::frobenius_norm() const { return state_->entries.norm(); }

bool HermitianOperator::is_zero() const { return state_->entries.isZero(0.0); }

HermitianOperator HermitianOperator::operator+(const HermitianOperator& other) const {
    if (other.dim() != dim()) throw DimensionError("HermitianOperator: dimension mismatch in +");
    return HermitianOperator(Matrix(matrix() + other.matrix()));
}

HermitianOperator HermitianOperator::operator-(const HermitianOperator& other) const {
    if (other.dim() != dim()) throw DimensionError("HermitianOperator: dimension mismatch in -");
    return HermitianOperator(Matrix(matrix() - other.matrix()));
}

HermitianOperator HermitianOperator::operator*(double scale) const {
    return HermitianOperator(Matrix(matrix() * scale));
}

double trace_product(const Matrix& a, const Matrix& b) {
    return a.transpose().cwiseProduct(b).sum().real();
}

double trace_product(const HermitianOperator& a, const HermitianOperator& b) {
    if (a.dim() != b.dim()) throw DimensionError("trace_product: dimension mismatch");
    return trace_product(a.matrix(), b.matrix());
}

// ---------------------------------------------------------------------------
// Mean kernels

double log_mean_from_logs(double log_x, double log_y) {
    const double diff = log_x - log_y;
    const double c = 0.5 * (log_x + log_y);
    const double h = 0.5 * diff;
    if (std::abs(diff) < 1e-8) {
        const double h2 = h * h;
        return std::exp(c) * (1.0 + h2 / 6.0 + h2 * h2 / 120.0);
    }
    if (std::abs(diff) < 1.0) {
        return std::exp(c) * std::sinh(h) / h;
    }
    return (std::exp(log_x) - std::exp(log_y)) / diff;
}

double arith_minus_log_from_logs(double log_x, double log_y) {
    const double h = 0.5 * (log_x - log_y);
    if (std::abs(h) < 1.0) {
        // cosh h - sinh(h)/h = sum_k 2k h^(2k) / (2k+1)!
        const double h2 = h * h;
        double term = 1.0; // h^(2k) / (2k+1)!, starts at k = 0
        double sum = 0.0;
        for (int k = 1; k <= 10; ++k) {
            term *= h2 / static_cast<double>((2 * k) * (2 * k + 1));
            sum += 2.0 * k * term;
        }
        return std::exp(0.5 * (log_x + log_y)) * sum;
    }
    const double x = std::exp(log_x);
    const double y = std::exp(log_y);
    return 0.5 * (x + y) - (x - y) / (log_x - log_y);
}

// ---------------------------------------------------------------------------
// GibbsState

struct GibbsState::State {
    double beta{};
    double log_z{};
    RealVector energies;
    Matrix basis;
    bool identity{false};
    RealVector log_pop;
    RealVector pop;
    std::optional<HermitianOperator> pi;

    std::once_flag weights_once;
    RealMatrix log_w;
    RealMatrix arith_w;
    RealMatrix skew_w;
};

GibbsState::GibbsState(const HermitianOperator& hamiltonian, double beta) : state_(std::make_shared<State>()) {
    if (!std::isfinite(beta) || beta <= 0.0) {
        throw DomainError("gibbs_state: beta must be finite and positive");
    }
    const Spectrum& spec = hamiltonian.spectrum();
    auto& s = *state_;
    s.beta = beta;
    s.energies = spec.values;
    s.basis = spec.vectors;
    s.identity = spec.identity_basis;

    const auto n = spec.values.size();
    const double e_min = spec.values(0);
    RealVector w(n);
    for (Eigen::Index k = 0; k < n; ++k) w(k) = -beta * (spec.values(k) - e_min);
    double sum = 0.0;
    for (Eigen::Index k = n - 1; k >= 0; --k) sum += std::exp(w(k)); // small terms first
    const double log_sum = std::log(sum);

    s.log_pop = w.array() - log_sum;
    s.pop = s.log_pop.array().exp();
    s.log_z = -beta * e_min + log_sum;
    s.pi = HermitianOperator::from_spectrum(s.pop, s.basis);
}

GibbsState gibbs_state(const HermitianOperator& hamiltonian, double beta) { return GibbsState(hamiltonian, beta); }

std::size_t GibbsState::dim() const { return static_cast<std::size_t>(state_->pop.size()); }
double GibbsState::beta() const { return state_->beta; }
double GibbsState::log_partition() const { return state_->log_z; }
double GibbsState::free_energy() const { return -state_->log_z / state_->beta; }
const HermitianOperator& GibbsState::pi() const { return *state_->pi; }
const RealVector& GibbsState::populations() const { return state_->pop; }
const RealVector& GibbsState::log_populations() const { return state_->log_pop; }
const RealVector& GibbsState::energies() const { return state_->energies; }
const Matrix& GibbsState::basis() const { return state_->basis; }
bool GibbsState::identity_basis() const { return state_->identity; }

bool GibbsState::faithful() const { return state_->pop.minCoeff() >= kFaithfulFloor; }

void GibbsState::require_faithful() const {
    if (!faithful()) {
        std::ostringstream msg;
        msg << "GibbsState: state is not faithful at working precision (min population "
            << state_->pop.minCoeff() << " < " << kFaithfulFloor << ")";
        throw PreconditionError(msg.str());
    }
}

double GibbsState::expectation(const HermitianOperator& a) const {
    if (a.dim() != dim()) throw DimensionError("GibbsState::expectation: dimension mismatch");
    return trace_product(pi().matrix(), a.matrix());
}

Matrix GibbsState::to_eigenbasis(const Matrix& a) const {
    if (state_->identity) return a;
    return state_->basis.adjoint() * a * state_->basis;
}

Matrix GibbsState::from_eigenbasis(const Matrix& a) const {
    if (state_->identity) return a;
    return state_->basis * a * state_->basis.adjoint();
}

const RealMatrix& GibbsState::log_mean_weights() const {
    auto& s = *state_;
    std::call_once(s.weights_once, [&s] {
        const auto n = s.pop.size();
        s.log_w.resize(n, n);
        s.arith_w.resize(n, n);
        s.skew_w.resize(n, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            for (Eigen::Index i = 0; i < n; ++i) {
                s.log_w(i, j) = log_mean_from_logs(s.log_pop(i), s.log_pop(j));
                s.arith_w(i, j) = 0.5 * (s.pop(i) + s.pop(j));
                s.skew_w(i, j) = arith_minus_log_from_logs(s.log_pop(i), s.log_pop(j));
            }
        }
    });
    return s.log_w;
}

const RealMatrix& GibbsState::arith_mean_weights() const {
    log_mean_weights();
    return state_->arith_w;
}

const RealMatrix& GibbsState::skew_weights() const {
    log_mean_weights();
    return state_->skew_w;
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void check_same_dim(const GibbsState& pi, const HermitianOperator& a, const char* where) {
    if (pi.dim() != a.dim()) {
        std::ostringstream msg;
        msg << where << ": dimension mismatch (" << pi.dim() << " vs " << a.dim() << ")";
        throw DimensionError(msg.str());
    }
}

HermitianOperator apply_kernel(const GibbsState& pi, const HermitianOperator& a, const RealMatrix& w) {
    Matrix m = pi.to_eigenbasis(a.matrix()).cwiseProduct(w.cast<cplx>());
    return HermitianOperator(pi.from_eigenbasis(m));
}

} // namespace

HermitianOperator log_mean_apply(const GibbsState& pi, const HermitianOperator& a) {
    check_same_dim(pi, a, "log_mean_apply");
    pi.require_faithful();
    return apply_kernel(pi, a, pi.log_mean_weights());
}

HermitianOperator arith_mean_apply(const GibbsState& pi, const HermitianOperator& a) {
    check_same_dim(pi, a, "arith_mean_apply");
    return apply_kernel(pi, a, pi.arith_mean_weights());
}

double skew_covariance(const GibbsState& pi, const HermitianOperator& a, const HermitianOperator& b) {
    check_same_dim(pi, a, "skew_covariance");
    check_same_dim(pi, b, "skew_covariance");
    pi.require_faithful();
    const Matrix at = pi.to_eigenbasis(a.matrix());
    const Matrix bt = pi.to_eigenbasis(b.matrix());
    // Re(A_ij conj(B_ij)) weighted by the (symmetric) skew kernel.
    return (at.cwiseProduct(bt.conjugate())).real().cwiseProduct(pi.skew_weights()).sum();
}

HermitianOperator delta_centered(const GibbsState& pi, const HermitianOperator& a) {
    check_same_dim(pi, a, "delta_centered");
    const double mean = pi.expectation(a);
    const auto n = static_cast<Eigen::Index>(a.dim());
    return HermitianOperator(Matrix(a.matrix() - mean * Matrix::Identity(n, n)));
}

} // namespace qtur::opalg
