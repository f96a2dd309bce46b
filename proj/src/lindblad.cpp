#include "qtur/lindblad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/SparseLU>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include "qtur/errors.hpp"

namespace qtur::lindblad {

namespace {

using Index = Eigen::Index;
using Triplet = Eigen::Triplet<cplx, int>;
using SparseSolver = Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>>;

Index sq(Index d) { return d * d; }

struct DisjointSets {
    std::vector<int> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) {
        while (parent[static_cast<std::size_t>(x)] != x) {
            auto& p = parent[static_cast<std::size_t>(x)];
            p = parent[static_cast<std::size_t>(p)];
            x = p;
        }
        return x;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    }
};

// Entries with |x| <= threshold are treated as structural zeros.
std::vector<Triplet> nonzeros(const Matrix& m, double threshold) {
    std::vector<Triplet> out;
    for (Index j = 0; j < m.cols(); ++j) {
        for (Index i = 0; i < m.rows(); ++i) {
            if (std::abs(m(i, j)) > threshold) out.emplace_back(int(i), int(j), m(i, j));
        }
    }
    return out;
}

double prune_threshold(const Matrix& m, double relative) {
    if (relative <= 0.0 || m.size() == 0) return 0.0;
    return relative * m.cwiseAbs().maxCoeff();
}

// Column-stacked matrix of X -> i[H, X] + sum_k rate_k (J^dag X J - {J^dag J, X}/2).
SparseMatrix build_superoperator(const Matrix& h, const std::vector<Jump>& jumps, double relative_prune) {
    const Index d = h.rows();
    Matrix g = Matrix::Zero(d, d);
    for (const auto& jump : jumps) {
        if (jump.rate > 0.0) g += jump.rate * (jump.op.adjoint() * jump.op);
    }
    const cplx i_unit(0.0, 1.0);
    const Matrix left = i_unit * h - 0.5 * g;   // acts as left * X
    const Matrix right = -i_unit * h - 0.5 * g; // acts as X * right

    std::vector<Triplet> trip;
    for (const auto& t : nonzeros(left, prune_threshold(left, relative_prune))) {
        for (Index j = 0; j < d; ++j) {
            trip.emplace_back(int(t.row() + d * j), int(t.col() + d * j), t.value());
        }
    }
    for (const auto& t : nonzeros(right, prune_threshold(right, relative_prune))) {
        const Index l = t.row();
        const Index j = t.col();
        for (Index i = 0; i < d; ++i) {
            trip.emplace_back(int(i + d * j), int(i + d * l), t.value());
        }
    }
    for (const auto& jump : jumps) {
        if (jump.rate <= 0.0) continue;
        const auto nz = nonzeros(jump.op, prune_threshold(jump.op, relative_prune));
        // (J^dag X J)_{ij} = sum_{kl} conj(J_ki) X_kl J_lj
        for (const auto& a : nz) {
            const Index k = a.row();
            const Index i = a.col();
            const cplx ca = jump.rate * std::conj(a.value());
            for (const auto& b : nz) {
                trip.emplace_back(int(i + d * b.col()), int(k + d * b.row()), ca * b.value());
            }
        }
    }
    SparseMatrix s(int(sq(d)), int(sq(d)));
    s.setFromTriplets(trip.begin(), trip.end());
    s.prune([](Index, Index, const cplx& v) { return v != cplx(0.0, 0.0); });
    s.makeCompressed();
    return s;
}

Matrix apply_heisenberg(const Matrix& h, const std::vector<Jump>& jumps, const Matrix& x) {
    const cplx i_unit(0.0, 1.0);
    Matrix out = i_unit * (h * x - x * h);
    for (const auto& jump : jumps) {
        if (jump.rate <= 0.0) continue;
        const Matrix jd = jump.op.adjoint();
        const Matrix jdj = jd * jump.op;
        out += jump.rate * (jd * x * jump.op - 0.5 * (jdj * x + x * jdj));
    }
    return out;
}

Matrix apply_schrodinger(const Matrix& h, const std::vector<Jump>& jumps, const Matrix& rho) {
    const cplx i_unit(0.0, 1.0);
    Matrix out = -i_unit * (h * rho - rho * h);
    for (const auto& jump : jumps) {
        if (jump.rate <= 0.0) continue;
        const Matrix jd = jump.op.adjoint();
        const Matrix jdj = jd * jump.op;
        out += jump.rate * (jump.op * rho * jd - 0.5 * (jdj * rho + rho * jdj));
    }
    return out;
}

void validate_jumps(const std::vector<Jump>& jumps, std::size_t dim) {
    for (const auto& jump : jumps) {
        if (jump.op.rows() != Index(dim) || jump.op.cols() != Index(dim)) {
            throw DimensionError("Lindbladian: jump operator dimension does not match the Hamiltonian");
        }
        if (!std::isfinite(jump.rate) || jump.rate < 0.0) {
            throw ValidationError("Lindbladian: jump rates must be finite and non-negative");
        }
        if (!jump.op.allFinite()) throw ValidationError("Lindbladian: non-finite jump operator entries");
    }
}

} // namespace

// ---------------------------------------------------------------------------

ComplexVector vec(const Matrix& a) { return Eigen::Map<const ComplexVector>(a.data(), a.size()); }

Matrix unvec(const ComplexVector& v, std::size_t dim) {
    const auto d = Index(dim);
    if (v.size() != sq(d)) throw DimensionError("unvec: vector length is not dim^2");
    return Eigen::Map<const Matrix>(v.data(), d, d);
}

Matrix left_right(const Matrix& x, const Matrix& y) {
    return Eigen::kroneckerProduct(y.transpose(), x).eval();
}

Matrix annihilation(std::size_t dim) {
    const auto d = Index(dim);
    Matrix a = Matrix::Zero(d, d);
    for (Index n = 1; n < d; ++n) a(n - 1, n) = std::sqrt(double(n));
    return a;
}

// ---------------------------------------------------------------------------

struct Lindbladian::Impl {
    struct Block {
        std::vector<int> members; // ascending global vec indices
        bool kernel{false};       // contains the population indices (k, k)
        std::once_flag once;
        SparseMatrix local;       // symmetrized block (bordered when kernel)
        std::unique_ptr<SparseSolver> solver;
        bool ok{false};
    };

    HermitianOperator hamiltonian;
    double beta{};
    GibbsState pi;
    std::vector<Jump> frame_jumps;
    std::vector<Jump> lab_jumps;
    Index d{};

    SparseMatrix frame;            // L* in the eigenframe
    RealVector scale;              // D_(i,j) = (p_i p_j)^(1/4), ones when not faithful
    std::vector<int> block_of;     // global index -> block
    std::vector<int> local_of;     // global index -> position inside block
    std::vector<std::unique_ptr<Block>> blocks;
    int populated_blocks{0};       // blocks holding at least one (k, k)

    mutable std::once_flag lab_once;
    mutable SparseMatrix lab;
    mutable std::once_flag spectrum_once;
    mutable ComplexVector eigenvalues;

    Impl(HermitianOperator h, double b, std::vector<Jump> frame_j, std::vector<Jump> lab_j, double prune)
        : hamiltonian(std::move(h)), beta(b), pi(hamiltonian, beta), frame_jumps(std::move(frame_j)),
          lab_jumps(std::move(lab_j)), d(Index(hamiltonian.dim())) {
        const Matrix h_frame = pi.energies().cast<cplx>().asDiagonal();
        frame = build_superoperator(h_frame, frame_jumps, prune);

        const Index n = sq(d);
        scale = RealVector::Ones(n);
        if (pi.faithful()) {
            const RealVector& lp = pi.log_populations();
            for (Index j = 0; j < d; ++j) {
                for (Index i = 0; i < d; ++i) scale(i + d * j) = std::exp(0.25 * (lp(i) + lp(j)));
            }
        }

        DisjointSets sets{std::size_t(n)};
        for (int k = 0; k < frame.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(frame, k); it; ++it) sets.unite(int(it.row()), int(it.col()));
        }
        block_of.assign(std::size_t(n), -1);
        local_of.assign(std::size_t(n), -1);
        std::vector<int> root_to_block(std::size_t(n), -1);
        for (int g = 0; g < int(n); ++g) {
            const int r = sets.find(g);
            auto& b = root_to_block[std::size_t(r)];
            if (b < 0) {
                b = int(blocks.size());
                blocks.push_back(std::make_unique<Block>());
            }
            auto& blk = *blocks[std::size_t(b)];
            block_of[std::size_t(g)] = b;
            local_of[std::size_t(g)] = int(blk.members.size());
            blk.members.push_back(g);
        }
        for (Index k = 0; k < d; ++k) {
            auto& blk = *blocks[std::size_t(block_of[std::size_t(k + d * k)])];
            if (!blk.kernel) {
                blk.kernel = true;
                ++populated_blocks;
            }
        }
    }

    // D K D^-1 restricted to block b, dense.
    Matrix dense_block(const Block& blk) const {
        const auto m = Index(blk.members.size());
        Matrix out = Matrix::Zero(m, m);
        for (Index c = 0; c < m; ++c) {
            const int gc = blk.members[std::size_t(c)];
            for (SparseMatrix::InnerIterator it(frame, gc); it; ++it) {
                const int gr = int(it.row());
                out(local_of[std::size_t(gr)], c) = it.value() * scale(gr) / scale(gc);
            }
        }
        return out;
    }

    void factorize(Block& blk) const {
        const auto m = int(blk.members.size());
        const int size = blk.kernel ? m + 1 : m;
        std::vector<Triplet> trip;
        for (int c = 0; c < m; ++c) {
            const int gc = blk.members[std::size_t(c)];
            for (SparseMatrix::InnerIterator it(frame, gc); it; ++it) {
                const int gr = int(it.row());
                trip.emplace_back(local_of[std::size_t(gr)], c, it.value() * scale(gr) / scale(gc));
            }
        }
        if (blk.kernel) {
            // Border with the normalized stationary vector D vec(1) = (p_k^(1/2)) on (k, k).
            const RealVector& pop = pi.populations();
            for (Index k = 0; k < d; ++k) {
                const int lk = local_of[std::size_t(k + d * k)];
                const double u = std::sqrt(pop(k));
                trip.emplace_back(lk, m, u);
                trip.emplace_back(m, lk, u);
            }
        }
        blk.local.resize(size, size);
        blk.local.setFromTriplets(trip.begin(), trip.end());
        blk.local.makeCompressed();
        blk.solver = std::make_unique<SparseSolver>();
        blk.solver->analyzePattern(blk.local);
        blk.solver->factorize(blk.local);
        blk.ok = blk.solver->info() == Eigen::Success;
    }

    const Block& factorized(int b) const {
        auto& blk = *blocks[std::size_t(b)];
        std::call_once(blk.once, [&] { factorize(blk); });
        return blk;
    }

    // Blocks on which x has support.
    std::vector<int> touched_blocks(const ComplexVector& x) const {
        std::vector<char> hit(blocks.size(), 0);
        for (Index g = 0; g < x.size(); ++g) {
            if (x(g) != cplx(0.0, 0.0)) hit[std::size_t(block_of[std::size_t(g)])] = 1;
        }
        std::vector<int> out;
        for (std::size_t b = 0; b < hit.size(); ++b) {
            if (hit[b]) out.push_back(int(b));
        }
        return out;
    }

    ComplexVector gather(const Block& blk, const ComplexVector& x) const {
        ComplexVector out(Index(blk.members.size()));
        for (std::size_t l = 0; l < blk.members.size(); ++l) {
            const int g = blk.members[l];
            out(Index(l)) = x(g) * scale(g);
        }
        return out;
    }

    void scatter(const Block& blk, const ComplexVector& local, ComplexVector& y) const {
        for (std::size_t l = 0; l < blk.members.size(); ++l) {
            const int g = blk.members[l];
            y(g) = local(Index(l)) / scale(g);
        }
    }
};

Lindbladian::Lindbladian(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}

Lindbladian::Lindbladian(HermitianOperator hamiltonian, double beta, std::vector<Jump> jumps) {
    validate_jumps(jumps, hamiltonian.dim());
    const GibbsState probe(hamiltonian, beta);
    std::vector<Jump> frame_jumps;
    double prune = 0.0;
    if (probe.identity_basis()) {
        frame_jumps = jumps;
    } else {
        prune = 1e-14;
        frame_jumps.reserve(jumps.size());
        for (const auto& j : jumps) frame_jumps.push_back({probe.to_eigenbasis(j.op), j.rate});
    }
    impl_ = std::make_shared<Impl>(std::move(hamiltonian), beta, std::move(frame_jumps), std::move(jumps), prune);
}

Lindbladian Lindbladian::in_eigenbasis(HermitianOperator hamiltonian, double beta, std::vector<Jump> jumps) {
    validate_jumps(jumps, hamiltonian.dim());
    const GibbsState probe(hamiltonian, beta);
    std::vector<Jump> lab_jumps;
    if (probe.identity_basis()) {
        lab_jumps = jumps;
    } else {
        lab_jumps.reserve(jumps.size());
        for (const auto& j : jumps) lab_jumps.push_back({probe.from_eigenbasis(j.op), j.rate});
    }
    return Lindbladian(
        std::make_shared<Impl>(std::move(hamiltonian), beta, std::move(jumps), std::move(lab_jumps), 0.0));
}

std::size_t Lindbladian::dim() const { return std::size_t(impl_->d); }
const HermitianOperator& Lindbladian::hamiltonian() const { return impl_->hamiltonian; }
double Lindbladian::beta() const { return impl_->beta; }
const GibbsState& Lindbladian::stationary() const { return impl_->pi; }
const std::vector<Jump>& Lindbladian::jumps() const { return impl_->lab_jumps; }

Matrix Lindbladian::heisenberg(const Matrix& x) const {
    if (x.rows() != impl_->d || x.cols() != impl_->d) throw DimensionError("Lindbladian::heisenberg: dimension mismatch");
    return apply_heisenberg(impl_->hamiltonian.matrix(), impl_->lab_jumps, x);
}

Matrix Lindbladian::schrodinger(const Matrix& rho) const {
    if (rho.rows() != impl_->d || rho.cols() != impl_->d) {
        throw DimensionError("Lindbladian::schrodinger: dimension mismatch");
    }
    return apply_schrodinger(impl_->hamiltonian.matrix(), impl_->lab_jumps, rho);
}

const SparseMatrix& Lindbladian::vectorized_eigenframe() const { return impl_->frame; }

const SparseMatrix& Lindbladian::vectorized() const {
    const auto& s = *impl_;
    if (s.pi.identity_basis()) return s.frame;
    std::call_once(s.lab_once, [&s] { s.lab = build_superoperator(s.hamiltonian.matrix(), s.lab_jumps, 0.0); });
    return s.lab;
}

std::size_t Lindbladian::block_count() const { return impl_->blocks.size(); }

const ComplexVector& Lindbladian::spectrum() const {
    const auto& s = *impl_;
    std::call_once(s.spectrum_once, [&s] {
        s.eigenvalues.resize(sq(s.d));
        Index pos = 0;
        for (const auto& blk : s.blocks) {
            const Matrix k = s.dense_block(*blk);
            if (k.rows() == 1) {
                s.eigenvalues(pos++) = k(0, 0);
                continue;
            }
            Eigen::ComplexEigenSolver<Matrix> solver(k, false);
            if (solver.info() != Eigen::Success) throw NumericError("Lindbladian::spectrum: eigensolver failed");
            s.eigenvalues.segment(pos, k.rows()) = solver.eigenvalues();
            pos += k.rows();
        }
        std::sort(s.eigenvalues.data(), s.eigenvalues.data() + s.eigenvalues.size(),
                  [](const cplx& a, const cplx& b) {
                      return a.real() != b.real() ? a.real() > b.real() : a.imag() < b.imag();
                  });
    });
    return s.eigenvalues;
}

double Lindbladian::stationarity_residual() const {
    // L(pi)_(l,k) = sum_i p_i L*_{(i,i),(k,l)}
    const auto& s = *impl_;
    ComplexVector u = ComplexVector::Zero(sq(s.d));
    for (Index i = 0; i < s.d; ++i) u(i + s.d * i) = s.pi.populations()(i);
    const ComplexVector r = s.frame.transpose() * u;
    return r.norm();
}

double Lindbladian::trace_residual() const {
    const auto& s = *impl_;
    const ComplexVector one = vec(Matrix::Identity(s.d, s.d));
    return (s.frame * one).norm();
}

double Lindbladian::covariance_residual() const {
    const auto& s = *impl_;
    const RealVector& e = s.pi.energies();
    const double norm = s.frame.norm();
    if (norm == 0.0) return 0.0;
    double acc = 0.0;
    for (int c = 0; c < s.frame.outerSize(); ++c) {
        const double hc = e(c % s.d) - e(c / s.d);
        for (SparseMatrix::InnerIterator it(s.frame, c); it; ++it) {
            const int r = int(it.row());
            const double hr = e(r % s.d) - e(r / s.d);
            acc += std::norm((hr - hc) * it.value());
        }
    }
    return std::sqrt(acc) / norm;
}

Lindbladian Lindbladian::with_rates_scaled(double factor) const {
    if (!std::isfinite(factor) || factor < 0.0) throw ValidationError("with_rates_scaled: factor must be >= 0");
    auto frame_jumps = impl_->frame_jumps;
    auto lab_jumps = impl_->lab_jumps;
    for (auto& j : frame_jumps) j.rate *= factor;
    for (auto& j : lab_jumps) j.rate *= factor;
    const double prune = impl_->pi.identity_basis() ? 0.0 : 1e-14;
    return Lindbladian(std::make_shared<Impl>(impl_->hamiltonian, impl_->beta, std::move(frame_jumps),
                                              std::move(lab_jumps), prune));
}

// ---------------------------------------------------------------------------
// Builders

double bose_occupation(double beta_omega) {
    if (!(beta_omega > 0.0)) throw DomainError("bose_occupation: beta*omega must be positive");
    return 1.0 / std::expm1(beta_omega);
}

std::size_t suggested_oscillator_dim(double beta_omega, double tail_tolerance) {
    if (!(beta_omega > 0.0) || !(tail_tolerance > 0.0 && tail_tolerance < 1.0)) {
        throw DomainError("suggested_oscillator_dim: need beta*omega > 0 and tolerance in (0, 1)");
    }
    const double needed = -std::log(tail_tolerance) / beta_omega;
    std::size_t dim = 30;
    while (double(dim) <= needed) dim += 10;
    return dim;
}

Lindbladian build_oscillator(double omega, double temperature, double gamma, std::size_t dim,
                             double tail_tolerance) {
    if (!(omega > 0.0) || !std::isfinite(omega)) throw DomainError("build_oscillator: omega must be positive");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw DomainError("build_oscillator: temperature must be positive");
    }
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw DomainError("build_oscillator: Gamma must be positive");
    if (dim < 2) throw DimensionError("build_oscillator: dim must be at least 2");

    const double beta = 1.0 / temperature;
    const double bw = beta * omega;
    const double tail = std::exp(-bw * double(dim));
    if (!(tail < tail_tolerance)) {
        const auto suggested = suggested_oscillator_dim(bw, tail_tolerance);
        std::ostringstream msg;
        msg << "build_oscillator: thermal tail exp(-beta omega dim) = " << tail << " >= " << tail_tolerance
            << " at dim " << dim << "; use dim >= " << suggested;
        throw TruncationError(msg.str(), suggested);
    }

    const double n_bose = bose_occupation(bw);
    RealVector energies = RealVector::Zero(Index(dim));
    for (Index n = 0; n < Index(dim); ++n) energies(n) = omega * (double(n) + 0.5);
    const Matrix a = annihilation(dim);
    std::vector<Jump> jumps{{a, gamma * (n_bose + 1.0)}, {Matrix(a.adjoint()), gamma * n_bose}};
    return Lindbladian::in_eigenbasis(HermitianOperator::diagonal(energies), beta, std::move(jumps));
}

Lindbladian build_detailed_balanced(const HermitianOperator& hamiltonian, double beta,
                                    const std::vector<JumpSpec>& specs) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw DomainError("build_detailed_balanced: beta must be positive");
    const auto& spec = hamiltonian.spectrum();
    const auto d = std::size_t(spec.values.size());
    const double e_scale = std::max(1.0, spec.values.cwiseAbs().maxCoeff());
    for (Index k = 1; k < Index(d); ++k) {
        if (spec.values(k) - spec.values(k - 1) <= 1e-9 * e_scale) {
            throw ValidationError("build_detailed_balanced: degenerate Hamiltonian spectra are not supported");
        }
    }

    DisjointSets levels(d);
    std::vector<Jump> jumps;
    for (const auto& js : specs) {
        if (js.lower >= js.upper || js.upper >= d) {
            throw ValidationError("build_detailed_balanced: JumpSpec needs lower < upper < dim");
        }
        if (!std::isfinite(js.rate) || js.rate < 0.0) {
            throw ValidationError("build_detailed_balanced: JumpSpec rate must be finite and non-negative");
        }
        const double w = spec.values(Index(js.upper)) - spec.values(Index(js.lower));
        double up = 0.0;
        double down = 0.0;
        if (js.convention == RateConvention::kUpward) {
            up = js.rate;
            down = js.rate * std::exp(beta * w);
        } else {
            const double n = bose_occupation(beta * w);
            down = js.rate * (n + 1.0);
            up = js.rate * n;
        }
        if (!std::isfinite(down)) throw DomainError("build_detailed_balanced: downward rate overflows");
        if (js.rate > 0.0) levels.unite(int(js.lower), int(js.upper));

        Matrix lower_op = Matrix::Zero(Index(d), Index(d));
        lower_op(Index(js.lower), Index(js.upper)) = 1.0;
        jumps.push_back({lower_op, down});
        jumps.push_back({Matrix(lower_op.transpose()), up});
    }
    for (std::size_t k = 1; k < d; ++k) {
        if (levels.find(int(k)) != levels.find(0)) {
            throw SteadyStateError("build_detailed_balanced: transition graph is disconnected; steady state not unique");
        }
    }
    return Lindbladian::in_eigenbasis(hamiltonian, beta, std::move(jumps));
}

// ---------------------------------------------------------------------------
// Analysis

double detailed_balance_residual(const Lindbladian& generator, double s) {
    if (!(s >= 0.0 && s <= 1.0)) throw DomainError("detailed_balance_residual: s must lie in [0, 1]");
    const auto& impl = *generator.impl_;
    impl.pi.require_faithful();
    const Index d = impl.d;
    const RealVector& lp = impl.pi.log_populations();
    const RealVector& e = impl.pi.energies();
    const SparseMatrix& lstar = impl.frame;
    const double norm = lstar.norm();
    if (norm == 0.0) return 0.0;

    // tr(pi^s A^dag pi^(1-s) L*(B)) = tr(pi^s L~(A)^dag pi^(1-s) B) with pi diagonal gives
    // L~_{(e,f),(a,b)} = w_ab conj(L*_{(a,b),(e,f)}) / w_ef,  log w_ab = (1-s) lp_a + s lp_b.
    auto log_w = [&](int g) { return (1.0 - s) * lp(g % d) + s * lp(g / d); };
    std::vector<Triplet> trip;
    trip.reserve(std::size_t(lstar.nonZeros()) * 2 + std::size_t(sq(d)));
    for (int c = 0; c < lstar.outerSize(); ++c) {
        for (SparseMatrix::InnerIterator it(lstar, c); it; ++it) {
            const int r = int(it.row());
            const double ratio = std::exp(log_w(r) - log_w(c));
            trip.emplace_back(c, r, ratio * std::conj(it.value()));
            trip.emplace_back(r, c, -it.value());
        }
    }
    // + 2 Hsup, Hsup_{(a,b),(a,b)} = i (E_a - E_b)
    for (Index b = 0; b < d; ++b) {
        for (Index a = 0; a < d; ++a) {
            trip.emplace_back(int(a + d * b), int(a + d * b), cplx(0.0, 2.0 * (e(a) - e(b))));
        }
    }
    SparseMatrix diff(int(sq(d)), int(sq(d)));
    diff.setFromTriplets(trip.begin(), trip.end());
    return diff.norm() / norm;
}

HermitianOperator heisenberg_propagate(const Lindbladian& generator, const HermitianOperator& a, double theta) {
    const auto& impl = *generator.impl_;
    if (a.dim() != std::size_t(impl.d)) throw DimensionError("heisenberg_propagate: dimension mismatch");
    if (!std::isfinite(theta)) throw DomainError("heisenberg_propagate: theta must be finite");
    if (theta == 0.0) return a;
    const ComplexVector x = vec(impl.pi.to_eigenbasis(a.matrix()));
    ComplexVector y = ComplexVector::Zero(x.size());
    for (int b : impl.touched_blocks(x)) {
        const auto& blk = *impl.blocks[std::size_t(b)];
        const Matrix k = impl.dense_block(blk);
        const Matrix propagator = (theta * k).exp();
        impl.scatter(blk, propagator * impl.gather(blk, x), y);
    }
    const Matrix out = impl.pi.from_eigenbasis(unvec(y, std::size_t(impl.d)));
    return HermitianOperator(out, 1e-9);
}

double spectral_gap(const Lindbladian& generator) {
    const ComplexVector& ev = generator.spectrum();
    std::size_t kernel = 0;
    double gap = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < ev.size(); ++k) {
        if (std::abs(ev(k)) < 1e-9) {
            ++kernel;
        } else {
            gap = std::min(gap, std::abs(ev(k).real()));
        }
    }
    if (kernel != 1) {
        std::ostringstream msg;
        msg << "spectral_gap: " << kernel << " eigenvalues within 1e-9 of zero; steady state not unique";
        throw SteadyStateError(msg.str());
    }
    if (!std::isfinite(gap)) throw SteadyStateError("spectral_gap: generator has no decaying modes");
    if (gap < 1e-12) throw NumericError("spectral_gap: gap below 1e-12 (undamped mode)");
    return gap;
}

HermitianOperator theta_integral(const Lindbladian& generator, const HermitianOperator& da, DrazinMethod method) {
    const auto& impl = *generator.impl_;
    const auto d = impl.d;
    if (da.dim() != std::size_t(d)) throw DimensionError("theta_integral: dimension mismatch");
    impl.pi.require_faithful();
    const double mean = impl.pi.expectation(da);
    if (std::abs(mean) > 1e-10 * std::max(1.0, da.frobenius_norm())) {
        std::ostringstream msg;
        msg << "theta_integral: input is not centered (tr(pi dA) = " << mean << ")";
        throw PreconditionError(msg.str());
    }
    if (impl.populated_blocks != 1) {
        throw SteadyStateError("theta_integral: population sector is disconnected; steady state not unique");
    }
    if (da.is_zero()) return HermitianOperator::zero(std::size_t(d));

    const ComplexVector x = vec(impl.pi.to_eigenbasis(da.matrix()));
    ComplexVector y = ComplexVector::Zero(x.size());
    const auto blocks = impl.touched_blocks(x);

    if (method == DrazinMethod::kFactorized) {
        for (int b : blocks) {
            const auto& blk = impl.factorized(b);
            if (!blk.ok) throw NumericError("theta_integral: sparse LU factorization failed (singular block)");
            const ComplexVector rhs = -impl.gather(blk, x);
            ComplexVector padded = rhs;
            if (blk.kernel) {
                padded.conservativeResize(rhs.size() + 1);
                padded(rhs.size()) = 0.0;
            }
            ComplexVector sol = blk.solver->solve(padded);
            if (blk.solver->info() != Eigen::Success || !sol.allFinite()) {
                throw NumericError("theta_integral: sparse LU solve failed");
            }
            const double bnorm = padded.norm();
            if (sol.norm() > 1e12 * bnorm) {
                throw NumericError("theta_integral: solution amplified beyond 1e12 (spectral gap below 1e-12)");
            }
            // Residual in the symmetrized (pi^(1/4)-weighted) coordinates.
            const double res = (blk.local * sol - padded).norm();
            if (res > 1e-8 * bnorm) {
                std::ostringstream msg;
                msg << "theta_integral: residual " << res / bnorm << " exceeds 1e-8";
                throw NumericError(msg.str());
            }
            impl.scatter(blk, sol.head(Index(blk.members.size())), y);
        }
    } else {
        const double gap = spectral_gap(generator);
        for (int b : blocks) {
            const auto& blk = *impl.blocks[std::size_t(b)];
            const Matrix k = impl.dense_block(blk);
            Eigen::ComplexEigenSolver<Matrix> solver(k, true);
            if (solver.info() != Eigen::Success) throw NumericError("theta_integral: eigensolver failed");
            const Matrix& v = solver.eigenvectors();
            const ComplexVector coeff = v.partialPivLu().solve(impl.gather(blk, x));
            ComplexVector scaled = ComplexVector::Zero(coeff.size());
            for (Index i = 0; i < coeff.size(); ++i) {
                const cplx lambda = solver.eigenvalues()(i);
                if (std::abs(lambda) > gap * 1e-6) scaled(i) = -coeff(i) / lambda;
            }
            impl.scatter(blk, v * scaled, y);
        }
    }

    const Matrix out = impl.pi.from_eigenbasis(unvec(y, std::size_t(d)));
    return HermitianOperator(out, 1e-9);
}

} // namespace qtur::lindblad
