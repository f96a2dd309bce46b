#include <cmath>
#include <random>

#include "doctest.h"

#include "../support/oracles.hpp"
#include "qtur/errors.hpp"
#include "qtur/opalg.hpp"

using namespace qtur;
using namespace qtur::opalg;

namespace {

Matrix sigma_x() {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 1) = m(1, 0) = 1.0;
    return m;
}

Matrix sigma_y() {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 1) = cplx(0, -1);
    m(1, 0) = cplx(0, 1);
    return m;
}

GibbsState qubit_three_to_one() {
    return gibbs_state(HermitianOperator::diagonal(RealVector::LinSpaced(2, 0.0, 1.0)), std::log(3.0));
}

// Random faithful state: random spectrum and basis, moderate beta.
GibbsState random_state(std::mt19937_64& rng, Eigen::Index d) {
    std::uniform_real_distribution<double> beta(0.1, 3.0);
    return gibbs_state(oracle::random_hermitian(rng, d), beta(rng));
}

} // namespace

TEST_CASE("hermitian operator symmetrizes small asymmetry and rejects large") {
    Matrix a = sigma_x();
    a(0, 1) += 1e-14;
    HermitianOperator h(a);
    CHECK((h.matrix() - h.matrix().adjoint()).norm() == 0.0);

    a(0, 1) += 1e-6;
    CHECK_THROWS_AS(HermitianOperator{a}, ValidationError);
    CHECK_THROWS_AS(HermitianOperator(Matrix::Zero(2, 3)), DimensionError);
}

TEST_CASE("spectrum reconstructs the operator") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto h = oracle::random_hermitian(rng, 5);
        const auto& s = h.spectrum();
        const Matrix rebuilt = s.vectors * s.values.cast<cplx>().asDiagonal() * s.vectors.adjoint();
        CHECK(oracle::rel_diff(rebuilt, h.matrix()) < 1e-10);
        for (Eigen::Index k = 1; k < s.values.size(); ++k) CHECK(s.values(k) >= s.values(k - 1));
    }
    RealVector unsorted(3);
    unsorted << 2.0, 0.0, 1.0;
    const auto d = HermitianOperator::diagonal(unsorted);
    CHECK_FALSE(d.spectrum().identity_basis);
    CHECK(d.spectrum().values(0) == 0.0);
    CHECK(d.spectrum().values(2) == 2.0);
}

TEST_CASE("gibbs state of a two-level system") {
    const auto pi = qubit_three_to_one();
    CHECK(pi.populations()(0) == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(pi.populations()(1) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(pi.log_partition() == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-14));
    CHECK(pi.free_energy() == doctest::Approx(-std::log(4.0 / 3.0) / std::log(3.0)).epsilon(1e-14));
    CHECK(pi.pi().trace() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("gibbs state of the zero Hamiltonian is maximally mixed") {
    const auto pi = gibbs_state(HermitianOperator::zero(4), 1.0);
    CHECK((pi.pi().matrix() - Matrix::Identity(4, 4) / 4.0).norm() < 1e-15);
    CHECK(pi.log_partition() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("gibbs state of a truncated oscillator follows the geometric distribution") {
    const int d = 30;
    const double beta = 5.0;
    RealVector e(d);
    for (int n = 0; n < d; ++n) e(n) = n + 0.5;
    const auto pi = gibbs_state(HermitianOperator::diagonal(e), beta);
    const double q = std::exp(-beta);
    const double norm = (1.0 - q) / (1.0 - std::pow(q, d));
    for (int n = 0; n < d; ++n) {
        CHECK(oracle::rel_diff(pi.populations()(n), norm * std::pow(q, n)) < 1e-12);
    }
    CHECK(std::pow(q, d) < 1e-12);
    CHECK(pi.log_partition() == doctest::Approx(-0.5 * beta - std::log1p(-q) + std::log1p(-std::pow(q, d))));
}

TEST_CASE("gibbs state invariants on random Hamiltonians") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto h = oracle::random_hermitian(rng, 4, 3.0);
        const auto pi = gibbs_state(h, 2.0);
        CHECK(pi.pi().trace() == doctest::Approx(1.0).epsilon(1e-12));
        const Matrix comm = pi.pi().matrix() * h.matrix() - h.matrix() * pi.pi().matrix();
        CHECK(comm.norm() < 1e-10 * h.frobenius_norm());
        CHECK(pi.faithful());
    }
}

TEST_CASE("gibbs state is overflow safe and rejects bad beta") {
    RealVector e(3);
    e << -1e4, 0.0, 1e4;
    const auto pi = gibbs_state(HermitianOperator::diagonal(e), 10.0);
    CHECK(pi.populations()(0) == doctest::Approx(1.0));
    CHECK(std::isfinite(pi.log_partition()));
    CHECK(pi.log_partition() == doctest::Approx(1e5));
    CHECK_FALSE(pi.faithful());
    CHECK_THROWS_AS(pi.require_faithful(), PreconditionError);
    CHECK_THROWS_AS(log_mean_apply(pi, HermitianOperator::identity(3)), PreconditionError);

    CHECK_THROWS_AS(gibbs_state(HermitianOperator::zero(2), 0.0), DomainError);
    CHECK_THROWS_AS(gibbs_state(HermitianOperator::zero(2), -1.0), DomainError);
    CHECK_THROWS_AS(gibbs_state(HermitianOperator::zero(2), std::nan("")), DomainError);
}

TEST_CASE("logarithmic mean kernel") {
    CHECK(log_mean_from_logs(std::log(0.75), std::log(0.25)) == doctest::Approx(0.5 / std::log(3.0)).epsilon(1e-14));
    CHECK(log_mean_from_logs(std::log(0.3), std::log(0.3)) == doctest::Approx(0.3).epsilon(1e-15));
    // Across the branch points the kernel stays continuous.
    for (double delta : {1e-9, 1e-8, 0.999999, 1.0, 1.000001}) {
        const double x = 0.2;
        const double y = x * std::exp(-delta);
        const double direct = (x - y) / delta;
        CHECK(oracle::rel_diff(log_mean_from_logs(std::log(x), std::log(y)), direct) < 1e-7);
    }
    const double a = std::log(0.4);
    const double b = std::log(0.1);
    CHECK(arith_minus_log_from_logs(a, b) ==
          doctest::Approx(0.25 - log_mean_from_logs(a, b)).epsilon(1e-13));
    CHECK(arith_minus_log_from_logs(a, a) == 0.0);
    CHECK(arith_minus_log_from_logs(a, a + 1e-3) > 0.0);
}

TEST_CASE("log mean apply on the qubit example") {
    const auto pi = qubit_three_to_one();
    const auto j = log_mean_apply(pi, HermitianOperator(sigma_x()));
    CHECK(j.matrix()(0, 1).real() == doctest::Approx(0.5 / std::log(3.0)).epsilon(1e-14));
    CHECK(j.matrix()(0, 1).real() == doctest::Approx(0.45512).epsilon(1e-5));
    const Matrix oracle_j = oracle::log_mean_quadrature(pi, sigma_x());
    CHECK(oracle::rel_diff(j.matrix(), oracle_j) < 1e-12);
}

TEST_CASE("log mean apply against Simpson quadrature on random states") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const auto pi = random_state(rng, 3);
        const auto a = oracle::random_hermitian(rng, 3);
        CHECK(oracle::rel_diff(log_mean_apply(pi, a).matrix(), oracle::log_mean_quadrature(pi, a.matrix(), 2000)) <
              1e-10);
    }
}

TEST_CASE("log mean apply reduces on commuting and maximally mixed inputs") {
    const auto pi = qubit_three_to_one();
    RealVector diag(2);
    diag << 2.0, -1.0;
    const auto a = HermitianOperator::diagonal(diag);
    const Matrix expected = pi.pi().matrix() * a.matrix();
    CHECK((log_mean_apply(pi, a).matrix() - expected).norm() < 1e-15);
    CHECK((arith_mean_apply(pi, a).matrix() - expected).norm() < 1e-15);

    std::mt19937_64 rng(9);
    const auto mixed = gibbs_state(HermitianOperator::zero(3), 1.0);
    const auto b = oracle::random_hermitian(rng, 3);
    CHECK((log_mean_apply(mixed, b).matrix() - b.matrix() / 3.0).norm() < 1e-15);
}

TEST_CASE("arith mean apply") {
    const auto pi = qubit_three_to_one();
    const auto s = arith_mean_apply(pi, HermitianOperator(sigma_x()));
    CHECK(s.matrix()(0, 1).real() == doctest::Approx(0.5).epsilon(1e-15));
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const auto state = random_state(rng, 4);
        const auto a = oracle::random_hermitian(rng, 4);
        const Matrix direct = 0.5 * (state.pi().matrix() * a.matrix() + a.matrix() * state.pi().matrix());
        CHECK(oracle::rel_diff(arith_mean_apply(state, a).matrix(), direct) < 1e-12);
    }
}

TEST_CASE("skew covariance examples") {
    const auto pi = qubit_three_to_one();
    const HermitianOperator x(sigma_x());
    const HermitianOperator y(sigma_y());
    const double expected = 2.0 * (0.5 - 0.5 / std::log(3.0));
    CHECK(skew_covariance(pi, x, x) == doctest::Approx(expected).epsilon(1e-13));
    CHECK(skew_covariance(pi, x, x) == doctest::Approx(0.08976).epsilon(1e-4));
    CHECK(skew_covariance(pi, x, x) == doctest::Approx(oracle::skew_quadrature(pi, sigma_x(), sigma_x())).epsilon(1e-12));
    CHECK(skew_covariance(pi, y, y) == doctest::Approx(expected).epsilon(1e-13));
    CHECK(skew_covariance(pi, y, y) == doctest::Approx(oracle::skew_quadrature(pi, sigma_y(), sigma_y())).epsilon(1e-12));

    RealVector diag(2);
    diag << 1.0, 4.0;
    const auto commuting = HermitianOperator::diagonal(diag);
    CHECK(skew_covariance(pi, commuting, x) == 0.0);
    CHECK(skew_covariance(pi, commuting, y) == 0.0);
}

TEST_CASE("skew covariance against quadrature on random states") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        const auto pi = random_state(rng, 3);
        const auto a = oracle::random_hermitian(rng, 3);
        const auto b = oracle::random_hermitian(rng, 3);
        const double oracle_val = oracle::skew_quadrature(pi, a.matrix(), b.matrix(), 2000);
        CHECK(std::abs(skew_covariance(pi, a, b) - oracle_val) < 1e-10 * std::max(1.0, std::abs(oracle_val)));
    }
}

TEST_CASE("matrix mean properties on random draws") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> dim(2, 5);
    std::uniform_real_distribution<double> coef(-2.0, 2.0);
    double worst_order = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const auto d = dim(rng);
        const auto pi = random_state(rng, d);
        const auto a = oracle::random_hermitian(rng, d);
        const auto b = oracle::random_hermitian(rng, d);
        const auto c = oracle::random_hermitian(rng, d);

        const double arith = trace_product(a, arith_mean_apply(pi, a));
        const double logm = trace_product(a, log_mean_apply(pi, a));
        worst_order = std::min({worst_order, arith - logm, logm});
        REQUIRE(arith - logm >= -1e-12);
        REQUIRE(logm >= -1e-12);

        const double skew = skew_covariance(pi, a, a);
        CHECK(skew >= -1e-15);
        CHECK(std::abs((arith - logm) - skew) <= 1e-10 * std::max(arith, 1e-12));

        CHECK(skew_covariance(pi, a, b) == doctest::Approx(skew_covariance(pi, b, a)).epsilon(1e-12));
        const double alpha = coef(rng);
        const double lhs = skew_covariance(pi, a * alpha + c, b);
        const double rhs = alpha * skew_covariance(pi, a, b) + skew_covariance(pi, c, b);
        CHECK(std::abs(lhs - rhs) < 1e-12 * (1.0 + std::abs(lhs)));

        CHECK(std::abs(trace_product(a, log_mean_apply(pi, b)) - trace_product(log_mean_apply(pi, a), b)) < 1e-11);
        CHECK(std::abs(trace_product(a, arith_mean_apply(pi, b)) - trace_product(arith_mean_apply(pi, a), b)) < 1e-11);
    }
    CHECK(worst_order >= -1e-12);
}

TEST_CASE("delta centered") {
    const auto mixed = gibbs_state(HermitianOperator::zero(2), 1.0);
    CHECK(delta_centered(mixed, HermitianOperator::identity(2)).is_zero());
    RealVector diag(2);
    diag << 1.0, 0.0;
    const auto out = delta_centered(mixed, HermitianOperator::diagonal(diag));
    CHECK(out.matrix()(0, 0).real() == doctest::Approx(0.5));
    CHECK(out.matrix()(1, 1).real() == doctest::Approx(-0.5));

    std::mt19937_64 rng(4);
    const auto pi = random_state(rng, 4);
    const auto a = oracle::random_hermitian(rng, 4, 5.0);
    CHECK(std::abs(pi.expectation(delta_centered(pi, a))) < 1e-12);
}

TEST_CASE("dimension mismatches are rejected") {
    const auto pi = qubit_three_to_one();
    const auto a = HermitianOperator::identity(3);
    CHECK_THROWS_AS(log_mean_apply(pi, a), DimensionError);
    CHECK_THROWS_AS(arith_mean_apply(pi, a), DimensionError);
    CHECK_THROWS_AS(skew_covariance(pi, a, a), DimensionError);
    CHECK_THROWS_AS(delta_centered(pi, a), DimensionError);
    CHECK_THROWS_AS(HermitianOperator::identity(2) + a, DimensionError);
}
