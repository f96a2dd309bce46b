#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"

#include "../support/oracles.hpp"
#include "qtur/errors.hpp"
#include "qtur/thermo.hpp"

using namespace qtur;
using namespace qtur::thermo;
using opalg::HermitianOperator;

namespace {

constexpr double kPi = std::numbers::pi;

ScalarPath constant(double v) {
    return {[v](double) { return v; }, [](double) { return 0.0; }};
}

ScalarPath zero_alpha() { return constant(0.0); }

Matrix sigma_z() {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = 0.5;
    m(1, 1) = -0.5;
    return m;
}

// Qubit whose Hamiltonian keeps a fixed eigenbasis: H = (1 + Lambda) sigma_z / 2.
std::shared_ptr<DetailedBalancedFamily> commuting_qubit() {
    return std::make_shared<DetailedBalancedFamily>(
        HermitianOperator(sigma_z()), std::vector<HermitianOperator>{HermitianOperator(sigma_z())},
        std::vector<lindblad::JumpSpec>{{0, 1, 0.4, lindblad::RateConvention::kBose}});
}

double rel(double a, double b) { return oracle::rel_diff(a, b); }

} // namespace

TEST_CASE("temperature profile") {
    const double tau = 10.0;
    auto alpha = sine_squared(tau).value;
    auto t = temperature_profile(0.2, 2.0, alpha);
    CHECK(t(0.0) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(t(tau / 2) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(t(tau) == doctest::Approx(0.2).epsilon(1e-14));

    auto half = temperature_profile(1.0, 3.0, [](double) { return 0.5; });
    CHECK(half(1.0) == doctest::Approx(1.5).epsilon(1e-15));
    auto cold = temperature_profile(1.0, 3.0, [](double) { return 0.0; });
    CHECK(cold(4.0) == 1.0);

    double previous = 0.0;
    for (int i = 0; i <= 20; ++i) {
        const double a = i / 20.0;
        const double v = temperature_profile(1.0, 3.0, [a](double) { return a; })(0.0);
        CHECK(v > previous);
        CHECK(v >= 1.0 - 1e-15);
        CHECK(v <= 3.0 + 1e-15);
        previous = v;
    }

    auto bad = temperature_profile(1.0, 3.0, [](double) { return 1.5; });
    CHECK_THROWS_AS(bad(0.0), ValidationError);
    CHECK_THROWS_AS(temperature_profile(2.0, 1.0, alpha), DomainError);
    CHECK_THROWS_AS(temperature_profile(0.0, 1.0, alpha), DomainError);
}

TEST_CASE("protocol validation and derivatives") {
    const double tau = 50.0;
    CHECK_THROWS_AS(Protocol(-1.0, 1.0, 2.0, sine_squared(tau), {}), DomainError);
    CHECK_THROWS_AS(Protocol(tau, 2.0, 2.0, sine_squared(tau), {}), DomainError);

    // Not closed.
    ScalarPath ramp{[tau](double t) { return t / tau; }, nullptr};
    CHECK_THROWS_AS(Protocol(tau, 1.0, 2.0, sine_squared(tau), {ramp}), ValidationError);
    // Closed but with a boundary rate.
    ScalarPath sine{[tau](double t) { return std::sin(2 * kPi * t / tau); }, nullptr};
    CHECK_THROWS_AS(Protocol(tau, 1.0, 2.0, sine_squared(tau), {sine}), ValidationError);
    // alpha must start at zero.
    ScalarPath cos2{[tau](double t) { return std::pow(std::cos(kPi * t / tau), 2); }, nullptr};
    CHECK_THROWS_AS(Protocol(tau, 1.0, 2.0, cos2, {}), ValidationError);

    const Protocol analytic(tau, 0.5, 2.0, sine_squared(tau), {fourier_control(tau, 1.0, {0.3, -0.1}, {0.2})});
    CHECK_FALSE(analytic.uses_finite_differences());
    ScalarPath alpha_fd{sine_squared(tau).value, nullptr};
    ScalarPath control_fd{fourier_control(tau, 1.0, {0.3, -0.1}, {0.2}).value, nullptr};
    const Protocol numeric(tau, 0.5, 2.0, alpha_fd, {control_fd});
    CHECK(numeric.uses_finite_differences());

    for (double t : {0.0, 3.0, 17.5, 25.0, 49.0, 50.0}) {
        CHECK(std::abs(analytic.alpha_rate(t) - numeric.alpha_rate(t)) < 1e-8);
        CHECK(std::abs(analytic.control_rates(t)[0] - numeric.control_rates(t)[0]) < 1e-8);
        CHECK(std::abs(analytic.beta_rate(t) - numeric.beta_rate(t)) < 1e-8);
        const double temp = analytic.temperature(t);
        CHECK(temp >= 0.5 - 1e-14);
        CHECK(temp <= 2.0 + 1e-14);
    }
    CHECK(analytic.temperature(25.0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(analytic.beta(0.0) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("fourier controls vanish with their rate at the endpoints") {
    const double tau = 7.0;
    auto c = fourier_control(tau, 0.4, {0.5, -0.2, 0.1}, {0.3, 0.05});
    CHECK(std::abs(c.value(0.0) - 0.4) < 1e-15);
    CHECK(std::abs(c.value(tau) - 0.4) < 1e-14);
    CHECK(std::abs(c.rate(0.0)) < 1e-14);
    CHECK(std::abs(c.rate(tau)) < 1e-13);
    const double h = 1e-6;
    for (double t : {0.7, 2.3, 5.1}) {
        CHECK(std::abs((c.value(t + h) - c.value(t - h)) / (2 * h) - c.rate(t)) < 1e-8);
    }
}

TEST_CASE("simpson quadrature") {
    auto f = [](double t, double* out) {
        out[0] = std::sin(t) * std::sin(t);
        out[1] = std::exp(t);
        out[2] = 0.0;
    };
    const auto r = simpson_integrate(0.0, kPi, 3, f);
    CHECK(rel(r.integrals[0], kPi / 2) < 1e-9);
    CHECK(rel(r.integrals[1], std::expm1(kPi)) < 1e-9);
    CHECK(r.integrals[2] == 0.0);

    QuadratureOptions parallel;
    parallel.jobs = 4;
    const auto p = simpson_integrate(0.0, kPi, 3, f, parallel);
    CHECK(p.integrals == r.integrals);
    CHECK(p.nodes == r.nodes);

    QuadratureOptions capped;
    capped.max_nodes = 257;
    auto wild = [](double t, double* out) { out[0] = std::sin(4000.0 * t); };
    CHECK_THROWS_AS(simpson_integrate(0.0, 1.0, 1, wild, capped), NumericError);

    QuadratureOptions even;
    even.initial_nodes = 256;
    CHECK_THROWS_AS(simpson_integrate(0.0, 1.0, 1, wild, even), ValidationError);

    auto throwing = [](double t, double* out) {
        if (t > 0.5) throw NumericError("boom");
        out[0] = t;
    };
    CHECK_THROWS_AS(simpson_integrate(0.0, 1.0, 1, throwing, parallel), NumericError);

    std::vector<double> v(1000, 0.1);
    CHECK(pairwise_sum(v.data(), v.size()) == doctest::Approx(100.0).epsilon(1e-14));
    CHECK(pairwise_sum(v.data(), 0) == 0.0);
}

TEST_CASE("node terms match dense oracles") {
    std::mt19937_64 rng(2024);
    for (std::size_t dim : {2u, 3u}) {
        const Engine engine = random_engine(rng, dim, 20.0);
        const auto& p = engine.protocol;
        const double t = 0.31 * p.tau();
        const NodeTerms n = node_terms(p, *engine.family, t);

        const auto snap = engine.family->snapshot(p.beta(t), p.controls(t), p.control_rates(t));
        const auto& pi = snap.generator.stationary();
        const Eigen::Index d = Eigen::Index(dim);
        const Matrix id = Matrix::Identity(d, d);
        const Matrix dh = snap.hamiltonian.matrix() - pi.expectation(snap.hamiltonian) * id;
        const Matrix dhr = snap.hamiltonian_rate.matrix() - pi.expectation(snap.hamiltonian_rate) * id;
        const Matrix phi = p.beta_rate(t) * dh + p.beta(t) * dhr;

        const double horizon = 40.0 / lindblad::spectral_gap(snap.generator);
        const Matrix r_h = oracle::theta_quadrature(snap.generator, dhr, horizon);
        const Matrix r_e = oracle::theta_quadrature(snap.generator, dh, horizon);
        const Matrix r_phi = p.beta_rate(t) * r_e + p.beta(t) * r_h;
        const Matrix j_phi = oracle::log_mean_quadrature(pi, phi);
        const Matrix j_h = oracle::log_mean_quadrature(pi, dhr);
        const Matrix rho = oracle::power(pi, 1.0);
        const Matrix s_h = 0.5 * (rho * dhr + dhr * rho);
        auto tr = [](const Matrix& a, const Matrix& b) { return (a * b).trace().real(); };

        const double sigma = tr(r_phi, j_phi);
        const double cross = 0.5 * (tr(r_h, j_phi) + tr(r_phi, j_h));
        const double hh_log = tr(r_h, j_h);
        const double hh_arith = tr(r_h, s_h);
        const double qcorr = oracle::skew_quadrature(pi, r_h, dhr);
        const double adwork = tr(rho, snap.hamiltonian_rate.matrix());
        const double energy = tr(rho, snap.hamiltonian.matrix()) + tr(r_e, j_phi);
        const double heat = -p.alpha_rate(t) * energy - p.alpha(t) * (adwork + tr(r_h, j_phi));

        CHECK(rel(n.sigma, sigma) < 1e-6);
        CHECK(rel(n.cross, cross) < 1e-6);
        CHECK(rel(n.hh_log, hh_log) < 1e-6);
        CHECK(rel(n.hh_arith, hh_arith) < 1e-6);
        CHECK(rel(n.qcorr, qcorr) < 1e-6);
        CHECK(rel(n.adwork, adwork) < 1e-10);
        CHECK(rel(n.heat, heat) < 1e-6);
        CHECK(n.qcorr == doctest::Approx(n.hh_arith - n.hh_log).epsilon(1e-9));
        CHECK(n.sigma >= 0.0);
    }
}

TEST_CASE("inner products: symmetry, ordering, commuting curves") {
    std::mt19937_64 rng(77);
    const double tau = 10.0;
    const auto h = oracle::random_nondegenerate(rng, 3, 2.0, 0.2);
    const auto gen = lindblad::build_detailed_balanced(
        h, 1.3, {{0, 1, 0.5, lindblad::RateConvention::kBose}, {1, 2, 0.7, lindblad::RateConvention::kBose}});
    LindbladianCurve curve = [&](double) { return gen; };
    const auto x = oracle::random_hermitian(rng, 3);
    const auto y = oracle::random_hermitian(rng, 3);
    const auto& pi = gen.stationary();
    OperatorCurve a = [&](double t) { return opalg::delta_centered(pi, x * std::cos(t) + y * std::sin(2 * t)); };
    OperatorCurve b = [&](double t) { return opalg::delta_centered(pi, y * (1.0 + t * t / 50.0)); };
    OperatorCurve zero = [](double) { return HermitianOperator::zero(3); };

    CHECK(inner_product(tau, curve, zero, a) == 0.0);
    const double ab = inner_product(tau, curve, a, b);
    const double ba = inner_product(tau, curve, b, a);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-13));
    const double aa = inner_product(tau, curve, a, a);
    const double aa_prime = inner_product_prime(tau, curve, a, a);
    CHECK(aa > 0.0);
    CHECK(aa_prime >= aa);

    // Bilinearity in the first slot.
    OperatorCurve sum = [&](double t) { return a(t) * 2.0 + b(t); };
    CHECK(inner_product(tau, curve, sum, b) ==
          doctest::Approx(2.0 * ab + inner_product(tau, curve, b, b)).epsilon(1e-9));

    CHECK_THROWS_AS(inner_product(tau, curve, [&](double) { return x; }, a), PreconditionError);

    // Commuting curves: primed and unprimed forms coincide.
    RealVector e(3);
    e << 0.0, 0.7, 1.5;
    const auto diag_gen = lindblad::build_detailed_balanced(
        HermitianOperator::diagonal(e), 0.8,
        {{0, 1, 0.5, lindblad::RateConvention::kBose}, {1, 2, 0.3, lindblad::RateConvention::kBose}});
    LindbladianCurve diag_curve = [&](double) { return diag_gen; };
    RealVector w(3);
    w << 1.0, -0.4, 2.0;
    OperatorCurve c = [&](double t) {
        return opalg::delta_centered(diag_gen.stationary(), HermitianOperator::diagonal(w * std::sin(t)));
    };
    const double cc = inner_product(tau, diag_curve, c, c);
    CHECK(std::abs(inner_product_prime(tau, diag_curve, c, c) - cc) <= 1e-10 * std::abs(cc));
}

TEST_CASE("static and isothermal protocols") {
    const double tau = 20.0;
    auto family = commuting_qubit();

    const Protocol frozen(tau, 0.5, 1.5, zero_alpha(), {constant(0.3)});
    const auto r = evaluate_engine(frozen, *family);
    CHECK(r.sigma_dot == 0.0);
    CHECK(r.P_w == 0.0);
    CHECK(r.W_ad == 0.0);
    CHECK(r.DeltaP_w == 0.0);
    CHECK(r.DeltaI_w == 0.0);
    CHECK_FALSE(r.operating);
    CHECK_FALSE(r.f_value.has_value());
    CHECK(check_invariants(r).empty());
    const auto e = expansion_coefficients(r);
    CHECK(e.a_P == 0.0);
    CHECK(e.a_DeltaP == 0.0);
    CHECK_FALSE(e.eta_firstorder.has_value());

    // Isothermal closed cycle: W is a free-energy difference and vanishes.
    std::mt19937_64 rng(5);
    const Engine driven = random_engine(rng, 3, tau);
    const Protocol isothermal(tau, driven.protocol.t_cold(), driven.protocol.t_hot(), zero_alpha(),
                              {fourier_control(tau, 0.0, {0.05}, {0.03})});
    auto fam = std::dynamic_pointer_cast<const DetailedBalancedFamily>(driven.family);
    REQUIRE(fam);
    if (fam->control_count() == 1) {
        CHECK(std::abs(adiabatic_work(isothermal, *fam)) < 1e-12);
        CHECK(entropy_production_rate(isothermal, *fam) > 0.0);
    }
}

TEST_CASE("temperature-only driving") {
    const double tau = 30.0;
    auto family = std::make_shared<OscillatorFamily>(0.5);
    const Protocol p(tau, 0.5, 2.0, sine_squared(tau), {constant(1.0)});
    const auto totals = cycle_totals(p, *family);
    CHECK(totals.sigma_dot > 0.0);
    CHECK(totals.adiabatic_work == 0.0);
    CHECK(totals.delta_p == 0.0);

    LindbladianCurve curve = [&](double t) { return family->snapshot(p.beta(t), {1.0}, {0.0}).generator; };
    OperatorCurve bdh = [&](double t) {
        const auto snap = family->snapshot(p.beta(t), {1.0}, {0.0});
        return opalg::delta_centered(snap.generator.stationary(), snap.hamiltonian) * p.beta_rate(t);
    };
    CHECK(rel(inner_product(tau, curve, bdh, bdh), totals.sigma_dot) < 1e-7);
}

TEST_CASE("commuting driving has no quantum correction") {
    const double tau = 40.0;
    auto family = commuting_qubit();
    const Protocol p(tau, 0.4, 1.6, sine_squared(tau), {fourier_control(tau, 0.0, {0.3}, {0.2})});
    const auto r = evaluate_engine(p, *family);
    CHECK(std::abs(r.DeltaI_w) <= 1e-14 * r.DeltaP_w);
    CHECK(r.DeltaP_w > 0.0);
    const auto e = expansion_coefficients(r);
    CHECK(e.a_DeltaP == doctest::Approx(r.DeltaP_w / r.epsilon).epsilon(1e-12));

    const auto snap = family->snapshot(1.0, {0.2}, {0.1});
    CHECK_FALSE(relaxation_timescale(snap.generator, snap.hamiltonian_rate).has_value());
}

TEST_CASE("efficiency and bounds from raw inputs") {
    EngineInputs in;
    in.tau = 10.0;
    in.t_cold = 1.0;
    in.t_hot = 2.0;
    in.adiabatic_work = -2.0;
    in.friction_work = 2.0; // P_w = 0
    in.sigma_dot = 0.1;
    in.delta_p = 0.3;
    in.delta_i = 0.05;
    auto r = efficiency_and_bounds(in);
    CHECK(r.P_w == 0.0);
    REQUIRE(r.eta.has_value());
    CHECK(*r.eta == 0.0);
    CHECK_FALSE(r.operating);
    CHECK_FALSE(r.eta_Q.has_value());

    in.friction_work = 0.5;
    r = efficiency_and_bounds(in);
    CHECK(r.P_w == doctest::Approx(0.15));
    CHECK(r.eta_C == 0.5);
    CHECK(*r.f_value == doctest::Approx(0.5 * 0.5 / (1.5 * 1.5)));
    CHECK(*r.eta == doctest::Approx(0.5 * 0.15 / (0.1 + 0.15)));
    CHECK(*r.eta_PS == doctest::Approx(0.5 / (1.0 + 2.0 * 0.15 / 0.3)));
    CHECK(*r.eta_Q == doctest::Approx(0.5 / (1.0 + 2.0 * *r.f_value * 0.15 / 0.2)));
    CHECK(*r.eta_cl == doctest::Approx(0.5 / (1.0 + 2.0 * *r.f_value * 0.15 / 0.3)));
    CHECK(*r.tur_residual == doctest::Approx(0.2 * 0.1 - 2.0 * *r.f_value * 0.15 * 0.15));
    CHECK(r.J_q == doctest::Approx((0.1 + 0.15) / 0.5));
    CHECK(check_invariants(r).empty());

    in.delta_i = 0.2; // 2 DeltaI > DeltaP
    CHECK_FALSE(check_invariants(efficiency_and_bounds(in)).empty());

    in.t_hot = in.t_cold;
    CHECK_THROWS_AS(efficiency_and_bounds(in), DomainError);
}

TEST_CASE("random engines: TUR, ordering and heat-flux identity") {
    std::mt19937_64 rng(99);
    QuadratureOptions tight;
    tight.rel_tol = 1e-10;
    tight.max_nodes = 16385;
    for (int i = 0; i < 12; ++i) {
        const Engine e = random_engine(rng, 2 + std::size_t(i % 2), 50.0);
        const auto r = evaluate_engine(e.protocol, *e.family, tight);
        INFO("draw " << i);
        CHECK(check_invariants(r).empty());
        REQUIRE(r.tur_residual.has_value());
        CHECK(*r.tur_residual >= -1e-9 * r.tur_scale);
        CHECK(r.sigma_dot > 0.0);
        CHECK(r.DeltaP_w >= 2.0 * r.DeltaI_w);
        CHECK(r.DeltaI_w >= 0.0);
        // Second-law balance with the directly integrated heat flux.
        const double sigma_balance = (r.eta_C * r.J_q - r.P_w) / r.t_cold;
        CHECK(rel(sigma_balance, r.sigma_dot) < 1e-9);
    }
}

TEST_CASE("saturation witness") {
    const Engine e = saturation_engine(0.5, 2.0);
    const auto r = evaluate_engine(e.protocol, *e.family);
    CHECK(r.engine_flag);
    REQUIRE(r.tur_residual.has_value());
    CHECK(std::abs(*r.tur_residual) <= 1e-6 * r.tur_scale);
    CHECK(std::abs(r.W_ad) < 1e-12);
    CHECK(*r.f_value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.DeltaI_w == 0.0);
    // With f = 1 the quantum bound is the PS form built from DeltaP - 2 DeltaI.
    const double ps_form = r.eta_C / (1.0 + 2.0 * r.t_cold * r.P_w / (r.DeltaP_w - 2.0 * r.DeltaI_w));
    CHECK(std::abs(*r.eta_Q - ps_form) <= 1e-12);
    CHECK(*r.eta <= *r.eta_Q + 1e-12);
    CHECK(*r.eta == doctest::Approx(*r.eta_Q).epsilon(1e-6));
}

TEST_CASE("first-order functionals match the driven master equation") {
    // Integrate d rho/dt = L_t(rho) over two cycles and compare the work of the second with
    // W + friction work; the residual is second order in t_eq/tau.
    std::mt19937_64 rng(11);
    const Engine e = random_engine(rng, 2, 400.0);
    const auto& p = e.protocol;
    const auto r = evaluate_engine(p, *e.family);

    auto generator_at = [&](double t) { return e.family->snapshot(p.beta(t), p.controls(t), p.control_rates(t)); };
    Matrix rho = oracle::power(generator_at(0.0).generator.stationary(), 1.0);
    const int steps = 8000;
    const double h = p.tau() / steps;
    double work = 0.0;
    for (int cycle = 0; cycle < 2; ++cycle) {
        work = 0.0;
        for (int k = 0; k < steps; ++k) {
            const double t = k * h;
            const auto s0 = generator_at(t);
            const auto s1 = generator_at(t + h / 2);
            const auto s2 = generator_at(t + h);
            const Matrix k1 = s0.generator.schrodinger(rho);
            const Matrix k2 = s1.generator.schrodinger(rho + 0.5 * h * k1);
            const Matrix k3 = s1.generator.schrodinger(rho + 0.5 * h * k2);
            const Matrix k4 = s2.generator.schrodinger(rho + h * k3);
            const Matrix next = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            // Simpson in time for int tr(rho H') dt.
            const Matrix mid = 0.5 * (rho + next) + (h / 8.0) * (k1 - k4);
            work += (h / 6.0) * ((rho * s0.hamiltonian_rate.matrix()).trace().real() +
                                 4.0 * (mid * s1.hamiltonian_rate.matrix()).trace().real() +
                                 (next * s2.hamiltonian_rate.matrix()).trace().real());
            rho = next;
        }
    }
    const double friction = r.w_avg - r.W_ad;
    INFO("exact " << work << " first order " << r.w_avg << " friction " << friction);
    CHECK(std::abs(work - r.w_avg) < 0.05 * std::abs(friction));
}

TEST_CASE("grid doubling changes reported scalars below tolerance") {
    std::mt19937_64 rng(3);
    const Engine e = random_engine(rng, 3, 100.0);
    QuadratureOptions coarse;
    QuadratureOptions fine;
    fine.initial_nodes = 2 * coarse.initial_nodes - 1;
    fine.max_nodes = 8193;
    const auto a = evaluate_engine(e.protocol, *e.family, coarse);
    const auto b = evaluate_engine(e.protocol, *e.family, fine);
    for (auto [x, y] : {std::pair{a.sigma_dot, b.sigma_dot}, {a.P_w, b.P_w}, {a.DeltaP_w, b.DeltaP_w},
                        {a.DeltaI_w, b.DeltaI_w}, {a.J_q, b.J_q}, {a.W_ad, b.W_ad}}) {
        CHECK(std::abs(x - y) <= 1e-7 * std::abs(y) + 1e-14);
    }
    QuadratureOptions threaded = coarse;
    threaded.jobs = 3;
    const auto c = evaluate_engine(e.protocol, *e.family, threaded);
    CHECK(c.sigma_dot == a.sigma_dot);
    CHECK(c.DeltaP_w == a.DeltaP_w);
    CHECK(c.P_w == a.P_w);
}

TEST_CASE("power approaches the adiabatic limit as 1/tau") {
    std::mt19937_64 rng(8);
    const Engine base = random_engine(rng, 2, 100.0);
    auto fam = base.family;
    std::vector<double> gaps;
    for (double tau : {1e2, 1e3, 1e4}) {
        std::mt19937_64 replay(8);
        const Engine e = random_engine(replay, 2, tau);
        const auto r = evaluate_engine(e.protocol, *e.family);
        gaps.push_back(std::abs(r.P_w * tau + r.W_ad));
        CHECK(rel(r.W_ad, evaluate_engine(base.protocol, *fam).W_ad) < 1e-9);
    }
    CHECK(gaps[1] == doctest::Approx(gaps[0] / 10).epsilon(1e-6));
    CHECK(gaps[2] == doctest::Approx(gaps[1] / 10).epsilon(1e-6));
}
