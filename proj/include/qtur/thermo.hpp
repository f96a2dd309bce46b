// thermo.hpp: protocols and slow-driving thermodynamic functionals of a periodically
// driven engine weakly coupled to a bath of modulated temperature
//   T(t) = T_c T_h / (T_h + (T_c - T_h) alpha(t)).
//
// Every functional is a time average over the cycle of pointwise terms evaluated from
// the instantaneous generator; the time integral is composite Simpson on nested grids.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qtur/lindblad.hpp"
#include "qtur/opalg.hpp"

namespace qtur::thermo {

using lindblad::Lindbladian;
using opalg::GibbsState;
using opalg::HermitianOperator;

// t -> value with an optional analytic derivative.
struct ScalarPath {
    std::function<double(double)> value;
    std::function<double(double)> rate; // empty: finite differences
};

// alpha(t) -> T(t). Throws DomainError unless 0 < T_c < T_h; the returned map throws
// ValidationError when alpha(t) leaves [0, 1].
std::function<double(double)> temperature_profile(double t_cold, double t_hot, std::function<double(double)> alpha);

// Closed curve t -> (T(t), Lambda(t)) on [0, tau]. Validated on construction:
// lambda(0) = lambda(tau), lambda'(0) = lambda'(tau) = 0, alpha(0) = alpha(tau) = 0,
// alpha in [0, 1] on a fine sample grid.
class Protocol {
public:
    Protocol(double tau, double t_cold, double t_hot, ScalarPath alpha, std::vector<ScalarPath> controls);

    double tau() const { return tau_; }
    double t_cold() const { return t_cold_; }
    double t_hot() const { return t_hot_; }
    double eta_carnot() const { return 1.0 - t_cold_ / t_hot_; }
    std::size_t control_count() const { return controls_.size(); }

    double alpha(double t) const;
    double alpha_rate(double t) const;
    double temperature(double t) const;
    // beta = 1/T_c + alpha (1/T_h - 1/T_c) is affine in alpha.
    double beta(double t) const;
    double beta_rate(double t) const;
    std::vector<double> controls(double t) const;
    std::vector<double> control_rates(double t) const;

    // True when any derivative falls back to central differences (step tau * 1e-6).
    bool uses_finite_differences() const;

private:
    double rate_of(const ScalarPath& path, double t) const;

    double tau_;
    double t_cold_;
    double t_hot_;
    ScalarPath alpha_;
    std::vector<ScalarPath> controls_;
};

// Instantaneous data at one point of the protocol.
struct Snapshot {
    Lindbladian generator;
    HermitianOperator hamiltonian;
    HermitianOperator hamiltonian_rate; // dH/dt = sum_k dH/dLambda_k * Lambda_k'
};

// Maps (beta, Lambda, Lambda') to the instantaneous generator and Hamiltonians.
class GeneratorFamily {
public:
    virtual ~GeneratorFamily() = default;
    virtual std::size_t control_count() const = 0;
    virtual Snapshot snapshot(double beta, const std::vector<double>& lambda,
                              const std::vector<double>& lambda_rate) const = 0;
    // Relaxation time t_eq of the family along the protocol. Default: max of 1/gap over
    // 65 evenly spaced times.
    virtual double equilibration_time(const Protocol& protocol) const;
};

// Damped oscillator with Lambda = (omega). H = omega (n + 1/2) and
// dH/domega = (n + 1/2) + (a^2 + a^dagger^2)/2 in the instantaneous Fock basis.
// The Fock dimension at each node is suggested_oscillator_dim(beta omega, tail) + extra_levels.
class OscillatorFamily : public GeneratorFamily {
public:
    explicit OscillatorFamily(double gamma, double tail_tolerance = 1e-12, std::size_t extra_levels = 0);
    std::size_t control_count() const override { return 1; }
    Snapshot snapshot(double beta, const std::vector<double>& lambda,
                      const std::vector<double>& lambda_rate) const override;
    double equilibration_time(const Protocol& protocol) const override; // 1/Gamma
    double gamma() const { return gamma_; }
    std::size_t dim_at(double beta, double omega) const;

private:
    double gamma_;
    double tail_;
    std::size_t extra_;
};

// H(Lambda) = H_0 + sum_k Lambda_k V_k with fixed eigenbasis transition specs.
// H(Lambda) must stay nondegenerate along the protocol.
class DetailedBalancedFamily : public GeneratorFamily {
public:
    DetailedBalancedFamily(HermitianOperator h0, std::vector<HermitianOperator> couplings,
                           std::vector<lindblad::JumpSpec> specs);
    std::size_t control_count() const override { return couplings_.size(); }
    Snapshot snapshot(double beta, const std::vector<double>& lambda,
                      const std::vector<double>& lambda_rate) const override;
    std::size_t dim() const { return h0_.dim(); }

private:
    HermitianOperator h0_;
    std::vector<HermitianOperator> couplings_;
    std::vector<lindblad::JumpSpec> specs_;
};

// ---------------------------------------------------------------------------
// Quadrature

struct QuadratureOptions {
    std::size_t initial_nodes{257}; // 2^k + 1
    std::size_t max_nodes{4097};
    double rel_tol{1e-7};
    unsigned jobs{1}; // concurrent node evaluations; results are independent of jobs
};

struct QuadratureResult {
    std::vector<double> integrals;
    std::vector<double> abs_integrals; // integrals of |f_k|, the scale for zero results
    std::size_t nodes{0};
};

// Composite Simpson for a vector integrand f(t, out[m]) on [a, b]. The grid is doubled
// (reusing nodes) until every component changes by at most
// rel_tol * |I_k| + 1e-12 * int |f_k|; throws NumericError past max_nodes.
QuadratureResult simpson_integrate(double a, double b, std::size_t m,
                                   const std::function<void(double, double*)>& f,
                                   const QuadratureOptions& options = {});

// Sum with fixed pairwise association, so results do not depend on evaluation order.
double pairwise_sum(const double* values, std::size_t n);

// ---------------------------------------------------------------------------
// Inner products on operator curves

using LindbladianCurve = std::function<Lindbladian(double)>;
using OperatorCurve = std::function<HermitianOperator(double)>;

// <<A, B>> = (1/2 tau) int dt [tr(R_A J(B)) + tr(R_B J(A))], R_X = theta_integral(L(t), X(t)).
double inner_product(double tau, const LindbladianCurve& generator, const OperatorCurve& a, const OperatorCurve& b,
                     const QuadratureOptions& options = {});
// Same with the arithmetic mean S in place of J.
double inner_product_prime(double tau, const LindbladianCurve& generator, const OperatorCurve& a,
                           const OperatorCurve& b, const QuadratureOptions& options = {});

// ---------------------------------------------------------------------------
// Engine functionals

// Pointwise integrands at one time.
struct NodeTerms {
    double sigma{};       // tr(R_Phi J(Phi'))
    double cross{};       // (tr(R_H J(Phi')) + tr(R_Phi J(dH')))/2
    double hh_log{};      // tr(R_H J(dH'))
    double hh_arith{};    // tr(R_H S(dH'))
    double qcorr{};       // skew covariance I(R_H, dH') = hh_arith - hh_log
    double adwork{};      // tr(pi H')
    double heat{};        // -alpha' tr(rho H) - alpha tr(rho H') to first order
    double energy_scale{}; // max |E|
};
inline constexpr std::size_t kNodeTermCount = 8;

// R_H = theta_integral(dH'), R_E = theta_integral(dH), R_Phi = beta' R_E + beta R_H.
NodeTerms node_terms(const Protocol& protocol, const GeneratorFamily& family, double t);

// Cycle integrals of NodeTerms; everything except adiabatic_work is divided by tau.
struct CycleTotals {
    double sigma_dot{};
    double cross{};
    double hh_log{};
    double delta_p{};       // 2 * mean hh_arith
    double delta_i{};       // mean qcorr
    double adiabatic_work{}; // W = int tr(pi H') dt
    double heat_flux{};     // J_q from the first-order state
    double energy_scale{};
    std::size_t nodes{};
};

CycleTotals cycle_totals(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options = {});

double entropy_production_rate(const Protocol& protocol, const GeneratorFamily& family,
                               const QuadratureOptions& options = {});
double average_power(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options = {});
double adiabatic_work(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options = {});
double heat_flux(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options = {});

struct PowerFluctuations {
    double delta_p{};
    double delta_i{};
};
PowerFluctuations power_fluctuations(const Protocol& protocol, const GeneratorFamily& family,
                                     const QuadratureOptions& options = {});

// int_0^inf I(H'(theta), H'(0)) dtheta / I(H', H'); absent when I(H', H') <= 1e-14.
std::optional<double> relaxation_timescale(const Lindbladian& generator, const HermitianOperator& hamiltonian_rate);

// Raw inputs of one engine evaluation.
struct EngineInputs {
    double tau{};
    double t_cold{};
    double t_hot{};
    double adiabatic_work{};   // W
    double friction_work{};    // <w> - W = tau <<dH', Phi'>>
    double sigma_dot{};
    double delta_p{};
    double delta_i{};
    std::optional<double> heat_flux; // direct J_q when available
    double t_eq{};
    double energy_scale{1.0};
};

struct EngineReport {
    double tau{};
    double t_cold{};
    double t_hot{};
    double t_eq{};
    double epsilon{};        // t_eq / tau
    double P_w{};
    double P_W{};            // -W / tau
    double J_q{};            // direct when available, else from the entropy balance
    double J_q_identity{};   // (T_c sigma_dot + P_w) / eta_C
    double sigma_dot{};
    double DeltaP_w{};
    double DeltaI_w{};
    double W_ad{};
    double w_avg{};          // -P_w tau
    double eta_C{};
    std::optional<double> eta;
    std::optional<double> eta_PS;
    std::optional<double> eta_Q;
    std::optional<double> eta_cl; // eta_Q with DeltaI_w = 0
    std::optional<double> f_value;
    std::optional<double> tur_residual; // (DeltaP - 2 DeltaI) sigma - 2 f P_w^2
    double tur_scale{};      // DeltaP sigma + 2 f P_w^2
    bool engine_flag{false}; // P_w >= 0
    bool operating{true};    // false when |<w>| < 1e-14 * energy scale
    bool finite_difference{false};
    std::size_t nodes{0};
};

// Completes efficiencies, bounds, f and the TUR residual from raw inputs.
EngineReport efficiency_and_bounds(const EngineInputs& inputs);

// Violated report invariants (empty when all hold):
//   sigma_dot >= -1e-12; 0 <= 2 DeltaI <= DeltaP (slack 1e-12 * max(1, DeltaP));
//   tur_residual >= -1e-9 * tur_scale; engines: eta <= eta_C, eta <= eta_Q, eta_Q <= eta_cl (1e-12).
std::vector<std::string> check_invariants(const EngineReport& report);

// All functionals in one pass over the cycle.
EngineReport evaluate_engine(const Protocol& protocol, const GeneratorFamily& family,
                             const QuadratureOptions& options = {});

// eps = t_eq/tau, a_P = (P_w - P_W)/eps, a_DeltaP = (DeltaP - 2 DeltaI)/eps and the
// first-order bound eta_C (1 - eps 2 T_c a_P^2 / (P_W a_DeltaP)).
struct ExpansionCoefficients {
    double epsilon{};
    double a_P{};
    double a_DeltaP{};
    std::optional<double> eta_firstorder; // absent unless P_W > 0 and a_DeltaP > 0
};
ExpansionCoefficients expansion_coefficients(const EngineReport& report);
ExpansionCoefficients expansion_coefficients(const Protocol& protocol, const GeneratorFamily& family,
                                             const QuadratureOptions& options = {});

// ---------------------------------------------------------------------------
// Protocol construction helpers

// alpha(t) = sin^2(pi t / tau)
ScalarPath sine_squared(double tau);

// base + sum_m a_m g_m(t) + b_m h_m(t) with
// g_m = sin(2 pi m t/tau) - m/(m+1) sin(2 pi (m+1) t/tau), h_m = 1 - cos(2 pi m t/tau),
// both vanishing with their first derivative at t = 0 and t = tau.
ScalarPath fourier_control(double tau, double base, std::vector<double> a, std::vector<double> b);

struct Engine {
    Protocol protocol;
    std::shared_ptr<const GeneratorFamily> family;
};

// Random detailed-balanced engine on d levels: diagonal H_0 with gaps >= 0.3, one or two
// random Hermitian couplings of small amplitude (no level crossings), nearest-neighbour
// Bose transitions plus one long upward jump, alpha = sin^2 and Fourier controls with
// time-asymmetric terms.
Engine random_engine(std::mt19937_64& rng, std::size_t dim, double tau = 100.0);

// Qubit H = omega(t) sigma_z / 2 with beta(t) = b0 + k / omega(t), so that Phi' = b0 dH'
// and the quantum TUR is saturated. omega(t) = omega0 (1 + amplitude sin^2(pi t/tau)).
Engine saturation_engine(double t_cold, double t_hot, double omega0 = 1.0, double amplitude = 0.5,
                         double rate = 0.3, double tau = 100.0);

} // namespace qtur::thermo
