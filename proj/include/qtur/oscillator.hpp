// oscillator.hpp: closed-form slow-driving integrands of the damped harmonic-oscillator
// engine and the two engine evaluations built on them (analytic and matrix pipeline).
#pragma once

#include <cstddef>

#include "qtur/thermo.hpp"

namespace qtur::oscillator {

struct OscillatorParams {
    double omega0{1.0};
    double t_cold{0.2};
    double t_hot{2.0};
    double gamma{1.0}; // t_eq = 1/gamma
    double tau{100.0};

    // Throws DomainError unless every field is positive and finite and t_cold < t_hot.
    void validate() const;
};

// omega(t) = omega0 (1 + sin(2 pi t/tau)/2 + sin(4 pi t/tau + pi)/4), alpha(t) = sin^2(pi t/tau).
struct ProtocolPoint {
    double omega{};
    double omega_rate{};
    double beta{};
    double beta_rate{};
};
ProtocolPoint protocol_point(const OscillatorParams& params, double t);

thermo::Protocol reference_protocol(const OscillatorParams& params);

// Pointwise integrands. With T = tau:
//   P_w = -W/T - (1/T) int power,  DeltaP_w = (1/T) int fluct,  sigma_dot = (1/T) int sigma,
//   DeltaI_w = (1/T) int qcorr,     W = int adwork.
// All are written in q = exp(-beta omega), so they stay finite for any beta omega > 0.
double power_integrand(double t, const OscillatorParams& params);
double fluct_integrand(double t, const OscillatorParams& params);
double sigma_integrand(double t, const OscillatorParams& params);
double qcorr_integrand(double t, const OscillatorParams& params);
double adwork_integrand(double t, const OscillatorParams& params);

struct Integrands {
    double power{};
    double fluct{};
    double sigma{};
    double qcorr{};
    double adwork{};
};
Integrands integrands(double t, const OscillatorParams& params);

// x coth(x) - 1 without cancellation near 0.
double x_coth_x_minus_one(double x);

// int_0^inf I(H'(theta), H') dtheta / I(H', H') for the damped oscillator: Gamma / (Gamma^2 + 4 omega^2).
double relaxation_time(double omega, double gamma);

// Adaptive Gauss-Kronrod quadrature of the five integrands (relative tolerance 1e-9);
// NumericError when the error estimate is not met.
thermo::EngineReport evaluate(const OscillatorParams& params);

struct MatrixOptions {
    thermo::QuadratureOptions quadrature{};
    double tail_tolerance{1e-12};
    double escalation_tolerance{1e-8}; // relative change of every scalar between Fock sizes
    std::size_t escalation_step{10};
    std::size_t max_extra_levels{80};
};

struct MatrixEvaluation {
    thermo::EngineReport report;
    std::size_t extra_levels{};
};

// Generic pipeline on the truncated ladder. The Fock size at each node is
// suggested_oscillator_dim + extra_levels, with extra_levels raised by escalation_step
// until P_w, sigma_dot, DeltaP_w, DeltaI_w, J_q and W change by less than the escalation
// tolerance. NumericError past max_extra_levels.
MatrixEvaluation evaluate_matrix(const OscillatorParams& params, const MatrixOptions& options = {});

} // namespace qtur::oscillator
