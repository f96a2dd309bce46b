#include "qtur/oscillator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include <boost/math/special_functions/bernoulli.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "qtur/errors.hpp"

namespace qtur::oscillator {

namespace {

constexpr double kPi = std::numbers::pi;

// Factors of the closed forms in q = exp(-x), x = beta omega:
//   e^x/(e^x-1)^2 = q/(1-q)^2, sinh(x) e^x/(e^x-1)^2 = (1+q)/(2(1-q)),
//   cosh(x) e^x/(e^x-1)^2 = (1+q^2)/(2(1-q)^2), (e^2x - 1)/(e^x-1)^2 = (1+q)/(1-q).
struct BoseFactors {
    double q;
    double one_minus_q;

    explicit BoseFactors(double x) : q(std::exp(-x)), one_minus_q(-std::expm1(-x)) {}
    double occupation() const { return q / one_minus_q; }
    double variance() const { return q / (one_minus_q * one_minus_q); }
    double odd() const { return (1.0 + q) / one_minus_q; }
    double even() const { return (1.0 + q * q) / (one_minus_q * one_minus_q); }
};

ProtocolPoint checked_point(const OscillatorParams& params, double t) {
    const ProtocolPoint p = protocol_point(params, t);
    if (!(p.omega > 0.0)) throw DomainError("oscillator: omega(t) must stay positive");
    return p;
}

} // namespace

void OscillatorParams::validate() const {
    auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
    if (!positive(omega0) || !positive(t_cold) || !positive(t_hot) || !positive(gamma) || !positive(tau)) {
        throw DomainError("OscillatorParams: omega0, T_c, T_h, Gamma and tau must be positive and finite");
    }
    if (!(t_cold < t_hot)) {
        std::ostringstream msg;
        msg << "OscillatorParams: need T_c < T_h (got T_c = " << t_cold << ", T_h = " << t_hot << ")";
        throw DomainError(msg.str());
    }
}

ProtocolPoint protocol_point(const OscillatorParams& params, double t) {
    const double w = 2.0 * kPi / params.tau;
    const double s = std::sin(0.5 * w * t);
    const double span = 1.0 / params.t_hot - 1.0 / params.t_cold;
    ProtocolPoint p;
    p.omega = params.omega0 * (1.0 + 0.5 * std::sin(w * t) + 0.25 * std::sin(2.0 * w * t + kPi));
    // The phase pi cancels the two rates at t = 0 and t = tau.
    p.omega_rate = params.omega0 * 0.5 * w * (std::cos(w * t) - std::cos(2.0 * w * t));
    p.beta = 1.0 / params.t_cold + s * s * span;
    p.beta_rate = 0.5 * w * std::sin(w * t) * span;
    return p;
}

thermo::Protocol reference_protocol(const OscillatorParams& params) {
    params.validate();
    thermo::ScalarPath omega{[params](double t) { return protocol_point(params, t).omega; },
                             [params](double t) { return protocol_point(params, t).omega_rate; }};
    return thermo::Protocol(params.tau, params.t_cold, params.t_hot, thermo::sine_squared(params.tau), {omega});
}

double x_coth_x_minus_one(double x) {
    x = std::abs(x);
    if (x < 1.0) {
        // x coth x = sum_n 4^n B_2n x^2n / (2n)!; terms shrink by about (x/pi)^2.
        static const std::array<double, 20> coefficients = [] {
            std::array<double, 20> c{};
            double four = 1.0;
            for (std::size_t n = 1; n <= c.size(); ++n) {
                four *= 4.0;
                c[n - 1] = four * boost::math::bernoulli_b2n<double>(int(n)) / std::tgamma(2.0 * double(n) + 1.0);
            }
            return c;
        }();
        const double x2 = x * x;
        double sum = 0.0;
        for (std::size_t n = coefficients.size(); n-- > 0;) sum = x2 * (coefficients[n] + sum);
        return sum;
    }
    const double q2 = std::exp(-2.0 * x);
    return x * (1.0 + q2) / (-std::expm1(-2.0 * x)) - 1.0;
}

double relaxation_time(double omega, double gamma) { return gamma / (gamma * gamma + 4.0 * omega * omega); }

Integrands integrands(double t, const OscillatorParams& params) {
    const ProtocolPoint p = checked_point(params, t);
    const double g = params.gamma;
    const double w = p.omega;
    const double wd = p.omega_rate;
    const double x = p.beta * w;
    const double lorentz = g * g + 4.0 * w * w;
    const BoseFactors b(x);
    const double phi_rate = p.beta_rate * w + p.beta * wd; // d(beta omega)/dt

    Integrands out;
    out.power = wd * (b.variance() * phi_rate / g + g * wd * b.odd() / (2.0 * w * lorentz));
    out.fluct = 2.0 * wd * wd * (b.variance() * lorentz + 0.5 * g * g * b.even()) / (g * lorentz);
    out.sigma = b.variance() * phi_rate * phi_rate / g + p.beta * g * wd * wd * b.odd() / (2.0 * w * lorentz);
    out.qcorr = wd * wd * g * b.odd() * x_coth_x_minus_one(x) / (2.0 * x * lorentz);
    out.adwork = wd * b.occupation();
    return out;
}

double power_integrand(double t, const OscillatorParams& params) { return integrands(t, params).power; }
double fluct_integrand(double t, const OscillatorParams& params) { return integrands(t, params).fluct; }
double sigma_integrand(double t, const OscillatorParams& params) { return integrands(t, params).sigma; }
double qcorr_integrand(double t, const OscillatorParams& params) { return integrands(t, params).qcorr; }
double adwork_integrand(double t, const OscillatorParams& params) { return integrands(t, params).adwork; }

thermo::EngineReport evaluate(const OscillatorParams& params) {
    params.validate();
    constexpr double kTolerance = 1e-9;
    using Kronrod = boost::math::quadrature::gauss_kronrod<double, 61>;

    std::array<double, 5> totals{};
    for (std::size_t k = 0; k < totals.size(); ++k) {
        auto f = [&](double t) {
            const Integrands i = integrands(t, params);
            const std::array<double, 5> v{i.power, i.fluct, i.sigma, i.qcorr, i.adwork};
            return v[k];
        };
        double error = 0.0;
        double l1 = 0.0;
        totals[k] = Kronrod::integrate(f, 0.0, params.tau, 20, kTolerance, &error, &l1);
        // Integrals that cancel to ~0 (W of a nearly reversible cycle) are judged against int |f|.
        if (error > kTolerance * std::max(std::abs(totals[k]), 1e-6 * l1)) {
            std::ostringstream msg;
            msg << "oscillator::evaluate: quadrature error " << error << " above tolerance for integrand " << k;
            throw NumericError(msg.str());
        }
    }

    double energy_scale = 0.0;
    for (int i = 0; i <= 64; ++i) {
        const ProtocolPoint p = checked_point(params, params.tau * i / 64.0);
        energy_scale = std::max(energy_scale, p.omega * (BoseFactors(p.beta * p.omega).occupation() + 0.5));
    }

    const double inv_tau = 1.0 / params.tau;
    thermo::EngineInputs in;
    in.tau = params.tau;
    in.t_cold = params.t_cold;
    in.t_hot = params.t_hot;
    in.adiabatic_work = totals[4];
    in.friction_work = totals[0];
    in.delta_p = totals[1] * inv_tau;
    in.sigma_dot = totals[2] * inv_tau;
    in.delta_i = totals[3] * inv_tau;
    in.t_eq = 1.0 / params.gamma;
    in.energy_scale = energy_scale;
    return thermo::efficiency_and_bounds(in);
}

MatrixEvaluation evaluate_matrix(const OscillatorParams& params, const MatrixOptions& options) {
    params.validate();
    if (options.escalation_step == 0) throw ValidationError("evaluate_matrix: escalation_step must be positive");
    if (!(options.escalation_tolerance > 0.0)) {
        throw ValidationError("evaluate_matrix: escalation_tolerance must be positive");
    }
    const thermo::Protocol protocol = reference_protocol(params);
    auto run = [&](std::size_t extra) {
        const thermo::OscillatorFamily family(params.gamma, options.tail_tolerance, extra);
        return thermo::evaluate_engine(protocol, family, options.quadrature);
    };
    auto scalars = [](const thermo::EngineReport& r) {
        return std::array<double, 6>{r.P_w, r.sigma_dot, r.DeltaP_w, r.DeltaI_w, r.J_q, r.W_ad};
    };

    std::size_t extra = 0;
    thermo::EngineReport previous = run(extra);
    while (extra + options.escalation_step <= options.max_extra_levels) {
        extra += options.escalation_step;
        thermo::EngineReport next = run(extra);
        const auto a = scalars(previous);
        const auto b = scalars(next);
        bool stable = true;
        for (std::size_t k = 0; k < a.size(); ++k) {
            if (std::abs(a[k] - b[k]) > options.escalation_tolerance * std::abs(b[k])) stable = false;
        }
        if (stable) return {std::move(next), extra};
        previous = std::move(next);
    }
    std::ostringstream msg;
    msg << "evaluate_matrix: Fock truncation did not settle within " << options.max_extra_levels << " extra levels";
    throw NumericError(msg.str());
}

} // namespace qtur::oscillator
