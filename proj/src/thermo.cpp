#include "qtur/thermo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "qtur/errors.hpp"

namespace qtur::thermo {

namespace {

constexpr double kPi = std::numbers::pi;

void require_engine_temperatures(double t_cold, double t_hot, const char* where) {
    if (!(t_cold > 0.0) || !std::isfinite(t_cold) || !std::isfinite(t_hot) || !(t_cold < t_hot)) {
        std::ostringstream msg;
        msg << where << ": need 0 < T_c < T_h (got T_c = " << t_cold << ", T_h = " << t_hot << ")";
        throw DomainError(msg.str());
    }
}

// Runs body(i) for i in [0, n) on up to `jobs` threads; rethrows the first exception.
template <class Body>
void parallel_for(std::size_t n, unsigned jobs, Body&& body) {
    if (jobs <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const unsigned workers = std::min<unsigned>(jobs, unsigned(n));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next.store(n);
                    return;
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

} // namespace

// ---------------------------------------------------------------------------
// Protocol

std::function<double(double)> temperature_profile(double t_cold, double t_hot, std::function<double(double)> alpha) {
    require_engine_temperatures(t_cold, t_hot, "temperature_profile");
    if (!alpha) throw ValidationError("temperature_profile: alpha is empty");
    return [t_cold, t_hot, alpha = std::move(alpha)](double t) {
        double a = alpha(t);
        if (!(a >= -1e-12 && a <= 1.0 + 1e-12)) {
            std::ostringstream msg;
            msg << "temperature_profile: alpha(" << t << ") = " << a << " outside [0, 1]";
            throw ValidationError(msg.str());
        }
        a = std::clamp(a, 0.0, 1.0);
        return t_cold * t_hot / (t_hot + (t_cold - t_hot) * a);
    };
}

Protocol::Protocol(double tau, double t_cold, double t_hot, ScalarPath alpha, std::vector<ScalarPath> controls)
    : tau_(tau), t_cold_(t_cold), t_hot_(t_hot), alpha_(std::move(alpha)), controls_(std::move(controls)) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw DomainError("Protocol: tau must be positive and finite");
    require_engine_temperatures(t_cold, t_hot, "Protocol");
    if (!alpha_.value) throw ValidationError("Protocol: alpha has no value function");
    for (const auto& c : controls_) {
        if (!c.value) throw ValidationError("Protocol: control has no value function");
    }

    auto fail = [](const std::string& what) { throw ValidationError("Protocol: " + what); };
    if (std::abs(alpha_.value(0.0)) > 1e-10 || std::abs(alpha_.value(tau)) > 1e-10) {
        fail("alpha(0) = alpha(tau) = 0 violated");
    }
    if (std::abs(alpha_rate(0.0)) > 1e-8 || std::abs(alpha_rate(tau)) > 1e-8) {
        fail("alpha'(0) = alpha'(tau) = 0 violated");
    }
    for (std::size_t k = 0; k < controls_.size(); ++k) {
        const auto& c = controls_[k];
        const double start = c.value(0.0);
        const double scale = std::max(1.0, std::abs(start));
        if (std::abs(start - c.value(tau)) > 1e-10 * scale) fail("control " + std::to_string(k) + " is not closed");
        if (std::abs(rate_of(c, 0.0)) > 1e-8 * scale || std::abs(rate_of(c, tau)) > 1e-8 * scale) {
            fail("control " + std::to_string(k) + " has non-zero boundary rate");
        }
    }
    for (int i = 0; i <= 1024; ++i) {
        const double a = alpha_.value(tau * i / 1024.0);
        if (!(a >= -1e-12 && a <= 1.0 + 1e-12)) fail("alpha leaves [0, 1]");
    }
}

double Protocol::rate_of(const ScalarPath& path, double t) const {
    if (path.rate) return path.rate(t);
    const double h = tau_ * 1e-6;
    const auto& f = path.value;
    if (t - h < 0.0) return (-3.0 * f(t) + 4.0 * f(t + h) - f(t + 2.0 * h)) / (2.0 * h);
    if (t + h > tau_) return (3.0 * f(t) - 4.0 * f(t - h) + f(t - 2.0 * h)) / (2.0 * h);
    return (f(t + h) - f(t - h)) / (2.0 * h);
}

double Protocol::alpha(double t) const {
    const double a = alpha_.value(t);
    if (!(a >= -1e-12 && a <= 1.0 + 1e-12)) throw ValidationError("Protocol: alpha leaves [0, 1]");
    return std::clamp(a, 0.0, 1.0);
}

double Protocol::alpha_rate(double t) const { return rate_of(alpha_, t); }

double Protocol::beta(double t) const { return 1.0 / t_cold_ + alpha(t) * (1.0 / t_hot_ - 1.0 / t_cold_); }

double Protocol::beta_rate(double t) const { return alpha_rate(t) * (1.0 / t_hot_ - 1.0 / t_cold_); }

double Protocol::temperature(double t) const { return 1.0 / beta(t); }

std::vector<double> Protocol::controls(double t) const {
    std::vector<double> out;
    out.reserve(controls_.size());
    for (const auto& c : controls_) out.push_back(c.value(t));
    return out;
}

std::vector<double> Protocol::control_rates(double t) const {
    std::vector<double> out;
    out.reserve(controls_.size());
    for (const auto& c : controls_) out.push_back(rate_of(c, t));
    return out;
}

bool Protocol::uses_finite_differences() const {
    if (!alpha_.rate) return true;
    return std::any_of(controls_.begin(), controls_.end(), [](const ScalarPath& c) { return !c.rate; });
}

// ---------------------------------------------------------------------------
// Families

double GeneratorFamily::equilibration_time(const Protocol& protocol) const {
    double t_eq = 0.0;
    for (int i = 0; i <= 64; ++i) {
        const double t = protocol.tau() * i / 64.0;
        const auto snap = snapshot(protocol.beta(t), protocol.controls(t), protocol.control_rates(t));
        t_eq = std::max(t_eq, 1.0 / lindblad::spectral_gap(snap.generator));
    }
    return t_eq;
}

OscillatorFamily::OscillatorFamily(double gamma, double tail_tolerance, std::size_t extra_levels)
    : gamma_(gamma), tail_(tail_tolerance), extra_(extra_levels) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw DomainError("OscillatorFamily: Gamma must be positive");
    if (!(tail_tolerance > 0.0 && tail_tolerance < 1.0)) {
        throw DomainError("OscillatorFamily: tail tolerance must lie in (0, 1)");
    }
}

std::size_t OscillatorFamily::dim_at(double beta, double omega) const {
    const double bw = beta * omega;
    std::size_t dim = lindblad::suggested_oscillator_dim(bw, tail_) + extra_;
    // Keep the top population above the faithfulness floor.
    const double cap = std::floor(-std::log(opalg::kFaithfulFloor) / bw);
    if (cap < double(dim)) dim = std::max<std::size_t>(2, std::size_t(cap));
    return dim;
}

Snapshot OscillatorFamily::snapshot(double beta, const std::vector<double>& lambda,
                                    const std::vector<double>& lambda_rate) const {
    if (lambda.size() != 1 || lambda_rate.size() != 1) {
        throw DimensionError("OscillatorFamily: expects exactly one control (omega)");
    }
    const double omega = lambda[0];
    const double omega_rate = lambda_rate[0];
    const std::size_t d = dim_at(beta, omega);
    auto gen = lindblad::build_oscillator(omega, 1.0 / beta, gamma_, d, std::max(tail_, std::exp(-beta * omega * double(d)) * 2.0));

    const auto n = Eigen::Index(d);
    RealVector level(n);
    for (Eigen::Index k = 0; k < n; ++k) level(k) = double(k) + 0.5;
    const Matrix a = lindblad::annihilation(d);
    const Matrix a2 = a * a;
    Matrix rate = Matrix(level.cast<cplx>().asDiagonal()) + 0.5 * (a2 + a2.adjoint());
    rate *= omega_rate;
    auto h = gen.hamiltonian();
    return {std::move(gen), std::move(h), HermitianOperator(rate)};
}

double OscillatorFamily::equilibration_time(const Protocol&) const { return 1.0 / gamma_; }

DetailedBalancedFamily::DetailedBalancedFamily(HermitianOperator h0, std::vector<HermitianOperator> couplings,
                                               std::vector<lindblad::JumpSpec> specs)
    : h0_(std::move(h0)), couplings_(std::move(couplings)), specs_(std::move(specs)) {
    for (const auto& v : couplings_) {
        if (v.dim() != h0_.dim()) throw DimensionError("DetailedBalancedFamily: coupling dimension mismatch");
    }
}

Snapshot DetailedBalancedFamily::snapshot(double beta, const std::vector<double>& lambda,
                                          const std::vector<double>& lambda_rate) const {
    if (lambda.size() != couplings_.size() || lambda_rate.size() != couplings_.size()) {
        throw DimensionError("DetailedBalancedFamily: control count mismatch");
    }
    Matrix h = h0_.matrix();
    const auto n = Eigen::Index(h0_.dim());
    Matrix hr = Matrix::Zero(n, n);
    for (std::size_t k = 0; k < couplings_.size(); ++k) {
        h += lambda[k] * couplings_[k].matrix();
        hr += lambda_rate[k] * couplings_[k].matrix();
    }
    HermitianOperator hamiltonian(h);
    auto gen = lindblad::build_detailed_balanced(hamiltonian, beta, specs_);
    return {std::move(gen), std::move(hamiltonian), HermitianOperator(hr)};
}

// ---------------------------------------------------------------------------
// Quadrature

double pairwise_sum(const double* values, std::size_t n) {
    if (n == 0) return 0.0;
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += values[i];
        return s;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(values, half) + pairwise_sum(values + half, n - half);
}

namespace {

// Simpson sums from node values laid out as values[node * m + k].
void simpson_sums(const std::vector<double>& values, std::size_t nodes, std::size_t m, double h,
                  std::vector<double>& integral, std::vector<double>& abs_integral) {
    std::vector<double> scratch(nodes);
    std::vector<double> scratch_abs(nodes);
    integral.assign(m, 0.0);
    abs_integral.assign(m, 0.0);
    for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t i = 0; i < nodes; ++i) {
            const double w = (i == 0 || i + 1 == nodes) ? 1.0 : (i % 2 ? 4.0 : 2.0);
            const double v = values[i * m + k];
            scratch[i] = w * v;
            scratch_abs[i] = w * std::abs(v);
        }
        integral[k] = pairwise_sum(scratch.data(), nodes) * h / 3.0;
        abs_integral[k] = pairwise_sum(scratch_abs.data(), nodes) * h / 3.0;
    }
}

} // namespace

QuadratureResult simpson_integrate(double a, double b, std::size_t m, const std::function<void(double, double*)>& f,
                                   const QuadratureOptions& options) {
    std::size_t nodes = options.initial_nodes;
    if (nodes < 3 || nodes % 2 == 0) throw ValidationError("simpson_integrate: initial_nodes must be odd and >= 3");
    if (options.max_nodes < nodes) throw ValidationError("simpson_integrate: max_nodes below initial_nodes");
    if (!(options.rel_tol > 0.0)) throw ValidationError("simpson_integrate: rel_tol must be positive");
    if (!(b > a)) throw DomainError("simpson_integrate: need b > a");

    std::vector<double> values(nodes * m);
    auto grid = [&](std::size_t i, std::size_t count) { return a + (b - a) * double(i) / double(count - 1); };
    parallel_for(nodes, options.jobs, [&](std::size_t i) { f(grid(i, nodes), values.data() + i * m); });

    QuadratureResult result;
    simpson_sums(values, nodes, m, (b - a) / double(nodes - 1), result.integrals, result.abs_integrals);
    result.nodes = nodes;

    for (;;) {
        const std::size_t next = 2 * nodes - 1;
        if (next > options.max_nodes) {
            std::ostringstream msg;
            msg << "simpson_integrate: no convergence to rel_tol " << options.rel_tol << " within "
                << options.max_nodes << " nodes";
            throw NumericError(msg.str());
        }
        std::vector<double> refined(next * m);
        for (std::size_t i = 0; i < nodes; ++i) {
            std::copy_n(values.data() + i * m, m, refined.data() + 2 * i * m);
        }
        parallel_for(nodes - 1, options.jobs,
                     [&](std::size_t i) { f(grid(2 * i + 1, next), refined.data() + (2 * i + 1) * m); });
        QuadratureResult fine;
        simpson_sums(refined, next, m, (b - a) / double(next - 1), fine.integrals, fine.abs_integrals);
        fine.nodes = next;

        bool converged = true;
        for (std::size_t k = 0; k < m; ++k) {
            const double change = std::abs(fine.integrals[k] - result.integrals[k]);
            if (change > options.rel_tol * std::abs(fine.integrals[k]) + 1e-12 * fine.abs_integrals[k]) {
                converged = false;
            }
        }
        values = std::move(refined);
        nodes = next;
        result = std::move(fine);
        if (converged) return result;
    }
}

// ---------------------------------------------------------------------------
// Inner products

namespace {

double curve_product(double tau, const LindbladianCurve& generator, const OperatorCurve& a, const OperatorCurve& b,
                     const QuadratureOptions& options, bool arithmetic) {
    if (!(tau > 0.0)) throw DomainError("inner_product: tau must be positive");
    auto integrand = [&](double t, double* out) {
        const Lindbladian gen = generator(t);
        const auto& pi = gen.stationary();
        const HermitianOperator at = a(t);
        const HermitianOperator bt = b(t);
        const auto ra = lindblad::theta_integral(gen, at);
        const auto rb = lindblad::theta_integral(gen, bt);
        auto mean = [&](const HermitianOperator& x) {
            return arithmetic ? opalg::arith_mean_apply(pi, x) : opalg::log_mean_apply(pi, x);
        };
        out[0] = 0.5 * (opalg::trace_product(ra, mean(bt)) + opalg::trace_product(rb, mean(at)));
    };
    return simpson_integrate(0.0, tau, 1, integrand, options).integrals[0] / tau;
}

} // namespace

double inner_product(double tau, const LindbladianCurve& generator, const OperatorCurve& a, const OperatorCurve& b,
                     const QuadratureOptions& options) {
    return curve_product(tau, generator, a, b, options, false);
}

double inner_product_prime(double tau, const LindbladianCurve& generator, const OperatorCurve& a,
                           const OperatorCurve& b, const QuadratureOptions& options) {
    return curve_product(tau, generator, a, b, options, true);
}

// ---------------------------------------------------------------------------
// Engine functionals

NodeTerms node_terms(const Protocol& protocol, const GeneratorFamily& family, double t) {
    using opalg::trace_product;
    const double alpha = protocol.alpha(t);
    const double alpha_rate = protocol.alpha_rate(t);
    const double beta = protocol.beta(t);
    const double beta_rate = protocol.beta_rate(t);
    const Snapshot snap = family.snapshot(beta, protocol.controls(t), protocol.control_rates(t));
    const auto& gen = snap.generator;
    const auto& pi = gen.stationary();
    pi.require_faithful();
    const std::size_t d = pi.dim();

    const auto dh = opalg::delta_centered(pi, snap.hamiltonian);
    const auto dh_rate = opalg::delta_centered(pi, snap.hamiltonian_rate);
    const auto r_h = lindblad::theta_integral(gen, dh_rate);
    const auto r_e = beta_rate != 0.0 ? lindblad::theta_integral(gen, dh) : HermitianOperator::zero(d);

    // Phi' = beta' dH + beta dH' is centered by construction.
    const auto phi = dh * beta_rate + dh_rate * beta;
    const auto r_phi = r_e * beta_rate + r_h * beta;
    const auto j_phi = opalg::log_mean_apply(pi, phi);
    const auto j_h = opalg::log_mean_apply(pi, dh_rate);
    const auto s_h = opalg::arith_mean_apply(pi, dh_rate);

    NodeTerms out;
    out.sigma = trace_product(r_phi, j_phi);
    const double rh_jphi = trace_product(r_h, j_phi);
    out.cross = 0.5 * (rh_jphi + trace_product(r_phi, j_h));
    out.hh_log = trace_product(r_h, j_h);
    out.hh_arith = trace_product(r_h, s_h);
    out.qcorr = opalg::skew_covariance(pi, r_h, dh_rate);
    out.adwork = pi.expectation(snap.hamiltonian_rate);
    // tr(rho X) = tr(pi X) + tr(J(Phi') R_dX) to first order.
    const double energy = pi.expectation(snap.hamiltonian) + trace_product(r_e, j_phi);
    const double power = out.adwork + rh_jphi;
    out.heat = -alpha_rate * energy - alpha * power;
    out.energy_scale = pi.energies().cwiseAbs().maxCoeff();
    return out;
}

CycleTotals cycle_totals(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options) {
    if (protocol.control_count() != family.control_count()) {
        throw DimensionError("cycle_totals: protocol and family disagree on the number of controls");
    }
    std::mutex scale_mutex;
    double energy_scale = 0.0;
    auto integrand = [&](double t, double* out) {
        const NodeTerms n = node_terms(protocol, family, t);
        out[0] = n.sigma;
        out[1] = n.cross;
        out[2] = n.hh_log;
        out[3] = n.hh_arith;
        out[4] = n.qcorr;
        out[5] = n.adwork;
        out[6] = n.heat;
        std::lock_guard<std::mutex> lock(scale_mutex);
        energy_scale = std::max(energy_scale, n.energy_scale);
    };
    const auto q = simpson_integrate(0.0, protocol.tau(), 7, integrand, options);
    const double inv_tau = 1.0 / protocol.tau();
    CycleTotals c;
    c.sigma_dot = q.integrals[0] * inv_tau;
    c.cross = q.integrals[1] * inv_tau;
    c.hh_log = q.integrals[2] * inv_tau;
    c.delta_p = 2.0 * q.integrals[3] * inv_tau;
    c.delta_i = q.integrals[4] * inv_tau;
    c.adiabatic_work = q.integrals[5];
    c.heat_flux = q.integrals[6] * inv_tau;
    c.energy_scale = energy_scale;
    c.nodes = q.nodes;
    return c;
}

double entropy_production_rate(const Protocol& protocol, const GeneratorFamily& family,
                               const QuadratureOptions& options) {
    return cycle_totals(protocol, family, options).sigma_dot;
}

double average_power(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options) {
    const auto c = cycle_totals(protocol, family, options);
    return -c.adiabatic_work / protocol.tau() - c.cross;
}

double adiabatic_work(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options) {
    if (protocol.control_count() != family.control_count()) {
        throw DimensionError("adiabatic_work: protocol and family disagree on the number of controls");
    }
    auto integrand = [&](double t, double* out) {
        const auto snap = family.snapshot(protocol.beta(t), protocol.controls(t), protocol.control_rates(t));
        out[0] = snap.generator.stationary().expectation(snap.hamiltonian_rate);
    };
    return simpson_integrate(0.0, protocol.tau(), 1, integrand, options).integrals[0];
}

double heat_flux(const Protocol& protocol, const GeneratorFamily& family, const QuadratureOptions& options) {
    return cycle_totals(protocol, family, options).heat_flux;
}

PowerFluctuations power_fluctuations(const Protocol& protocol, const GeneratorFamily& family,
                                     const QuadratureOptions& options) {
    const auto c = cycle_totals(protocol, family, options);
    return {c.delta_p, c.delta_i};
}

std::optional<double> relaxation_timescale(const Lindbladian& generator, const HermitianOperator& hamiltonian_rate) {
    const auto& pi = generator.stationary();
    const auto dh = opalg::delta_centered(pi, hamiltonian_rate);
    const double denominator = opalg::skew_covariance(pi, dh, dh);
    if (!(denominator > 1e-14)) return std::nullopt;
    const auto r = lindblad::theta_integral(generator, dh);
    return opalg::skew_covariance(pi, r, dh) / denominator;
}

EngineReport efficiency_and_bounds(const EngineInputs& in) {
    if (!(in.tau > 0.0)) throw DomainError("efficiency_and_bounds: tau must be positive");
    require_engine_temperatures(in.t_cold, in.t_hot, "efficiency_and_bounds");

    EngineReport r;
    r.tau = in.tau;
    r.t_cold = in.t_cold;
    r.t_hot = in.t_hot;
    r.t_eq = in.t_eq;
    r.epsilon = in.t_eq / in.tau;
    r.eta_C = 1.0 - in.t_cold / in.t_hot;
    r.W_ad = in.adiabatic_work;
    r.w_avg = in.adiabatic_work + in.friction_work;
    r.P_W = -in.adiabatic_work / in.tau;
    r.P_w = -r.w_avg / in.tau;
    r.sigma_dot = in.sigma_dot;
    r.DeltaP_w = in.delta_p;
    r.DeltaI_w = in.delta_i;
    r.J_q_identity = (in.t_cold * in.sigma_dot + r.P_w) / r.eta_C;
    r.J_q = in.heat_flux.value_or(r.J_q_identity);
    r.engine_flag = r.P_w >= 0.0;

    const double denominator = in.t_cold * in.sigma_dot + r.P_w;
    if (denominator != 0.0) r.eta = r.eta_C * r.P_w / denominator;
    if (in.delta_p > 0.0) r.eta_PS = r.eta_C / (1.0 + 2.0 * in.t_cold * r.P_w / in.delta_p);

    r.operating = std::abs(r.w_avg) >= 1e-14 * std::max(in.energy_scale, 1e-300);
    if (r.operating) {
        // 1 - |W/<w>| = (|<w>| - |W|)/|<w>|, with |<w>| - |W| = +-(<w> - W) when the signs agree.
        const bool same_sign = (r.w_avg >= 0.0) == (in.adiabatic_work >= 0.0);
        const double gap = same_sign ? (r.w_avg >= 0.0 ? in.friction_work : -in.friction_work)
                                     : std::abs(r.w_avg) - std::abs(in.adiabatic_work);
        const double x = gap / std::abs(r.w_avg);
        const double f = x * x;
        r.f_value = f;
        const double quantum = in.delta_p - 2.0 * in.delta_i;
        if (quantum > 0.0) r.eta_Q = r.eta_C / (1.0 + 2.0 * in.t_cold * f * r.P_w / quantum);
        if (in.delta_p > 0.0) r.eta_cl = r.eta_C / (1.0 + 2.0 * in.t_cold * f * r.P_w / in.delta_p);
        r.tur_residual = quantum * in.sigma_dot - 2.0 * f * r.P_w * r.P_w;
        r.tur_scale = in.delta_p * in.sigma_dot + 2.0 * f * r.P_w * r.P_w;
    } else {
        r.tur_scale = in.delta_p * in.sigma_dot;
    }
    return r;
}

std::vector<std::string> check_invariants(const EngineReport& r) {
    std::vector<std::string> out;
    auto report = [&](const std::string& name, double margin) {
        std::ostringstream msg;
        msg.precision(17);
        msg << name << " (margin " << margin << ")";
        out.push_back(msg.str());
    };
    if (r.sigma_dot < -1e-12) report("sigma_dot >= 0", r.sigma_dot);
    const double slack = 1e-12 * std::max(1.0, std::abs(r.DeltaP_w));
    if (2.0 * r.DeltaI_w < -slack) report("DeltaI_w >= 0", 2.0 * r.DeltaI_w);
    if (r.DeltaP_w - 2.0 * r.DeltaI_w < -slack) report("2 DeltaI_w <= DeltaP_w", r.DeltaP_w - 2.0 * r.DeltaI_w);
    if (r.tur_residual && *r.tur_residual < -1e-9 * r.tur_scale) report("quantum TUR", *r.tur_residual);
    if (r.engine_flag && r.operating) {
        if (r.eta && *r.eta > r.eta_C + 1e-12) report("eta <= eta_C", r.eta_C - *r.eta);
        if (r.eta && r.eta_Q && *r.eta > *r.eta_Q + 1e-12) report("eta <= eta_Q", *r.eta_Q - *r.eta);
        if (r.eta_Q && r.eta_cl && *r.eta_Q > *r.eta_cl + 1e-12) report("eta_Q <= eta_cl", *r.eta_cl - *r.eta_Q);
    }
    return out;
}

EngineReport evaluate_engine(const Protocol& protocol, const GeneratorFamily& family,
                             const QuadratureOptions& options) {
    const auto c = cycle_totals(protocol, family, options);
    EngineInputs in;
    in.tau = protocol.tau();
    in.t_cold = protocol.t_cold();
    in.t_hot = protocol.t_hot();
    in.adiabatic_work = c.adiabatic_work;
    in.friction_work = protocol.tau() * c.cross;
    in.sigma_dot = c.sigma_dot;
    in.delta_p = c.delta_p;
    in.delta_i = c.delta_i;
    in.heat_flux = c.heat_flux;
    in.t_eq = family.equilibration_time(protocol);
    in.energy_scale = c.energy_scale;
    auto report = efficiency_and_bounds(in);
    report.finite_difference = protocol.uses_finite_differences();
    report.nodes = c.nodes;
    return report;
}

ExpansionCoefficients expansion_coefficients(const EngineReport& r) {
    ExpansionCoefficients e;
    e.epsilon = r.epsilon;
    if (!(e.epsilon > 0.0)) throw DomainError("expansion_coefficients: t_eq / tau must be positive");
    e.a_P = -((r.w_avg - r.W_ad) / r.tau) / e.epsilon;
    e.a_DeltaP = (r.DeltaP_w - 2.0 * r.DeltaI_w) / e.epsilon;
    if (r.P_W > 0.0 && e.a_DeltaP > 0.0) {
        e.eta_firstorder = r.eta_C * (1.0 - e.epsilon * 2.0 * r.t_cold * e.a_P * e.a_P / (r.P_W * e.a_DeltaP));
    }
    return e;
}

ExpansionCoefficients expansion_coefficients(const Protocol& protocol, const GeneratorFamily& family,
                                             const QuadratureOptions& options) {
    return expansion_coefficients(evaluate_engine(protocol, family, options));
}

// ---------------------------------------------------------------------------
// Protocol construction helpers

ScalarPath sine_squared(double tau) {
    return {[tau](double t) {
                const double s = std::sin(kPi * t / tau);
                return s * s;
            },
            [tau](double t) { return (kPi / tau) * std::sin(2.0 * kPi * t / tau); }};
}

ScalarPath fourier_control(double tau, double base, std::vector<double> a, std::vector<double> b) {
    if (!(tau > 0.0)) throw DomainError("fourier_control: tau must be positive");
    const double w = 2.0 * kPi / tau;
    auto value = [tau, base, a, b, w](double t) {
        double v = base;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double m = double(i + 1);
            v += a[i] * (std::sin(m * w * t) - m / (m + 1.0) * std::sin((m + 1.0) * w * t));
        }
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double m = double(i + 1);
            v += b[i] * (1.0 - std::cos(m * w * t));
        }
        (void)tau;
        return v;
    };
    auto rate = [a, b, w](double t) {
        double v = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double m = double(i + 1);
            v += a[i] * m * w * (std::cos(m * w * t) - std::cos((m + 1.0) * w * t));
        }
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double m = double(i + 1);
            v += b[i] * m * w * std::sin(m * w * t);
        }
        return v;
    };
    return {value, rate};
}

Engine random_engine(std::mt19937_64& rng, std::size_t dim, double tau) {
    if (dim < 2) throw DimensionError("random_engine: dim must be at least 2");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto d = Eigen::Index(dim);

    RealVector energies(d);
    energies(0) = 0.0;
    for (Eigen::Index k = 1; k < d; ++k) energies(k) = energies(k - 1) + 0.3 + 0.7 * unit(rng);

    const std::size_t n_controls = unit(rng) < 0.5 ? 1 : 2;
    std::vector<HermitianOperator> couplings;
    std::vector<ScalarPath> controls;
    // Each control stays within +-0.06 so the total shift is below half the minimum gap.
    const double budget = 0.06;
    for (std::size_t c = 0; c < n_controls; ++c) {
        Matrix z(d, d);
        for (Eigen::Index j = 0; j < d; ++j) {
            for (Eigen::Index i = 0; i < d; ++i) z(i, j) = cplx(normal(rng), normal(rng));
        }
        Matrix v = 0.5 * (z + z.adjoint());
        const double norm = Eigen::SelfAdjointEigenSolver<Matrix>(v).eigenvalues().cwiseAbs().maxCoeff();
        couplings.emplace_back(Matrix(v / norm));

        std::vector<double> a(2);
        std::vector<double> b(2);
        for (auto& x : a) x = 2.0 * unit(rng) - 1.0;
        for (auto& x : b) x = 2.0 * unit(rng) - 1.0;
        // |g_m| <= 2 and |h_m| <= 2.
        double total = 0.0;
        for (double x : a) total += 2.0 * std::abs(x);
        for (double x : b) total += 2.0 * std::abs(x);
        for (auto& x : a) x *= budget / total;
        for (auto& x : b) x *= budget / total;
        controls.push_back(fourier_control(tau, 0.0, a, b));
    }

    std::vector<lindblad::JumpSpec> specs;
    for (std::size_t k = 0; k + 1 < dim; ++k) {
        specs.push_back({k, k + 1, 0.2 + 0.8 * unit(rng), lindblad::RateConvention::kBose});
    }
    if (dim > 2) specs.push_back({0, dim - 1, 0.05 + 0.45 * unit(rng), lindblad::RateConvention::kUpward});

    const double t_cold = 0.3 + 0.7 * unit(rng);
    const double t_hot = t_cold * (1.5 + 2.5 * unit(rng));
    auto family = std::make_shared<DetailedBalancedFamily>(HermitianOperator::diagonal(energies), std::move(couplings),
                                                           std::move(specs));
    return {Protocol(tau, t_cold, t_hot, sine_squared(tau), std::move(controls)), std::move(family)};
}

Engine saturation_engine(double t_cold, double t_hot, double omega0, double amplitude, double rate, double tau) {
    require_engine_temperatures(t_cold, t_hot, "saturation_engine");
    if (!(omega0 > 0.0) || !(amplitude > 0.0) || !(rate > 0.0)) {
        throw DomainError("saturation_engine: omega0, amplitude and rate must be positive");
    }
    // beta(omega0) = 1/T_c and beta(omega0 (1 + amplitude)) = 1/T_h.
    const double k = omega0 * (1.0 / t_cold - 1.0 / t_hot) * (1.0 + amplitude) / amplitude;
    const double b0 = 1.0 / t_cold - k / omega0;
    const double w = kPi / tau;

    auto omega = [=](double t) {
        const double s = std::sin(w * t);
        return omega0 * (1.0 + amplitude * s * s);
    };
    auto omega_rate = [=](double t) { return omega0 * amplitude * w * std::sin(2.0 * w * t); };
    const double span = 1.0 / t_hot - 1.0 / t_cold;
    ScalarPath alpha{[=](double t) { return (b0 + k / omega(t) - 1.0 / t_cold) / span; },
                     [=](double t) {
                         const double o = omega(t);
                         return -k * omega_rate(t) / (o * o) / span;
                     }};

    Matrix sz = Matrix::Zero(2, 2);
    sz(0, 0) = 0.5;
    sz(1, 1) = -0.5;
    auto family = std::make_shared<DetailedBalancedFamily>(
        HermitianOperator::zero(2), std::vector<HermitianOperator>{HermitianOperator(sz)},
        std::vector<lindblad::JumpSpec>{{0, 1, rate, lindblad::RateConvention::kUpward}});
    return {Protocol(tau, t_cold, t_hot, std::move(alpha), {ScalarPath{omega, omega_rate}}), std::move(family)};
}

} // namespace qtur::thermo
