#include "qtur/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

namespace qtur::cli {

using nlohmann::json;
using opalg::HermitianOperator;

namespace {

// ---------------------------------------------------------------------------
// Config reading

[[noreturn]] void config_fail(const std::string& path, const std::string& what) {
    throw ConfigError((path.empty() ? std::string("config") : path) + ": " + what);
}

void require_object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) config_fail(path, "expected an object");
    const std::set<std::string> keys(allowed.begin(), allowed.end());
    for (const auto& item : j.items()) {
        if (!keys.count(item.key())) config_fail(path, "unknown key \"" + item.key() + "\"");
    }
}

std::string child(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

double number_at(const json& j, const std::string& path) {
    if (!j.is_number()) config_fail(path, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) config_fail(path, "must be finite");
    return v;
}

double read_number(const json& obj, const char* key, const std::string& path, double fallback) {
    if (!obj.contains(key)) return fallback;
    return number_at(obj.at(key), child(path, key));
}

double read_positive(const json& obj, const char* key, const std::string& path, double fallback) {
    const double v = read_number(obj, key, path, fallback);
    if (!(v > 0.0)) config_fail(child(path, key), "must be positive");
    return v;
}

std::size_t read_count(const json& obj, const char* key, const std::string& path, std::size_t fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) config_fail(child(path, key), "expected a non-negative integer");
    return std::size_t(v.get<long long>());
}

std::vector<double> number_list(const json& j, const std::string& path) {
    if (!j.is_array()) config_fail(path, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number_at(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

Matrix read_matrix(const json& j, const std::string& path) {
    if (!j.is_object()) config_fail(path, "expected {\"diagonal\": [...]} or {\"real\": [[...]], \"imag\": [[...]]}");
    if (j.contains("diagonal")) {
        require_object(j, path, {"diagonal"});
        const auto d = number_list(j.at("diagonal"), child(path, "diagonal"));
        if (d.empty()) config_fail(path, "empty matrix");
        Matrix m = Matrix::Zero(Eigen::Index(d.size()), Eigen::Index(d.size()));
        for (std::size_t i = 0; i < d.size(); ++i) m(Eigen::Index(i), Eigen::Index(i)) = d[i];
        return m;
    }
    require_object(j, path, {"real", "imag"});
    if (!j.contains("real")) config_fail(path, "missing \"real\"");
    auto rows = [&](const char* key) {
        const std::string p = child(path, key);
        const auto& a = j.at(key);
        if (!a.is_array() || a.empty()) config_fail(p, "expected a non-empty array of rows");
        std::vector<std::vector<double>> out;
        for (std::size_t i = 0; i < a.size(); ++i) out.push_back(number_list(a[i], p + "[" + std::to_string(i) + "]"));
        for (const auto& r : out) {
            if (r.size() != out.size()) config_fail(p, "matrix must be square");
        }
        return out;
    };
    const auto re = rows("real");
    Matrix m(Eigen::Index(re.size()), Eigen::Index(re.size()));
    for (std::size_t i = 0; i < re.size(); ++i) {
        for (std::size_t k = 0; k < re.size(); ++k) m(Eigen::Index(i), Eigen::Index(k)) = re[i][k];
    }
    if (j.contains("imag")) {
        const auto im = rows("imag");
        if (im.size() != re.size()) config_fail(child(path, "imag"), "shape differs from \"real\"");
        for (std::size_t i = 0; i < re.size(); ++i) {
            for (std::size_t k = 0; k < re.size(); ++k) m(Eigen::Index(i), Eigen::Index(k)) += cplx(0.0, im[i][k]);
        }
    }
    try {
        (void)HermitianOperator(m);
    } catch (const Error& e) {
        config_fail(path, e.what());
    }
    return m;
}

json matrix_json(const Matrix& m) {
    json re = json::array();
    json im = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json r = json::array();
        json c = json::array();
        for (Eigen::Index k = 0; k < m.cols(); ++k) {
            r.push_back(m(i, k).real());
            c.push_back(m(i, k).imag());
        }
        re.push_back(r);
        im.push_back(c);
    }
    return {{"real", re}, {"imag", im}};
}

CustomEngine read_custom(const json& j, const std::string& path) {
    require_object(j, path, {"tau", "t_cold", "t_hot", "h0", "couplings", "controls", "jumps"});
    CustomEngine c;
    c.tau = read_positive(j, "tau", path, 100.0);
    if (!j.contains("t_cold") || !j.contains("t_hot")) config_fail(path, "t_cold and t_hot are required");
    c.t_cold = read_positive(j, "t_cold", path, 0.0);
    c.t_hot = read_positive(j, "t_hot", path, 0.0);
    if (!(c.t_cold < c.t_hot)) config_fail(path, "need t_cold < t_hot");
    if (!j.contains("h0")) config_fail(path, "missing \"h0\"");
    c.h0 = read_matrix(j.at("h0"), child(path, "h0"));
    const auto d = c.h0.rows();

    if (j.contains("couplings")) {
        const auto& a = j.at("couplings");
        if (!a.is_array()) config_fail(child(path, "couplings"), "expected an array");
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::string p = child(path, "couplings") + "[" + std::to_string(i) + "]";
            c.couplings.push_back(read_matrix(a[i], p));
            if (c.couplings.back().rows() != d) config_fail(p, "dimension differs from h0");
        }
    }
    if (j.contains("controls")) {
        const auto& a = j.at("controls");
        if (!a.is_array()) config_fail(child(path, "controls"), "expected an array");
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::string p = child(path, "controls") + "[" + std::to_string(i) + "]";
            require_object(a[i], p, {"base", "a", "b"});
            CustomEngine::Control ctl;
            ctl.base = read_number(a[i], "base", p, 0.0);
            if (a[i].contains("a")) ctl.a = number_list(a[i].at("a"), child(p, "a"));
            if (a[i].contains("b")) ctl.b = number_list(a[i].at("b"), child(p, "b"));
            c.controls.push_back(std::move(ctl));
        }
    }
    if (c.controls.size() != c.couplings.size()) config_fail(path, "need one control per coupling");

    if (!j.contains("jumps") || !j.at("jumps").is_array() || j.at("jumps").empty()) {
        config_fail(child(path, "jumps"), "expected a non-empty array");
    }
    const auto& jumps = j.at("jumps");
    for (std::size_t i = 0; i < jumps.size(); ++i) {
        const std::string p = child(path, "jumps") + "[" + std::to_string(i) + "]";
        require_object(jumps[i], p, {"lower", "upper", "rate", "convention"});
        lindblad::JumpSpec s;
        s.lower = read_count(jumps[i], "lower", p, 0);
        s.upper = read_count(jumps[i], "upper", p, 1);
        s.rate = read_positive(jumps[i], "rate", p, 1.0);
        const std::string conv = jumps[i].value("convention", std::string("upward"));
        if (conv == "upward") {
            s.convention = lindblad::RateConvention::kUpward;
        } else if (conv == "bose") {
            s.convention = lindblad::RateConvention::kBose;
        } else {
            config_fail(child(p, "convention"), "expected \"upward\" or \"bose\"");
        }
        if (!(s.lower < s.upper) || s.upper >= std::size_t(d)) config_fail(p, "need lower < upper < dim");
        c.jumps.push_back(s);
    }
    return c;
}

SweepAxis read_axis(const json& j, const std::string& path, EngineKind kind) {
    require_object(j, path, {"parameter", "values", "log_range", "linear_range"});
    if (!j.contains("parameter") || !j.at("parameter").is_string()) config_fail(path, "missing \"parameter\"");
    SweepAxis axis;
    axis.parameter = j.at("parameter").get<std::string>();
    const auto allowed = sweepable_parameters(kind);
    if (std::find(allowed.begin(), allowed.end(), axis.parameter) == allowed.end()) {
        config_fail(child(path, "parameter"), "\"" + axis.parameter + "\" is not a parameter of " + to_string(kind));
    }
    const int forms = int(j.contains("values")) + int(j.contains("log_range")) + int(j.contains("linear_range"));
    if (forms != 1) config_fail(path, "give exactly one of values, log_range, linear_range");
    if (j.contains("values")) {
        axis.values = number_list(j.at("values"), child(path, "values"));
    } else {
        const bool log = j.contains("log_range");
        const char* key = log ? "log_range" : "linear_range";
        const std::string p = child(path, key);
        const auto& r = j.at(key);
        require_object(r, p, {"start", "stop", "count"});
        if (!r.contains("start") || !r.contains("stop") || !r.contains("count")) {
            config_fail(p, "needs start, stop and count");
        }
        const double start = read_number(r, "start", p, 0.0);
        const double stop = read_number(r, "stop", p, 0.0);
        const std::size_t count = read_count(r, "count", p, 0);
        if (count == 0) config_fail(child(p, "count"), "must be at least 1");
        if (log && !(start > 0.0 && stop > 0.0)) config_fail(p, "log ranges need positive endpoints");
        for (std::size_t i = 0; i < count; ++i) {
            const double u = count == 1 ? 0.0 : double(i) / double(count - 1);
            axis.values.push_back(log ? std::exp(std::log(start) + u * (std::log(stop) - std::log(start)))
                                      : start + u * (stop - start));
        }
    }
    if (axis.values.empty()) config_fail(path, "sweep axis is empty");
    return axis;
}

EngineKind parse_kind(const std::string& s, const std::string& path) {
    if (s == "oscillator-analytic") return EngineKind::kOscillatorAnalytic;
    if (s == "oscillator-matrix") return EngineKind::kOscillatorMatrix;
    if (s == "custom-detailed-balanced") return EngineKind::kCustomDetailedBalanced;
    config_fail(path, "unknown engine \"" + s + "\"");
}

bool is_oscillator(EngineKind k) { return k != EngineKind::kCustomDetailedBalanced; }

// ---------------------------------------------------------------------------
// Sweep evaluation

struct Point {
    oscillator::OscillatorParams oscillator;
    CustomEngine custom;
    std::vector<std::pair<std::string, double>> inputs;
};

void assign(Point& p, const std::string& name, double v, EngineKind kind) {
    if (is_oscillator(kind)) {
        auto& o = p.oscillator;
        if (name == "omega0") o.omega0 = v;
        else if (name == "t_cold") o.t_cold = v;
        else if (name == "t_hot") o.t_hot = v;
        else if (name == "gamma") o.gamma = v;
        else if (name == "t_eq") o.gamma = 1.0 / v;
        else if (name == "tau") o.tau = v;
    } else {
        auto& c = p.custom;
        if (name == "t_cold") c.t_cold = v;
        else if (name == "t_hot") c.t_hot = v;
        else if (name == "tau") c.tau = v;
    }
}

std::vector<Point> expand(const RunConfig& config) {
    std::vector<Point> points;
    const std::size_t n = sweep_size(config);
    for (std::size_t index = 0; index < n; ++index) {
        Point p;
        p.oscillator = config.oscillator;
        if (config.custom) p.custom = *config.custom;
        std::size_t rest = index;
        std::vector<double> chosen(config.sweep.size());
        for (std::size_t a = config.sweep.size(); a-- > 0;) {
            const auto& axis = config.sweep[a];
            chosen[a] = axis.values[rest % axis.values.size()];
            rest /= axis.values.size();
        }
        for (std::size_t a = 0; a < config.sweep.size(); ++a) assign(p, config.sweep[a].parameter, chosen[a], config.kind);
        if (is_oscillator(config.kind)) {
            const auto& o = p.oscillator;
            p.inputs = {{"omega0", o.omega0}, {"t_cold", o.t_cold}, {"t_hot", o.t_hot}, {"gamma", o.gamma}, {"tau", o.tau}};
        } else {
            p.inputs = {{"tau", p.custom.tau}, {"t_cold", p.custom.t_cold}, {"t_hot", p.custom.t_hot}};
        }
        points.push_back(std::move(p));
    }
    return points;
}

thermo::Engine custom_engine(const CustomEngine& c) {
    std::vector<HermitianOperator> couplings;
    for (const auto& m : c.couplings) couplings.emplace_back(m);
    std::vector<thermo::ScalarPath> controls;
    for (const auto& ctl : c.controls) controls.push_back(thermo::fourier_control(c.tau, ctl.base, ctl.a, ctl.b));
    auto family = std::make_shared<thermo::DetailedBalancedFamily>(HermitianOperator(c.h0), std::move(couplings), c.jumps);
    return {thermo::Protocol(c.tau, c.t_cold, c.t_hot, thermo::sine_squared(c.tau), std::move(controls)),
            std::move(family)};
}

SweepPoint evaluate_point(const RunConfig& config, const Point& p, unsigned quadrature_jobs) {
    SweepPoint out;
    out.inputs = p.inputs;
    auto quadrature = config.quadrature;
    quadrature.jobs = quadrature_jobs;
    switch (config.kind) {
    case EngineKind::kOscillatorAnalytic:
        out.report = oscillator::evaluate(p.oscillator);
        break;
    case EngineKind::kOscillatorMatrix: {
        auto fock = config.fock;
        fock.quadrature = quadrature;
        auto m = oscillator::evaluate_matrix(p.oscillator, fock);
        out.report = m.report;
        out.fock_extra_levels = m.extra_levels;
        break;
    }
    case EngineKind::kCustomDetailedBalanced: {
        const auto engine = custom_engine(p.custom);
        out.report = thermo::evaluate_engine(engine.protocol, *engine.family, quadrature);
        break;
    }
    }
    out.violations = thermo::check_invariants(out.report);
    return out;
}

// Runs body(i) for i in [0, n) on up to `jobs` threads. The exception of the lowest failing
// index is rethrown, so failures do not depend on scheduling.
template <class Body>
void for_each_index(std::size_t n, unsigned jobs, Body&& body) {
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            try {
                body(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const unsigned workers = std::max(1u, std::min<unsigned>(jobs, unsigned(n)));
    std::vector<std::thread> threads;
    for (unsigned w = 1; w < workers; ++w) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// ---------------------------------------------------------------------------
// Verification helpers

std::mt19937_64 case_rng(std::uint64_t seed, const std::string& suite, std::size_t index) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(std::hash<std::string>{}(suite)),
                      std::uint32_t(index)};
    return std::mt19937_64(seq);
}

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index d) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix z(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
        for (Eigen::Index i = 0; i < d; ++i) z(i, j) = cplx(n(rng), n(rng));
    }
    return z;
}

HermitianOperator random_hermitian(std::mt19937_64& rng, Eigen::Index d) {
    const Matrix z = random_matrix(rng, d);
    return HermitianOperator(Matrix(0.5 * (z + z.adjoint())));
}

// Nondegenerate H in a random eigenbasis with a nearest-neighbour Bose ladder and one long jump.
lindblad::Lindbladian random_generator(std::mt19937_64& rng, Eigen::Index d) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RealVector e(d);
    e(0) = 0.0;
    for (Eigen::Index k = 1; k < d; ++k) e(k) = e(k - 1) + 0.1 + u(rng);
    Eigen::HouseholderQR<Matrix> qr(random_matrix(rng, d));
    const Matrix v = qr.householderQ() * Matrix::Identity(d, d);
    const HermitianOperator h(Matrix(v * e.cast<cplx>().asDiagonal() * v.adjoint()));
    std::vector<lindblad::JumpSpec> specs;
    for (std::size_t k = 0; k + 1 < std::size_t(d); ++k) {
        specs.push_back({k, k + 1, 0.05 + 0.95 * u(rng), lindblad::RateConvention::kBose});
    }
    if (d > 2) specs.push_back({0, std::size_t(d - 1), 0.05 + 0.95 * u(rng), lindblad::RateConvention::kUpward});
    return lindblad::build_detailed_balanced(h, 0.2 + 2.8 * u(rng), specs);
}

json generator_json(const lindblad::Lindbladian& gen) {
    json jumps = json::array();
    for (const auto& j : gen.jumps()) jumps.push_back({{"rate", j.rate}, {"op", matrix_json(j.op)}});
    return {{"hamiltonian", matrix_json(gen.hamiltonian().matrix())}, {"beta", gen.beta()}, {"jumps", jumps}};
}

struct Tally {
    SuiteResult result;
    std::mutex mutex;
    bool first{true};

    void record(double margin, const std::function<json()>& describe) {
        std::lock_guard<std::mutex> lock(mutex);
        ++result.cases;
        if (first || margin < result.worst_margin) result.worst_margin = margin;
        first = false;
        if (margin < 0.0) {
            ++result.failures;
            result.failing_cases.push_back(describe());
        }
    }
};

// Constant generator with a smooth centered curve A(t) = delta(X cos 2 pi t + Y sin^2 2 pi t + Z t (1 - t)).
struct CurveCase {
    lindblad::Lindbladian gen;
    HermitianOperator x, y, z;

    HermitianOperator at(double t) const {
        const double c = std::cos(2.0 * std::numbers::pi * t);
        const double s = std::sin(2.0 * std::numbers::pi * t);
        return opalg::delta_centered(gen.stationary(), x * c + y * (s * s) + z * (t * (1.0 - t)));
    }
};

CurveCase curve_case(std::mt19937_64& rng, Eigen::Index d) {
    auto gen = random_generator(rng, d);
    auto x = random_hermitian(rng, d);
    auto y = random_hermitian(rng, d);
    auto z = random_hermitian(rng, d);
    return {std::move(gen), std::move(x), std::move(y), std::move(z)};
}

// Unprimed and primed quadratic forms of two curves in one pass:
// out = {<<A,B>>, <<A,B>>', <<A,A>>, <<B,B>>}.
std::array<double, 4> curve_forms(const CurveCase& a, const std::function<HermitianOperator(double)>& b) {
    const auto& pi = a.gen.stationary();
    auto f = [&](double t, double* out) {
        const auto at = a.at(t);
        const auto bt = b(t);
        const auto ra = lindblad::theta_integral(a.gen, at);
        const auto rb = lindblad::theta_integral(a.gen, bt);
        const auto ja = opalg::log_mean_apply(pi, at);
        const auto jb = opalg::log_mean_apply(pi, bt);
        out[0] = 0.5 * (opalg::trace_product(ra, jb) + opalg::trace_product(rb, ja));
        out[1] = 0.5 * (opalg::trace_product(ra, opalg::arith_mean_apply(pi, bt)) +
                        opalg::trace_product(rb, opalg::arith_mean_apply(pi, at)));
        out[2] = opalg::trace_product(ra, ja);
        out[3] = opalg::trace_product(rb, jb);
    };
    const auto q = thermo::simpson_integrate(0.0, 1.0, 4, f);
    return {q.integrals[0], q.integrals[1], q.integrals[2], q.integrals[3]};
}

SuiteResult suite_axioms(const VerifyOptions& o) {
    Tally tally;
    tally.result.name = "axioms";
    const std::size_t n = o.count.value_or(50);
    for_each_index(n, o.jobs, [&](std::size_t i) {
        auto rng = case_rng(o.seed, "axioms", i);
        const Eigen::Index d = 2 + Eigen::Index(i % 3);
        const CurveCase a = curve_case(rng, d);
        const auto w = random_hermitian(rng, d);
        auto b = [&](double t) { return opalg::delta_centered(a.gen.stationary(), w * std::exp(-t)); };
        const auto ab = curve_forms(a, b);
        const auto zero = thermo::inner_product(
            1.0, [&](double) { return a.gen; }, [&](double t) { return a.at(t); },
            [d](double) { return HermitianOperator::zero(std::size_t(d)); });
        // <<B, A>> with the roles exchanged.
        const auto& pi = a.gen.stationary();
        auto f = [&](double t, double* out) {
            const auto bt = b(t);
            const auto at = a.at(t);
            out[0] = 0.5 * (opalg::trace_product(lindblad::theta_integral(a.gen, bt), opalg::log_mean_apply(pi, at)) +
                            opalg::trace_product(lindblad::theta_integral(a.gen, at), opalg::log_mean_apply(pi, bt)));
        };
        const double ba = thermo::simpson_integrate(0.0, 1.0, 1, f).integrals[0];
        const double scale = std::sqrt(std::max(ab[2], 0.0) * std::max(ab[3], 0.0)) + 1e-300;
        const double symmetry = 1e-12 - std::abs(ab[0] - ba) / scale;
        const double cauchy = (scale * (1.0 + 1e-12) - std::abs(ab[0])) / scale;
        const double vanishing = 1e-12 - std::abs(zero) / scale;
        const double positive = std::min(ab[2], ab[3]) / scale + 1e-12;
        const double margin = std::min({symmetry, cauchy, vanishing, positive});
        tally.record(margin, [&] {
            return json{{"suite", "axioms"}, {"seed", o.seed}, {"case", i}, {"dim", d},
                        {"generator", generator_json(a.gen)}, {"AB", ab[0]}, {"BA", ba},
                        {"AA", ab[2]}, {"BB", ab[3]}, {"zero", zero}};
        });
    });
    return std::move(tally.result);
}

SuiteResult suite_mean_ordering(const VerifyOptions& o) {
    Tally tally;
    tally.result.name = "mean-ordering";
    const std::size_t n = o.count.value_or(500);
    for_each_index(n, o.jobs, [&](std::size_t i) {
        auto rng = case_rng(o.seed, "mean-ordering", i);
        const Eigen::Index d = 2 + Eigen::Index(i % 3);
        const CurveCase a = curve_case(rng, d);
        const auto forms = curve_forms(a, [&](double t) { return a.at(t); });
        const double plain = forms[0];
        const double prime = forms[1];
        const double scale = std::max(std::abs(prime), 1e-300);
        const double margin = std::min(plain, prime - plain) / scale + 1e-12;
        tally.record(margin, [&] {
            return json{{"suite", "mean-ordering"}, {"seed", o.seed}, {"case", i}, {"dim", d},
                        {"generator", generator_json(a.gen)}, {"x", matrix_json(a.x.matrix())},
                        {"y", matrix_json(a.y.matrix())}, {"z", matrix_json(a.z.matrix())},
                        {"plain", plain}, {"prime", prime}};
        });
    });
    return std::move(tally.result);
}

json report_json(const thermo::EngineReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return {{"P_w", r.P_w}, {"P_W", r.P_W}, {"sigma_dot", r.sigma_dot}, {"DeltaP_w", r.DeltaP_w},
            {"DeltaI_w", r.DeltaI_w}, {"J_q", r.J_q}, {"W_ad", r.W_ad}, {"eta", opt(r.eta)},
            {"eta_Q", opt(r.eta_Q)}, {"eta_PS", opt(r.eta_PS)}, {"f_value", opt(r.f_value)},
            {"tur_residual", opt(r.tur_residual)}, {"tur_scale", r.tur_scale}, {"engine_flag", r.engine_flag}};
}

SuiteResult suite_tur(const VerifyOptions& o) {
    Tally tally;
    tally.result.name = "tur";
    const std::size_t n = o.count.value_or(100);
    for_each_index(n, o.jobs, [&](std::size_t i) {
        auto rng = case_rng(o.seed, "tur", i);
        const std::size_t d = 2 + i % 2;
        const auto engine = thermo::random_engine(rng, d, 100.0);
        const auto r = thermo::evaluate_engine(engine.protocol, *engine.family);
        const auto violations = thermo::check_invariants(r);
        double margin = 1.0;
        if (r.tur_residual) margin = *r.tur_residual / std::max(r.tur_scale, 1e-300) + 1e-9;
        if (!violations.empty()) margin = std::min(margin, -1.0);
        tally.record(margin, [&] {
            return json{{"suite", "tur"}, {"seed", o.seed}, {"case", i}, {"dim", d},
                        {"t_cold", engine.protocol.t_cold()}, {"t_hot", engine.protocol.t_hot()},
                        {"report", report_json(r)}, {"violations", violations}};
        });
    });
    return std::move(tally.result);
}

SuiteResult suite_detailed_balance(const VerifyOptions& o) {
    Tally tally;
    tally.result.name = "detailed-balance";
    const std::size_t n = o.count.value_or(50);
    auto check = [&](const lindblad::Lindbladian& gen, std::size_t index, bool injected) {
        double worst = 0.0;
        for (double s : {0.0, 0.5, 1.0}) worst = std::max(worst, lindblad::detailed_balance_residual(gen, s));
        tally.record((1e-10 - worst) / 1e-10, [&] {
            return json{{"suite", "detailed-balance"}, {"seed", o.seed}, {"case", index}, {"injected", injected},
                        {"residual", worst}, {"generator", generator_json(gen)}};
        });
    };
    for_each_index(n, o.jobs, [&](std::size_t i) {
        auto rng = case_rng(o.seed, "detailed-balance", i);
        check(random_generator(rng, 2 + Eigen::Index(i % 3)), i, false);
    });
    if (o.inject_violation) {
        // Equal up and down rates on a gapped qubit break the Gibbs ratio.
        RealVector e(2);
        e << 0.0, 1.0;
        Matrix lower = Matrix::Zero(2, 2);
        lower(0, 1) = 1.0;
        const lindblad::Lindbladian bad(HermitianOperator::diagonal(e), 1.0,
                                        {{lower, 0.5}, {Matrix(lower.adjoint()), 0.5}});
        check(bad, n, true);
    }
    return std::move(tally.result);
}

SuiteResult suite_oracle(const VerifyOptions& o) {
    Tally tally;
    tally.result.name = "oracle";
    std::vector<oscillator::OscillatorParams> grid;
    for (double gamma : {0.2, 1.0, 5.0}) {
        for (double t_cold : {0.15, 0.3, 0.6, 1.0}) {
            oscillator::OscillatorParams p;
            p.gamma = gamma;
            p.t_cold = t_cold;
            grid.push_back(p);
        }
    }
    const std::size_t n = std::min(grid.size(), o.count.value_or(grid.size()));
    for_each_index(n, o.jobs, [&](std::size_t i) {
        const auto a = oscillator::evaluate(grid[i]);
        const auto m = oscillator::evaluate_matrix(grid[i]).report;
        double worst = 0.0;
        auto compare = [&](double x, double y, double scale) {
            worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), scale, 1e-300}));
        };
        auto compare_opt = [&](const std::optional<double>& x, const std::optional<double>& y) {
            if (x.has_value() != y.has_value()) worst = std::max(worst, 1.0);
            else if (x) compare(*x, *y, 0.0);
        };
        compare(a.P_w, m.P_w, 0.0);
        compare(a.P_W, m.P_W, 0.0);
        compare(a.sigma_dot, m.sigma_dot, 0.0);
        compare(a.DeltaP_w, m.DeltaP_w, 0.0);
        compare(a.DeltaI_w, m.DeltaI_w, 0.0);
        compare(a.J_q, m.J_q, 0.0);
        compare(a.W_ad, m.W_ad, 0.0);
        compare(a.w_avg, m.w_avg, 0.0);
        compare(a.t_eq, m.t_eq, 0.0);
        compare_opt(a.eta, m.eta);
        compare_opt(a.eta_PS, m.eta_PS);
        compare_opt(a.eta_Q, m.eta_Q);
        compare_opt(a.eta_cl, m.eta_cl);
        compare_opt(a.f_value, m.f_value);
        if (a.tur_residual && m.tur_residual) compare(*a.tur_residual, *m.tur_residual, a.tur_scale);
        if (a.engine_flag != m.engine_flag) worst = std::max(worst, 1.0);
        tally.record((1e-5 - worst) / 1e-5, [&] {
            return json{{"suite", "oracle"}, {"gamma", grid[i].gamma}, {"t_cold", grid[i].t_cold},
                        {"t_hot", grid[i].t_hot}, {"omega0", grid[i].omega0}, {"tau", grid[i].tau},
                        {"worst_relative_difference", worst}, {"analytic", report_json(a)},
                        {"matrix", report_json(m)}};
        });
    });
    return std::move(tally.result);
}

// ---------------------------------------------------------------------------
// Commands

int run_command(const std::string& config_path, const std::string& out_override, unsigned jobs) {
    RunConfig config;
    try {
        config = load_config(config_path);
    } catch (const std::exception& e) {
        std::cerr << "qtur run: " << e.what() << "\n";
        return kExitConfig;
    }
    if (!out_override.empty()) config.output = out_override;

    std::vector<SweepPoint> points;
    try {
        points = run_sweep(config, jobs);
    } catch (const NumericError& e) {
        std::cerr << "qtur run: numeric failure: " << e.what() << "\n";
        return kExitNonConvergence;
    } catch (const TruncationError& e) {
        std::cerr << "qtur run: numeric failure: " << e.what() << "\n";
        return kExitNonConvergence;
    } catch (const SteadyStateError& e) {
        std::cerr << "qtur run: numeric failure: " << e.what() << "\n";
        return kExitNonConvergence;
    } catch (const Error& e) {
        std::cerr << "qtur run: invalid point: " << e.what() << "\n";
        return kExitConfig;
    }

    std::ofstream csv(config.output, std::ios::binary);
    if (!csv) {
        std::cerr << "qtur run: cannot write " << config.output << "\n";
        return kExitConfig;
    }
    write_csv(csv, config, points);
    std::ofstream side(config.output + ".json", std::ios::binary);
    side << sidecar(config, points).dump(2) << "\n";

    std::size_t violations = 0;
    for (const auto& p : points) violations += p.violations.empty() ? 0 : 1;
    std::cerr << "qtur run: " << points.size() << " points written to " << config.output << "\n";
    if (violations > 0) {
        std::cerr << "qtur run: invariant violations at " << violations << " points (see " << config.output
                  << ".json)\n";
        return kExitInvariant;
    }
    return kExitOk;
}

int verify_command(const std::string& suite, const VerifyOptions& options, const std::string& out) {
    std::vector<std::string> names;
    if (suite == "all") {
        names = suite_names();
    } else {
        const auto all = suite_names();
        if (std::find(all.begin(), all.end(), suite) == all.end()) {
            std::cerr << "qtur verify: unknown suite \"" << suite << "\"\n";
            return kExitConfig;
        }
        names = {suite};
    }
    std::vector<SuiteResult> results;
    try {
        for (const auto& name : names) {
            results.push_back(run_suite(name, options));
            const auto& r = results.back();
            std::cerr << (r.failures == 0 ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.cases << " cases, "
                      << r.failures << " failures, worst margin " << r.worst_margin << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "qtur verify: numeric failure: " << e.what() << "\n";
        return kExitNonConvergence;
    }
    const auto report = verify_report(results, options).dump(2);
    if (out.empty()) {
        std::cout << report << "\n";
    } else {
        std::ofstream f(out, std::ios::binary);
        f << report << "\n";
    }
    const bool ok = std::all_of(results.begin(), results.end(), [](const SuiteResult& r) { return r.failures == 0; });
    return ok ? kExitOk : kExitVerifyFailed;
}

int info_command(const std::string& config_path) {
    try {
        const RunConfig config = load_config(config_path);
        json j = to_json(config);
        j["sweep_points"] = sweep_size(config);
        j["csv_columns"] = csv_columns(config);
        std::cout << j.dump(2) << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "qtur info: " << e.what() << "\n";
        return kExitConfig;
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Public API

std::string to_string(EngineKind kind) {
    switch (kind) {
    case EngineKind::kOscillatorAnalytic: return "oscillator-analytic";
    case EngineKind::kOscillatorMatrix: return "oscillator-matrix";
    case EngineKind::kCustomDetailedBalanced: return "custom-detailed-balanced";
    }
    return "unknown";
}

std::vector<std::string> sweepable_parameters(EngineKind kind) {
    if (is_oscillator(kind)) return {"omega0", "t_cold", "t_hot", "gamma", "t_eq", "tau"};
    return {"t_cold", "t_hot", "tau"};
}

RunConfig parse_config(const json& doc) {
    require_object(doc, "", {"schema", "engine", "oscillator", "custom", "sweep", "numeric", "output", "seed"});
    if (doc.contains("schema") && doc.at("schema") != "qtur-config 1") {
        config_fail("schema", "expected \"qtur-config 1\"");
    }
    RunConfig c;
    if (!doc.contains("engine") || !doc.at("engine").is_string()) config_fail("engine", "required string");
    c.kind = parse_kind(doc.at("engine").get<std::string>(), "engine");

    if (is_oscillator(c.kind)) {
        if (doc.contains("custom")) config_fail("custom", "only valid with engine custom-detailed-balanced");
        if (doc.contains("oscillator")) {
            const auto& o = doc.at("oscillator");
            require_object(o, "oscillator", {"omega0", "t_cold", "t_hot", "gamma", "t_eq", "tau"});
            if (o.contains("gamma") && o.contains("t_eq")) config_fail("oscillator", "give gamma or t_eq, not both");
            c.oscillator.omega0 = read_positive(o, "omega0", "oscillator", c.oscillator.omega0);
            c.oscillator.t_cold = read_positive(o, "t_cold", "oscillator", c.oscillator.t_cold);
            c.oscillator.t_hot = read_positive(o, "t_hot", "oscillator", c.oscillator.t_hot);
            c.oscillator.gamma = read_positive(o, "gamma", "oscillator", c.oscillator.gamma);
            if (o.contains("t_eq")) c.oscillator.gamma = 1.0 / read_positive(o, "t_eq", "oscillator", 1.0);
            c.oscillator.tau = read_positive(o, "tau", "oscillator", c.oscillator.tau);
        }
    } else {
        if (doc.contains("oscillator")) config_fail("oscillator", "not valid with engine custom-detailed-balanced");
        if (!doc.contains("custom")) config_fail("custom", "required for engine custom-detailed-balanced");
        c.custom = read_custom(doc.at("custom"), "custom");
    }

    if (doc.contains("sweep")) {
        const auto& s = doc.at("sweep");
        if (!s.is_array()) config_fail("sweep", "expected an array of axes");
        std::set<std::string> seen;
        for (std::size_t i = 0; i < s.size(); ++i) {
            auto axis = read_axis(s[i], "sweep[" + std::to_string(i) + "]", c.kind);
            const std::string key = axis.parameter == "t_eq" ? "gamma" : axis.parameter;
            if (!seen.insert(key).second) config_fail("sweep[" + std::to_string(i) + "]", "parameter swept twice");
            c.sweep.push_back(std::move(axis));
        }
    }

    if (doc.contains("numeric")) {
        const auto& n = doc.at("numeric");
        require_object(n, "numeric", {"time_grid", "fock"});
        if (n.contains("time_grid")) {
            const auto& g = n.at("time_grid");
            require_object(g, "numeric.time_grid", {"initial_nodes", "max_nodes", "rel_tol"});
            c.quadrature.initial_nodes = read_count(g, "initial_nodes", "numeric.time_grid", c.quadrature.initial_nodes);
            c.quadrature.max_nodes = read_count(g, "max_nodes", "numeric.time_grid", c.quadrature.max_nodes);
            c.quadrature.rel_tol = read_positive(g, "rel_tol", "numeric.time_grid", c.quadrature.rel_tol);
            if (c.quadrature.initial_nodes < 3 || c.quadrature.initial_nodes % 2 == 0) {
                config_fail("numeric.time_grid.initial_nodes", "must be odd and at least 3");
            }
            if (c.quadrature.max_nodes < c.quadrature.initial_nodes) {
                config_fail("numeric.time_grid.max_nodes", "must be at least initial_nodes");
            }
        }
        if (n.contains("fock")) {
            const auto& f = n.at("fock");
            const std::string p = "numeric.fock";
            require_object(f, p, {"tail_tolerance", "escalation_tolerance", "escalation_step", "max_extra_levels"});
            c.fock.tail_tolerance = read_positive(f, "tail_tolerance", p, c.fock.tail_tolerance);
            if (!(c.fock.tail_tolerance < 1.0)) config_fail(child(p, "tail_tolerance"), "must be below 1");
            c.fock.escalation_tolerance = read_positive(f, "escalation_tolerance", p, c.fock.escalation_tolerance);
            c.fock.escalation_step = read_count(f, "escalation_step", p, c.fock.escalation_step);
            if (c.fock.escalation_step == 0) config_fail(child(p, "escalation_step"), "must be positive");
            c.fock.max_extra_levels = read_count(f, "max_extra_levels", p, c.fock.max_extra_levels);
        }
    }

    if (doc.contains("output")) {
        const auto& o = doc.at("output");
        require_object(o, "output", {"path", "format"});
        if (o.contains("path")) {
            if (!o.at("path").is_string() || o.at("path").get<std::string>().empty()) {
                config_fail("output.path", "expected a non-empty string");
            }
            c.output = o.at("path").get<std::string>();
        }
        if (o.contains("format") && o.at("format") != "csv") config_fail("output.format", "only \"csv\" is supported");
    }
    if (doc.contains("seed")) {
        const auto& s = doc.at("seed");
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0)) {
            config_fail("seed", "expected a non-negative integer");
        }
        c.seed = s.get<std::uint64_t>();
    }

    // Every point must describe a valid engine.
    for (const auto& p : expand(c)) {
        try {
            if (is_oscillator(c.kind)) {
                p.oscillator.validate();
            } else {
                (void)custom_engine(p.custom);
            }
        } catch (const Error& e) {
            std::ostringstream where;
            where << "sweep point (";
            for (std::size_t k = 0; k < p.inputs.size(); ++k) {
                where << (k ? ", " : "") << p.inputs[k].first << " = " << p.inputs[k].second;
            }
            where << ")";
            config_fail(where.str(), e.what());
        }
    }
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open");
    json doc;
    try {
        doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_config(doc);
}

json to_json(const RunConfig& c) {
    json j;
    j["schema"] = "qtur-config 1";
    j["engine"] = to_string(c.kind);
    if (is_oscillator(c.kind)) {
        const auto& o = c.oscillator;
        j["oscillator"] = {{"omega0", o.omega0}, {"t_cold", o.t_cold}, {"t_hot", o.t_hot}, {"gamma", o.gamma},
                           {"tau", o.tau}};
    } else {
        const auto& e = *c.custom;
        json couplings = json::array();
        for (const auto& m : e.couplings) couplings.push_back(matrix_json(m));
        json controls = json::array();
        for (const auto& ctl : e.controls) controls.push_back({{"base", ctl.base}, {"a", ctl.a}, {"b", ctl.b}});
        json jumps = json::array();
        for (const auto& s : e.jumps) {
            jumps.push_back({{"lower", s.lower}, {"upper", s.upper}, {"rate", s.rate},
                             {"convention", s.convention == lindblad::RateConvention::kBose ? "bose" : "upward"}});
        }
        j["custom"] = {{"tau", e.tau}, {"t_cold", e.t_cold}, {"t_hot", e.t_hot}, {"h0", matrix_json(e.h0)},
                       {"couplings", couplings}, {"controls", controls}, {"jumps", jumps}};
    }
    json sweep = json::array();
    for (const auto& a : c.sweep) sweep.push_back({{"parameter", a.parameter}, {"values", a.values}});
    j["sweep"] = sweep;
    j["numeric"] = {{"time_grid",
                     {{"initial_nodes", c.quadrature.initial_nodes},
                      {"max_nodes", c.quadrature.max_nodes},
                      {"rel_tol", c.quadrature.rel_tol}}},
                    {"fock",
                     {{"tail_tolerance", c.fock.tail_tolerance},
                      {"escalation_tolerance", c.fock.escalation_tolerance},
                      {"escalation_step", c.fock.escalation_step},
                      {"max_extra_levels", c.fock.max_extra_levels}}}};
    j["output"] = {{"path", c.output}, {"format", "csv"}};
    j["seed"] = c.seed;
    return j;
}

std::size_t sweep_size(const RunConfig& config) {
    std::size_t n = 1;
    for (const auto& a : config.sweep) n *= a.values.size();
    return n;
}

std::vector<SweepPoint> run_sweep(const RunConfig& config, unsigned jobs) {
    jobs = std::max(1u, jobs);
    const auto points = expand(config);
    std::vector<SweepPoint> out(points.size());
    // A single point spends the threads on its time grid instead.
    const unsigned inner = points.size() == 1 ? jobs : 1;
    for_each_index(points.size(), points.size() == 1 ? 1 : jobs,
                   [&](std::size_t i) { out[i] = evaluate_point(config, points[i], inner); });
    return out;
}

namespace {

const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> columns{
        "t_eq", "P_w", "P_W", "DeltaP_w", "DeltaI_w", "sigma_dot", "eta", "eta_C", "eta_PS", "eta_Q",
        "f_value", "tur_residual", "engine_flag", "ratio_2dIw_over_dPw", "eta_cl", "J_q", "J_q_identity",
        "W_ad", "w_avg", "epsilon", "tur_scale", "operating", "finite_difference", "time_nodes",
        "fock_extra_levels", "violations"};
    return columns;
}

} // namespace

std::vector<std::string> csv_columns(const RunConfig& config) {
    std::vector<std::string> cols = is_oscillator(config.kind)
                                        ? std::vector<std::string>{"omega0", "t_cold", "t_hot", "gamma", "tau"}
                                        : std::vector<std::string>{"tau", "t_cold", "t_hot"};
    const auto& r = report_columns();
    cols.insert(cols.end(), r.begin(), r.end());
    return cols;
}

std::string format_number(double value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

void write_csv(std::ostream& out, const RunConfig& config, const std::vector<SweepPoint>& points) {
    out << "# " << kCsvSchema << "\n";
    out << "# engine: " << to_string(config.kind) << "\n";
    const auto cols = csv_columns(config);
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << "\n";
    auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
    for (const auto& p : points) {
        const auto& r = p.report;
        std::vector<std::string> row;
        for (const auto& in : p.inputs) row.push_back(format_number(in.second));
        const std::string ratio = r.DeltaP_w > 0.0 ? format_number(2.0 * r.DeltaI_w / r.DeltaP_w) : std::string();
        const std::vector<std::string> values{
            format_number(r.t_eq), format_number(r.P_w), format_number(r.P_W), format_number(r.DeltaP_w),
            format_number(r.DeltaI_w), format_number(r.sigma_dot), opt(r.eta), format_number(r.eta_C),
            opt(r.eta_PS), opt(r.eta_Q), opt(r.f_value), opt(r.tur_residual), r.engine_flag ? "1" : "0",
            ratio, opt(r.eta_cl), format_number(r.J_q), format_number(r.J_q_identity), format_number(r.W_ad),
            format_number(r.w_avg), format_number(r.epsilon), format_number(r.tur_scale), r.operating ? "1" : "0",
            r.finite_difference ? "1" : "0", std::to_string(r.nodes), std::to_string(p.fock_extra_levels),
            std::to_string(p.violations.size())};
        row.insert(row.end(), values.begin(), values.end());
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
        out << "\n";
    }
}

json sidecar(const RunConfig& config, const std::vector<SweepPoint>& points) {
    json violations = json::array();
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (points[i].violations.empty()) continue;
        json inputs = json::object();
        for (const auto& in : points[i].inputs) inputs[in.first] = in.second;
        violations.push_back({{"row", i}, {"inputs", inputs}, {"violations", points[i].violations}});
    }
    return {{"schema", kCsvSchema},
            {"columns", csv_columns(config)},
            {"rows", points.size()},
            {"config", to_json(config)},
            {"invariant_violations", violations},
            {"status", violations.empty() ? "ok" : "invariant-violation"}};
}

std::vector<std::string> suite_names() { return {"axioms", "mean-ordering", "tur", "detailed-balance", "oracle"}; }

SuiteResult run_suite(const std::string& name, const VerifyOptions& options) {
    if (name == "axioms") return suite_axioms(options);
    if (name == "mean-ordering") return suite_mean_ordering(options);
    if (name == "tur") return suite_tur(options);
    if (name == "detailed-balance") return suite_detailed_balance(options);
    if (name == "oracle") return suite_oracle(options);
    throw ConfigError("unknown suite \"" + name + "\"");
}

json verify_report(const std::vector<SuiteResult>& results, const VerifyOptions& options) {
    json suites = json::array();
    bool ok = true;
    for (const auto& r : results) {
        ok = ok && r.failures == 0;
        suites.push_back({{"suite", r.name},
                          {"cases", r.cases},
                          {"failures", r.failures},
                          {"worst_margin", r.worst_margin},
                          {"passed", r.failures == 0},
                          {"failing_cases", r.failing_cases}});
    }
    return {{"seed", options.seed},
            {"inject_violation", options.inject_violation},
            {"passed", ok},
            {"suites", suites}};
}

int main_entry(int argc, char** argv) {
    CLI::App app{"Slow-driving thermodynamics of periodically driven open quantum engines"};
    app.require_subcommand(1);
    const unsigned cores = std::max(1u, std::thread::hardware_concurrency());

    std::string config_path;
    std::string out;
    unsigned jobs = cores;
    auto* run = app.add_subcommand("run", "Evaluate a configured sweep and write CSV plus a JSON sidecar");
    run->add_option("--config", config_path, "Config file")->required();
    run->add_option("--out", out, "CSV output path (overrides output.path)");
    run->add_option("--jobs", jobs, "Concurrent evaluations")->check(CLI::PositiveNumber);

    std::string suite = "all";
    VerifyOptions verify_options;
    std::size_t count = 0;
    std::string verify_out;
    auto* verify = app.add_subcommand("verify", "Run the invariant and oracle suites");
    verify->add_option("--suite", suite, "axioms, mean-ordering, tur, detailed-balance, oracle or all");
    verify->add_option("--seed", verify_options.seed, "Seed of the random draws");
    auto* count_opt = verify->add_option("--count", count, "Cases per suite")->check(CLI::PositiveNumber);
    verify->add_flag("--inject-violation", verify_options.inject_violation,
                     "Add a non-detailed-balanced generator to the detailed-balance suite");
    verify->add_option("--out", verify_out, "Write the JSON report here instead of stdout");
    verify->add_option("--jobs", jobs, "Concurrent cases")->check(CLI::PositiveNumber);

    std::string info_config;
    auto* info = app.add_subcommand("info", "Print the resolved settings of a config");
    info->add_option("--config", info_config, "Config file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    if (run->parsed()) return run_command(config_path, out, jobs);
    if (verify->parsed()) {
        if (count_opt->count() > 0) verify_options.count = count;
        verify_options.jobs = jobs;
        return verify_command(suite, verify_options, verify_out);
    }
    return info_command(info_config);
}

} // namespace qtur::cli
