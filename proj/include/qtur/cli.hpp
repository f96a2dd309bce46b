// cli.hpp: run configurations, parameter sweeps, CSV/JSON output and the verification
// suites behind the `qtur` command-line tool.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "qtur/errors.hpp"
#include "qtur/oscillator.hpp"
#include "qtur/thermo.hpp"

namespace qtur::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitVerifyFailed = 1,
    kExitConfig = 2,
    kExitNonConvergence = 3,
    kExitInvariant = 4,
};

class ConfigError : public Error {
public:
    using Error::Error;
};

inline constexpr const char* kCsvSchema = "qtur-csv 1";

enum class EngineKind { kOscillatorAnalytic, kOscillatorMatrix, kCustomDetailedBalanced };
std::string to_string(EngineKind kind);

// Matrices in configs are {"diagonal": [...]} or {"real": [[...]], "imag": [[...]]} (imag optional).
struct CustomEngine {
    double tau{100.0};
    double t_cold{};
    double t_hot{};
    Matrix h0;
    std::vector<Matrix> couplings;
    struct Control {
        double base{};
        std::vector<double> a; // coefficients of g_m
        std::vector<double> b; // coefficients of h_m
    };
    std::vector<Control> controls;
    std::vector<lindblad::JumpSpec> jumps;
};

struct SweepAxis {
    std::string parameter;
    std::vector<double> values;
};

struct RunConfig {
    EngineKind kind{EngineKind::kOscillatorAnalytic};
    oscillator::OscillatorParams oscillator{};
    std::optional<CustomEngine> custom;
    std::vector<SweepAxis> sweep; // Cartesian product, first axis slowest
    thermo::QuadratureOptions quadrature{};
    oscillator::MatrixOptions fock{};
    std::string output{"qtur_run.csv"};
    std::uint64_t seed{20240917};
};

// Parameters an axis may name for each engine kind. "t_eq" sets gamma = 1 / t_eq.
std::vector<std::string> sweepable_parameters(EngineKind kind);

// Throws ConfigError with a path-qualified message on any schema violation.
RunConfig parse_config(const nlohmann::json& document);
RunConfig load_config(const std::string& path);
// Fully resolved settings, including defaults, as written back by `info` and the sidecar.
nlohmann::json to_json(const RunConfig& config);

struct SweepPoint {
    std::vector<std::pair<std::string, double>> inputs;
    thermo::EngineReport report;
    std::size_t fock_extra_levels{0};
    std::vector<std::string> violations;
};

std::size_t sweep_size(const RunConfig& config);
// Points are evaluated on up to `jobs` threads and returned in sweep order.
std::vector<SweepPoint> run_sweep(const RunConfig& config, unsigned jobs);

std::vector<std::string> csv_columns(const RunConfig& config);
void write_csv(std::ostream& out, const RunConfig& config, const std::vector<SweepPoint>& points);
nlohmann::json sidecar(const RunConfig& config, const std::vector<SweepPoint>& points);
// Shortest round-trip text with at most 17 significant digits; empty for absent values.
std::string format_number(double value);

// Verification suites. Names: axioms, mean-ordering, tur, detailed-balance, oracle.
struct SuiteResult {
    std::string name;
    std::size_t cases{0};
    std::size_t failures{0};
    double worst_margin{0.0}; // smallest normalized margin; negative means a violation
    std::vector<nlohmann::json> failing_cases;
};

struct VerifyOptions {
    std::uint64_t seed{20240917};
    std::optional<std::size_t> count; // overrides each suite's default case count
    bool inject_violation{false};     // adds a non-detailed-balanced generator
    unsigned jobs{1};
};

std::vector<std::string> suite_names();
SuiteResult run_suite(const std::string& name, const VerifyOptions& options);
nlohmann::json verify_report(const std::vector<SuiteResult>& results, const VerifyOptions& options);

// Runs one CLI invocation; returns the process exit code.
int main_entry(int argc, char** argv);

} // namespace qtur::cli
