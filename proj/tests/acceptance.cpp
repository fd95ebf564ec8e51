// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance <data dir> <pqctl binary> <scratch dir>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "pqc/grid_io.hpp"
#include "pqc/markov_forecast.hpp"
#include "pqc/power_flow.hpp"
#include "pqc/scenario.hpp"
#include "pqc/signal_decomposition.hpp"
#include "pqc/voltvar_control.hpp"

using namespace pqc;

namespace {

namespace tol {
constexpr double jacobian_rel = 1e-5;
constexpr int jacobian_states = 20;
constexpr double jacobian_seconds = 10.0;
constexpr double mismatch_pu = 1e-6;
constexpr int max_iterations = 15;
constexpr double balance_pu = 1e-5;
constexpr double powerflow_seconds = 1.0;
constexpr double two_bus_pu = 1e-8;
constexpr double markov_entry = 0.05;
constexpr int markov_samples = 100000;
constexpr double dc_gain = 1e-12;
constexpr double ess_law_rel = 0.01;
constexpr double zero_energy_ratio = 1e-3;
constexpr double ess_reference_kwh = 0.06365;
constexpr double ess_magnitude_factor = 10.0;
constexpr double feasibility = 1e-9;
constexpr double tap_reduction = 0.40;
constexpr double paired_day_seconds = 300.0;
}  // namespace tol

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::filesystem::path g_data, g_pqctl, g_scratch;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

GridFile ieee13() { return load_grid_file((g_data / "ieee13.json").string()); }

// Single-phase two-bus grid with per-phase base 1000 kW.
GridModel two_bus(Complex y) {
    GridModel g;
    g.name = "two-bus";
    g.base_kva = 3000.0;
    PhaseSet a;
    a.insert(Phase::a);
    g.buses = {{"1", 1.0, a, true}, {"2", 1.0, a, false}};
    LineSegment line;
    line.name = "1-2";
    line.from_bus = BusId{1};
    line.to_bus = BusId{2};
    line.phases = a;
    line.series_admittance[0][0] = y;
    g.lines.push_back(line);
    return g;
}

LoadModel pq_load(BusId bus, double kw, double kvar) {
    LoadModel m;
    m.bus = bus;
    m.phase = Phase::a;
    m.p_nom_kw = kw;
    m.q_nom_kvar = kvar;
    return m;
}

Outcome jacobian_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto file = ieee13();
    PowerFlowProblem problem(file.grid, file.grid.initial_state(), file.loads);
    const auto solved = solve(problem).state;
    const auto& layout = problem.layout();
    std::mt19937_64 rng(20);
    std::uniform_real_distribution<double> dv(-0.05, 0.05);
    double worst = 0.0;
    for (int k = 0; k < tol::jacobian_states; ++k) {
        SystemState s = solved;
        for (Eigen::Index i = 0; i < s.v.size(); ++i) {
            s.v(i) += dv(rng);
            s.theta(i) += dv(rng);
        }
        problem.enforce_fixed(s);
        const Eigen::MatrixXd jac = jacobian(s, problem);
        const double h = 1e-6;
        for (std::size_t c = 0; c < layout.size(); ++c) {
            SystemState plus = s, minus = s;
            const bool angle = c < layout.theta_nodes.size();
            const auto node = static_cast<Eigen::Index>(angle ? layout.theta_nodes[c]
                                                              : layout.v_nodes[c - layout.theta_nodes.size()]);
            (angle ? plus.theta : plus.v)(node) += h;
            (angle ? minus.theta : minus.v)(node) -= h;
            const auto a = mismatch(plus, problem), b = mismatch(minus, problem);
            Eigen::VectorXd mp(layout.size()), mm(layout.size());
            mp << a.dp, a.dq;
            mm << b.dp, b.dq;
            const Eigen::VectorXd fd = -(mp - mm) / (2 * h);
            for (Eigen::Index r = 0; r < fd.size(); ++r)
                worst = std::max(worst, std::abs(jac(r, static_cast<Eigen::Index>(c)) - fd(r)) /
                                            std::max(1.0, std::abs(fd(r))));
        }
    }
    const double t = seconds_since(t0);
    return {worst < tol::jacobian_rel && t < tol::jacobian_seconds,
            fmt::format("max relative error {:.2e} over {} states, {:.2f} s", worst, tol::jacobian_states, t)};
}

Outcome powerflow_convergence() {
    const auto file = ieee13();
    const auto t0 = std::chrono::steady_clock::now();
    PowerFlowProblem problem(file.grid, file.grid.initial_state(), file.loads);
    SolverOptions opts;
    opts.flat_start = true;
    const auto r = solve(problem, opts);
    const double t = seconds_since(t0);
    const double mis = mismatch(r.state, problem).norm_inf();
    const double gen = slack_power_kw(r.state, problem);
    const double load = total_load(r.state, problem).p;
    const double loss = technical_losses(r.state, file.grid, problem.controller_state()).total_kw;
    const double balance = std::abs(gen - load - loss) / problem.phase_base_kva();
    return {mis < tol::mismatch_pu && r.iterations <= tol::max_iterations && balance < tol::balance_pu &&
                t < tol::powerflow_seconds,
            fmt::format("{} iterations, mismatch {:.2e} p.u., balance {:.2e} p.u., {:.3f} s", r.iterations, mis,
                        balance, t)};
}

Outcome two_bus_oracle() {
    double worst = 0.0;
    for (const auto& [r, x, p, q] : {std::array{0.01, 0.1, 0.5, 0.2}, std::array{0.05, 0.05, 0.3, 0.1},
                                     std::array{0.02, 0.08, 0.8, -0.3}}) {
        const Complex z{r, x};
        auto g = two_bus(1.0 / z);
        PowerFlowProblem problem(g, g.initial_state(), {pq_load(BusId{2}, p * 1000.0, q * 1000.0)});
        SolverOptions opts;
        opts.tolerance = 1e-12;
        const double v2 = solve(problem, opts).state.v(1);
        const double b = 1.0 - 2.0 * (p * r + q * x);
        const double closed = std::sqrt(0.5 * (b + std::sqrt(b * b - 4.0 * (p * p + q * q) * (r * r + x * x))));
        worst = std::max(worst, std::abs(v2 - closed));
    }
    return {worst < tol::two_bus_pu, fmt::format("max |V2 - closed form| {:.2e} p.u. over 3 cases", worst)};
}

Outcome load_model_identity() {
    std::vector<LoadModel> models = ieee13().loads;
    LoadModel zip;
    zip.p_nom_kw = 123.4;
    zip.q_nom_kvar = 56.7;
    zip.p_components = {{0.4, 0.0}, {0.3, 1.0}, {0.3, 2.0}};
    zip.q_components = {{0.2, 0.0}, {0.5, 1.0}, {0.3, 2.0}};
    zip.v_nom = 1.02;
    models.push_back(zip);
    std::size_t exact = 0;
    for (const auto& m : models) {
        const auto pq = expected_load(m, m.v_nom);
        if (pq.p == m.p_nom_kw && pq.q == m.q_nom_kvar) ++exact;
    }
    return {exact == models.size(), fmt::format("{} of {} load models exact at nominal voltage", exact, models.size())};
}

Outcome markov_round_trip() {
    Eigen::Matrix4d pi;
    pi << 0.70, 0.20, 0.10, 0.00,  //
        0.15, 0.60, 0.20, 0.05,    //
        0.05, 0.25, 0.50, 0.20,    //
        0.00, 0.10, 0.30, 0.60;
    MarkovModel m;
    m.n_states = 4;
    m.transition = pi;
    VariationRange range;
    range.min.fill(0.0);
    range.max.fill(100.0);
    const int hours = tol::markov_samples / 60 + 1;
    const auto traj = simulate(m, range, 1, hours, 2024);
    TimeSeries series;
    const Minutes start = std::chrono::sys_days{std::chrono::year{2023} / 7 / 1};
    for (std::size_t i = 0; i < traj.values.size(); ++i) {
        series.time.push_back(start + std::chrono::minutes{static_cast<long>(i)});
        series.value.push_back(traj.values[i]);
    }
    const auto f = fit(series, 4, ProfileKind::solar, {7, -1});
    const double err = (f.model.transition - pi).cwiseAbs().maxCoeff();

    MarkovModel id = m;
    id.transition = Eigen::Matrix4d::Identity();
    bool identity_exact = true;
    for (int i = 1; i <= 4; ++i)
        for (int k : {1, 5, 60}) {
            const auto iv = level_interval(i, 0.0, 100.0, 4);
            identity_exact = identity_exact && forecast(id, range, i, k, 12) == 0.5 * (iv.lo + iv.hi);
        }
    return {err < tol::markov_entry && identity_exact && traj.values.size() >= tol::markov_samples,
            fmt::format("max |fit - true| {:.4f} from {} samples; identity forecast {}", err, traj.values.size(),
                        identity_exact ? "exact" : "NOT exact")};
}

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform() - 0.5;
    return x;
}

std::vector<double> sinusoid(double r, double f, double dt, double hours) {
    const auto n = static_cast<std::size_t>(std::llround(hours / dt));
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = r * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) * dt);
    return x;
}

SolarDay bundled_solar_day() {
    const auto table = read_csv_file((g_data / "profiles_summer.csv").string());
    const auto models = fit_all(table.series("ghi_wm2"), 10, ProfileKind::solar, false);
    return simulate_solar_day(models.begin()->second, 100.0, 7);
}

Outcome filter_reconstruction() {
    std::vector<std::vector<double>> signals;
    for (std::uint64_t s = 0; s < 5; ++s) signals.push_back(noise(2000, s));
    signals.push_back(sinusoid(5.0, 6.0, kMinuteHours, 24.0));
    const auto day = bundled_solar_day();
    signals.push_back(difference_signal(day.forecast_kw, day.measured_kw));
    std::size_t bad = 0;
    for (const auto& d : signals) {
        const auto s = split(d);
        for (std::size_t t = 0; t < d.size(); ++t) {
            const double scale = std::max({std::abs(s.d[t]), std::abs(s.d_l[t]), std::abs(s.d_h[t])});
            const double ulp = std::nextafter(scale, INFINITY) - scale;
            if (std::abs(s.d[t] - (s.d_l[t] + s.d_h[t])) > ulp) ++bad;
        }
    }
    double gain_err = 0.0;
    for (double v : lowpass(std::vector<double>(100, 7.25), FilterWeights::sigmoid()))
        gain_err = std::max(gain_err, std::abs(v / 7.25 - 1.0));
    return {bad == 0 && gain_err < tol::dc_gain,
            fmt::format("{} samples off by more than one ULP in {} signals; DC gain error {:.1e}", bad,
                        signals.size(), gain_err)};
}

Outcome ess_sizing_law() {
    double worst = 0.0;
    for (double r : {1.0, 5.0, 10.0})
        for (double f : {1.0, 6.0, 30.0}) {
            const auto s = ess_capacity_for_signal(sinusoid(r, f, 1.0 / 3600.0, 2.0), 1.0 / 3600.0);
            worst = std::max(worst, std::abs(s.capacity_kwh / (r / (std::numbers::pi * f)) - 1.0));
        }
    return {worst < tol::ess_law_rel, fmt::format("max relative deviation from r/(pi f) {:.4f} over 9 cases", worst)};
}

Outcome zero_energy_reserve() {
    const auto day = bundled_solar_day();
    const auto s = split(difference_signal(day.forecast_kw, day.measured_kw));
    const double fast = std::abs(signal_energy(s.d_h).signed_kwh);
    const double total = signal_energy(s.d).absolute_kwh;
    const double cap = ess_capacity_for_signal(s.d_h).capacity_kwh;
    const bool magnitude = cap > tol::ess_reference_kwh / tol::ess_magnitude_factor &&
                           cap < tol::ess_reference_kwh * tol::ess_magnitude_factor;
    return {fast <= tol::zero_energy_ratio * total && magnitude,
            fmt::format("|E(d_h)| {:.3e} kWh vs {:.3e} x {:.3f} kWh; fast-part storage {:.4f} kWh", fast,
                        tol::zero_energy_ratio, total, cap)};
}

Outcome optimizer_oracle() {
    GridModel grid = two_bus(Complex(1.0, 0.0) / Complex(0.02, 0.04));
    PhaseSet a;
    a.insert(Phase::a);
    grid.buses.push_back({"3", 1.0, a, false});
    LineSegment second = grid.lines[0];
    second.name = "2-3";
    second.from_bus = BusId{2};
    second.to_bus = BusId{3};
    grid.lines.push_back(second);

    FastControlProblem p;
    p.grid = &grid;
    p.s = grid.initial_state();
    p.loads = {pq_load(BusId{3}, 500.0, 200.0)};
    p.inverters = {{BusId{3}, 300.0, 200.0}};
    p.flexible = {{BusId{2}, 100.0, 400.0, 250.0, 0.3}};

    // Losses as slack + generation - consumption, deviation at buses 2 and 3.
    auto oracle = [&](double q, double pl) {
        std::vector<LoadModel> loads = p.loads;
        loads.push_back(pq_load(BusId{2}, pl, 0.3 * pl));
        PowerFlowProblem flow(grid, p.s, loads, {{BusId{3}, 200.0, q}});
        const auto r = solve(flow);
        const double losses = slack_power_kw(r.state, flow) + 200.0 - 500.0 - pl;
        double dev = 0.0;
        for (int i : {1, 2}) dev += (r.state.v(i) - 1.0) * (r.state.v(i) - 1.0);
        return losses / 1000.0 + dev;
    };
    const double qmax = std::sqrt(300.0 * 300.0 - 200.0 * 200.0);
    const double dq = 2 * qmax / 100, dp = 300.0 / 50;
    double best = std::numeric_limits<double>::infinity(), bq = 0, bp = 0;
    for (int i = 0; i <= 100; ++i)
        for (int j = 0; j <= 50; ++j) {
            const double q = -qmax + i * dq, pl = 100.0 + j * dp;
            if (const double v = oracle(q, pl); v < best) {
                best = v;
                bq = q;
                bp = pl;
            }
        }
    const auto d = solve_fast(p);
    const bool within = std::abs(d.q_inverter_kvar[0] - bq) <= dq && std::abs(d.p_flexible_kw[0] - bp) <= dp;

    double worst_excess = std::hypot(200.0, d.q_inverter_kvar[0]) - 300.0;
    auto file = ieee13();
    for (double ps : {0.0, 40.0, 80.0, 100.0}) {
        FastControlProblem q;
        q.grid = &file.grid;
        q.s = file.grid.initial_state();
        q.loads = file.loads;
        q.inverters = {{file.grid.bus_id("634"), 100.0, ps}};
        q.flexible = {{file.grid.bus_id("671"), 150.0, 450.0, 300.0, 0.5}};
        const auto e = solve_fast(q);
        worst_excess = std::max(worst_excess, std::hypot(ps, e.q_inverter_kvar[0]) - 100.0);
    }
    return {within && worst_excess <= tol::feasibility,
            fmt::format("solver (q {:.2f}, p {:.2f}) vs grid (q {:.2f}, p {:.2f}), steps ({:.2f}, {:.2f}); "
                        "max |P+jQ| - S {:.1e} kVA",
                        d.q_inverter_kvar[0], d.p_flexible_kw[0], bq, bp, dq, dp, worst_excess)};
}

Outcome end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = load_config((g_data / "summer.json").string());
    const auto inputs = generate_inputs(c);
    c.mode = ControlMode::baseline;
    const auto base = run(c, inputs);
    c.mode = ControlMode::fast_control;
    const auto fast = run(c, inputs);
    const double t = seconds_since(t0);

    auto all_in_band = [](const RunReport& r) {
        const auto& in = r.series.column("nodes_in_band");
        const auto& n = r.series.column("customer_nodes");
        for (std::size_t i = 0; i < in.size(); ++i)
            if (in[i] != n[i]) return false;
        return true;
    };
    const double ta = base.summary.at("tap_changes"), tb = fast.summary.at("tap_changes");
    const double reduction = ta > 0 ? (ta - tb) / ta : 0.0;
    const bool a = tb < ta && reduction >= tol::tap_reduction;
    const bool b = all_in_band(fast) && !all_in_band(base);
    const bool cc = fast.summary.at("average_profit") >= 0.0;
    return {a && b && cc && t < tol::paired_day_seconds,
            fmt::format("taps {:.0f} -> {:.0f} ({:.0f}% fewer); in band {:.4f} -> {:.4f}; average profit {:.3f}; "
                        "{:.1f} s",
                        ta, tb, 100.0 * reduction, base.summary.at("in_band_fraction"),
                        fast.summary.at("in_band_fraction"), fast.summary.at("average_profit"), t)};
}

std::string file_hash(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return fmt::format("{:016x}", std::hash<std::string>{}(s.str()));
}

Outcome reproducibility() {
    std::vector<std::map<std::string, std::string>> hashes;
    for (const char* run : {"repeat_a", "repeat_b"}) {
        const auto dir = g_scratch / run;
        std::filesystem::remove_all(dir);
        const auto cmd = fmt::format("\"{}\" simulate --config \"{}\" --mode fast_control --seed 7 --out \"{}\" > {}",
                                     g_pqctl.string(), (g_data / "summer.json").string(), dir.string(),
                                     "/dev/null");
        if (std::system(cmd.c_str()) != 0) return {false, fmt::format("'{}' failed", cmd)};
        std::map<std::string, std::string> h;
        for (const auto& e : std::filesystem::directory_iterator(dir)) h[e.path().filename()] = file_hash(e.path());
        hashes.push_back(h);
    }
    return {hashes[0] == hashes[1] && hashes[0].size() == 5,
            fmt::format("{} report files, hashes {}", hashes[0].size(), hashes[0] == hashes[1] ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 4) {
        std::cerr << "usage: acceptance <data dir> <pqctl> <scratch dir>\n";
        return 2;
    }
    g_data = argv[1];
    g_pqctl = argv[2];
    g_scratch = argv[3];
    std::filesystem::create_directories(g_scratch);

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"Jacobian correctness", jacobian_correctness},
        {"Power-flow convergence", powerflow_convergence},
        {"Two-bus analytic oracle", two_bus_oracle},
        {"Load-model identity", load_model_identity},
        {"Markov round trip", markov_round_trip},
        {"Filter reconstruction", filter_reconstruction},
        {"ESS sizing law", ess_sizing_law},
        {"Zero-energy reserve", zero_energy_reserve},
        {"Optimizer oracle", optimizer_oracle},
        {"End-to-end comparative outcome", end_to_end},
        {"Reproducibility", reproducibility},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, fmt::format("threw: {}", e.what())};
        }
        if (!o.pass) ++failed;
        std::cout << fmt::format("{} {:>2}. {}: {}\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail)
                  << std::flush;
    }
    std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - static_cast<std::size_t>(failed),
                             criteria.size());
    return failed == 0 ? 0 : 1;
}
