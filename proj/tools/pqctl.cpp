#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "pqc/grid_io.hpp"
#include "pqc/markov_forecast.hpp"
#include "pqc/power_flow.hpp"
#include "pqc/scenario.hpp"
#include "pqc/signal_decomposition.hpp"
#include "pqc/timeseries.hpp"

using namespace pqc;

namespace {

constexpr const char* kOutEnv = "PQCTL_OUT_DIR";

/// --out, then $PQCTL_OUT_DIR, then `fallback`.
std::string out_dir(const std::string& flag, const std::string& fallback) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv(kOutEnv); env && *env) return env;
    return fallback;
}

/// Writes to `path`, or stdout when it is empty.
template <typename F>
void emit(const std::string& path, F&& write) {
    if (path.empty()) {
        write(std::cout);
        return;
    }
    if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
        std::filesystem::create_directories(parent);
    std::ofstream out(path);
    if (!out) throw DataError(fmt::format("cannot write '{}'", path));
    write(out);
}

ProfileKind parse_kind(const std::string& s) { return s == "solar" ? ProfileKind::solar : ProfileKind::load; }

FittedModel pick_model(const CsvTable& table, const std::string& column, ProfileKind kind, int states,
                       Minutes day) {
    const auto models = fit_all(table.series(column), states, kind, false);
    const auto it = models.find(ModelContext{month_of(day), -1});
    if (it == models.end()) throw DataError(fmt::format("no '{}' data for month {}", column, month_of(day)));
    return it->second;
}

struct PowerflowArgs {
    std::string grid;
    std::string out;
    double load_scale = 1.0;
};

void powerflow(const PowerflowArgs& a) {
    const auto file = load_grid_file(a.grid);
    auto loads = file.loads;
    for (auto& l : loads) {
        l.p_nom_kw *= a.load_scale;
        l.q_nom_kvar *= a.load_scale;
    }
    const auto s = file.grid.initial_state();
    const PowerFlowProblem problem(file.grid, s, loads);
    const auto r = solve(problem);
    emit(a.out, [&](std::ostream& out) {
        out << "node,v_pu,angle_deg\n";
        for (std::size_t i = 0; i < problem.nodes().size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            out << fmt::format("{},{:.8f},{:.6f}\n", node_label(file.grid, problem.nodes().node(i)), r.state.v(k),
                               r.state.theta(k) * 180.0 / std::numbers::pi);
        }
    });
    std::cerr << fmt::format("converged in {} iterations, losses {:.3f} kW, head {:.3f} kW\n", r.iterations,
                             technical_losses(r.state, file.grid, s).total_kw, slack_power_kw(r.state, problem));
}

struct FitArgs {
    std::string profiles;
    std::string column;
    std::string kind = "load";
    int states = 10;
    bool by_weekday = false;
    std::string out;
};

void fit_models(const FitArgs& a) {
    const auto table = read_csv_file(a.profiles);
    const auto set = fit_all(table.series(a.column), a.states, parse_kind(a.kind), a.by_weekday);
    if (a.out.empty()) {
        std::cout << to_json(set).dump(2) << '\n';
    } else {
        save_models(a.out, set);
        std::cerr << fmt::format("wrote {} models to {}\n", set.size(), a.out);
    }
}

struct ForecastArgs {
    std::string profiles;
    std::string column;
    std::string kind = "load";
    int states = 10;
    std::string date = "2023-07-12";
    std::uint64_t seed = 7;
    int hours = 24;
    int ahead = 1;
    std::string out;
};

void forecast_day(const ForecastArgs& a) {
    const auto table = read_csv_file(a.profiles);
    const Minutes start = parse_timestamp(a.date + " 00:00");
    const auto kind = parse_kind(a.kind);
    const auto f = pick_model(table, a.column, kind, a.states, start);
    const int n = f.model.n_states;
    const int s0 = kind == ProfileKind::solar ? n : state_of(0.5 * (f.range.min[0] + f.range.max[0]), f.range.min[0],
                                                             f.range.max[0], n);
    const auto traj = simulate(f.model, f.range, s0, a.hours, a.seed);
    const auto fc = forecast_series(f, traj.values, a.ahead);
    emit(a.out, [&](std::ostream& out) {
        out << "timestamp,measured,forecast,state\n";
        for (std::size_t t = 0; t < fc.size(); ++t)
            out << fmt::format("{},{:.6f},{:.6f},{}\n", format_timestamp(start + std::chrono::minutes(t)),
                               traj.values[t], fc[t], traj.states[t]);
    });
}

struct DecomposeArgs {
    std::string input;
    std::string forecast_column = "forecast_kw";
    std::string measured_column = "measured_kw";
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void decompose(const DecomposeArgs& a) {
    std::vector<Minutes> time;
    std::vector<double> fc, measured;
    double dt = kMinuteHours;
    if (!a.input.empty()) {
        const auto table = read_csv_file(a.input);
        time = table.time;
        fc = table.column(a.forecast_column);
        measured = table.column(a.measured_column);
        if (time.size() > 1) dt = std::chrono::duration<double, std::ratio<3600>>(time[1] - time[0]).count();
    } else {
        auto c = load_config(a.config);
        if (a.seed) c.seed = *a.seed;
        const auto in = generate_inputs(c);
        for (std::size_t t = 0; t < in.steps; ++t)
            time.push_back(in.start + std::chrono::minutes(static_cast<long>(t) * c.fast_step_minutes));
        fc = in.solar_forecast_kw;
        measured = in.solar_kw;
        dt = c.fast_step_minutes / 60.0;
    }
    const auto s = split(difference_signal(fc, measured));
    const auto fast = ess_capacity_for_signal(s.d_h, dt);
    const auto full = ess_capacity_for_signal(s.d, dt);
    const auto e_d = signal_energy(s.d, dt), e_l = signal_energy(s.d_l, dt), e_h = signal_energy(s.d_h, dt);
    const std::vector<std::pair<const char*, double>> sizing{
        {"d_signed_kwh", e_d.signed_kwh},         {"d_absolute_kwh", e_d.absolute_kwh},
        {"d_low_signed_kwh", e_l.signed_kwh},     {"d_low_absolute_kwh", e_l.absolute_kwh},
        {"d_high_signed_kwh", e_h.signed_kwh},    {"d_high_absolute_kwh", e_h.absolute_kwh},
        {"ess_fast_capacity_kwh", fast.capacity_kwh}, {"ess_fast_max_ramp_kw_per_min", fast.max_ramp_kw_per_min},
        {"ess_full_capacity_kwh", full.capacity_kwh}, {"ess_full_max_ramp_kw_per_min", full.max_ramp_kw_per_min}};

    const std::string dir = out_dir(a.out, "");
    if (!dir.empty()) {
        CsvTable t;
        t.time = time;
        t.names = {"forecast_kw", "measured_kw", "d_kw", "d_low_kw", "d_high_kw"};
        t.columns = {fc, measured, s.d, s.d_l, s.d_h};
        std::filesystem::create_directories(dir);
        write_csv_file((std::filesystem::path(dir) / "signals.csv").string(), t);
        std::map<std::string, double> m(sizing.begin(), sizing.end());
        write_summary((std::filesystem::path(dir) / "ess_sizing.csv").string(), m);
    }
    std::cout << "metric,value\n";
    for (const auto& [k, v] : sizing) std::cout << fmt::format("{},{:.6f}\n", k, v);
}

struct SimulateArgs {
    std::string config;
    std::string mode;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void simulate_run(const SimulateArgs& a) {
    auto c = load_config(a.config);
    if (!a.mode.empty()) c.mode = parse_mode(a.mode);
    if (a.seed) c.seed = *a.seed;
    c.out_dir = out_dir(a.out, c.out_dir.empty() ? "out" : c.out_dir);
    const auto r = run(c);
    std::cout << fmt::format("{} run, seed {}: {} steps, {:.0f} tap changes, losses {:.2f} kWh, in band {:.4f}, "
                             "average profit {:.4f}; report in {}\n",
                             to_string(c.mode), c.seed, r.steps(), r.summary.at("tap_changes"),
                             r.summary.at("losses_kwh"), r.summary.at("in_band_fraction"),
                             r.summary.at("average_profit"), c.out_dir);
}

struct CompareArgs {
    std::string a;
    std::string b;
    std::string out;
};

void compare_runs(const CompareArgs& a) {
    const auto ra = read_report(a.a), rb = read_report(a.b);
    if (!ra.complete || !rb.complete) throw ScenarioError("cannot compare a partial report");
    const auto c = compare(ra, rb);
    std::cout << format_comparison(c);
    const std::string dir = out_dir("", ".");
    const std::string path = a.out.empty() ? (std::filesystem::path(dir) / "comparison.csv").string() : a.out;
    if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
        std::filesystem::create_directories(parent);
    write_comparison_csv(path, c);
    std::cerr << fmt::format("wrote {}\n", path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Power-quality control simulation for unbalanced distribution feeders"};
    app.require_subcommand(1);

    PowerflowArgs pf;
    auto* cmd = app.add_subcommand("powerflow", "Solve one power flow and print node voltages as CSV");
    cmd->add_option("--grid", pf.grid, "Grid file (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--load-scale", pf.load_scale, "Multiplier on every spot load")->check(CLI::NonNegativeNumber);
    cmd->add_option("--out", pf.out, "Write the CSV here instead of stdout");
    cmd->callback([&] { powerflow(pf); });

    FitArgs fa;
    cmd = app.add_subcommand("fit", "Fit hourly Markov models to a profile column");
    cmd->add_option("--profiles", fa.profiles, "Profile CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--column", fa.column, "Column to fit")->required();
    cmd->add_option("--kind", fa.kind)->check(CLI::IsMember({"solar", "load"}));
    cmd->add_option("--states", fa.states, "Number of Markov states")->check(CLI::PositiveNumber);
    cmd->add_flag("--by-weekday", fa.by_weekday, "Fit one model per month and weekday");
    cmd->add_option("--out", fa.out, "Model JSON file (default stdout)");
    cmd->callback([&] { fit_models(fa); });

    ForecastArgs fc;
    cmd = app.add_subcommand("forecast", "Simulate a day from the month's model and forecast it k steps ahead");
    cmd->add_option("--profiles", fc.profiles, "Profile CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--column", fc.column, "Column to model")->required();
    cmd->add_option("--kind", fc.kind)->check(CLI::IsMember({"solar", "load"}));
    cmd->add_option("--states", fc.states)->check(CLI::PositiveNumber);
    cmd->add_option("--date", fc.date, "Simulated day, YYYY-MM-DD");
    cmd->add_option("--seed", fc.seed);
    cmd->add_option("--hours", fc.hours)->check(CLI::PositiveNumber);
    cmd->add_option("--ahead", fc.ahead, "Forecast horizon in minutes")->check(CLI::PositiveNumber);
    cmd->add_option("--out", fc.out, "Write the CSV here instead of stdout");
    cmd->callback([&] { forecast_day(fc); });

    DecomposeArgs da;
    cmd = app.add_subcommand("decompose", "Difference signal, low/high split and storage sizing");
    auto* input = cmd->add_option("--input", da.input, "CSV with forecast and measured columns")
                      ->check(CLI::ExistingFile);
    auto* config = cmd->add_option("--config", da.config, "Scenario file; uses its simulated solar day")
                       ->check(CLI::ExistingFile);
    input->excludes(config);
    cmd->add_option("--forecast-column", da.forecast_column);
    cmd->add_option("--measured-column", da.measured_column);
    cmd->add_option("--seed", da.seed);
    cmd->add_option("--out", da.out, "Directory for signals.csv and ess_sizing.csv");
    cmd->callback([&] {
        if (da.input.empty() && da.config.empty()) throw CLI::RequiredError("--input or --config");
        decompose(da);
    });

    SimulateArgs sa;
    cmd = app.add_subcommand("simulate", "Run a scenario and write its report");
    cmd->add_option("--config", sa.config, "Scenario file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--mode", sa.mode)->check(CLI::IsMember({"baseline", "fast_control"}));
    cmd->add_option("--seed", sa.seed);
    cmd->add_option("--out", sa.out, fmt::format("Report directory (default ${}, then the scenario's, then out)", kOutEnv));
    cmd->callback([&] { simulate_run(sa); });

    CompareArgs ca;
    cmd = app.add_subcommand("compare", "Compare two report directories");
    cmd->add_option("a", ca.a, "Report directory (baseline)")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("b", ca.b, "Report directory (controlled)")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--out", ca.out, fmt::format("Comparison CSV (default ${}/comparison.csv)", kOutEnv));
    cmd->callback([&] { compare_runs(ca); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "pqctl: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
