#pragma once

// 24-hour two-timescale simulation of a feeder: hourly capacitor
// configuration, per-minute inverter/flexible-load control (or unity power
// factor baseline), regulator action, and the report tables.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "pqc/grid_io.hpp"
#include "pqc/markov_forecast.hpp"
#include "pqc/power_flow.hpp"
#include "pqc/signal_decomposition.hpp"
#include "pqc/timeseries.hpp"
#include "pqc/voltvar_control.hpp"

namespace pqc {

class ScenarioError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ComparisonError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class ControlMode { baseline, fast_control };
enum class FlexMode { minimize_cost, track_signal };

inline std::string to_string(ControlMode m) { return m == ControlMode::baseline ? "baseline" : "fast_control"; }

inline ControlMode parse_mode(std::string_view s) {
    if (s == "baseline") return ControlMode::baseline;
    if (s == "fast_control") return ControlMode::fast_control;
    throw ScenarioError(fmt::format("unknown control mode '{}' (baseline or fast_control)", s));
}

inline constexpr std::array<const char*, 3> kLoadClasses{"residential", "commercial", "industrial"};

/// Shares of the residential, commercial and industrial profiles in a spot load.
using LoadMix = std::array<double, 3>;

struct SolarConfig {
    std::string bus = "634";
    double rated_kw = 100.0;
    double s_kva = 100.0;
};

struct FlexibleConfig {
    std::string bus = "671";
    double power_factor = 0.9;
    FlexMode mode = FlexMode::minimize_cost;
};

struct ScenarioConfig {
    std::string grid_file;
    std::string profiles_file;  // timestamp, ghi_wm2, residential_kw, commercial_kw, industrial_kw
    std::string season = "summer";
    std::string date = "2023-07-12";  // simulated day; selects the month's models
    int horizon_hours = 24;
    int slow_step_minutes = 60;
    int fast_step_minutes = 1;
    ControlMode mode = ControlMode::baseline;
    std::uint64_t seed = 7;
    int markov_states = 10;
    double load_scale = 1.0;
    bool peak_calibration = true;  // scale so the day's peak demand equals the published total
    LoadMix default_mix{0.5, 0.3, 0.2};
    std::map<std::string, LoadMix> bus_mix;
    SolarConfig solar;
    std::optional<FlexibleConfig> flexible = FlexibleConfig{};
    double reactive_compensation = 1.0;  // fraction of forecast feeder kvar the banks should supply
    std::map<std::string, double> alpha;  // "bus.phase" overrides of the default weights
    ProfitWeights weights;
    double starfi_tolerance = 0.05;
    FastOptions fast;
    std::string out_dir;

    void check() const {
        if (horizon_hours <= 0) throw ScenarioError("horizon must be positive");
        if (fast_step_minutes <= 0 || slow_step_minutes <= 0) throw ScenarioError("steps must be positive");
        if (slow_step_minutes % fast_step_minutes != 0) throw ScenarioError("fast step must divide the slow step");
        if ((horizon_hours * 60) % slow_step_minutes != 0) throw ScenarioError("horizon must be a multiple of the slow step");
        if (60 % fast_step_minutes != 0) throw ScenarioError("fast step must divide an hour");
        if (markov_states < 1) throw ScenarioError("need at least one Markov state");
        if (solar.rated_kw < 0 || solar.s_kva < 0) throw ScenarioError("solar ratings must be non-negative");
        if (flexible && !(flexible->power_factor > 0 && flexible->power_factor <= 1))
            throw ScenarioError("flexible load power factor must be in (0, 1]");
        if (!(starfi_tolerance > 0 && starfi_tolerance <= 0.1)) throw ScenarioError("STARFI tolerance must be in (0, 0.1]");
        if (!(load_scale >= 0)) throw ScenarioError("load scale must be non-negative");
    }
};

namespace detail {

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) return p;
    std::filesystem::path path(p);
    return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

inline LoadMix read_mix(const nlohmann::json& j) {
    LoadMix m{};
    for (std::size_t c = 0; c < kLoadClasses.size(); ++c) m[c] = j.value(kLoadClasses[c], 0.0);
    return m;
}

}  // namespace detail

/// Reads a scenario file; relative paths resolve against the file's directory.
inline ScenarioConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base = ".") {
    ScenarioConfig c;
    try {
        c.grid_file = detail::resolve(base, j.at("grid").get<std::string>());
        c.profiles_file = detail::resolve(base, j.at("profiles").get<std::string>());
        c.season = j.value("season", c.season);
        c.date = j.value("date", c.date);
        c.horizon_hours = j.value("horizon_hours", c.horizon_hours);
        c.slow_step_minutes = j.value("slow_step_minutes", c.slow_step_minutes);
        c.fast_step_minutes = j.value("fast_step_minutes", c.fast_step_minutes);
        c.mode = parse_mode(j.value("mode", std::string("baseline")));
        c.seed = j.value("seed", c.seed);
        c.markov_states = j.value("markov_states", c.markov_states);
        c.load_scale = j.value("load_scale", c.load_scale);
        c.peak_calibration = j.value("peak_calibration", c.peak_calibration);
        if (j.contains("load_mix")) {
            for (const auto& [bus, mix] : j.at("load_mix").items()) {
                if (bus == "default") c.default_mix = detail::read_mix(mix);
                else c.bus_mix[bus] = detail::read_mix(mix);
            }
        }
        if (j.contains("solar")) {
            const auto& s = j.at("solar");
            c.solar.bus = s.value("bus", c.solar.bus);
            c.solar.rated_kw = s.value("rated_kw", c.solar.rated_kw);
            c.solar.s_kva = s.value("s_kva", c.solar.s_kva);
        }
        if (j.contains("flexible")) {
            const auto& f = j.at("flexible");
            if (f.is_null()) {
                c.flexible.reset();
            } else {
                FlexibleConfig fc;
                fc.bus = f.value("bus", fc.bus);
                fc.power_factor = f.value("power_factor", fc.power_factor);
                const auto mode = f.value("mode", std::string("minimize_cost"));
                if (mode == "track_signal") fc.mode = FlexMode::track_signal;
                else if (mode != "minimize_cost") throw ScenarioError(fmt::format("unknown flexible mode '{}'", mode));
                c.flexible = fc;
            }
        }
        if (j.contains("control")) {
            const auto& k = j.at("control");
            c.reactive_compensation = k.value("reactive_compensation", c.reactive_compensation);
            c.starfi_tolerance = k.value("starfi_tolerance", c.starfi_tolerance);
            c.weights.k1 = k.value("k1", c.weights.k1);
            c.weights.k2 = k.value("k2", c.weights.k2);
            c.weights.k3 = k.value("k3", c.weights.k3);
            c.fast.tolerance = k.value("search_tolerance", c.fast.tolerance);
            c.fast.max_sweeps = k.value("max_sweeps", c.fast.max_sweeps);
            if (k.contains("alpha"))
                for (const auto& [node, a] : k.at("alpha").items()) c.alpha[node] = a.get<double>();
        }
        c.out_dir = j.value("out_dir", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw ScenarioError(fmt::format("bad scenario file: {}", e.what()));
    }
    c.check();
    return c;
}

inline ScenarioConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError(fmt::format("cannot open scenario file '{}'", path));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ScenarioError(fmt::format("{}: {}", path, e.what()));
    }
    return parse_config(j, std::filesystem::path(path).parent_path());
}

// =============================================================================
// Stochastic inputs
// =============================================================================

/// Every random draw a run consumes. Generated from the seed alone, so a
/// baseline and a controlled run with the same seed see the same day.
struct ScenarioInputs {
    Minutes start;
    std::size_t steps = 0;
    std::array<FittedModel, 3> class_models;
    std::array<double, 3> class_peak{};          // largest hourly maximum of each class
    std::array<std::vector<double>, 3> class_kw;  // simulated profile values
    std::array<std::vector<double>, 3> class_forecast_kw;  // forecast for the middle of each slow step, per step
    std::vector<double> solar_kw;
    std::vector<double> solar_forecast_kw;
    DifferenceSignal signal;
    EssSizing ess_fast;
    EssSizing ess_full;
};

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 step, so nearby seeds give unrelated streams
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline ScenarioInputs generate_inputs(const ScenarioConfig& c) {
    c.check();
    const auto table = read_csv_file(c.profiles_file);
    ScenarioInputs in;
    in.start = parse_timestamp(c.date + " 00:00");
    const ModelContext ctx{month_of(in.start), -1};
    const int per_hour = 60 / c.fast_step_minutes;
    in.steps = static_cast<std::size_t>(c.horizon_hours * per_hour);
    const int slow_steps = c.slow_step_minutes / c.fast_step_minutes;

    auto pick = [&](const std::string& column, ProfileKind kind) {
        const auto models = fit_all(table.series(column), c.markov_states, kind, false);
        const auto it = models.find(ctx);
        if (it == models.end())
            throw ScenarioError(fmt::format("{} has no '{}' data for month {}", c.profiles_file, column, ctx.month));
        return it->second;
    };

    for (std::size_t k = 0; k < kLoadClasses.size(); ++k) {
        const auto f = pick(std::string(kLoadClasses[k]) + "_kw", ProfileKind::load);
        in.class_models[k] = f;
        in.class_peak[k] = *std::max_element(f.range.max.begin(), f.range.max.end());
        const int n = f.model.n_states;
        const int s0 = state_of(0.5 * (f.range.min[0] + f.range.max[0]), f.range.min[0], f.range.max[0], n);
        const auto traj = simulate(f.model, f.range, s0, c.horizon_hours, stream_seed(c.seed, k + 1), 0,
                                   c.fast_step_minutes);
        in.class_kw[k] = traj.values;
        // Slow-step forecast: expected value half a slow step ahead of its first sample.
        const int k_ahead = std::max(1, slow_steps / 2);
        in.class_forecast_kw[k].resize(in.steps);
        for (std::size_t t = 0; t < in.steps; t += static_cast<std::size_t>(slow_steps)) {
            const int h0 = traj.hour_at(t);
            const int target = traj.hour_at(t + static_cast<std::size_t>(k_ahead));
            const int s = state_of(traj.values[t], f.range.min[static_cast<std::size_t>(h0)],
                                   f.range.max[static_cast<std::size_t>(h0)], n);
            const double v = forecast(f.model, f.range, s, k_ahead, target);
            for (std::size_t u = t; u < std::min(in.steps, t + static_cast<std::size_t>(slow_steps)); ++u)
                in.class_forecast_kw[k][u] = v;
        }
    }

    const auto sf = pick("ghi_wm2", ProfileKind::solar);
    const auto ins = simulate(sf.model, sf.range, sf.model.n_states, c.horizon_hours, stream_seed(c.seed, 0), 0,
                              c.fast_step_minutes);
    const auto fc = forecast_series(sf, ins.values, 1, 0, c.fast_step_minutes);
    const double peak = *std::max_element(sf.range.max.begin(), sf.range.max.end());
    const double scale = peak > 0 ? c.solar.rated_kw / peak : 0.0;
    for (std::size_t t = 0; t < in.steps; ++t) {
        in.solar_kw.push_back(ins.values[t] * scale);
        in.solar_forecast_kw.push_back(fc[t] * scale);
    }
    in.signal = split(difference_signal(in.solar_forecast_kw, in.solar_kw));
    const double dt = c.fast_step_minutes / 60.0;
    in.ess_fast = ess_capacity_for_signal(in.signal.d_h, dt);
    in.ess_full = ess_capacity_for_signal(in.signal.d, dt);
    return in;
}

// =============================================================================
// Feeder loading
// =============================================================================

/// Published spot loads scaled by their class mix; the commercial share of
/// the flexible bus is split off as the flexible aggregate.
class FeederLoading {
public:
    FeederLoading(const GridFile& file, const ScenarioConfig& c, const ScenarioInputs& in)
        : file_(file), c_(c), in_(in) {
        if (c.flexible) flex_bus_ = file.grid.bus_id(c.flexible->bus);
        for (const auto& l : file.loads) {
            const std::string name = file.grid.bus(l.bus).name;
            const auto it = c.bus_mix.find(name);
            mix_.push_back(it == c.bus_mix.end() ? c.default_mix : it->second);
            double sum = 0.0;
            for (double m : mix_.back()) sum += m;
            if (!(sum > 0)) throw ScenarioError(fmt::format("load mix at bus {} is empty", name));
        }
        scale_ = c.load_scale;
        if (c.peak_calibration) {
            double published = 0.0, peak = 0.0;
            for (const auto& l : file.loads) published += l.p_nom_kw;
            for (std::size_t t = 0; t < in.steps; ++t) {
                double total = 0.0;
                for (std::size_t i = 0; i < file.loads.size(); ++i)
                    for (std::size_t k = 0; k < 3; ++k)
                        total += file.loads[i].p_nom_kw * mix_[i][k] * in.class_kw[k][t] / in.class_peak[k];
                peak = std::max(peak, total);
            }
            if (peak > 0) scale_ *= published / peak;
        }
        if (flex_bus_) {
            for (std::size_t i = 0; i < file.loads.size(); ++i)
                if (file.loads[i].bus == *flex_bus_) flex_nominal_kw_ += file.loads[i].p_nom_kw * mix_[i][1];
            const double pf = c.flexible->power_factor;
            kvar_per_kw_ = std::sqrt(1.0 - pf * pf) / pf;
        }
    }

    [[nodiscard]] bool has_flexible() const { return flex_bus_.has_value(); }
    [[nodiscard]] BusId flexible_bus() const { return *flex_bus_; }
    [[nodiscard]] double kvar_per_kw() const { return kvar_per_kw_; }
    [[nodiscard]] double scale() const { return scale_; }

    /// Fixed loads at step t (nominal values scaled; the ZIP mix is kept).
    [[nodiscard]] std::vector<LoadModel> fixed(std::size_t t) const {
        std::vector<LoadModel> out = file_.loads;
        for (std::size_t i = 0; i < out.size(); ++i) {
            double f = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                if (k == 1 && flex_bus_ && out[i].bus == *flex_bus_) continue;
                f += mix_[i][k] * in_.class_kw[k][t] / in_.class_peak[k];
            }
            out[i].p_nom_kw *= f * scale_;
            out[i].q_nom_kvar *= f * scale_;
        }
        return out;
    }

    /// Flexible aggregate demand (kW) for a commercial profile value.
    [[nodiscard]] double flexible_kw(double commercial_value) const {
        return flex_nominal_kw_ * commercial_value / in_.class_peak[1] * scale_;
    }

    [[nodiscard]] double flexible_demand(std::size_t t) const { return flexible_kw(in_.class_kw[1][t]); }

    [[nodiscard]] std::pair<double, double> envelope(int hour) const {
        const auto env = flexible_envelope(in_.class_models[1].model, in_.class_models[1].range);
        const auto h = static_cast<std::size_t>(hour);
        return {flexible_kw(env.p_min_kw[h]), flexible_kw(env.p_max_kw[h])};
    }

    /// Forecast feeder reactive demand (kvar at nominal voltage) for the slow step containing t.
    [[nodiscard]] double reactive_forecast(std::size_t t) const {
        double q = 0.0;
        for (std::size_t i = 0; i < file_.loads.size(); ++i) {
            double f = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                if (k == 1 && flex_bus_ && file_.loads[i].bus == *flex_bus_) continue;
                f += mix_[i][k] * in_.class_forecast_kw[k][t] / in_.class_peak[k];
            }
            q += file_.loads[i].q_nom_kvar * f * scale_;
        }
        if (flex_bus_) q += flexible_kw(in_.class_forecast_kw[1][t]) * kvar_per_kw_;
        return q;
    }

private:
    const GridFile& file_;
    const ScenarioConfig& c_;
    const ScenarioInputs& in_;
    std::vector<LoadMix> mix_;
    std::optional<BusId> flex_bus_;
    double flex_nominal_kw_ = 0.0;
    double kvar_per_kw_ = 0.0;
    double scale_ = 1.0;
};

// =============================================================================
// Report
// =============================================================================

/// Tables of one run; every table has one row per fast step.
struct RunReport {
    ControlMode mode = ControlMode::baseline;
    CsvTable voltages;   // one column per (bus, phase) node, p.u.
    CsvTable series;     // per-step metrics
    CsvTable decisions;  // control log
    CsvTable signals;    // solar forecast, measurement and difference split
    std::map<std::string, double> summary;
    bool complete = false;

    [[nodiscard]] std::size_t steps() const { return series.time.size(); }
};

inline const std::vector<std::string>& series_columns() {
    static const std::vector<std::string> names{
        "solar_kw", "load_kw", "flex_demand_kw", "flex_kw", "flex_min_kw", "flex_max_kw", "q_inverter_kvar",
        "head_kw", "losses_kw", "balance_kw", "cost", "reference_cost", "lost_capacity_kw", "loss_reduction_kw",
        "starfi_events", "starfi_cum", "nodes_in_band", "customer_nodes", "buses_in_band", "v_min", "v_max",
        "tap_changes", "profit", "iterations"};
    return names;
}

namespace detail {

inline CsvTable empty_table(std::vector<std::string> names) {
    CsvTable t;
    t.columns.resize(names.size());
    t.names = std::move(names);
    return t;
}

inline void append(CsvTable& t, Minutes time, const std::vector<double>& row) {
    t.time.push_back(time);
    for (std::size_t i = 0; i < row.size(); ++i) t.columns[i].push_back(row[i]);
}

}  // namespace detail

/// Run-level figures derived from the per-step series.
inline std::map<std::string, double> summarize(const CsvTable& series, double dt_hours) {
    std::map<std::string, double> s;
    const auto n = static_cast<double>(series.time.size());
    if (series.time.empty()) return s;
    auto col = [&](const char* name) -> const std::vector<double>& { return series.column(name); };
    auto sum = [](const std::vector<double>& v) {
        double x = 0.0;
        for (double y : v) x += y;
        return x;
    };
    s["steps"] = n;
    s["tap_changes"] = col("tap_changes").back();
    s["losses_kwh"] = sum(col("losses_kw")) * dt_hours;
    s["energy_kwh"] = sum(col("head_kw")) * dt_hours;
    s["peak_head_kw"] = *std::max_element(col("head_kw").begin(), col("head_kw").end());
    s["starfi_events"] = col("starfi_cum").back();
    s["v_min"] = *std::min_element(col("v_min").begin(), col("v_min").end());
    s["v_max"] = *std::max_element(col("v_max").begin(), col("v_max").end());
    s["in_band_fraction"] = sum(col("nodes_in_band")) / sum(col("customer_nodes"));
    s["average_profit"] = sum(col("profit")) / n;
    s["average_loss_reduction_kw"] = sum(col("loss_reduction_kw")) / n;
    s["average_lost_capacity_kw"] = sum(col("lost_capacity_kw")) / n;
    return s;
}

inline void write_summary(const std::string& path, const std::map<std::string, double>& summary) {
    std::ofstream out(path);
    if (!out) throw ScenarioError(fmt::format("cannot write '{}'", path));
    out << "metric,value\n";
    for (const auto& [k, v] : summary) out << k << ',' << fmt::format("{:.6f}", v) << '\n';
}

inline std::map<std::string, double> read_summary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError(fmt::format("cannot open '{}'", path));
    std::map<std::string, double> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        out[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    }
    return out;
}

inline void write_report(const RunReport& r, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path d(dir);
    write_csv_file((d / "voltages.csv").string(), r.voltages);
    write_csv_file((d / "series.csv").string(), r.series);
    write_csv_file((d / "decisions.csv").string(), r.decisions);
    write_csv_file((d / "signals.csv").string(), r.signals);
    auto summary = r.summary;
    summary["complete"] = r.complete ? 1.0 : 0.0;
    summary["fast_control"] = r.mode == ControlMode::fast_control ? 1.0 : 0.0;
    write_summary((d / "summary.csv").string(), summary);
}

inline RunReport read_report(const std::string& dir) {
    const std::filesystem::path d(dir);
    RunReport r;
    r.series = read_csv_file((d / "series.csv").string());
    r.voltages = read_csv_file((d / "voltages.csv").string());
    r.decisions = read_csv_file((d / "decisions.csv").string());
    r.signals = read_csv_file((d / "signals.csv").string());
    r.summary = read_summary((d / "summary.csv").string());
    r.complete = r.summary.count("complete") && r.summary.at("complete") == 1.0;
    r.mode = r.summary.count("fast_control") && r.summary.at("fast_control") == 1.0 ? ControlMode::fast_control
                                                                                      : ControlMode::baseline;
    return r;
}

// =============================================================================
// Run
// =============================================================================

namespace detail {

/// Constant-power flexible aggregate split equally over the bus phases.
inline void add_flexible(std::vector<LoadModel>& loads, const GridModel& grid, BusId bus, double kw,
                         double kvar_per_kw) {
    const auto phases = grid.bus(bus).phases.members();
    for (Phase ph : phases) {
        LoadModel m;
        m.bus = bus;
        m.phase = ph;
        m.p_nom_kw = kw / static_cast<double>(phases.size());
        m.q_nom_kvar = m.p_nom_kw * kvar_per_kw;
        loads.push_back(m);
    }
}

/// Repeats regulator action at the initial loading until taps stop moving.
inline DiscreteControllerState settle_regulators(const GridModel& grid, DiscreteControllerState s,
                                                 const std::vector<LoadModel>& loads,
                                                 const std::vector<GeneratorInjection>& gens) {
    for (int i = 0; i < 64; ++i) {
        PowerFlowProblem p(grid, s, loads, gens);
        const auto r = solve(p);
        auto u = regulator_step(r.state, grid, s);
        if (u.changes == 0) break;
        s = u.s;
    }
    return s;
}

}  // namespace detail

/// Runs the scenario. On a power-flow failure the partial report is written
/// to `config.out_dir` (when set) and ScenarioError names the step.
inline RunReport run(const ScenarioConfig& config, const ScenarioInputs& in) {
    config.check();
    const GridFile file = load_grid_file(config.grid_file);
    const GridModel& grid = file.grid;
    const NodeIndex nodes(grid);
    const FeederLoading loading(file, config, in);
    const BusId solar_bus = grid.bus_id(config.solar.bus);
    const double dt = config.fast_step_minutes / 60.0;
    const auto slow_every = static_cast<std::size_t>(config.slow_step_minutes / config.fast_step_minutes);

    std::vector<LoadModel> all_loads = file.loads;
    if (loading.has_flexible()) detail::add_flexible(all_loads, grid, loading.flexible_bus(), 0.0, 0.0);
    const CustomerNodes customers = customer_nodes(grid, all_loads);
    std::vector<double> alpha = default_alpha(grid, all_loads);
    for (const auto& [label, a] : config.alpha) {
        const auto dot = label.find('.');
        const auto ph = dot == std::string::npos || dot + 2 != label.size() ? std::nullopt : parse_phase(label[dot + 1]);
        if (!ph) throw ScenarioError(fmt::format("alpha key '{}' is not of the form bus.phase", label));
        alpha[nodes.at(grid.bus_id(label.substr(0, dot)), *ph)] = a;
    }
    std::map<int, std::vector<std::size_t>> customer_bus_nodes;
    for (std::size_t n : customers.nodes) customer_bus_nodes[nodes.node(n).bus.index].push_back(n);

    RunReport report;
    report.mode = config.mode;
    std::vector<std::string> labels;
    for (const auto& n : nodes.nodes()) labels.push_back(node_label(grid, n));
    report.voltages = detail::empty_table(labels);
    report.series = detail::empty_table(series_columns());
    std::vector<std::string> dec{"q_inverter_kvar", "p_flexible_kw"};
    for (const auto& cap : grid.capacitors) dec.push_back("cap_" + cap.name);
    dec.push_back("cost");
    for (const auto& reg : grid.regulators) dec.push_back("tap_" + reg.name);
    dec.push_back("starfi_events");
    report.decisions = detail::empty_table(dec);
    report.signals = detail::empty_table({"solar_kw", "forecast_kw", "d_kw", "d_low_kw", "d_high_kw"});

    auto flush_partial = [&] {
        report.summary = summarize(report.series, dt);
        if (!config.out_dir.empty()) write_report(report, config.out_dir);
    };

    auto make_problem = [&](std::size_t t, const DiscreteControllerState& s, const std::optional<SystemState>& warm) {
        FastControlProblem p;
        p.grid = &grid;
        p.s = s;
        p.loads = loading.fixed(t);
        p.inverters = {{solar_bus, config.solar.s_kva, in.solar_kw[t]}};
        p.alpha = alpha;
        p.warm_start = warm;
        if (loading.has_flexible()) {
            const int hour = static_cast<int>((t * static_cast<std::size_t>(config.fast_step_minutes) / 60) % 24);
            auto [lo, hi] = loading.envelope(hour);
            const double demand = loading.flexible_demand(t);
            const double dl = in.signal.d_l[t];
            FlexibleLoadSpec f{loading.flexible_bus(), lo, hi, demand, loading.kvar_per_kw()};
            if (config.flexible->mode == FlexMode::track_signal) {
                f.p_ref_kw = std::clamp(demand - dl, lo, hi);
                f.p_min_kw = f.p_max_kw = f.p_ref_kw;
            } else {
                // A solar shortfall (d_l > 0) lowers the ceiling, a surplus raises the floor.
                const double nlo = std::clamp(lo - dl, lo, hi), nhi = std::clamp(hi - dl, lo, hi);
                f.p_min_kw = nlo;
                f.p_max_kw = std::max(nlo, nhi);
            }
            p.flexible = {f};
        }
        return p;
    };

    DiscreteControllerState s = grid.initial_state();
    {
        const auto p0 = make_problem(0, s, std::nullopt);
        std::vector<LoadModel> l0 = p0.loads;
        if (loading.has_flexible())
            detail::add_flexible(l0, grid, loading.flexible_bus(), loading.flexible_demand(0), loading.kvar_per_kw());
        try {
            s = detail::settle_regulators(grid, s, l0, {{solar_bus, in.solar_kw[0], 0.0}});
        } catch (const std::runtime_error& e) {
            flush_partial();
            throw ScenarioError(fmt::format("step 0 ({}): {}", format_timestamp(in.start), e.what()));
        }
    }

    std::optional<SystemState> warm;
    long taps = 0;
    long starfi_cum = 0;
    for (std::size_t t = 0; t < in.steps; ++t) {
        const Minutes now = in.start + std::chrono::minutes(static_cast<long>(t) * config.fast_step_minutes);
        if (t % slow_every == 0) s = solve_slow(config.reactive_compensation * loading.reactive_forecast(t), grid, s);

        const auto problem = make_problem(t, s, warm);
        ControlDecision reference, decision;
        try {
            reference = ieee1547_baseline(problem);
            decision = config.mode == ControlMode::baseline ? reference : solve_fast(problem, config.fast);
        } catch (const ControlError& e) {
            flush_partial();
            throw ScenarioError(fmt::format("step {} ({}): {}", t, format_timestamp(now), e.what()));
        }
        warm = decision.state;

        // Final operating point with the chosen setpoints.
        std::vector<LoadModel> loads = problem.loads;
        double flex_kw = 0.0;
        if (loading.has_flexible()) {
            flex_kw = decision.p_flexible_kw[0];
            detail::add_flexible(loads, grid, loading.flexible_bus(), flex_kw, loading.kvar_per_kw());
        }
        const double q_inv = decision.q_inverter_kvar[0];
        PowerFlowProblem flow(grid, s, loads, {{solar_bus, in.solar_kw[t], q_inv}});
        PowerFlowResult solved;
        try {
            SolverOptions warm_opts;
            warm_opts.flat_start = false;
            solved = solve(flow, warm_opts, decision.state);
        } catch (const std::runtime_error& e) {
            flush_partial();
            throw ScenarioError(fmt::format("step {} ({}): {}", t, format_timestamp(now), e.what()));
        }
        const SystemState& st = solved.state;

        auto losses_of = [&](const SystemState& x) { return technical_losses(x, grid, s).total_kw; };
        auto head_of = [&](const SystemState& x) { return slack_power_kw(x, flow); };
        const double losses = losses_of(st);
        const double head = head_of(st);
        const double consumed = total_load(st, flow).p;
        const double balance = head + in.solar_kw[t] - consumed - losses;

        double ref_head = head, ref_losses = losses;
        if (config.mode == ControlMode::fast_control) {
            ref_losses = losses_of(reference.state);
            std::vector<LoadModel> rl = problem.loads;
            if (loading.has_flexible())
                detail::add_flexible(rl, grid, loading.flexible_bus(), reference.p_flexible_kw[0], loading.kvar_per_kw());
            PowerFlowProblem ref_flow(grid, s, rl, {{solar_bus, in.solar_kw[t], 0.0}});
            ref_head = slack_power_kw(reference.state, ref_flow);
        }

        Eigen::VectorXd v = st.v;
        const auto events = starfi({v}, customers, config.starfi_tolerance);
        starfi_cum += events.events;
        double v_min = INFINITY, v_max = -INFINITY, in_band = 0, buses_in_band = 0;
        for (std::size_t n : customers.nodes) {
            const double x = v(static_cast<Eigen::Index>(n));
            v_min = std::min(v_min, x);
            v_max = std::max(v_max, x);
            if (std::abs(x - 1.0) <= config.starfi_tolerance + 1e-12) ++in_band;
        }
        for (const auto& [bus, ns] : customer_bus_nodes) {
            bool ok = true;
            for (std::size_t n : ns) ok = ok && std::abs(v(static_cast<Eigen::Index>(n)) - 1.0) <= config.starfi_tolerance + 1e-12;
            if (ok) ++buses_in_band;
        }

        QualityMetrics m;
        m.lost_capacity_kw = ref_head - head;
        m.loss_reduction_kw = ref_losses - losses;
        m.starfi = events.per_customer;
        const double j = profit(m, config.weights);

        double load_kw = 0.0;
        for (const auto& l : problem.loads) load_kw += l.p_nom_kw;
        const auto [flo, fhi] = loading.has_flexible() ? std::pair{problem.flexible[0].p_min_kw, problem.flexible[0].p_max_kw}
                                                       : std::pair{0.0, 0.0};
        const double demand = loading.has_flexible() ? loading.flexible_demand(t) : 0.0;

        // Regulators act on this step's voltages; the new taps apply from the next step.
        const auto u = regulator_step(st, grid, s);
        taps += u.changes;

        std::vector<double> vrow(v.data(), v.data() + v.size());
        detail::append(report.voltages, now, vrow);
        detail::append(report.series, now,
                       {in.solar_kw[t], load_kw + demand, demand, flex_kw, flo, fhi, q_inv, head, losses, balance,
                        decision.cost, reference.cost, m.lost_capacity_kw, m.loss_reduction_kw,
                        static_cast<double>(events.events), static_cast<double>(starfi_cum), in_band,
                        static_cast<double>(customers.nodes.size()), buses_in_band, v_min, v_max,
                        static_cast<double>(taps), j, static_cast<double>(solved.iterations)});
        std::vector<double> drow{q_inv, flex_kw};
        for (int step : s.capacitor_steps) drow.push_back(step);
        drow.push_back(decision.cost);
        for (int tap : s.regulator_taps) drow.push_back(tap);
        drow.push_back(static_cast<double>(events.events));
        detail::append(report.decisions, now, drow);
        detail::append(report.signals, now,
                       {in.solar_kw[t], in.solar_forecast_kw[t], in.signal.d[t], in.signal.d_l[t], in.signal.d_h[t]});

        s = u.s;
    }

    report.complete = true;
    report.summary = summarize(report.series, dt);
    report.summary["load_scale"] = loading.scale();
    report.summary["ess_fast_capacity_kwh"] = in.ess_fast.capacity_kwh;
    report.summary["ess_full_capacity_kwh"] = in.ess_full.capacity_kwh;
    report.summary["ess_fast_max_ramp_kw_per_min"] = in.ess_fast.max_ramp_kw_per_min;
    report.summary["d_high_signed_kwh"] = signal_energy(in.signal.d_h, dt).signed_kwh;
    report.summary["d_absolute_kwh"] = signal_energy(in.signal.d, dt).absolute_kwh;
    if (!config.out_dir.empty()) write_report(report, config.out_dir);
    return report;
}

inline RunReport run(const ScenarioConfig& config) { return run(config, generate_inputs(config)); }

// =============================================================================
// Comparison
// =============================================================================

struct ComparisonRow {
    std::string metric;
    double a = 0.0;
    double b = 0.0;
    [[nodiscard]] double delta() const { return b - a; }
};

struct Comparison {
    std::vector<ComparisonRow> rows;

    [[nodiscard]] const ComparisonRow& row(std::string_view metric) const {
        for (const auto& r : rows)
            if (r.metric == metric) return r;
        throw ComparisonError(fmt::format("no metric '{}'", metric));
    }
};

/// Side-by-side run metrics; `a` is conventionally the baseline. Both runs
/// must cover the same time steps.
inline Comparison compare(const RunReport& a, const RunReport& b) {
    if (a.series.time != b.series.time)
        throw ComparisonError(fmt::format("horizons differ ({} vs {} steps)", a.steps(), b.steps()));
    if (a.series.time.empty()) throw ComparisonError("empty reports");
    const double dt = a.steps() > 1
                          ? std::chrono::duration<double, std::ratio<3600>>(a.series.time[1] - a.series.time[0]).count()
                          : 1.0 / 60.0;
    const auto sa = summarize(a.series, dt), sb = summarize(b.series, dt);
    Comparison c;
    for (const char* k : {"tap_changes", "losses_kwh", "energy_kwh", "peak_head_kw", "starfi_events", "v_min", "v_max",
                          "in_band_fraction", "average_profit"})
        c.rows.push_back({k, sa.at(k), sb.at(k)});
    return c;
}

/// Two-column tap-change table followed by the metric rows.
inline std::string format_comparison(const Comparison& c, const std::string& name_a = "IEEE 1547 standard",
                                     const std::string& name_b = "Fast Inverter VAR Control") {
    const auto& taps = c.row("tap_changes");
    std::string out = "TRANSFORMER TAP CHANGES\n";
    out += fmt::format("{:>26} | {:>26}\n", name_a, name_b);
    out += fmt::format("{:>26.0f} | {:>26.0f}\n\n", taps.a, taps.b);
    out += fmt::format("{:<18} {:>14} {:>14} {:>14}\n", "metric", "a", "b", "b - a");
    for (const auto& r : c.rows) out += fmt::format("{:<18} {:>14.4f} {:>14.4f} {:>14.4f}\n", r.metric, r.a, r.b, r.delta());
    return out;
}

inline void write_comparison_csv(const std::string& path, const Comparison& c) {
    std::ofstream out(path);
    if (!out) throw ScenarioError(fmt::format("cannot write '{}'", path));
    out << "metric,a,b,delta\n";
    for (const auto& r : c.rows) out << fmt::format("{},{:.6f},{:.6f},{:.6f}\n", r.metric, r.a, r.b, r.delta());
}

}  // namespace pqc
