#pragma once

// Finite-state Markov chains for insolation and load: fitting from minute
// data, seeded simulation, and conditional-expectation forecasts.
//
// Levels: the hour's range [min, max] is split into N equal subintervals;
// state 1 is the top subinterval and state N the bottom one.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

#include "pqc/timeseries.hpp"

namespace pqc {

class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class ProfileKind { solar, load };

inline const char* to_string(ProfileKind k) { return k == ProfileKind::solar ? "solar" : "load"; }

/// Month 1..12; weekday 0 (Sunday)..6, or -1 when the model pools all days.
struct ModelContext {
    int month = 1;
    int weekday = -1;
    auto operator<=>(const ModelContext&) const = default;
};

struct VariationRange {
    std::array<double, 24> min{};
    std::array<double, 24> max{};

    [[nodiscard]] double width(int hour) const { return max.at(static_cast<std::size_t>(hour)) - min.at(static_cast<std::size_t>(hour)); }
};

struct MarkovModel {
    int n_states = 0;
    Eigen::MatrixXd transition;  // row i-1 holds Pr{X_{t+1} = j | X_t = i}
    ProfileKind kind = ProfileKind::solar;
    ModelContext context;
};

struct FittedModel {
    MarkovModel model;
    VariationRange range;
};

// =============================================================================
// Level mapping
// =============================================================================

/// State (1..N) whose subinterval contains `value`; values outside the range
/// are clamped to the nearest end state and a zero-width range maps to N.
inline int state_of(double value, double lo, double hi, int n) {
    const double w = (hi - lo) / n;
    if (!(w > 0)) return n;
    const double pos = std::floor((value - lo) / w);
    const int s = n - static_cast<int>(std::clamp(pos, 0.0, static_cast<double>(n - 1)));
    return s;
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

inline Interval level_interval(int state, double lo, double hi, int n) {
    const double w = (hi - lo) / n;
    return {lo + (n - state) * w, lo + (n - state + 1) * w};
}

// =============================================================================
// Random numbers
// =============================================================================

/// 64-bit Mersenne Twister with a portable [0, 1) mapping, so trajectories
/// are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Index drawn from a probability row.
    int categorical(const Eigen::RowVectorXd& p) {
        const double u = uniform();
        double acc = 0.0;
        for (Eigen::Index j = 0; j < p.size(); ++j) {
            acc += p(j);
            if (u < acc) return static_cast<int>(j);
        }
        for (Eigen::Index j = p.size() - 1; j >= 0; --j)
            if (p(j) > 0) return static_cast<int>(j);
        return static_cast<int>(p.size() - 1);
    }

private:
    std::mt19937_64 engine_;
};

// =============================================================================
// Fitting
// =============================================================================

inline void check_model(const MarkovModel& m) {
    if (m.n_states < 2) throw ParameterError("a Markov model needs at least 2 states");
    if (m.transition.rows() != m.n_states || m.transition.cols() != m.n_states)
        throw ParameterError("transition matrix has the wrong shape");
    for (Eigen::Index i = 0; i < m.transition.rows(); ++i) {
        if ((m.transition.row(i).array() < 0).any()) throw ParameterError("negative transition probability");
        if (std::abs(m.transition.row(i).sum() - 1.0) > 1e-12)
            throw ParameterError(fmt::format("transition row {} does not sum to 1", i + 1));
    }
}

/// Per-hour extrema of the samples. Every hour of the day must be observed.
inline VariationRange hourly_range(const TimeSeries& series) {
    VariationRange r;
    std::array<bool, 24> seen{};
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto h = static_cast<std::size_t>(hour_of_day(series.time[i]));
        const double v = series.value[i];
        if (!seen[h]) {
            r.min[h] = r.max[h] = v;
            seen[h] = true;
        } else {
            r.min[h] = std::min(r.min[h], v);
            r.max[h] = std::max(r.max[h], v);
        }
    }
    for (std::size_t h = 0; h < 24; ++h)
        if (!seen[h]) throw ParameterError(fmt::format("no observations for hour {}", h));
    return r;
}

/// Chain states of every sample under the given ranges.
inline std::vector<int> states_of(const TimeSeries& series, const VariationRange& range, int n) {
    std::vector<int> out(series.size());
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto h = static_cast<std::size_t>(hour_of_day(series.time[i]));
        out[i] = state_of(series.value[i], range.min[h], range.max[h], n);
    }
    return out;
}

/// Maximum-likelihood transition matrix. A transition is counted between
/// neighbouring samples that are exactly one sampling step apart (the
/// smallest positive gap in the series); unvisited rows become uniform.
/// Solar transitions leaving an hour with a zero-width range (night) are not
/// counted, so the chain describes daytime sky dynamics only.
inline FittedModel fit(const TimeSeries& series, int n_states, ProfileKind kind, ModelContext context) {
    if (n_states < 2) throw ParameterError("a Markov model needs at least 2 states");
    if (series.empty()) throw ParameterError("cannot fit a Markov model to an empty series");
    if (series.time.size() != series.value.size()) throw ParameterError("series time/value length mismatch");

    FittedModel out;
    out.range = hourly_range(series);
    const auto states = states_of(series, out.range, n_states);

    std::optional<std::chrono::minutes> step;
    for (std::size_t i = 1; i < series.size(); ++i) {
        const auto gap = series.time[i] - series.time[i - 1];
        if (gap.count() > 0 && (!step || gap < *step)) step = gap;
    }

    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_states, n_states);
    if (step)
        for (std::size_t i = 1; i < series.size(); ++i)
            if (series.time[i] - series.time[i - 1] == *step) {
                if (kind == ProfileKind::solar && out.range.width(hour_of_day(series.time[i - 1])) <= 0) continue;
                counts(states[i - 1] - 1, states[i] - 1) += 1.0;
            }

    MarkovModel& m = out.model;
    m.n_states = n_states;
    m.kind = kind;
    m.context = context;
    m.transition.resize(n_states, n_states);
    for (int i = 0; i < n_states; ++i) {
        const double total = counts.row(i).sum();
        if (total > 0)
            m.transition.row(i) = counts.row(i) / total;
        else
            m.transition.row(i).setConstant(1.0 / n_states);
    }
    return out;
}

/// Samples whose timestamps fall in `context` (month, and weekday if set).
inline TimeSeries select(const TimeSeries& series, ModelContext context) {
    TimeSeries out;
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (month_of(series.time[i]) != context.month) continue;
        if (context.weekday >= 0 && weekday_of(series.time[i]) != context.weekday) continue;
        out.time.push_back(series.time[i]);
        out.value.push_back(series.value[i]);
    }
    return out;
}

using ModelSet = std::map<ModelContext, FittedModel>;

/// One model per month present in the data (solar), or per (weekday, month)
/// when `by_weekday` is set (load).
inline ModelSet fit_all(const TimeSeries& series, int n_states, ProfileKind kind, bool by_weekday) {
    std::map<ModelContext, bool> contexts;
    for (auto t : series.time) contexts[{month_of(t), by_weekday ? weekday_of(t) : -1}] = true;
    ModelSet out;
    for (const auto& [ctx, _] : contexts) out[ctx] = fit(select(series, ctx), n_states, kind, ctx);
    return out;
}

// =============================================================================
// Simulation
// =============================================================================

struct Trajectory {
    int start_hour = 0;
    int step_minutes = 1;
    std::vector<int> states;
    std::vector<double> values;

    [[nodiscard]] int hour_at(std::size_t i) const {
        return (start_hour + static_cast<int>(i) * step_minutes / 60) % 24;
    }
};

/// Runs the chain for `hours` at `step_minutes` resolution. The first sample
/// is in `initial_state`; each sample is uniform within its state's
/// subinterval of that hour's range.
inline Trajectory simulate(const MarkovModel& model, const VariationRange& range, int initial_state, int hours,
                           std::uint64_t seed, int start_hour = 0, int step_minutes = 1) {
    check_model(model);
    if (initial_state < 1 || initial_state > model.n_states)
        throw ParameterError(fmt::format("initial state {} outside 1..{}", initial_state, model.n_states));
    if (hours < 0 || step_minutes < 1 || 60 % step_minutes != 0)
        throw ParameterError("simulation needs hours >= 0 and a step that divides an hour");

    Rng rng(seed);
    Trajectory traj;
    traj.start_hour = start_hour;
    traj.step_minutes = step_minutes;
    const std::size_t steps = static_cast<std::size_t>(hours) * static_cast<std::size_t>(60 / step_minutes);
    traj.states.reserve(steps);
    traj.values.reserve(steps);
    int state = initial_state;
    for (std::size_t i = 0; i < steps; ++i) {
        if (i > 0) state = rng.categorical(model.transition.row(state - 1)) + 1;
        const auto h = static_cast<std::size_t>(traj.hour_at(i));
        const auto iv = level_interval(state, range.min[h], range.max[h], model.n_states);
        traj.states.push_back(state);
        traj.values.push_back(iv.lo + rng.uniform() * (iv.hi - iv.lo));
    }
    return traj;
}

// =============================================================================
// Forecast
// =============================================================================

/// Pi^k by repeated multiplication (Pi^0 = I).
inline Eigen::MatrixXd transition_power(const MarkovModel& model, int k) {
    if (k < 0) throw ParameterError("forecast horizon must be non-negative");
    Eigen::MatrixXd p = Eigen::MatrixXd::Identity(model.n_states, model.n_states);
    for (int i = 0; i < k; ++i) p = model.transition * p;
    return p;
}

/// E[X_{t+k} | X_t = i] as a state label.
inline double expected_state(const MarkovModel& model, int current_state, int k) {
    if (current_state < 1 || current_state > model.n_states)
        throw ParameterError(fmt::format("state {} outside 1..{}", current_state, model.n_states));
    const Eigen::MatrixXd pk = transition_power(model, k);
    double e = 0.0;
    for (int j = 1; j <= model.n_states; ++j) e += j * pk(current_state - 1, j - 1);
    return e;
}

/// Physical value for a (possibly fractional) expected state in the target
/// hour: min + (R / N) * (level - 1/2), with level = N + 1 - E counted from
/// the bottom. An integer state maps to its subinterval midpoint.
inline double value_of_expected_state(double e, const VariationRange& range, int target_hour, int n) {
    const auto h = static_cast<std::size_t>(target_hour);
    return range.min.at(h) + range.width(target_hour) / n * ((n + 1 - e) - 0.5);
}

inline double forecast(const MarkovModel& model, const VariationRange& range, int current_state, int k,
                       int target_hour) {
    return value_of_expected_state(expected_state(model, current_state, k), range, target_hour, model.n_states);
}

/// k-step-ahead forecasts aligned with `measured`: entry t is the forecast
/// made from the state of measured[t - k]. The first k entries, which have no
/// history, repeat the measurement.
inline std::vector<double> forecast_series(const FittedModel& f, const std::vector<double>& measured, int k = 1,
                                           int start_hour = 0, int step_minutes = 1) {
    if (k < 1) throw ParameterError("forecast series needs a horizon of at least one step");
    const Eigen::MatrixXd pk = transition_power(f.model, k);
    const int n = f.model.n_states;
    auto hour_at = [&](std::size_t i) { return (start_hour + static_cast<int>(i) * step_minutes / 60) % 24; };
    std::vector<double> out(measured.size());
    for (std::size_t t = 0; t < measured.size(); ++t) {
        if (t < static_cast<std::size_t>(k)) {
            out[t] = measured[t];
            continue;
        }
        const auto h0 = static_cast<std::size_t>(hour_at(t - static_cast<std::size_t>(k)));
        const int s = state_of(measured[t - static_cast<std::size_t>(k)], f.range.min[h0], f.range.max[h0], n);
        double e = 0.0;
        for (int j = 1; j <= n; ++j) e += j * pk(s - 1, j - 1);
        out[t] = value_of_expected_state(e, f.range, hour_at(t), n);
    }
    return out;
}

struct SolarDay {
    std::vector<double> insolation;   // W/m^2, simulated "measurement"
    std::vector<double> measured_kw;  // farm output
    std::vector<double> forecast_kw;  // one-step-ahead forecast, aligned
};

/// A simulated 24 h minute-resolution day for a farm of `rated_kw`, started
/// in the bottom (night) state at midnight. The model's highest hourly
/// insolation maps to rated output.
inline SolarDay simulate_solar_day(const FittedModel& f, double rated_kw, std::uint64_t seed) {
    SolarDay day;
    day.insolation = simulate(f.model, f.range, f.model.n_states, 24, seed).values;
    const auto fc = forecast_series(f, day.insolation);
    const double peak = *std::max_element(f.range.max.begin(), f.range.max.end());
    const double scale = peak > 0 ? rated_kw / peak : 0.0;
    for (std::size_t t = 0; t < fc.size(); ++t) {
        day.measured_kw.push_back(day.insolation[t] * scale);
        day.forecast_kw.push_back(fc[t] * scale);
    }
    return day;
}

// =============================================================================
// Flexible load envelope
// =============================================================================

struct FlexibleLoadEnvelope {
    std::array<double, 24> p_min_kw{};
    std::array<double, 24> p_max_kw{};
};

inline FlexibleLoadEnvelope flexible_envelope(const MarkovModel& model, const VariationRange& range) {
    if (model.kind != ProfileKind::load) throw ParameterError("flexible envelope needs a load model");
    FlexibleLoadEnvelope env;
    env.p_min_kw = range.min;
    env.p_max_kw = range.max;
    return env;
}

// =============================================================================
// Model files
// =============================================================================

inline nlohmann::json to_json(const FittedModel& f) {
    nlohmann::json j;
    j["kind"] = to_string(f.model.kind);
    j["n_states"] = f.model.n_states;
    j["month"] = f.model.context.month;
    j["weekday"] = f.model.context.weekday;
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < f.model.transition.rows(); ++i) {
        std::vector<double> row;
        for (Eigen::Index c = 0; c < f.model.transition.cols(); ++c) row.push_back(f.model.transition(i, c));
        rows.push_back(row);
    }
    j["transition"] = rows;
    j["range_min"] = f.range.min;
    j["range_max"] = f.range.max;
    return j;
}

inline FittedModel fitted_model_from_json(const nlohmann::json& j) {
    FittedModel f;
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "solar" && kind != "load") throw ParameterError(fmt::format("unknown model kind '{}'", kind));
    f.model.kind = kind == "solar" ? ProfileKind::solar : ProfileKind::load;
    f.model.n_states = j.at("n_states").get<int>();
    f.model.context = {j.at("month").get<int>(), j.value("weekday", -1)};
    const auto& rows = j.at("transition");
    f.model.transition.resize(f.model.n_states, f.model.n_states);
    if (static_cast<int>(rows.size()) != f.model.n_states) throw ParameterError("transition row count mismatch");
    for (int i = 0; i < f.model.n_states; ++i) {
        if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != f.model.n_states)
            throw ParameterError("transition column count mismatch");
        for (int c = 0; c < f.model.n_states; ++c)
            f.model.transition(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
    }
    f.range.min = j.at("range_min").get<std::array<double, 24>>();
    f.range.max = j.at("range_max").get<std::array<double, 24>>();
    check_model(f.model);
    return f;
}

inline nlohmann::json to_json(const ModelSet& set) {
    auto arr = nlohmann::json::array();
    for (const auto& [_, f] : set) arr.push_back(to_json(f));
    return nlohmann::json{{"models", arr}};
}

inline ModelSet model_set_from_json(const nlohmann::json& j) {
    ModelSet out;
    for (const auto& m : j.at("models")) {
        auto f = fitted_model_from_json(m);
        out[f.model.context] = std::move(f);
    }
    return out;
}

inline void save_models(const std::string& path, const ModelSet& set) {
    std::ofstream out(path);
    if (!out) throw DataError(fmt::format("cannot write '{}'", path));
    out << to_json(set).dump(1) << '\n';
}

inline ModelSet load_models(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(fmt::format("cannot open '{}'", path));
    try {
        return model_set_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("{}: {}", path, e.what()));
    }
}

}  // namespace pqc
