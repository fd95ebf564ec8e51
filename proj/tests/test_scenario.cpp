#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pqc/scenario.hpp"
#include "test_support.hpp"

using namespace pqc;

namespace {

ScenarioConfig summer() { return load_config(pqc::testing::data_path("summer.json")); }

std::string temp_dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / ("pqc_scenario_" + name);
    std::filesystem::remove_all(d);
    return d.string();
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

const RunReport& summer_baseline() {
    static const RunReport r = run(summer());
    return r;
}

const RunReport& short_fast_control() {
    static const RunReport r = [] {
        auto c = summer();
        c.horizon_hours = 2;
        c.mode = ControlMode::fast_control;
        return run(c);
    }();
    return r;
}

}  // namespace

TEST(Config, BundledSummerParses) {
    const auto c = summer();
    EXPECT_EQ(c.horizon_hours, 24);
    EXPECT_EQ(c.slow_step_minutes, 60);
    EXPECT_EQ(c.fast_step_minutes, 1);
    EXPECT_EQ(c.solar.bus, "634");
    EXPECT_DOUBLE_EQ(c.solar.rated_kw, 100.0);
    ASSERT_TRUE(c.flexible.has_value());
    EXPECT_EQ(c.flexible->bus, "671");
    EXPECT_TRUE(std::filesystem::exists(c.grid_file));
    EXPECT_TRUE(std::filesystem::exists(c.profiles_file));
}

TEST(Config, BundledWinterParses) {
    const auto c = load_config(pqc::testing::data_path("winter.json"));
    EXPECT_EQ(c.season, "winter");
    EXPECT_TRUE(std::filesystem::exists(c.profiles_file));
}

TEST(Config, Rejected) {
    nlohmann::json j = {{"grid", "g.json"}, {"profiles", "p.csv"}};
    EXPECT_NO_THROW(parse_config(j));
    auto bad = [&](const char* key, nlohmann::json v) {
        auto k = j;
        k[key] = std::move(v);
        return k;
    };
    EXPECT_THROW(parse_config(bad("horizon_hours", 0)), ScenarioError);
    EXPECT_THROW(parse_config(bad("slow_step_minutes", 50)), ScenarioError);
    EXPECT_THROW(parse_config(bad("fast_step_minutes", 7)), ScenarioError);
    EXPECT_THROW(parse_config(bad("mode", "fastest")), ScenarioError);
    EXPECT_THROW(parse_config(bad("horizon_hours", "one")), ScenarioError);
    EXPECT_THROW(parse_config(bad("flexible", {{"power_factor", 1.5}})), ScenarioError);
    EXPECT_THROW(parse_config(bad("flexible", {{"mode", "hover"}})), ScenarioError);
    EXPECT_THROW(parse_config(bad("control", {{"starfi_tolerance", 0.2}})), ScenarioError);
    EXPECT_THROW(parse_config({{"grid", "g.json"}}), ScenarioError);
    EXPECT_THROW(load_config("/nonexistent/scenario.json"), ScenarioError);
}

TEST(Config, RelativePathsResolveAgainstFile) {
    const auto c = parse_config({{"grid", "g.json"}, {"profiles", "../p.csv"}}, "/a/b");
    EXPECT_EQ(c.grid_file, "/a/b/g.json");
    EXPECT_EQ(c.profiles_file, "/a/p.csv");
}

TEST(Config, BadAlphaKey) {
    auto c = summer();
    c.horizon_hours = 1;
    c.alpha["671"] = 2.0;
    EXPECT_THROW(run(c), ScenarioError);
}

TEST(Inputs, SameSeedSameDraws) {
    auto c = summer();
    const auto a = generate_inputs(c);
    c.mode = ControlMode::fast_control;
    const auto b = generate_inputs(c);
    EXPECT_EQ(a.solar_kw, b.solar_kw);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(a.class_kw[k], b.class_kw[k]);
    c.seed = 8;
    EXPECT_NE(generate_inputs(c).solar_kw, a.solar_kw);
}

TEST(Inputs, SolarWithinRating) {
    const auto in = generate_inputs(summer());
    ASSERT_EQ(in.solar_kw.size(), 1440u);
    for (double p : in.solar_kw) {
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 100.0 + 1e-9);
    }
    EXPECT_EQ(in.solar_kw.front(), 0.0);
}

TEST(Loading, PeakCalibrationMatchesPublishedTotal) {
    const auto c = summer();
    const auto in = generate_inputs(c);
    const auto file = load_grid_file(c.grid_file);
    const FeederLoading loading(file, c, in);
    double published = 0.0, peak = 0.0;
    for (const auto& l : file.loads) published += l.p_nom_kw;
    for (std::size_t t = 0; t < in.steps; ++t) {
        double total = loading.flexible_demand(t);
        for (const auto& l : loading.fixed(t)) total += l.p_nom_kw;
        peak = std::max(peak, total);
    }
    EXPECT_NEAR(peak, published, 1e-9 * published);
}

TEST(Run, DegeneratesToPlainPowerFlows) {
    auto c = summer();
    c.horizon_hours = 1;
    c.solar.rated_kw = 0.0;
    c.solar.s_kva = 0.0;
    c.flexible.reset();
    const auto in = generate_inputs(c);
    const auto r = run(c, in);
    ASSERT_EQ(r.steps(), 60u);

    const auto file = load_grid_file(c.grid_file);
    const FeederLoading loading(file, c, in);
    const std::size_t n_caps = file.grid.capacitors.size();
    for (std::size_t t = 0; t < 60; ++t) {
        DiscreteControllerState s = file.grid.initial_state();
        for (std::size_t i = 0; i < n_caps; ++i)
            s.capacitor_steps[i] = static_cast<int>(r.decisions.column("cap_" + file.grid.capacitors[i].name)[t]);
        for (std::size_t i = 0; i < file.grid.regulators.size(); ++i)
            s.regulator_taps[i] = static_cast<int>(r.decisions.column("tap_" + file.grid.regulators[i].name)[t]);
        const auto st = solve(PowerFlowProblem(file.grid, s, loading.fixed(t))).state;
        for (std::size_t n = 0; n < r.voltages.columns.size(); ++n)
            EXPECT_NEAR(r.voltages.columns[n][t], st.v(static_cast<Eigen::Index>(n)), 1e-6) << "step " << t;
        EXPECT_EQ(r.series.column("q_inverter_kvar")[t], 0.0);
        EXPECT_EQ(r.series.column("lost_capacity_kw")[t], 0.0);
        EXPECT_EQ(r.series.column("loss_reduction_kw")[t], 0.0);
    }
}

TEST(Run, EveryStepHasOneRowPerTable) {
    for (const RunReport* r : {&summer_baseline(), &short_fast_control()}) {
        const auto n = r->steps();
        EXPECT_EQ(r->voltages.time.size(), n);
        EXPECT_EQ(r->decisions.time.size(), n);
        EXPECT_EQ(r->signals.time.size(), n);
        for (const auto& col : r->series.columns) EXPECT_EQ(col.size(), n);
        EXPECT_TRUE(r->complete);
    }
    EXPECT_EQ(summer_baseline().steps(), 1440u);
    EXPECT_EQ(short_fast_control().steps(), 120u);
}

TEST(Run, PowerBalancePerStep) {
    const auto file = load_grid_file(summer().grid_file);
    const double tol = 10.0 * SolverOptions{}.tolerance * file.grid.base_kva / 3.0;
    for (const RunReport* r : {&summer_baseline(), &short_fast_control()})
        for (double b : r->series.column("balance_kw")) EXPECT_LT(std::abs(b), tol);
}

TEST(Run, CountersAreMonotone) {
    const auto& s = summer_baseline().series;
    const auto& taps = s.column("tap_changes");
    const auto& cum = s.column("starfi_cum");
    const auto& ev = s.column("starfi_events");
    double total = 0.0;
    for (std::size_t t = 0; t < taps.size(); ++t) {
        if (t > 0) {
            EXPECT_GE(taps[t], taps[t - 1]);
        }
        total += ev[t];
        EXPECT_EQ(cum[t], total);
    }
}

TEST(Run, BaselineIsUnityPowerFactor) {
    const auto& r = summer_baseline();
    for (double q : r.series.column("q_inverter_kvar")) EXPECT_EQ(q, 0.0);
    const auto& cost = r.series.column("cost");
    const auto& ref = r.series.column("reference_cost");
    for (std::size_t t = 0; t < cost.size(); ++t) EXPECT_EQ(cost[t], ref[t]);
}

TEST(Run, ControlStaysWithinLimits) {
    const auto& r = short_fast_control();
    const auto& p = r.series.column("solar_kw");
    const auto& q = r.series.column("q_inverter_kvar");
    const auto& f = r.series.column("flex_kw");
    const auto& lo = r.series.column("flex_min_kw");
    const auto& hi = r.series.column("flex_max_kw");
    for (std::size_t t = 0; t < r.steps(); ++t) {
        EXPECT_LE(std::hypot(p[t], q[t]), 100.0 + 1e-9);
        EXPECT_GE(f[t], lo[t] - 1e-9);
        EXPECT_LE(f[t], hi[t] + 1e-9);
        EXPECT_LE(r.series.column("cost")[t], r.series.column("reference_cost")[t] + 1e-12);
    }
}

TEST(Run, ModesSeeIdenticalDraws) {
    auto c = summer();
    c.horizon_hours = 2;
    const auto a = run(c);
    const auto& b = short_fast_control();
    for (const char* col : {"solar_kw", "flex_demand_kw"})
        for (std::size_t t = 0; t < b.steps(); ++t) EXPECT_EQ(a.series.column(col)[t], b.series.column(col)[t]);
    for (std::size_t t = 0; t < b.steps(); ++t) EXPECT_EQ(a.signals.column("d_low_kw")[t], b.signals.column("d_low_kw")[t]);
}

TEST(Run, SignalsSplitExactly) {
    const auto& s = summer_baseline().signals;
    const auto& d = s.column("d_kw");
    const auto& l = s.column("d_low_kw");
    const auto& h = s.column("d_high_kw");
    for (std::size_t t = 0; t < d.size(); ++t) EXPECT_NEAR(d[t], l[t] + h[t], 1e-12);
}

TEST(Run, Deterministic) {
    auto c = summer();
    c.horizon_hours = 3;
    c.mode = ControlMode::fast_control;
    const auto a = temp_dir("det_a"), b = temp_dir("det_b");
    c.out_dir = a;
    run(c);
    c.out_dir = b;
    run(c);
    for (const char* f : {"voltages.csv", "series.csv", "decisions.csv", "signals.csv", "summary.csv"}) {
        const auto x = slurp(std::filesystem::path(a) / f);
        EXPECT_FALSE(x.empty()) << f;
        EXPECT_EQ(x, slurp(std::filesystem::path(b) / f)) << f;
    }
}

TEST(Run, NonConvergenceNamesStepAndFlushes) {
    auto c = summer();
    c.horizon_hours = 1;
    c.load_scale = 40.0;
    c.out_dir = temp_dir("diverge");
    try {
        run(c);
        FAIL() << "expected ScenarioError";
    } catch (const ScenarioError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    }
    const auto partial = read_report(c.out_dir);
    EXPECT_FALSE(partial.complete);
    EXPECT_EQ(partial.steps(), 0u);
}

TEST(Report, RoundTrip) {
    const auto dir = temp_dir("roundtrip");
    write_report(short_fast_control(), dir);
    const auto r = read_report(dir);
    EXPECT_TRUE(r.complete);
    EXPECT_EQ(r.mode, ControlMode::fast_control);
    EXPECT_EQ(r.steps(), 120u);
    EXPECT_EQ(r.series.names, series_columns());
    const auto& want = short_fast_control().series.column("losses_kw");
    const auto& got = r.series.column("losses_kw");
    for (std::size_t t = 0; t < want.size(); ++t) EXPECT_NEAR(got[t], want[t], 5e-7);
}

TEST(Compare, SelfHasZeroDeltas) {
    const auto c = compare(summer_baseline(), summer_baseline());
    EXPECT_FALSE(c.rows.empty());
    for (const auto& r : c.rows) EXPECT_EQ(r.delta(), 0.0) << r.metric;
}

TEST(Compare, HorizonMismatch) {
    EXPECT_THROW(compare(summer_baseline(), short_fast_control()), ComparisonError);
}

TEST(Compare, TwoColumnTapTable) {
    const auto text = format_comparison(compare(summer_baseline(), summer_baseline()));
    EXPECT_NE(text.find("IEEE 1547 standard"), std::string::npos);
    EXPECT_NE(text.find("Fast Inverter VAR Control"), std::string::npos);
    const auto taps = fmt::format("{:.0f}", summer_baseline().summary.at("tap_changes"));
    EXPECT_NE(text.find(taps + " |"), std::string::npos);
}

TEST(Compare, ReportsRequiredMetrics) {
    const auto c = compare(summer_baseline(), summer_baseline());
    for (const char* m : {"tap_changes", "losses_kwh", "starfi_events", "v_min", "v_max", "in_band_fraction",
                          "average_profit"})
        EXPECT_NO_THROW((void)c.row(m)) << m;
    EXPECT_THROW((void)c.row("nonsense"), ComparisonError);
}
