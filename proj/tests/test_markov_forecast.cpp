#include <gtest/gtest.h>

#include <sstream>

#include "pqc/markov_forecast.hpp"
#include "test_support.hpp"

using namespace pqc;

namespace {

Minutes day0() { return std::chrono::sys_days{std::chrono::year{2023} / 7 / 1}; }

TimeSeries minute_series(const std::vector<double>& values, Minutes start = day0()) {
    TimeSeries s;
    for (std::size_t i = 0; i < values.size(); ++i) {
        s.time.push_back(start + std::chrono::minutes{static_cast<long>(i)});
        s.value.push_back(values[i]);
    }
    return s;
}

VariationRange flat_range(double lo, double hi) {
    VariationRange r;
    r.min.fill(lo);
    r.max.fill(hi);
    return r;
}

MarkovModel model_of(const Eigen::MatrixXd& pi, ProfileKind kind = ProfileKind::solar) {
    MarkovModel m;
    m.n_states = static_cast<int>(pi.rows());
    m.transition = pi;
    m.kind = kind;
    return m;
}

TimeSeries as_series(const Trajectory& t) { return minute_series(t.values); }

}  // namespace

TEST(LevelMapping, TopStateIsOne) {
    EXPECT_EQ(state_of(99.0, 0.0, 100.0, 4), 1);
    EXPECT_EQ(state_of(100.0, 0.0, 100.0, 4), 1);
    EXPECT_EQ(state_of(0.0, 0.0, 100.0, 4), 4);
    EXPECT_EQ(state_of(30.0, 0.0, 100.0, 4), 3);
    EXPECT_EQ(state_of(5.0, 5.0, 5.0, 4), 4);
    const auto iv = level_interval(1, 0.0, 100.0, 4);
    EXPECT_DOUBLE_EQ(iv.lo, 75.0);
    EXPECT_DOUBLE_EQ(iv.hi, 100.0);
}

TEST(Fit, ConstantSeriesHasOneAbsorbingState) {
    const auto f = fit(minute_series(std::vector<double>(1440, 42.0)), 5, ProfileKind::load, {7, -1});
    const auto& pi = f.model.transition;
    // Zero-width ranges place every sample in the bottom state.
    EXPECT_DOUBLE_EQ(pi(4, 4), 1.0);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(pi(i, j), 0.2);
}

TEST(Fit, AlternatingTwoLevelSeries) {
    std::vector<double> v(1440);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2 == 0) ? 10.0 : 20.0;
    const auto f = fit(minute_series(v), 2, ProfileKind::load, {7, -1});
    Eigen::Matrix2d want;
    want << 0, 1, 1, 0;
    EXPECT_EQ(f.model.transition, want);
}

TEST(Fit, RowsAreStochastic) {
    Rng rng(5);
    std::vector<double> v(1440 * 2);
    for (auto& x : v) x = rng.uniform() * 50.0;
    const auto f = fit(minute_series(v), 7, ProfileKind::solar, {7, -1});
    for (Eigen::Index i = 0; i < 7; ++i) EXPECT_NEAR(f.model.transition.row(i).sum(), 1.0, 1e-12);
    EXPECT_NO_THROW(check_model(f.model));
}

TEST(Fit, RecoversKnownChain) {
    Eigen::Matrix4d pi;
    pi << 0.70, 0.20, 0.10, 0.00,  //
        0.15, 0.60, 0.20, 0.05,    //
        0.05, 0.25, 0.50, 0.20,    //
        0.00, 0.10, 0.30, 0.60;
    const int hours = 100000 / 60 + 1;
    const auto traj = simulate(model_of(pi), flat_range(0.0, 100.0), 1, hours, 2024);
    const auto f = fit(as_series(traj), 4, ProfileKind::solar, {7, -1});
    EXPECT_LT((f.model.transition - pi).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Fit, GapsDoNotCountAsTransitions) {
    auto s = minute_series({0.0, 10.0, 0.0, 10.0});
    s.time[2] += std::chrono::minutes{30};
    s.time[3] += std::chrono::minutes{30};
    // Fill the remaining hours so the range is defined everywhere.
    for (int h = 1; h < 24; ++h) {
        s.time.push_back(day0() + std::chrono::hours{h} + std::chrono::minutes{50});
        s.value.push_back(0.0);
    }
    const auto f = fit(s, 2, ProfileKind::load, {7, -1});
    // Counted: 0->10 (minute 0-1) and 0->10 (minute 32-33); the 1->32 jump is skipped.
    EXPECT_DOUBLE_EQ(f.model.transition(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(f.model.transition(0, 0), 0.5);
}

TEST(Fit, Errors) {
    EXPECT_THROW(fit(minute_series(std::vector<double>(1440, 1.0)), 1, ProfileKind::load, {}), ParameterError);
    EXPECT_THROW(fit(TimeSeries{}, 3, ProfileKind::load, {}), ParameterError);
    EXPECT_THROW(fit(minute_series(std::vector<double>(60, 1.0)), 3, ProfileKind::load, {}), ParameterError);
}

TEST(Simulate, IdentityChainStaysInOneLevel) {
    const auto traj = simulate(model_of(Eigen::Matrix3d::Identity()), flat_range(0.0, 30.0), 2, 5, 9);
    for (std::size_t i = 0; i < traj.values.size(); ++i) {
        EXPECT_EQ(traj.states[i], 2);
        EXPECT_GE(traj.values[i], 10.0);
        EXPECT_LE(traj.values[i], 20.0);
    }
}

TEST(Simulate, DeterministicForSeed) {
    Eigen::Matrix2d pi;
    pi << 0.9, 0.1, 0.2, 0.8;
    const auto a = simulate(model_of(pi), flat_range(0, 1), 1, 24, 77);
    const auto b = simulate(model_of(pi), flat_range(0, 1), 1, 24, 77);
    const auto c = simulate(model_of(pi), flat_range(0, 1), 1, 24, 78);
    EXPECT_EQ(a.values, b.values);
    EXPECT_NE(a.values, c.values);
}

TEST(Simulate, SamplesNeverLeaveTheirLevel) {
    VariationRange r;
    for (int h = 0; h < 24; ++h) {
        r.min[static_cast<std::size_t>(h)] = h;
        r.max[static_cast<std::size_t>(h)] = 2.0 * h + 5.0;
    }
    Eigen::MatrixXd pi = Eigen::MatrixXd::Constant(6, 6, 1.0 / 6.0);
    const auto traj = simulate(model_of(pi), r, 3, 24, 1, 0, 1);
    ASSERT_EQ(traj.values.size(), 1440u);
    for (std::size_t i = 0; i < traj.values.size(); ++i) {
        const int h = traj.hour_at(i);
        const auto iv = level_interval(traj.states[i], r.min[static_cast<std::size_t>(h)],
                                       r.max[static_cast<std::size_t>(h)], 6);
        ASSERT_GE(traj.values[i], iv.lo);
        ASSERT_LE(traj.values[i], iv.hi);
    }
}

TEST(Simulate, RejectsBadInitialState) {
    EXPECT_THROW(simulate(model_of(Eigen::Matrix2d::Identity()), flat_range(0, 1), 3, 1, 1), ParameterError);
}

TEST(Forecast, IdentityChainReturnsCurrentLevelMidpoint) {
    const auto m = model_of(Eigen::Matrix4d::Identity());
    const auto r = flat_range(0.0, 100.0);
    for (int i = 1; i <= 4; ++i)
        for (int k : {0, 1, 7}) {
            const auto iv = level_interval(i, 0.0, 100.0, 4);
            EXPECT_EQ(forecast(m, r, i, k, 12), 0.5 * (iv.lo + iv.hi));
        }
}

TEST(Forecast, UniformChainGivesMidRange) {
    const auto m = model_of(Eigen::MatrixXd::Constant(5, 5, 0.2));
    EXPECT_NEAR(forecast(m, flat_range(0.0, 80.0), 2, 1, 3), 40.0, 1e-12);
}

TEST(Forecast, TwoStateThreeStepsByMatrixPower) {
    Eigen::Matrix2d pi;
    pi << 0.9, 0.1, 0.2, 0.8;
    const Eigen::Matrix2d p3 = pi * pi * pi;
    const double e = 1.0 * p3(0, 0) + 2.0 * p3(0, 1);
    EXPECT_NEAR(expected_state(model_of(pi), 1, 3), e, 1e-15);
    // Level counted from the bottom is N + 1 - E.
    const double r = 60.0;
    EXPECT_NEAR(forecast(model_of(pi), flat_range(0.0, r), 1, 3, 0), r / 2 * ((3 - e) - 0.5), 1e-12);
}

TEST(Forecast, ConvergesToStationaryExpectation) {
    Eigen::Matrix3d pi;
    pi << 0.5, 0.4, 0.1, 0.2, 0.5, 0.3, 0.1, 0.3, 0.6;
    Eigen::RowVector3d dist(1.0, 0.0, 0.0);
    for (int i = 0; i < 5000; ++i) dist = dist * pi;
    const double e_inf = dist(0) + 2 * dist(1) + 3 * dist(2);
    for (int i = 1; i <= 3; ++i) EXPECT_NEAR(expected_state(model_of(pi), i, 200), e_inf, 1e-9);
}

TEST(Forecast, MatrixPowersStayStochastic) {
    Eigen::Matrix3d pi;
    pi << 0.5, 0.4, 0.1, 0.2, 0.5, 0.3, 0.1, 0.3, 0.6;
    for (int k : {1, 10, 100, 500}) {
        const auto p = transition_power(model_of(pi), k);
        for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-9);
    }
}

TEST(Envelope, DegenerateRangeHasZeroWidth) {
    const auto env = flexible_envelope(model_of(Eigen::Matrix2d::Identity(), ProfileKind::load), flat_range(3, 3));
    for (std::size_t h = 0; h < 24; ++h) EXPECT_EQ(env.p_max_kw[h] - env.p_min_kw[h], 0.0);
}

TEST(Envelope, RequiresLoadModel) {
    EXPECT_THROW(flexible_envelope(model_of(Eigen::Matrix2d::Identity()), flat_range(0, 1)), ParameterError);
}

TEST(Envelope, BundledCommercialProfileExtrema) {
    const auto table = read_csv_file(pqc::testing::data_path("profiles_summer.csv"));
    const auto series = table.series("commercial_kw");
    const int month = month_of(series.time.front());
    const auto f = fit(select(series, {month, -1}), 10, ProfileKind::load, {month, -1});
    const auto env = flexible_envelope(f.model, f.range);
    std::array<double, 24> lo, hi;
    lo.fill(std::numeric_limits<double>::infinity());
    hi.fill(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (month_of(series.time[i]) != month) continue;
        const auto h = static_cast<std::size_t>(hour_of_day(series.time[i]));
        lo[h] = std::min(lo[h], series.value[i]);
        hi[h] = std::max(hi[h], series.value[i]);
    }
    EXPECT_EQ(env.p_min_kw, lo);
    EXPECT_EQ(env.p_max_kw, hi);

    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto traj = simulate(f.model, f.range, 1 + static_cast<int>(seed % 10), 24, seed);
        for (std::size_t i = 0; i < traj.values.size(); ++i) {
            const auto h = static_cast<std::size_t>(traj.hour_at(i));
            ASSERT_GE(traj.values[i], env.p_min_kw[h]);
            ASSERT_LE(traj.values[i], env.p_max_kw[h]);
        }
    }
}

TEST(Simulate, FittedSolarHourlyMeansInsideRanges) {
    const auto table = read_csv_file(pqc::testing::data_path("profiles_summer.csv"));
    const auto series = table.series("ghi_wm2");
    const auto models = fit_all(series, 10, ProfileKind::solar, false);
    ASSERT_FALSE(models.empty());
    const auto& f = models.begin()->second;
    const auto traj = simulate(f.model, f.range, 10, 24 * 30, 3);
    std::array<double, 24> sum{}, count{};
    for (std::size_t i = 0; i < traj.values.size(); ++i) {
        const auto h = static_cast<std::size_t>(traj.hour_at(i));
        sum[h] += traj.values[i];
        count[h] += 1;
    }
    for (std::size_t h = 0; h < 24; ++h) {
        const double mean = sum[h] / count[h];
        EXPECT_GE(mean, f.range.min[h]);
        EXPECT_LE(mean, f.range.max[h]);
    }
}

TEST(ModelSet, TwelveMonthsAddressable) {
    std::vector<double> values;
    TimeSeries s;
    for (int month = 1; month <= 12; ++month) {
        const Minutes start = std::chrono::sys_days{std::chrono::year{2023} / month / 3};
        for (int i = 0; i < 1440; ++i) {
            s.time.push_back(start + std::chrono::minutes{i});
            s.value.push_back(month * 10.0 + (i % 3));
        }
    }
    const auto set = fit_all(s, 3, ProfileKind::solar, false);
    ASSERT_EQ(set.size(), 12u);
    for (int month = 1; month <= 12; ++month) {
        const auto& f = set.at({month, -1});
        EXPECT_EQ(f.model.context.month, month);
        EXPECT_DOUBLE_EQ(f.range.min[5], month * 10.0);
    }
}

TEST(ModelSet, JsonRoundTrip) {
    Eigen::Matrix3d pi;
    pi << 0.5, 0.4, 0.1, 0.2, 0.5, 0.3, 0.1, 0.3, 0.6;
    FittedModel f{model_of(pi, ProfileKind::load), flat_range(1.5, 7.25)};
    f.model.context = {6, 2};
    ModelSet set;
    set[f.model.context] = f;
    const auto back = model_set_from_json(nlohmann::json::parse(to_json(set).dump()));
    const auto& g = back.at({6, 2});
    EXPECT_EQ(g.model.transition, pi);
    EXPECT_EQ(g.model.kind, ProfileKind::load);
    EXPECT_EQ(g.range.max, f.range.max);
}

TEST(Csv, RoundTrip) {
    CsvTable t;
    t.time = {day0(), day0() + std::chrono::minutes{1}};
    t.names = {"a", "b"};
    t.columns = {{1.5, 2.5}, {-3.0, 4.0}};
    std::stringstream ss;
    write_csv(ss, t);
    const auto back = read_csv(ss);
    EXPECT_EQ(back.time, t.time);
    EXPECT_EQ(back.columns, t.columns);
    EXPECT_EQ(format_timestamp(day0()), "2023-07-01 00:00");
    EXPECT_EQ(weekday_of(day0()), 6);
    EXPECT_THROW(parse_timestamp("2023-13-01 00:00"), DataError);
}
