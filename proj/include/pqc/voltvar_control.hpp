#pragma once

// Two-timescale Volt/VAR control: hourly capacitor configuration, per-step
// inverter reactive dispatch and flexible-load modulation, local regulator
// action, and the quality/profit metrics used to compare control modes.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "pqc/grid_model.hpp"
#include "pqc/power_flow.hpp"

namespace pqc {

class ControlError;

struct InverterSpec {
    BusId bus;
    double s_kva = 0.0;  // apparent power limit
    double p_kw = 0.0;   // available active power, not curtailed
};

/// Aggregate flexible load on one bus, split equally over its phases.
/// Reactive power follows the active setpoint at a fixed ratio.
struct FlexibleLoadSpec {
    BusId bus;
    double p_min_kw = 0.0;
    double p_max_kw = 0.0;
    double p_ref_kw = 0.0;  // forecast consumption, used by the do-nothing decision
    double kvar_per_kw = 0.0;
};

struct FastControlProblem {
    const GridModel* grid = nullptr;
    DiscreteControllerState s;
    std::vector<LoadModel> loads;  // fixed loads
    std::vector<InverterSpec> inverters;
    std::vector<FlexibleLoadSpec> flexible;
    std::vector<double> alpha;  // per node; empty selects default_alpha
    double v_nom = 1.0;
    SolverOptions solver;
    std::optional<SystemState> warm_start;
};

struct ControlDecision {
    std::vector<double> q_inverter_kvar;
    std::vector<double> p_flexible_kw;
    DiscreteControllerState s;
    double cost = std::numeric_limits<double>::infinity();
    SystemState state;
    int evaluations = 0;
};

class ControlError : public std::runtime_error {
public:
    ControlError(const std::string& what, std::optional<ControlDecision> best)
        : std::runtime_error(what), best(std::move(best)) {}
    std::optional<ControlDecision> best;
};

/// 1 on every (bus, phase) that serves a load, 0 on pass-through nodes.
/// Flexible loads count as load-serving.
inline std::vector<double> default_alpha(const GridModel& grid, const std::vector<LoadModel>& loads) {
    NodeIndex nodes(grid);
    std::vector<double> alpha(nodes.size(), 0.0);
    for (const auto& l : loads) alpha[nodes.at(l.bus, l.phase)] = 1.0;
    return alpha;
}

inline double reactive_limit(const InverterSpec& inv) {
    return std::sqrt(std::max(0.0, inv.s_kva * inv.s_kva - inv.p_kw * inv.p_kw));
}

inline void check_problem(const FastControlProblem& p) {
    if (!p.grid) throw std::invalid_argument("control problem has no grid");
    for (double a : p.alpha)
        if (!(a >= 0)) throw std::invalid_argument("voltage weights must be non-negative");
    if (!p.alpha.empty() && p.alpha.size() != NodeIndex(*p.grid).size())
        throw std::invalid_argument("one voltage weight per (bus, phase) node is required");
    for (const auto& inv : p.inverters)
        if (inv.s_kva < 0 || inv.p_kw < 0) throw std::invalid_argument("inverter ratings must be non-negative");
    for (const auto& f : p.flexible)
        if (!(f.p_min_kw <= f.p_max_kw)) throw std::invalid_argument("flexible load bounds are inverted");
}

/// C = sum of line losses (per-phase p.u.) + sum alpha (v - v_nom)^2.
inline double fast_cost(const SystemState& state, const GridModel& grid, const DiscreteControllerState& s,
                        const std::vector<double>& alpha, double v_nom = 1.0) {
    const double losses = technical_losses(state, grid, s).total_kw / grid.phase_base_kva();
    double deviation = 0.0;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        const double dv = state.v(static_cast<Eigen::Index>(i)) - v_nom;
        deviation += alpha[i] * dv * dv;
    }
    return losses + deviation;
}

// =============================================================================
// Decision evaluation
// =============================================================================

/// Solves the power flow for candidate decisions, reusing the last converged
/// state as the starting point.
class DecisionEvaluator {
public:
    explicit DecisionEvaluator(const FastControlProblem& p)
        : p_((check_problem(p), p)), alpha_(p.alpha.empty() ? default_alpha(*p.grid, all_loads(p)) : p.alpha),
          flow_(*p.grid, p.s, all_loads(p), generators(p)) {
        last_ = p.warm_start;
    }

    [[nodiscard]] const std::vector<double>& alpha() const { return alpha_; }
    [[nodiscard]] int evaluations() const { return evaluations_; }

    /// Cost at (q, P^L), or +inf when the power flow fails.
    double cost(const std::vector<double>& q, const std::vector<double>& pl, SystemState* out = nullptr) {
        ++evaluations_;
        apply(q, pl);
        auto result = run();
        if (!result) return std::numeric_limits<double>::infinity();
        last_ = result->state;
        const double c = fast_cost(result->state, *p_.grid, p_.s, alpha_, p_.v_nom);
        if (out) *out = std::move(result->state);
        return c;
    }

    /// Reactive output (kvar) that holds every inverter bus at v_nom, if the
    /// PV-bus power flow converges.
    std::optional<std::vector<double>> pv_hint(const std::vector<double>& pl) {
        if (p_.inverters.empty()) return std::nullopt;
        std::vector<PvSetpoint> pv;
        for (const auto& inv : p_.inverters) pv.push_back({inv.bus, p_.v_nom});
        std::vector<double> zero(p_.inverters.size(), 0.0);
        apply(zero, pl);
        try {
            PowerFlowProblem held(*p_.grid, p_.s, {flow_.loads().begin(), flow_.loads().end()},
                                  {flow_.generators().begin(), flow_.generators().end()}, pv);
            const auto result = solve(held, p_.solver);
            std::vector<double> q;
            for (const auto& inv : p_.inverters) q.push_back(pv_reactive_kvar(result.state, held, inv.bus));
            return q;
        } catch (const std::runtime_error&) {
            return std::nullopt;
        }
    }

    [[nodiscard]] const PowerFlowProblem& flow() const { return flow_; }

    /// Fixed loads followed by one zero-power entry per flexible-load phase.
    static std::vector<LoadModel> all_loads(const FastControlProblem& p) {
        std::vector<LoadModel> out = p.loads;
        for (const auto& f : p.flexible)
            for (Phase ph : p.grid->bus(f.bus).phases.members()) {
                LoadModel m;
                m.bus = f.bus;
                m.phase = ph;
                out.push_back(m);
            }
        return out;
    }

private:
    static std::vector<GeneratorInjection> generators(const FastControlProblem& p) {
        std::vector<GeneratorInjection> out;
        for (const auto& inv : p.inverters) out.push_back({inv.bus, inv.p_kw, 0.0});
        return out;
    }

    void apply(const std::vector<double>& q, const std::vector<double>& pl) {
        for (std::size_t i = 0; i < p_.inverters.size(); ++i) flow_.set_generator(i, p_.inverters[i].p_kw, q[i]);
        std::size_t k = p_.loads.size();
        for (std::size_t i = 0; i < p_.flexible.size(); ++i) {
            const auto phases = p_.grid->bus(p_.flexible[i].bus).phases.members();
            const double share = pl[i] / static_cast<double>(phases.size());
            for (std::size_t j = 0; j < phases.size(); ++j, ++k)
                flow_.set_load(k, share, share * p_.flexible[i].kvar_per_kw);
        }
    }

    std::optional<PowerFlowResult> run() {
        if (last_) {
            SolverOptions warm = p_.solver;
            warm.flat_start = false;
            try {
                return solve(flow_, warm, last_);
            } catch (const std::runtime_error&) {
            }
        }
        try {
            SolverOptions flat = p_.solver;
            flat.flat_start = true;
            return solve(flow_, flat);
        } catch (const std::runtime_error&) {
            return std::nullopt;
        }
    }

    const FastControlProblem& p_;
    std::vector<double> alpha_;
    PowerFlowProblem flow_;
    std::optional<SystemState> last_;
    int evaluations_ = 0;
};

// =============================================================================
// Fast timescale
// =============================================================================

struct FastOptions {
    double tolerance = 1e-3;  // golden-section interval, as a fraction of the variable's range
    int max_sweeps = 8;
    bool pv_hint = true;
};

namespace detail {

inline std::vector<double> reference_flexible(const FastControlProblem& p) {
    std::vector<double> pl;
    for (const auto& f : p.flexible) pl.push_back(std::clamp(f.p_ref_kw, f.p_min_kw, f.p_max_kw));
    return pl;
}

/// Golden-section minimization of f on [lo, hi], also checking both ends.
inline double golden_section(const std::function<double(double)>& f, double lo, double hi, double tol,
                             double& best_value) {
    constexpr double invphi = 0.6180339887498949;
    double best_x = lo;
    best_value = f(lo);
    if (hi <= lo) return best_x;
    auto consider = [&](double x, double v) {
        if (v < best_value) {
            best_value = v;
            best_x = x;
        }
    };
    consider(hi, f(hi));
    double a = lo, b = hi;
    double c = b - invphi * (b - a), d = a + invphi * (b - a);
    double fc = f(c), fd = f(d);
    consider(c, fc);
    consider(d, fd);
    while (b - a > tol) {
        if (fc <= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = f(c);
            consider(c, fc);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = f(d);
            consider(d, fd);
        }
    }
    return best_x;
}

}  // namespace detail

/// Reference decision: no inverter reactive power, flexible loads at their
/// forecast. Throws ControlError if the power flow does not converge.
inline ControlDecision ieee1547_baseline(const FastControlProblem& problem) {
    DecisionEvaluator eval(problem);
    ControlDecision d;
    d.q_inverter_kvar.assign(problem.inverters.size(), 0.0);
    d.p_flexible_kw = detail::reference_flexible(problem);
    d.s = problem.s;
    d.cost = eval.cost(d.q_inverter_kvar, d.p_flexible_kw, &d.state);
    d.evaluations = eval.evaluations();
    if (!std::isfinite(d.cost)) throw ControlError("power flow failed for the unity power factor decision", std::nullopt);
    return d;
}

/// Coordinate descent over inverter reactive power and flexible load, each
/// coordinate minimized by golden-section search with a full power flow per
/// candidate. Starts from the better of the do-nothing decision and the
/// PV-bus reactive requirement clamped to capability.
inline ControlDecision solve_fast(const FastControlProblem& problem, const FastOptions& options = {}) {
    DecisionEvaluator eval(problem);
    const std::size_t ni = problem.inverters.size();

    std::vector<double> lo, hi;
    for (const auto& inv : problem.inverters) {
        const double qmax = reactive_limit(inv);
        lo.push_back(-qmax);
        hi.push_back(qmax);
    }
    for (const auto& f : problem.flexible) {
        lo.push_back(f.p_min_kw);
        hi.push_back(f.p_max_kw);
    }

    std::vector<double> x(ni, 0.0);
    for (double p : detail::reference_flexible(problem)) x.push_back(p);
    auto split = [&](const std::vector<double>& v) {
        return std::pair{std::vector<double>(v.begin(), v.begin() + static_cast<long>(ni)),
                         std::vector<double>(v.begin() + static_cast<long>(ni), v.end())};
    };
    auto cost_at = [&](const std::vector<double>& v) {
        auto [q, pl] = split(v);
        return eval.cost(q, pl);
    };

    double best = cost_at(x);
    if (options.pv_hint && ni > 0) {
        auto [q0, pl0] = split(x);
        if (auto hint = eval.pv_hint(pl0)) {
            std::vector<double> y = x;
            for (std::size_t i = 0; i < ni; ++i) y[i] = std::clamp((*hint)[i], lo[i], hi[i]);
            const double c = cost_at(y);
            if (c < best) {
                best = c;
                x = y;
            }
        }
    }

    for (int sweep = 0; sweep < options.max_sweeps && !x.empty(); ++sweep) {
        const std::vector<double> before = x;
        for (std::size_t k = 0; k < x.size(); ++k) {
            if (!(hi[k] > lo[k])) {
                x[k] = lo[k];
                continue;
            }
            std::vector<double> y = x;
            auto line = [&](double value) {
                y[k] = value;
                return cost_at(y);
            };
            double value = 0.0;
            const double arg = detail::golden_section(line, lo[k], hi[k], options.tolerance * (hi[k] - lo[k]), value);
            if (value < best) {
                best = value;
                x[k] = arg;
            }
        }
        double moved = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k)
            if (hi[k] > lo[k]) moved = std::max(moved, std::abs(x[k] - before[k]) / (hi[k] - lo[k]));
        if (moved <= options.tolerance) break;
    }

    ControlDecision d;
    auto [q, pl] = split(x);
    d.q_inverter_kvar = q;
    d.p_flexible_kw = pl;
    d.s = problem.s;
    d.cost = eval.cost(q, pl, &d.state);
    d.evaluations = eval.evaluations();
    if (!std::isfinite(d.cost))
        throw ControlError("no candidate decision gave a converged power flow", std::nullopt);
    return d;
}

// =============================================================================
// Slow timescale
// =============================================================================

struct BankRating {
    int num_steps = 1;
    double kvar_per_step = 0.0;
};

inline std::vector<BankRating> bank_ratings(const GridModel& grid) {
    std::vector<BankRating> out;
    for (const auto& cap : grid.capacitors) out.push_back({cap.num_steps, cap.step_susceptance * grid.phase_base_kva()});
    return out;
}

/// Bank steps whose rated output (kvar at 1 p.u.) is closest to the forecast
/// reactive requirement; ties go to the fewest step changes from `previous`.
inline std::vector<int> solve_slow(double q_forecast_kvar, const std::vector<BankRating>& banks,
                                   const std::vector<int>& previous) {
    if (previous.size() != banks.size()) throw std::invalid_argument("previous bank steps have the wrong length");
    std::vector<int> steps(banks.size(), 0), best = previous;
    double best_gap = std::numeric_limits<double>::infinity();
    int best_changes = std::numeric_limits<int>::max();
    constexpr double tie = 1e-9;
    while (true) {
        double q = 0.0;
        int changes = 0;
        for (std::size_t i = 0; i < banks.size(); ++i) {
            q += steps[i] * banks[i].kvar_per_step;
            changes += std::abs(steps[i] - previous[i]);
        }
        const double gap = std::abs(q_forecast_kvar - q);
        if (gap < best_gap - tie || (gap <= best_gap + tie && changes < best_changes)) {
            best_gap = std::min(gap, best_gap);
            best_changes = changes;
            best = steps;
        }
        std::size_t i = 0;
        while (i < banks.size() && steps[i] == banks[i].num_steps) steps[i++] = 0;
        if (i == banks.size()) break;
        ++steps[i];
    }
    return best;
}

inline DiscreteControllerState solve_slow(double q_forecast_kvar, const GridModel& grid,
                                          const DiscreteControllerState& previous) {
    DiscreteControllerState s = previous;
    s.capacitor_steps = solve_slow(q_forecast_kvar, bank_ratings(grid), previous.capacitor_steps);
    return s;
}

// =============================================================================
// Regulators
// =============================================================================

struct RegulatorUpdate {
    DiscreteControllerState s;
    int changes = 0;
};

/// Voltage seen by regulator i's control relay at tap setting `s`.
inline double regulator_sensed_voltage(const SystemState& state, const GridModel& grid,
                                       const DiscreteControllerState& s, std::size_t i) {
    NodeIndex nodes(grid);
    const auto& reg = grid.regulators.at(i);
    if (!reg.compensated()) return state.v(static_cast<Eigen::Index>(nodes.at(reg.sense_bus, reg.phase)));

    const auto& line = grid.lines.at(reg.line);
    std::array<double, 3> ratio{1.0, 1.0, 1.0};
    for (std::size_t r = 0; r < grid.regulators.size(); ++r)
        if (grid.regulators[r].line == reg.line)
            ratio[index_of(grid.regulators[r].phase)] = grid.regulators[r].ratio(s.regulator_taps.at(r));
    std::array<Complex, 3> drop{};
    for (Phase m : line.phases.members())
        drop[index_of(m)] = ratio[index_of(m)] * phasor(state, nodes.at(line.from_bus, m)) -
                            phasor(state, nodes.at(line.to_bus, m));
    const int k = index_of(reg.phase);
    Complex current{};
    for (Phase m : line.phases.members()) current += line.series_admittance[k][index_of(m)] * drop[index_of(m)];
    const Complex out = ratio[k] * phasor(state, nodes.at(line.from_bus, reg.phase));
    return std::abs(out - reg.compensator * current);
}

/// Each regulator moves one tap toward its target when the sensed voltage
/// leaves target +/- deadband / 2, within its tap range.
inline RegulatorUpdate regulator_step(const SystemState& state, const GridModel& grid,
                                      const DiscreteControllerState& s) {
    RegulatorUpdate out{s, 0};
    for (std::size_t i = 0; i < grid.regulators.size(); ++i) {
        const auto& reg = grid.regulators[i];
        const double v = regulator_sensed_voltage(state, grid, s, i);
        int& tap = out.s.regulator_taps[i];
        if (v < reg.target - reg.deadband / 2 && tap < reg.tap_max) {
            ++tap;
            ++out.changes;
        } else if (v > reg.target + reg.deadband / 2 && tap > reg.tap_min) {
            --tap;
            ++out.changes;
        }
    }
    return out;
}

// =============================================================================
// Quality metrics and profit
// =============================================================================

/// Nodes that serve customers and the number of distinct customer buses.
struct CustomerNodes {
    std::vector<std::size_t> nodes;
    std::size_t buses = 0;
};

inline CustomerNodes customer_nodes(const GridModel& grid, const std::vector<LoadModel>& loads) {
    NodeIndex index(grid);
    std::set<std::size_t> nodes;
    std::set<int> buses;
    for (const auto& l : loads) {
        nodes.insert(index.at(l.bus, l.phase));
        buses.insert(l.bus.index);
    }
    return {{nodes.begin(), nodes.end()}, buses.size()};
}

struct StarfiIndex {
    long events = 0;            // (node, step) samples outside 1 +/- tolerance
    double per_customer = 0.0;  // events / customer buses
};

/// Voltage excursion count over a window of per-node magnitude vectors.
inline StarfiIndex starfi(const std::vector<Eigen::VectorXd>& window, const CustomerNodes& customers,
                          double tolerance = 0.05) {
    if (!(tolerance > 0 && tolerance <= 0.1)) throw std::invalid_argument("STARFI tolerance must be in (0, 0.1]");
    StarfiIndex out;
    for (const auto& v : window)
        for (std::size_t n : customers.nodes)
            if (std::abs(v(static_cast<Eigen::Index>(n)) - 1.0) > tolerance + 1e-12) ++out.events;
    out.per_customer = customers.buses ? static_cast<double>(out.events) / static_cast<double>(customers.buses) : 0.0;
    return out;
}

struct QualityMetrics {
    double starfi = 0.0;
    long tap_changes = 0;
    double losses_kwh = 0.0;
    double lost_capacity_kw = 0.0;  // delta C
    double loss_reduction_kw = 0.0;  // delta P_l
};

struct ProfitWeights {
    double k1 = 1.0;  // $/kW of released capacity
    double k2 = 1.0;  // $/kW of loss reduction
    double k3 = 1.0;  // $/customer excursion
};

/// J = K1 dC + K2 dP_l - K3 STARFI.
inline double profit(const QualityMetrics& m, const ProfitWeights& w = {}) {
    return w.k1 * m.lost_capacity_kw + w.k2 * m.loss_reduction_kw - w.k3 * m.starfi;
}

}  // namespace pqc
