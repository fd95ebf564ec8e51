#pragma once

// Polar-form Newton-Raphson power flow for unbalanced networks with
// voltage-dependent polynomial loads.

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "pqc/grid_model.hpp"

namespace pqc {

// =============================================================================
// Load model
// =============================================================================

/// One term of the polynomial load: coefficient * (v / v_nom)^exponent.
struct LoadComponent {
    double coefficient = 1.0;
    double exponent = 0.0;
};

inline std::vector<LoadComponent> constant_power() { return {{1.0, 0.0}}; }
inline std::vector<LoadComponent> constant_current() { return {{1.0, 1.0}}; }
inline std::vector<LoadComponent> constant_impedance() { return {{1.0, 2.0}}; }

/// Wye-connected load on one (bus, phase). Nominal values are consumption.
struct LoadModel {
    BusId bus;
    Phase phase = Phase::a;
    double p_nom_kw = 0.0;
    double q_nom_kvar = 0.0;
    std::vector<LoadComponent> p_components = constant_power();
    std::vector<LoadComponent> q_components = constant_power();
    double v_nom = 1.0;
};

inline void check_load_model(const LoadModel& m) {
    auto check = [](const std::vector<LoadComponent>& comps, const char* which) {
        if (comps.empty()) throw ModelError(fmt::format("load model has no {} components", which));
        double sum = 0.0;
        for (const auto& c : comps) {
            if (!std::isfinite(c.coefficient) || !std::isfinite(c.exponent))
                throw ModelError(fmt::format("load model {} component is not finite", which));
            sum += c.coefficient;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw ModelError(fmt::format("load model {} coefficients sum to {}, expected 1", which, sum));
    };
    check(m.p_components, "active");
    check(m.q_components, "reactive");
    if (!(m.v_nom > 0)) throw ModelError("load model nominal voltage must be positive");
}

struct PowerPair {
    double p = 0.0;
    double q = 0.0;
};

namespace detail {

inline double polynomial(const std::vector<LoadComponent>& comps, double ratio) {
    double sum = 0.0;
    for (const auto& c : comps) sum += c.coefficient * std::pow(ratio, c.exponent);
    return sum;
}

/// d/dv of sum a_l (v / v_nom)^n_l.
inline double polynomial_slope(const std::vector<LoadComponent>& comps, double ratio, double v_nom) {
    double sum = 0.0;
    for (const auto& c : comps)
        if (c.exponent != 0.0) sum += c.exponent * c.coefficient * std::pow(ratio, c.exponent - 1.0);
    return sum / v_nom;
}

}  // namespace detail

/// Consumption (kW, kvar) at voltage magnitude `v` (p.u.).
inline PowerPair expected_load(const LoadModel& model, double v) {
    if (!(v > 0)) throw std::domain_error(fmt::format("load voltage must be positive, got {}", v));
    const double ratio = v / model.v_nom;
    return {model.p_nom_kw * detail::polynomial(model.p_components, ratio),
            model.q_nom_kvar * detail::polynomial(model.q_components, ratio)};
}

// =============================================================================
// State, injections, options, errors
// =============================================================================

struct SystemState {
    Eigen::VectorXd v;      // p.u. per node
    Eigen::VectorXd theta;  // rad per node
};

inline double reference_angle(Phase p) {
    constexpr double third = 2.0 * std::numbers::pi / 3.0;
    switch (p) {
    case Phase::a: return 0.0;
    case Phase::b: return -third;
    case Phase::c: return third;
    }
    return 0.0;
}

inline SystemState flat_state(const NodeIndex& nodes) {
    SystemState s;
    const auto n = static_cast<Eigen::Index>(nodes.size());
    s.v = Eigen::VectorXd::Ones(n);
    s.theta.resize(n);
    for (std::size_t i = 0; i < nodes.size(); ++i)
        s.theta(static_cast<Eigen::Index>(i)) = reference_angle(nodes.node(i).phase);
    return s;
}

inline Complex phasor(const SystemState& s, std::size_t i) {
    const auto k = static_cast<Eigen::Index>(i);
    return std::polar(s.v(k), s.theta(k));
}

/// Balanced three-phase (or single-phase) source; totals are split equally
/// over the bus's phases.
struct GeneratorInjection {
    BusId bus;
    double p_kw = 0.0;
    double q_kvar = 0.0;
};

/// Holds |V| at `v_pu` on every phase of the bus; reactive output is solved for.
struct PvSetpoint {
    BusId bus;
    double v_pu = 1.0;
};

enum class BusKind { slack, pv, pq };

struct SolverOptions {
    double tolerance = 1e-6;
    int max_iterations = 25;
    bool flat_start = true;
    int max_step_halvings = 4;

    void check() const {
        if (!(tolerance > 0)) throw std::invalid_argument("solver tolerance must be positive");
        if (max_iterations < 1) throw std::invalid_argument("solver needs at least one iteration");
    }
};

class NonConvergenceError : public std::runtime_error {
public:
    NonConvergenceError(const std::string& what, std::vector<double> history)
        : std::runtime_error(what), residual_history(std::move(history)) {}
    std::vector<double> residual_history;
};

class SingularJacobianError : public std::runtime_error {
public:
    SingularJacobianError(const std::string& what, std::size_t column)
        : std::runtime_error(what), pivot_column(column) {}
    std::size_t pivot_column;
};

// =============================================================================
// Problem definition
// =============================================================================

/// Unknown ordering: angles of all non-slack nodes, then magnitudes of PQ nodes.
/// P equations follow the angle list, Q equations the magnitude list.
struct UnknownLayout {
    std::vector<std::size_t> theta_nodes;
    std::vector<std::size_t> v_nodes;
    std::vector<int> theta_column;  // per node, -1 if fixed
    std::vector<int> v_column;      // per node, -1 if fixed

    [[nodiscard]] std::size_t size() const { return theta_nodes.size() + v_nodes.size(); }
};

/// A grid at a fixed controller state with its loads and generator setpoints.
/// Holds a pointer to `grid`, which must outlive the problem.
class PowerFlowProblem {
public:
    PowerFlowProblem(const GridModel& grid, const DiscreteControllerState& s, std::vector<LoadModel> loads,
                     std::vector<GeneratorInjection> generators = {}, std::vector<PvSetpoint> pv_buses = {})
        : grid_(&grid), s_(s), y_(assemble_admittance(grid, s)), loads_(std::move(loads)),
          generators_(std::move(generators)), pv_(std::move(pv_buses)) {
        const auto& nodes = y_.nodes();
        for (const auto& load : loads_) {
            check_load_model(load);
            load_node_.push_back(nodes.at(load.bus, load.phase));
        }
        for (const auto& gen : generators_) (void)grid.bus(gen.bus);

        kind_.assign(nodes.size(), BusKind::pq);
        pv_v_.assign(nodes.size(), 1.0);
        const BusId slack = grid.slack_bus();
        for (const auto& pv : pv_) {
            if (pv.bus == slack) throw ModelError("slack bus cannot also be a PV bus");
            if (!(pv.v_pu > 0)) throw ModelError("PV setpoint must be positive");
            for (Phase p : grid.bus(pv.bus).phases.members()) {
                kind_[nodes.at(pv.bus, p)] = BusKind::pv;
                pv_v_[nodes.at(pv.bus, p)] = pv.v_pu;
            }
        }
        for (Phase p : grid.bus(slack).phases.members()) kind_[nodes.at(slack, p)] = BusKind::slack;

        layout_.theta_column.assign(nodes.size(), -1);
        layout_.v_column.assign(nodes.size(), -1);
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (kind_[i] != BusKind::slack) {
                layout_.theta_column[i] = static_cast<int>(layout_.theta_nodes.size());
                layout_.theta_nodes.push_back(i);
            }
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (kind_[i] == BusKind::pq) {
                layout_.v_column[i] = static_cast<int>(layout_.theta_nodes.size() + layout_.v_nodes.size());
                layout_.v_nodes.push_back(i);
            }
    }

    [[nodiscard]] const GridModel& grid() const { return *grid_; }
    [[nodiscard]] const DiscreteControllerState& controller_state() const { return s_; }
    [[nodiscard]] const AdmittanceMatrix& admittance() const { return y_; }
    [[nodiscard]] const NodeIndex& nodes() const { return y_.nodes(); }
    [[nodiscard]] const UnknownLayout& layout() const { return layout_; }
    [[nodiscard]] BusKind kind(std::size_t node) const { return kind_[node]; }
    [[nodiscard]] double phase_base_kva() const { return grid_->phase_base_kva(); }

    [[nodiscard]] std::span<const LoadModel> loads() const { return loads_; }
    [[nodiscard]] std::size_t load_node(std::size_t i) const { return load_node_[i]; }
    [[nodiscard]] std::span<const GeneratorInjection> generators() const { return generators_; }
    [[nodiscard]] std::span<const PvSetpoint> pv_buses() const { return pv_; }

    void set_load(std::size_t i, double p_kw, double q_kvar) {
        loads_.at(i).p_nom_kw = p_kw;
        loads_.at(i).q_nom_kvar = q_kvar;
    }

    void set_generator(std::size_t i, double p_kw, double q_kvar) {
        generators_.at(i).p_kw = p_kw;
        generators_.at(i).q_kvar = q_kvar;
    }

    /// Flat profile with slack and PV magnitudes at their setpoints.
    [[nodiscard]] SystemState initial_state() const {
        SystemState s = flat_state(nodes());
        enforce_fixed(s);
        return s;
    }

    /// Overwrites slack angles/magnitudes and PV magnitudes with their fixed values.
    void enforce_fixed(SystemState& s) const {
        for (std::size_t i = 0; i < kind_.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            if (kind_[i] == BusKind::slack) {
                s.v(k) = 1.0;
                s.theta(k) = reference_angle(nodes().node(i).phase);
            } else if (kind_[i] == BusKind::pv) {
                s.v(k) = pv_v_[i];
            }
        }
    }

    /// Scheduled net injection (p.u.) per node at the given magnitudes.
    /// Reactive entries at PV nodes exclude the unknown generator output.
    void scheduled(const SystemState& s, Eigen::VectorXd& p, Eigen::VectorXd& q) const {
        const auto n = static_cast<Eigen::Index>(nodes().size());
        p = Eigen::VectorXd::Zero(n);
        q = Eigen::VectorXd::Zero(n);
        const double base = phase_base_kva();
        for (const auto& gen : generators_) {
            const auto phases = grid_->bus(gen.bus).phases.members();
            const double share = 1.0 / static_cast<double>(phases.size());
            for (Phase ph : phases) {
                const auto k = static_cast<Eigen::Index>(nodes().at(gen.bus, ph));
                p(k) += gen.p_kw * share / base;
                if (kind_[static_cast<std::size_t>(k)] != BusKind::pv) q(k) += gen.q_kvar * share / base;
            }
        }
        for (std::size_t i = 0; i < loads_.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(load_node_[i]);
            const auto pq = expected_load(loads_[i], s.v(k));
            p(k) -= pq.p / base;
            q(k) -= pq.q / base;
        }
    }

    /// d(consumption)/dV per node in p.u.; enters the Jacobian diagonal.
    void load_slopes(const SystemState& s, Eigen::VectorXd& dp, Eigen::VectorXd& dq) const {
        const auto n = static_cast<Eigen::Index>(nodes().size());
        dp = Eigen::VectorXd::Zero(n);
        dq = Eigen::VectorXd::Zero(n);
        const double base = phase_base_kva();
        for (std::size_t i = 0; i < loads_.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(load_node_[i]);
            const auto& m = loads_[i];
            const double ratio = s.v(k) / m.v_nom;
            dp(k) += m.p_nom_kw / base * detail::polynomial_slope(m.p_components, ratio, m.v_nom);
            dq(k) += m.q_nom_kvar / base * detail::polynomial_slope(m.q_components, ratio, m.v_nom);
        }
    }

private:
    const GridModel* grid_;
    DiscreteControllerState s_;
    AdmittanceMatrix y_;
    std::vector<LoadModel> loads_;
    std::vector<std::size_t> load_node_;
    std::vector<GeneratorInjection> generators_;
    std::vector<PvSetpoint> pv_;
    std::vector<BusKind> kind_;
    std::vector<double> pv_v_;
    UnknownLayout layout_;
};

// =============================================================================
// Injections, mismatch, Jacobian
// =============================================================================

struct Injections {
    Eigen::VectorXd p;  // p.u. per node
    Eigen::VectorXd q;
};

/// Realized injections P_ik = V_ik sum_jm V_jm (G cos + B sin), Q likewise.
inline Injections injected_power(const SystemState& s, const AdmittanceMatrix& y) {
    const auto n = static_cast<Eigen::Index>(y.size());
    Injections out{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
    for (std::size_t i = 0; i < y.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        double p = 0.0, q = 0.0;
        for (const auto& e : y.row(i)) {
            const auto jj = static_cast<Eigen::Index>(e.col);
            const double t = s.theta(ii) - s.theta(jj);
            const double c = std::cos(t), sn = std::sin(t);
            const double g = e.value.real(), b = e.value.imag();
            p += s.v(jj) * (g * c + b * sn);
            q += s.v(jj) * (g * sn - b * c);
        }
        out.p(ii) = s.v(ii) * p;
        out.q(ii) = s.v(ii) * q;
    }
    return out;
}

struct Mismatch {
    Eigen::VectorXd dp;  // per layout().theta_nodes
    Eigen::VectorXd dq;  // per layout().v_nodes

    [[nodiscard]] double norm_inf() const {
        double m = 0.0;
        if (dp.size() > 0) m = std::max(m, dp.cwiseAbs().maxCoeff());
        if (dq.size() > 0) m = std::max(m, dq.cwiseAbs().maxCoeff());
        return m;
    }
};

/// [dP; dQ] = [P_exp; Q_exp] - [P; Q] over the unknown equations.
inline Mismatch mismatch(const SystemState& s, const PowerFlowProblem& problem) {
    const auto inj = injected_power(s, problem.admittance());
    Eigen::VectorXd p_exp, q_exp;
    problem.scheduled(s, p_exp, q_exp);
    const auto& layout = problem.layout();
    Mismatch m{Eigen::VectorXd(static_cast<Eigen::Index>(layout.theta_nodes.size())),
               Eigen::VectorXd(static_cast<Eigen::Index>(layout.v_nodes.size()))};
    for (std::size_t r = 0; r < layout.theta_nodes.size(); ++r) {
        const auto k = static_cast<Eigen::Index>(layout.theta_nodes[r]);
        m.dp(static_cast<Eigen::Index>(r)) = p_exp(k) - inj.p(k);
    }
    for (std::size_t r = 0; r < layout.v_nodes.size(); ++r) {
        const auto k = static_cast<Eigen::Index>(layout.v_nodes[r]);
        m.dq(static_cast<Eigen::Index>(r)) = q_exp(k) - inj.q(k);
    }
    return m;
}

/// Analytic Jacobian of the realized-minus-scheduled injections, i.e.
/// J = -d(mismatch)/d[theta; V], so that J dx = [dP; dQ] is the Newton step.
/// Diagonal magnitude derivatives carry the load terms with the sign of an
/// injection: a consuming load adds p_nom * sum n a (V/V_nom)^(n-1) / V_nom.
inline Eigen::MatrixXd jacobian(const SystemState& s, const PowerFlowProblem& problem) {
    const auto& y = problem.admittance();
    const auto& layout = problem.layout();
    const auto n = static_cast<Eigen::Index>(layout.size());
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);

    const auto inj = injected_power(s, y);
    Eigen::VectorXd load_dp, load_dq;
    problem.load_slopes(s, load_dp, load_dq);

    auto fill_row = [&](Eigen::Index row, std::size_t i, bool active) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double vi = s.v(ii);
        for (const auto& e : y.row(i)) {
            const std::size_t j = e.col;
            const auto jj = static_cast<Eigen::Index>(j);
            const double g = e.value.real(), b = e.value.imag();
            const int tcol = layout.theta_column[j];
            const int vcol = layout.v_column[j];
            if (j == i) {
                if (active) {
                    if (tcol >= 0) jac(row, tcol) = -vi * vi * b - inj.q(ii);
                    if (vcol >= 0) jac(row, vcol) = vi * g + inj.p(ii) / vi + load_dp(ii);
                } else {
                    if (tcol >= 0) jac(row, tcol) = -vi * vi * g + inj.p(ii);
                    if (vcol >= 0) jac(row, vcol) = -vi * b + inj.q(ii) / vi + load_dq(ii);
                }
                continue;
            }
            const double t = s.theta(ii) - s.theta(jj);
            const double c = std::cos(t), sn = std::sin(t);
            const double vj = s.v(jj);
            if (active) {
                if (tcol >= 0) jac(row, tcol) = vi * vj * (g * sn - b * c);
                if (vcol >= 0) jac(row, vcol) = vi * (g * c + b * sn);
            } else {
                if (tcol >= 0) jac(row, tcol) = -vi * vj * (g * c + b * sn);
                if (vcol >= 0) jac(row, vcol) = vi * (g * sn - b * c);
            }
        }
    };

    for (std::size_t r = 0; r < layout.theta_nodes.size(); ++r)
        fill_row(static_cast<Eigen::Index>(r), layout.theta_nodes[r], true);
    for (std::size_t r = 0; r < layout.v_nodes.size(); ++r)
        fill_row(static_cast<Eigen::Index>(layout.theta_nodes.size() + r), layout.v_nodes[r], false);
    return jac;
}

// =============================================================================
// Newton-Raphson
// =============================================================================

struct PowerFlowResult {
    SystemState state;
    int iterations = 0;
    std::vector<double> residual_history;
};

namespace detail {

inline Eigen::VectorXd stack(const Mismatch& m) {
    Eigen::VectorXd out(m.dp.size() + m.dq.size());
    out << m.dp, m.dq;
    return out;
}

inline SystemState apply_step(const SystemState& s, const UnknownLayout& layout, const Eigen::VectorXd& dx,
                              double scale) {
    SystemState out = s;
    for (std::size_t r = 0; r < layout.theta_nodes.size(); ++r)
        out.theta(static_cast<Eigen::Index>(layout.theta_nodes[r])) += scale * dx(static_cast<Eigen::Index>(r));
    const auto off = static_cast<Eigen::Index>(layout.theta_nodes.size());
    for (std::size_t r = 0; r < layout.v_nodes.size(); ++r)
        out.v(static_cast<Eigen::Index>(layout.v_nodes[r])) += scale * dx(off + static_cast<Eigen::Index>(r));
    return out;
}

inline std::string unknown_label(const PowerFlowProblem& problem, std::size_t column) {
    const auto& layout = problem.layout();
    const bool is_angle = column < layout.theta_nodes.size();
    const std::size_t node = is_angle ? layout.theta_nodes[column] : layout.v_nodes[column - layout.theta_nodes.size()];
    return fmt::format("{} of {}", is_angle ? "angle" : "magnitude",
                       node_label(problem.grid(), problem.nodes().node(node)));
}

}  // namespace detail

/// Solves [dP; dQ] = 0 by Newton-Raphson from a flat start (or `warm_start`).
/// Iteration count includes the final converged residual evaluation, so an
/// already balanced network reports one iteration. A step that increases the
/// residual is halved up to `max_step_halvings` times.
inline PowerFlowResult solve(const PowerFlowProblem& problem, const SolverOptions& options = {},
                             const std::optional<SystemState>& warm_start = std::nullopt,
                             std::vector<std::pair<double, double>>* trace = nullptr) {
    options.check();
    const auto& layout = problem.layout();

    SystemState state = (!options.flat_start && warm_start) ? *warm_start : problem.initial_state();
    if (warm_start && !options.flat_start) {
        if (state.v.size() != static_cast<Eigen::Index>(problem.nodes().size()))
            throw std::invalid_argument("warm start has wrong dimension");
        problem.enforce_fixed(state);
    }

    PowerFlowResult result;
    Mismatch current = mismatch(state, problem);
    for (int iter = 1; iter <= options.max_iterations; ++iter) {
        const double residual = current.norm_inf();
        result.residual_history.push_back(residual);
        if (trace) {
            trace->emplace_back(current.dp.size() ? current.dp.cwiseAbs().maxCoeff() : 0.0,
                                current.dq.size() ? current.dq.cwiseAbs().maxCoeff() : 0.0);
        }
        if (residual < options.tolerance) {
            result.state = std::move(state);
            result.iterations = iter;
            return result;
        }
        if (layout.size() == 0) break;

        const Eigen::MatrixXd jac = jacobian(state, problem);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
        const Eigen::VectorXd pivots = lu.matrixLU().diagonal().cwiseAbs();
        Eigen::Index weakest = 0;
        const double smallest = pivots.minCoeff(&weakest);
        if (!(smallest > 1e-13 * std::max(1.0, pivots.maxCoeff())))
            throw SingularJacobianError(
                fmt::format("singular Jacobian at pivot {} ({})", weakest,
                            detail::unknown_label(problem, static_cast<std::size_t>(weakest))),
                static_cast<std::size_t>(weakest));
        const Eigen::VectorXd dx = lu.solve(detail::stack(current));

        SystemState best;
        Mismatch best_mm;
        double best_residual = std::numeric_limits<double>::infinity();
        double scale = 1.0;
        for (int h = 0; h <= options.max_step_halvings; ++h, scale *= 0.5) {
            SystemState trial = detail::apply_step(state, layout, dx, scale);
            if ((trial.v.array() <= 0.0).any()) continue;
            Mismatch mm = mismatch(trial, problem);
            const double r = mm.norm_inf();
            if (r < best_residual) {
                best_residual = r;
                best = std::move(trial);
                best_mm = std::move(mm);
            }
            if (r <= residual) break;
        }
        if (!std::isfinite(best_residual))
            throw NonConvergenceError("Newton step left the positive-voltage region", result.residual_history);
        state = std::move(best);
        current = std::move(best_mm);
    }
    throw NonConvergenceError(fmt::format("power flow did not converge in {} iterations (residual {:.3e})",
                                          options.max_iterations, result.residual_history.back()),
                              result.residual_history);
}

// =============================================================================
// Post-solve quantities
// =============================================================================

/// Reactive output (kvar, summed over phases) a PV bus needs at the solved state.
inline double pv_reactive_kvar(const SystemState& s, const PowerFlowProblem& problem, BusId bus) {
    const auto inj = injected_power(s, problem.admittance());
    Eigen::VectorXd p_exp, q_exp;
    problem.scheduled(s, p_exp, q_exp);
    double q = 0.0;
    for (Phase p : problem.grid().bus(bus).phases.members()) {
        const auto k = static_cast<Eigen::Index>(problem.nodes().at(bus, p));
        q += inj.q(k) - q_exp(k);
    }
    return q * problem.phase_base_kva();
}

struct LineLoss {
    std::size_t line = 0;
    std::array<double, 3> phase_kw{};
    double total_kw = 0.0;
};

struct LossReport {
    std::vector<LineLoss> lines;
    double total_kw = 0.0;
};

/// Series losses per line and phase. With coupled phases the phase-k share is
/// Re(dV_k conj(I_k)), which reduces to r_k |I_k|^2 on uncoupled lines and
/// sums to the exact series loss.
inline LossReport technical_losses(const SystemState& s, const GridModel& grid, const DiscreteControllerState& ctrl) {
    NodeIndex nodes(grid);
    std::vector<std::array<double, 3>> ratio(grid.lines.size(), {1.0, 1.0, 1.0});
    for (std::size_t i = 0; i < grid.regulators.size(); ++i) {
        const auto& reg = grid.regulators[i];
        ratio[reg.line][index_of(reg.phase)] = reg.ratio(ctrl.regulator_taps.at(i));
    }

    LossReport report;
    for (std::size_t li = 0; li < grid.lines.size(); ++li) {
        const auto& line = grid.lines[li];
        std::array<Complex, 3> drop{};
        for (Phase k : line.phases.members()) {
            const Complex vf = phasor(s, nodes.at(line.from_bus, k));
            const Complex vt = phasor(s, nodes.at(line.to_bus, k));
            drop[index_of(k)] = ratio[li][index_of(k)] * vf - vt;
        }
        LineLoss ll;
        ll.line = li;
        for (Phase k : line.phases.members()) {
            Complex current{};
            for (Phase m : line.phases.members())
                current += line.series_admittance[index_of(k)][index_of(m)] * drop[index_of(m)];
            const double kw = (drop[index_of(k)] * std::conj(current)).real() * grid.phase_base_kva();
            ll.phase_kw[index_of(k)] = kw;
            ll.total_kw += kw;
        }
        report.total_kw += ll.total_kw;
        report.lines.push_back(ll);
    }
    return report;
}

/// Active power drawn from the slack bus, kW summed over phases.
inline double slack_power_kw(const SystemState& s, const PowerFlowProblem& problem) {
    const auto inj = injected_power(s, problem.admittance());
    const BusId slack = problem.grid().slack_bus();
    double p = 0.0;
    for (Phase ph : problem.grid().bus(slack).phases.members())
        p += inj.p(static_cast<Eigen::Index>(problem.nodes().at(slack, ph)));
    return p * problem.phase_base_kva();
}

/// Total consumption of all loads at the solved magnitudes (kW, kvar).
inline PowerPair total_load(const SystemState& s, const PowerFlowProblem& problem) {
    PowerPair total;
    for (std::size_t i = 0; i < problem.loads().size(); ++i) {
        const auto pq = expected_load(problem.loads()[i], s.v(static_cast<Eigen::Index>(problem.load_node(i))));
        total.p += pq.p;
        total.q += pq.q;
    }
    return total;
}

}  // namespace pqc
