#pragma once

// Unbalanced multi-phase network model and nodal admittance assembly.

#include <algorithm>
#include <array>
#include <complex>
#include <cstddef>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace pqc {

using Complex = std::complex<double>;

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TopologyError : public ModelError {
public:
    using ModelError::ModelError;
};

// =============================================================================
// Phases and buses
// =============================================================================

enum class Phase : int { a = 0, b = 1, c = 2 };

inline constexpr std::array<Phase, 3> kPhases{Phase::a, Phase::b, Phase::c};

inline constexpr int index_of(Phase p) { return static_cast<int>(p); }

inline char phase_name(Phase p) { return "abc"[index_of(p)]; }

inline std::optional<Phase> parse_phase(char c) {
    switch (c) {
    case 'a': case 'A': return Phase::a;
    case 'b': case 'B': return Phase::b;
    case 'c': case 'C': return Phase::c;
    default: return std::nullopt;
    }
}

/// Subset of {a, b, c}. Iteration order is always a < b < c.
class PhaseSet {
public:
    constexpr PhaseSet() = default;

    static constexpr PhaseSet all() { return PhaseSet{0b111}; }

    static PhaseSet parse(std::string_view text) {
        PhaseSet set;
        for (char ch : text) {
            auto p = parse_phase(ch);
            if (!p) throw ModelError(fmt::format("invalid phase '{}' in \"{}\"", ch, text));
            set.insert(*p);
        }
        return set;
    }

    constexpr void insert(Phase p) { bits_ |= (1u << index_of(p)); }
    [[nodiscard]] constexpr bool contains(Phase p) const { return (bits_ >> index_of(p)) & 1u; }
    [[nodiscard]] constexpr bool empty() const { return bits_ == 0; }
    [[nodiscard]] constexpr int size() const {
        return static_cast<int>((bits_ & 1u) + ((bits_ >> 1) & 1u) + ((bits_ >> 2) & 1u));
    }
    [[nodiscard]] constexpr bool is_subset_of(PhaseSet other) const {
        return (bits_ & ~other.bits_) == 0;
    }

    [[nodiscard]] std::vector<Phase> members() const {
        std::vector<Phase> out;
        for (Phase p : kPhases)
            if (contains(p)) out.push_back(p);
        return out;
    }

    [[nodiscard]] std::string to_string() const {
        std::string s;
        for (Phase p : members()) s.push_back(phase_name(p));
        return s;
    }

    constexpr bool operator==(const PhaseSet&) const = default;

private:
    constexpr explicit PhaseSet(unsigned bits) : bits_(bits) {}
    unsigned bits_ = 0;
};

/// Dense 1-based bus index.
struct BusId {
    int index = 0;
    constexpr auto operator<=>(const BusId&) const = default;
};

using PhaseMatrix = std::array<std::array<Complex, 3>, 3>;

struct Bus {
    std::string name;
    double base_kv = 1.0;  // line-to-line
    PhaseSet phases = PhaseSet::all();
    bool slack = false;
};

/// Series element between two buses, values in p.u. on the system base.
/// `shunt_admittance` is the total line charging; half is applied at each end.
struct LineSegment {
    std::string name;
    BusId from_bus;
    BusId to_bus;
    PhaseSet phases;
    PhaseMatrix series_admittance{};
    PhaseMatrix shunt_admittance{};
};

struct CapacitorBank {
    std::string name;
    BusId bus;
    Phase phase = Phase::a;
    double step_susceptance = 0.0;  // p.u. per engaged step
    int num_steps = 1;
    int current_step = 0;
};

/// Single-phase step regulator in series with `line`. The tap scales the
/// from-side voltage by 1 + tap * volts_per_tap. Bang-bang control holds the
/// sensed voltage inside target +/- deadband / 2. With a nonzero line-drop
/// compensator the sensed voltage is |V_out - Z_c I_line| at the regulator;
/// otherwise it is the magnitude at `sense_bus`.
struct VoltageRegulator {
    std::string name;
    std::size_t line = 0;
    Phase phase = Phase::a;
    BusId sense_bus;
    int tap = 0;
    int tap_min = -16;
    int tap_max = 16;
    double volts_per_tap = 0.00625;
    double deadband = 0.0167;
    double target = 1.0;
    Complex compensator{0.0, 0.0};  // p.u. on the system base

    [[nodiscard]] bool compensated() const { return compensator != Complex(0.0, 0.0); }
    [[nodiscard]] double ratio(int at_tap) const { return 1.0 + at_tap * volts_per_tap; }
};

/// s(t): one step count per capacitor bank, one tap per regulator.
struct DiscreteControllerState {
    std::vector<int> capacitor_steps;
    std::vector<int> regulator_taps;
    bool operator==(const DiscreteControllerState&) const = default;
};

enum class GeneratorKind { renewable, dispatchable };

struct GeneratorSpec {
    std::string name;
    BusId bus;
    GeneratorKind kind = GeneratorKind::renewable;
    double apparent_limit_kva = 0.0;
    std::vector<double> p_min_kw, p_max_kw;
    std::vector<double> q_min_kvar, q_max_kvar;
};

class GridModel {
public:
    std::string name;
    double base_kva = 1000.0;  // three-phase system base
    std::vector<Bus> buses;
    std::vector<LineSegment> lines;
    std::vector<CapacitorBank> capacitors;
    std::vector<VoltageRegulator> regulators;
    std::vector<GeneratorSpec> generators;

    [[nodiscard]] std::size_t bus_count() const { return buses.size(); }

    /// Per-phase power base; per-phase p.u. quantities are kW / phase_base_kva().
    [[nodiscard]] double phase_base_kva() const { return base_kva / 3.0; }

    [[nodiscard]] bool has_bus(BusId id) const {
        return id.index >= 1 && static_cast<std::size_t>(id.index) <= buses.size();
    }

    [[nodiscard]] const Bus& bus(BusId id) const {
        if (!has_bus(id)) throw ModelError(fmt::format("bus index {} out of range", id.index));
        return buses[static_cast<std::size_t>(id.index - 1)];
    }

    [[nodiscard]] BusId bus_id(std::string_view bus_name) const {
        for (std::size_t i = 0; i < buses.size(); ++i)
            if (buses[i].name == bus_name) return BusId{static_cast<int>(i + 1)};
        throw ModelError(fmt::format("unknown bus '{}'", bus_name));
    }

    [[nodiscard]] BusId slack_bus() const {
        for (std::size_t i = 0; i < buses.size(); ++i)
            if (buses[i].slack) return BusId{static_cast<int>(i + 1)};
        throw ModelError("grid has no slack bus");
    }

    /// Controller state as currently recorded on the devices.
    [[nodiscard]] DiscreteControllerState initial_state() const {
        DiscreteControllerState s;
        for (const auto& cap : capacitors) s.capacitor_steps.push_back(cap.current_step);
        for (const auto& reg : regulators) s.regulator_taps.push_back(reg.tap);
        return s;
    }

    [[nodiscard]] bool is_feasible(const DiscreteControllerState& s) const {
        if (s.capacitor_steps.size() != capacitors.size()) return false;
        if (s.regulator_taps.size() != regulators.size()) return false;
        for (std::size_t i = 0; i < capacitors.size(); ++i)
            if (s.capacitor_steps[i] < 0 || s.capacitor_steps[i] > capacitors[i].num_steps) return false;
        for (std::size_t i = 0; i < regulators.size(); ++i)
            if (s.regulator_taps[i] < regulators[i].tap_min || s.regulator_taps[i] > regulators[i].tap_max)
                return false;
        return true;
    }
};

// =============================================================================
// Node indexing
// =============================================================================

struct Node {
    BusId bus;
    Phase phase;
    bool operator==(const Node&) const = default;
};

/// Maps present (bus, phase) pairs to dense indices, ordered by bus then phase.
/// Phases absent on a bus get no index.
class NodeIndex {
public:
    NodeIndex() = default;

    explicit NodeIndex(const GridModel& grid) {
        offsets_.assign(grid.bus_count() + 1, {-1, -1, -1});
        for (std::size_t b = 0; b < grid.bus_count(); ++b) {
            for (Phase p : grid.buses[b].phases.members()) {
                offsets_[b + 1][index_of(p)] = static_cast<int>(nodes_.size());
                nodes_.push_back({BusId{static_cast<int>(b + 1)}, p});
            }
        }
    }

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    [[nodiscard]] std::optional<std::size_t> find(BusId bus, Phase phase) const {
        if (bus.index < 1 || static_cast<std::size_t>(bus.index) >= offsets_.size()) return std::nullopt;
        int i = offsets_[static_cast<std::size_t>(bus.index)][index_of(phase)];
        if (i < 0) return std::nullopt;
        return static_cast<std::size_t>(i);
    }

    [[nodiscard]] std::size_t at(BusId bus, Phase phase) const {
        auto i = find(bus, phase);
        if (!i) throw ModelError(fmt::format("bus {} has no phase {}", bus.index, phase_name(phase)));
        return *i;
    }

    [[nodiscard]] const Node& node(std::size_t i) const { return nodes_.at(i); }
    [[nodiscard]] const std::vector<Node>& nodes() const { return nodes_; }

private:
    std::vector<std::array<int, 3>> offsets_;
    std::vector<Node> nodes_;
};

inline std::string node_label(const GridModel& grid, const Node& n) {
    return fmt::format("{}.{}", grid.bus(n.bus).name, phase_name(n.phase));
}

// =============================================================================
// Sparse admittance matrix
// =============================================================================

/// Row-compressed complex matrix over (bus, phase) nodes. Columns within a
/// row are sorted.
class AdmittanceMatrix {
public:
    struct Entry {
        std::size_t col;
        Complex value;
    };

    AdmittanceMatrix() = default;

    AdmittanceMatrix(NodeIndex nodes, const std::map<std::pair<std::size_t, std::size_t>, Complex>& coo)
        : nodes_(std::move(nodes)) {
        row_start_.assign(nodes_.size() + 1, 0);
        entries_.reserve(coo.size());
        for (const auto& [rc, v] : coo) {
            row_start_[rc.first + 1]++;
            entries_.push_back({rc.second, v});
        }
        for (std::size_t r = 0; r < nodes_.size(); ++r) row_start_[r + 1] += row_start_[r];
    }

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] const NodeIndex& nodes() const { return nodes_; }
    [[nodiscard]] std::size_t nonzeros() const { return entries_.size(); }

    [[nodiscard]] std::span<const Entry> row(std::size_t r) const {
        return {entries_.data() + row_start_[r], row_start_[r + 1] - row_start_[r]};
    }

    [[nodiscard]] Complex at(std::size_t r, std::size_t c) const {
        auto entries = row(r);
        auto it = std::lower_bound(entries.begin(), entries.end(), c,
                                   [](const Entry& e, std::size_t col) { return e.col < col; });
        return (it != entries.end() && it->col == c) ? it->value : Complex{};
    }

    [[nodiscard]] Eigen::MatrixXcd dense() const {
        Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(size()),
                                                    static_cast<Eigen::Index>(size()));
        for (std::size_t r = 0; r < size(); ++r)
            for (const auto& e : row(r))
                m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e.col)) = e.value;
        return m;
    }

    bool operator==(const AdmittanceMatrix& o) const {
        if (row_start_ != o.row_start_ || entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].col != o.entries_[i].col || entries_[i].value != o.entries_[i].value) return false;
        return true;
    }

private:
    NodeIndex nodes_;
    std::vector<std::size_t> row_start_;
    std::vector<Entry> entries_;
};

// =============================================================================
// Validation
// =============================================================================

namespace detail {

inline std::vector<std::vector<std::size_t>> adjacency(const GridModel& grid) {
    std::vector<std::vector<std::size_t>> adj(grid.bus_count() + 1);
    for (const auto& line : grid.lines) {
        if (!grid.has_bus(line.from_bus) || !grid.has_bus(line.to_bus)) continue;
        adj[static_cast<std::size_t>(line.from_bus.index)].push_back(static_cast<std::size_t>(line.to_bus.index));
        adj[static_cast<std::size_t>(line.to_bus.index)].push_back(static_cast<std::size_t>(line.from_bus.index));
    }
    return adj;
}

/// Buses not reachable from the slack bus.
inline std::vector<BusId> unreachable_buses(const GridModel& grid, BusId root) {
    auto adj = adjacency(grid);
    std::vector<bool> seen(grid.bus_count() + 1, false);
    std::queue<std::size_t> q;
    seen[static_cast<std::size_t>(root.index)] = true;
    q.push(static_cast<std::size_t>(root.index));
    while (!q.empty()) {
        auto b = q.front();
        q.pop();
        for (auto n : adj[b])
            if (!seen[n]) {
                seen[n] = true;
                q.push(n);
            }
    }
    std::vector<BusId> out;
    for (std::size_t b = 1; b <= grid.bus_count(); ++b)
        if (!seen[b]) out.push_back(BusId{static_cast<int>(b)});
    return out;
}

}  // namespace detail

/// Returns human-readable model defects; empty iff the model is usable.
inline std::vector<std::string> validate(const GridModel& grid) {
    std::vector<std::string> defects;
    if (grid.base_kva <= 0) defects.push_back("system base must be positive");

    int slack_count = 0;
    for (std::size_t i = 0; i < grid.buses.size(); ++i) {
        const auto& b = grid.buses[i];
        if (b.slack) ++slack_count;
        if (b.phases.empty()) defects.push_back(fmt::format("bus '{}' has no phases", b.name));
        if (b.base_kv <= 0) defects.push_back(fmt::format("bus '{}' has non-positive base kV", b.name));
        for (std::size_t j = 0; j < i; ++j)
            if (grid.buses[j].name == b.name) defects.push_back(fmt::format("duplicate bus name '{}'", b.name));
    }
    if (slack_count != 1) defects.push_back(fmt::format("expected exactly one slack bus, found {}", slack_count));

    for (const auto& line : grid.lines) {
        const bool from_ok = grid.has_bus(line.from_bus);
        const bool to_ok = grid.has_bus(line.to_bus);
        if (!from_ok || !to_ok) {
            defects.push_back(fmt::format("line '{}' references missing bus {}", line.name,
                                          from_ok ? line.to_bus.index : line.from_bus.index));
            continue;
        }
        if (line.from_bus == line.to_bus) defects.push_back(fmt::format("line '{}' is a self loop", line.name));
        if (line.phases.empty()) defects.push_back(fmt::format("line '{}' has no phases", line.name));
        if (!line.phases.is_subset_of(grid.bus(line.from_bus).phases) ||
            !line.phases.is_subset_of(grid.bus(line.to_bus).phases))
            defects.push_back(fmt::format("line '{}' uses phases {} not present on both ends", line.name,
                                          line.phases.to_string()));
        auto absent_pair_with_value = [&]() -> std::optional<std::pair<Phase, Phase>> {
            for (Phase k : kPhases)
                for (Phase m : kPhases) {
                    if (line.phases.contains(k) && line.phases.contains(m)) continue;
                    if (line.series_admittance[index_of(k)][index_of(m)] != Complex{} ||
                        line.shunt_admittance[index_of(k)][index_of(m)] != Complex{})
                        return std::pair{k, m};
                }
            return std::nullopt;
        };
        if (auto pair = absent_pair_with_value())
            defects.push_back(fmt::format("line '{}' has admittance on absent phase pair {}{}", line.name,
                                          phase_name(pair->first), phase_name(pair->second)));
    }

    for (const auto& cap : grid.capacitors) {
        if (!grid.has_bus(cap.bus)) {
            defects.push_back(fmt::format("capacitor '{}' references missing bus {}", cap.name, cap.bus.index));
            continue;
        }
        if (!grid.bus(cap.bus).phases.contains(cap.phase))
            defects.push_back(fmt::format("capacitor '{}' on absent phase {}", cap.name, phase_name(cap.phase)));
        if (cap.num_steps < 1) defects.push_back(fmt::format("capacitor '{}' needs at least one step", cap.name));
        if (cap.current_step < 0 || cap.current_step > cap.num_steps)
            defects.push_back(fmt::format("capacitor '{}' step {} outside 0..{}", cap.name, cap.current_step,
                                          cap.num_steps));
    }

    for (const auto& reg : grid.regulators) {
        if (reg.line >= grid.lines.size()) {
            defects.push_back(fmt::format("regulator '{}' references missing line {}", reg.name, reg.line));
            continue;
        }
        if (!grid.lines[reg.line].phases.contains(reg.phase))
            defects.push_back(fmt::format("regulator '{}' phase {} absent on its line", reg.name,
                                          phase_name(reg.phase)));
        if (!grid.has_bus(reg.sense_bus) || !grid.bus(reg.sense_bus).phases.contains(reg.phase))
            defects.push_back(fmt::format("regulator '{}' senses a missing bus/phase", reg.name));
        if (reg.tap_min > reg.tap_max || reg.tap < reg.tap_min || reg.tap > reg.tap_max)
            defects.push_back(fmt::format("regulator '{}' tap {} outside [{}, {}]", reg.name, reg.tap, reg.tap_min,
                                          reg.tap_max));
        if (!(reg.deadband > 0)) defects.push_back(fmt::format("regulator '{}' deadband must be positive", reg.name));
        if (!(reg.volts_per_tap > 0))
            defects.push_back(fmt::format("regulator '{}' step size must be positive", reg.name));
    }

    for (const auto& gen : grid.generators) {
        if (!grid.has_bus(gen.bus)) {
            defects.push_back(fmt::format("generator '{}' references missing bus {}", gen.name, gen.bus.index));
            continue;
        }
        auto ordered = [](const std::vector<double>& lo, const std::vector<double>& hi) {
            if (lo.size() != hi.size()) return false;
            for (std::size_t t = 0; t < lo.size(); ++t)
                if (lo[t] > hi[t]) return false;
            return true;
        };
        if (!ordered(gen.p_min_kw, gen.p_max_kw) || !ordered(gen.q_min_kvar, gen.q_max_kvar))
            defects.push_back(fmt::format("generator '{}' has inverted bounds", gen.name));
        if (gen.kind == GeneratorKind::renewable && gen.p_min_kw != gen.p_max_kw)
            defects.push_back(fmt::format("renewable generator '{}' must have p_min == p_max", gen.name));
        if (gen.apparent_limit_kva < 0)
            defects.push_back(fmt::format("generator '{}' has negative apparent limit", gen.name));
    }

    if (slack_count == 1) {
        for (BusId b : detail::unreachable_buses(grid, grid.slack_bus()))
            defects.push_back(fmt::format("bus '{}' is not connected to the slack bus", grid.bus(b).name));
    }
    return defects;
}

// =============================================================================
// Assembly
// =============================================================================

/// Y(s): diagonal blocks collect bus shunts plus (y + bsh/2) of every incident
/// line, off-diagonal blocks are -y. Regulator taps scale the from side of
/// their line as an ideal transformer.
inline AdmittanceMatrix assemble_admittance(const GridModel& grid, const DiscreteControllerState& s) {
    if (!grid.is_feasible(s)) throw ModelError("controller state outside the feasible set");
    if (auto missing = detail::unreachable_buses(grid, grid.slack_bus()); !missing.empty())
        throw TopologyError(fmt::format("bus '{}' is not connected to the slack bus", grid.bus(missing.front()).name));

    NodeIndex nodes(grid);
    std::map<std::pair<std::size_t, std::size_t>, Complex> coo;
    auto add = [&](std::size_t r, std::size_t c, Complex v) { coo[{r, c}] += v; };

    // Per-line, per-phase tap ratio.
    std::vector<std::array<double, 3>> ratio(grid.lines.size(), {1.0, 1.0, 1.0});
    for (std::size_t i = 0; i < grid.regulators.size(); ++i) {
        const auto& reg = grid.regulators[i];
        ratio[reg.line][index_of(reg.phase)] = reg.ratio(s.regulator_taps[i]);
    }

    for (std::size_t li = 0; li < grid.lines.size(); ++li) {
        const auto& line = grid.lines[li];
        if (line.from_bus == line.to_bus) throw ModelError(fmt::format("line '{}' is a self loop", line.name));
        const auto phases = line.phases.members();
        for (Phase k : phases) {
            const std::size_t fk = nodes.at(line.from_bus, k);
            const std::size_t tk = nodes.at(line.to_bus, k);
            const double ak = ratio[li][index_of(k)];
            for (Phase m : phases) {
                const std::size_t fm = nodes.at(line.from_bus, m);
                const std::size_t tm = nodes.at(line.to_bus, m);
                const double am = ratio[li][index_of(m)];
                const Complex y = line.series_admittance[index_of(k)][index_of(m)];
                const Complex half_b = 0.5 * line.shunt_admittance[index_of(k)][index_of(m)];
                add(fk, fm, ak * am * y + half_b);
                add(tk, tm, y + half_b);
                add(fk, tm, -ak * y);
                add(tk, fm, -am * y);
            }
        }
    }

    for (std::size_t i = 0; i < grid.capacitors.size(); ++i) {
        const auto& cap = grid.capacitors[i];
        const std::size_t n = nodes.at(cap.bus, cap.phase);
        add(n, n, Complex{0.0, cap.step_susceptance * s.capacitor_steps[i]});
    }

    return AdmittanceMatrix(std::move(nodes), coo);
}

}  // namespace pqc
