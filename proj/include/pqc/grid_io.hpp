#pragma once

// Grid description files (JSON): buses, line configurations, lines,
// transformers, regulators, capacitor banks, loads, generators.

#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

#include "pqc/grid_model.hpp"
#include "pqc/power_flow.hpp"

namespace pqc {

struct GridFile {
    GridModel grid;
    std::vector<LoadModel> loads;
    std::map<std::string, std::pair<std::vector<LoadComponent>, std::vector<LoadComponent>>> zip_mixes;
};

namespace detail {

using json = nlohmann::json;

inline constexpr double kFeetPerMile = 5280.0;

/// Reads a 3x3 matrix of [re, im] pairs (or plain reals).
inline PhaseMatrix read_complex_matrix(const json& j, double scale = 1.0) {
    PhaseMatrix m{};
    if (!j.is_array() || j.size() != 3) throw ModelError("expected a 3x3 matrix");
    for (std::size_t r = 0; r < 3; ++r) {
        if (!j[r].is_array() || j[r].size() != 3) throw ModelError("expected a 3x3 matrix");
        for (std::size_t c = 0; c < 3; ++c) {
            const auto& e = j[r][c];
            Complex v = e.is_array() ? Complex{e.at(0).get<double>(), e.at(1).get<double>()}
                                     : Complex{e.get<double>(), 0.0};
            m[r][c] = v * scale;
        }
    }
    return m;
}

/// Inverts the sub-block of `z` on the present phases; absent entries stay zero.
inline PhaseMatrix invert_on_phases(const PhaseMatrix& z, PhaseSet phases) {
    const auto present = phases.members();
    const auto n = static_cast<Eigen::Index>(present.size());
    Eigen::MatrixXcd sub(n, n);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c)
            sub(r, c) = z[index_of(present[static_cast<std::size_t>(r)])][index_of(present[static_cast<std::size_t>(c)])];
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(sub);
    if (!lu.isInvertible()) throw ModelError("series impedance matrix is singular");
    const Eigen::MatrixXcd inv = lu.inverse();
    PhaseMatrix y{};
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c)
            y[index_of(present[static_cast<std::size_t>(r)])][index_of(present[static_cast<std::size_t>(c)])] = inv(r, c);
    return y;
}

inline PhaseMatrix mask(const PhaseMatrix& m, PhaseSet phases) {
    PhaseMatrix out{};
    for (Phase k : phases.members())
        for (Phase c : phases.members()) out[index_of(k)][index_of(c)] = m[index_of(k)][index_of(c)];
    return out;
}

inline std::vector<LoadComponent> read_components(const json& j) {
    std::vector<LoadComponent> out;
    for (const auto& term : j) out.push_back({term.at(0).get<double>(), term.at(1).get<double>()});
    return out;
}

inline double length_miles(const json& line) {
    if (line.contains("length_mi")) return line["length_mi"].get<double>();
    if (line.contains("length_ft")) return line["length_ft"].get<double>() / kFeetPerMile;
    throw ModelError(fmt::format("line '{}' needs length_ft or length_mi", line.value("name", "?")));
}

}  // namespace detail

/// Builds the grid from a parsed JSON document. Line impedances are given per
/// mile (ohm, microsiemens) or directly as p.u. admittances.
inline GridFile parse_grid(const nlohmann::json& doc) {
    using detail::json;
    GridFile out;
    GridModel& g = out.grid;
    g.name = doc.value("name", "grid");
    g.base_kva = doc.at("base_kva").get<double>();

    for (const auto& b : doc.at("buses")) {
        Bus bus;
        bus.name = b.at("name").get<std::string>();
        bus.base_kv = b.at("kv").get<double>();
        bus.phases = PhaseSet::parse(b.value("phases", "abc"));
        bus.slack = b.value("slack", false);
        g.buses.push_back(std::move(bus));
    }

    auto z_base = [&](BusId bus) {
        const double kv = g.bus(bus).base_kv;
        return kv * kv * 1000.0 / g.base_kva;
    };

    const json configs = doc.value("line_configs", json::object());
    for (const auto& l : doc.value("lines", json::array())) {
        LineSegment line;
        line.from_bus = g.bus_id(l.at("from").get<std::string>());
        line.to_bus = g.bus_id(l.at("to").get<std::string>());
        line.name = l.value("name", fmt::format("{}-{}", g.bus(line.from_bus).name, g.bus(line.to_bus).name));
        if (l.contains("config")) {
            const auto key = l["config"].get<std::string>();
            if (!configs.contains(key)) throw ModelError(fmt::format("line '{}' uses unknown config '{}'", line.name, key));
            const auto& cfg = configs[key];
            line.phases = PhaseSet::parse(l.value("phases", cfg.value("phases", std::string("abc"))));
            const double miles = detail::length_miles(l);
            const double zb = z_base(line.from_bus);
            const PhaseMatrix z = detail::read_complex_matrix(cfg.at("z_ohm_per_mile"), miles / zb);
            line.series_admittance = detail::invert_on_phases(z, line.phases);
            if (cfg.contains("b_us_per_mile")) {
                PhaseMatrix b = detail::read_complex_matrix(cfg["b_us_per_mile"], 1e-6 * miles * zb);
                for (auto& row : b)
                    for (auto& e : row) e = Complex{0.0, e.real()};
                line.shunt_admittance = detail::mask(b, line.phases);
            }
        } else {
            line.phases = PhaseSet::parse(l.value("phases", "abc"));
            line.series_admittance = detail::mask(detail::read_complex_matrix(l.at("y_pu")), line.phases);
            if (l.contains("shunt_pu"))
                line.shunt_admittance = detail::mask(detail::read_complex_matrix(l["shunt_pu"]), line.phases);
        }
        g.lines.push_back(line);
    }

    for (const auto& t : doc.value("transformers", json::array())) {
        LineSegment line;
        line.from_bus = g.bus_id(t.at("from").get<std::string>());
        line.to_bus = g.bus_id(t.at("to").get<std::string>());
        line.name = t.value("name", fmt::format("{}-{}", g.bus(line.from_bus).name, g.bus(line.to_bus).name));
        line.phases = PhaseSet::parse(t.value("phases", "abc"));
        const double ratio = g.base_kva / t.at("kva").get<double>();
        const Complex z{t.at("r_pct").get<double>() / 100.0 * ratio, t.at("x_pct").get<double>() / 100.0 * ratio};
        for (Phase p : line.phases.members()) line.series_admittance[index_of(p)][index_of(p)] = 1.0 / z;
        g.lines.push_back(line);
    }

    auto line_index = [&](const std::string& name) {
        for (std::size_t i = 0; i < g.lines.size(); ++i)
            if (g.lines[i].name == name) return i;
        throw ModelError(fmt::format("unknown line '{}'", name));
    };

    for (const auto& r : doc.value("regulators", json::array())) {
        VoltageRegulator reg;
        reg.name = r.at("name").get<std::string>();
        reg.line = line_index(r.at("line").get<std::string>());
        reg.phase = PhaseSet::parse(r.at("phase").get<std::string>()).members().at(0);
        reg.sense_bus = r.contains("sense_bus") ? g.bus_id(r["sense_bus"].get<std::string>()) : g.lines[reg.line].to_bus;
        reg.tap = r.value("tap", 0);
        reg.tap_min = r.value("tap_min", -16);
        reg.tap_max = r.value("tap_max", 16);
        reg.volts_per_tap = r.value("volts_per_tap", 0.00625);
        reg.deadband = r.value("deadband", 0.0167);
        reg.target = r.value("target", 1.0);
        if (r.contains("compensator")) {
            // Relay settings in secondary volts: PT ratio, CT primary rating, R and X
            // dial settings, voltage level and bandwidth.
            const auto& c = r.at("compensator");
            const BusId from = g.lines[reg.line].from_bus;
            const double v_ln = g.bus(from).base_kv * 1000.0 / std::sqrt(3.0);
            const double v_secondary = v_ln / c.at("pt_ratio").get<double>();
            const double i_base = g.phase_base_kva() * 1000.0 / v_ln;
            const double ct = c.at("ct_amps").get<double>();
            reg.compensator = Complex(c.value("r_volts", 0.0), c.value("x_volts", 0.0)) / v_secondary * (i_base / ct);
            if (c.contains("level_volts")) reg.target = c["level_volts"].get<double>() / v_secondary;
            if (c.contains("band_volts")) reg.deadband = c["band_volts"].get<double>() / v_secondary;
        }
        if (!(reg.deadband > 0)) throw ModelError(fmt::format("regulator {} needs a positive deadband", reg.name));
        g.regulators.push_back(reg);
    }

    for (const auto& c : doc.value("capacitors", json::array())) {
        CapacitorBank cap;
        cap.bus = g.bus_id(c.at("bus").get<std::string>());
        cap.phase = PhaseSet::parse(c.at("phase").get<std::string>()).members().at(0);
        cap.name = c.value("name", fmt::format("cap-{}{}", g.bus(cap.bus).name, phase_name(cap.phase)));
        cap.step_susceptance = c.at("kvar_per_step").get<double>() / g.phase_base_kva();
        cap.num_steps = c.value("num_steps", 1);
        cap.current_step = c.value("step", 0);
        g.capacitors.push_back(cap);
    }

    out.zip_mixes["PQ"] = {constant_power(), constant_power()};
    out.zip_mixes["I"] = {constant_current(), constant_current()};
    out.zip_mixes["Z"] = {constant_impedance(), constant_impedance()};
    for (const auto& [name, mix] : doc.value("zip_mixes", json::object()).items())
        out.zip_mixes[name] = {detail::read_components(mix.at("p")), detail::read_components(mix.at("q"))};

    for (const auto& l : doc.value("loads", json::array())) {
        LoadModel load;
        load.bus = g.bus_id(l.at("bus").get<std::string>());
        load.phase = PhaseSet::parse(l.at("phase").get<std::string>()).members().at(0);
        load.p_nom_kw = l.value("kw", 0.0);
        load.q_nom_kvar = l.value("kvar", 0.0);
        const auto model = l.value("model", std::string("PQ"));
        auto it = out.zip_mixes.find(model);
        if (it == out.zip_mixes.end()) throw ModelError(fmt::format("unknown load model '{}'", model));
        load.p_components = it->second.first;
        load.q_components = it->second.second;
        load.v_nom = l.value("v_nom", 1.0);
        check_load_model(load);
        out.loads.push_back(std::move(load));
    }

    for (const auto& j : doc.value("generators", json::array())) {
        GeneratorSpec gen;
        gen.name = j.at("name").get<std::string>();
        gen.bus = g.bus_id(j.at("bus").get<std::string>());
        gen.kind = j.value("kind", std::string("renewable")) == "dispatchable" ? GeneratorKind::dispatchable
                                                                             : GeneratorKind::renewable;
        gen.apparent_limit_kva = j.value("kva", 0.0);
        const double p = j.value("p_kw", 0.0);
        gen.p_min_kw = {j.value("p_min_kw", p)};
        gen.p_max_kw = {j.value("p_max_kw", p)};
        gen.q_min_kvar = {j.value("q_min_kvar", -gen.apparent_limit_kva)};
        gen.q_max_kvar = {j.value("q_max_kvar", gen.apparent_limit_kva)};
        g.generators.push_back(std::move(gen));
    }
    return out;
}

inline GridFile load_grid_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ModelError(fmt::format("cannot open grid file '{}'", path));
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(fmt::format("grid file '{}': {}", path, e.what()));
    }
    try {
        return parse_grid(doc);
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(fmt::format("grid file '{}': {}", path, e.what()));
    }
}

}  // namespace pqc
