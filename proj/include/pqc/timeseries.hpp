#pragma once

// Minute-resolution time series and the CSV layout shared by profiles and
// reports: a `timestamp` column followed by named numeric columns.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

namespace pqc {

using Minutes = std::chrono::sys_time<std::chrono::minutes>;

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Accepts "YYYY-MM-DD HH:MM[:SS]" or the same with a 'T' separator.
inline Minutes parse_timestamp(std::string_view text) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    char sep = 0;
    const std::string buf(text);
    const int n = std::sscanf(buf.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &s);
    if (n < 6 || (sep != ' ' && sep != 'T')) throw DataError(fmt::format("bad timestamp '{}'", text));
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(mo)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59) throw DataError(fmt::format("bad timestamp '{}'", text));
    return std::chrono::sys_days{ymd} + std::chrono::hours{h} + std::chrono::minutes{mi};
}

inline std::string format_timestamp(Minutes t) {
    const auto day = std::chrono::floor<std::chrono::days>(t);
    const std::chrono::year_month_day ymd{day};
    const auto hm = std::chrono::hh_mm_ss{t - day};
    return fmt::format("{:04d}-{:02d}-{:02d} {:02d}:{:02d}", static_cast<int>(ymd.year()),
                       static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), hm.hours().count(),
                       hm.minutes().count());
}

inline int hour_of_day(Minutes t) {
    const auto day = std::chrono::floor<std::chrono::days>(t);
    return static_cast<int>(std::chrono::duration_cast<std::chrono::hours>(t - day).count());
}

inline int month_of(Minutes t) {
    return static_cast<int>(static_cast<unsigned>(std::chrono::year_month_day{std::chrono::floor<std::chrono::days>(t)}.month()));
}

/// 0 = Sunday .. 6 = Saturday.
inline int weekday_of(Minutes t) {
    return static_cast<int>(std::chrono::weekday{std::chrono::floor<std::chrono::days>(t)}.c_encoding());
}

struct TimeSeries {
    std::vector<Minutes> time;
    std::vector<double> value;

    [[nodiscard]] std::size_t size() const { return value.size(); }
    [[nodiscard]] bool empty() const { return value.empty(); }
};

struct CsvTable {
    std::vector<Minutes> time;
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns;

    [[nodiscard]] const std::vector<double>& column(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return columns[i];
        throw DataError(fmt::format("no column '{}'", name));
    }

    [[nodiscard]] TimeSeries series(std::string_view name) const { return {time, column(name)}; }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) {
        while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
        while (!field.empty() && field.front() == ' ') field.erase(field.begin());
        out.push_back(field);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace detail

inline CsvTable read_csv(std::istream& in, const std::string& source = "csv") {
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw DataError(fmt::format("{}: empty file", source));
    auto header = detail::split_csv_line(line);
    if (header.empty() || header[0] != "timestamp")
        throw DataError(fmt::format("{}: first column must be 'timestamp'", source));
    t.names.assign(header.begin() + 1, header.end());
    t.columns.resize(t.names.size());
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size())
            throw DataError(fmt::format("{}:{}: expected {} fields, got {}", source, line_no, header.size(),
                                        fields.size()));
        t.time.push_back(parse_timestamp(fields[0]));
        for (std::size_t c = 1; c < fields.size(); ++c) {
            try {
                t.columns[c - 1].push_back(std::stod(fields[c]));
            } catch (const std::exception&) {
                throw DataError(fmt::format("{}:{}: bad number '{}'", source, line_no, fields[c]));
            }
        }
    }
    return t;
}

inline CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(fmt::format("cannot open '{}'", path));
    return read_csv(in, path);
}

/// Fixed-precision output so identical runs give identical bytes.
inline void write_csv(std::ostream& out, const CsvTable& t, int precision = 6) {
    out << "timestamp";
    for (const auto& n : t.names) out << ',' << n;
    out << '\n';
    for (std::size_t r = 0; r < t.time.size(); ++r) {
        out << format_timestamp(t.time[r]);
        for (const auto& col : t.columns) out << ',' << fmt::format("{:.{}f}", col.at(r), precision);
        out << '\n';
    }
}

inline void write_csv_file(const std::string& path, const CsvTable& t, int precision = 6) {
    std::ofstream out(path);
    if (!out) throw DataError(fmt::format("cannot write '{}'", path));
    write_csv(out, t, precision);
}

}  // namespace pqc
