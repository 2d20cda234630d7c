#pragma once

#include <charconv>
#include <istream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lmcsafe::csv {

/// Shortest round-trip decimal representation; "nan"/"inf" for non-finite values.
inline std::string format(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::string> split(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.emplace_back(line.substr(start));
            break;
        }
        out.emplace_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw std::invalid_argument("csv: cannot parse number '" + s + "'");
    }
    return v;
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) {
                return i;
            }
        }
        throw std::invalid_argument("csv: missing column '" + std::string(name) + "'");
    }
};

inline Table read(std::istream& in) {
    Table t;
    std::string line;
    if (!std::getline(in, line)) {
        throw std::invalid_argument("csv: empty input");
    }
    t.header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        auto row = split(line);
        if (row.size() != t.header.size()) {
            throw std::invalid_argument("csv: row has " + std::to_string(row.size()) + " fields, expected " +
                                        std::to_string(t.header.size()));
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

}  // namespace lmcsafe::csv
