#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vagam/errors.hpp"

namespace vagam {

/// Shortest fixed formatting that round-trips doubles exactly.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Numeric table read from a comma-delimited file with one header row.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    int column(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw DataError("column '" + name + "' not found in CSV header");
    }

    std::vector<double> column_values(const std::string& name) const {
        const int c = column(name);
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(r[static_cast<size_t>(c)]);
        return out;
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace detail

inline CsvTable read_csv(std::istream& in, const std::string& what = "input") {
    CsvTable table;
    std::string line;
    if (!std::getline(in, line)) throw DataError(what + ": empty file, expected a header row");
    table.header = detail::split_csv_line(line);
    long row_index = 0;
    while (std::getline(in, line)) {
        ++row_index;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != table.header.size())
            throw DataError(what + ": row " + std::to_string(row_index) + " has " +
                            std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(table.header.size()));
        std::vector<double> row(fields.size());
        for (size_t c = 0; c < fields.size(); ++c) {
            const std::string& f = fields[c];
            if (f.empty())
                throw DataError(what + ": missing value at row " + std::to_string(row_index) +
                                ", column '" + table.header[c] + "'");
            char* end = nullptr;
            row[c] = std::strtod(f.c_str(), &end);
            if (end == f.c_str() || *end != '\0')
                throw DataError(what + ": non-numeric value '" + f + "' at row " +
                                std::to_string(row_index) + ", column '" + table.header[c] + "'");
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open CSV file: " + path);
    return read_csv(in, path);
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
    for (size_t c = 0; c < header.size(); ++c)
        out << header[c] << (c + 1 == header.size() ? "\n" : ",");
    for (const auto& row : rows) {
        for (size_t c = 0; c < row.size(); ++c)
            out << format_double(row[c]) << (c + 1 == row.size() ? "\n" : ",");
    }
}

inline void write_csv_file(const std::string& path, const std::vector<std::string>& header,
                           const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open output file: " + path);
    write_csv(out, header, rows);
}

}  // namespace vagam
