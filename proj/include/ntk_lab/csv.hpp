#ifndef NTK_LAB_CSV_HPP
#define NTK_LAB_CSV_HPP

// Plain-text numeric I/O shared by every module: doubles are written with
// 17 significant digits so that a write/read cycle is exact.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "ntk_lab/errors.hpp"
#include "ntk_lab/linalg.hpp"

namespace ntk_lab::csv {

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view cell, std::size_t line) {
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    if (cell == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (cell == "inf") return std::numeric_limits<double>::infinity();
    if (cell == "-inf") return -std::numeric_limits<double>::infinity();
    if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
    double v = 0.0;
    auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        throw ParseError("non-numeric cell '" + std::string(cell) + "'", line);
    return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep = ',') {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline void write_row(std::ostream& os, const double* v, Index n, Index stride = 1) {
    for (Index j = 0; j < n; ++j) {
        if (j) os << ',';
        os << format_double(v[j * stride]);
    }
    os << '\n';
}

/// Headerless matrix block, one matrix row per line.
inline void write_matrix(std::ostream& os, const Matrix& M) {
    for (Index i = 0; i < M.rows(); ++i) {
        for (Index j = 0; j < M.cols(); ++j) {
            if (j) os << ',';
            os << format_double(M(i, j));
        }
        os << '\n';
    }
}

inline void write_matrix_file(const std::string& path, const Matrix& M) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write_matrix(os, M);
    if (!os) throw IoError("write failed for '" + path + "'");
}

/// Reads `rows` lines of `cols` comma-separated values starting at line number `first_line`.
inline Matrix read_matrix_block(std::istream& is, Index rows, Index cols, std::size_t& line_no) {
    Matrix M(rows, cols);
    std::string line;
    for (Index i = 0; i < rows; ++i) {
        if (!std::getline(is, line)) throw ParseError("unexpected end of matrix block", line_no + 1);
        ++line_no;
        const auto cells = split(line);
        if (static_cast<Index>(cells.size()) != cols)
            throw ParseError("expected " + std::to_string(cols) + " fields, got " + std::to_string(cells.size()),
                             line_no);
        for (Index j = 0; j < cols; ++j) M(i, j) = parse_double(cells[j], line_no);
    }
    return M;
}

/// Reads a headerless numeric CSV of unknown shape.
inline Matrix read_matrix_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = split(line);
        std::vector<double> row;
        row.reserve(cells.size());
        for (auto c : cells) row.push_back(parse_double(c, line_no));
        if (!rows.empty() && row.size() != rows.front().size())
            throw ParseError("ragged row: expected " + std::to_string(rows.front().size()) + " fields", line_no);
        rows.push_back(std::move(row));
    }
    Matrix M(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows.front().size()));
    for (Index i = 0; i < M.rows(); ++i)
        for (Index j = 0; j < M.cols(); ++j) M(i, j) = rows[i][j];
    return M;
}

/// Long-format table with a header row.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    void add(std::vector<double> row) { rows.push_back(std::move(row)); }

    void write(std::ostream& os) const {
        for (std::size_t j = 0; j < columns.size(); ++j) os << (j ? "," : "") << columns[j];
        os << '\n';
        for (const auto& r : rows) write_row(os, r.data(), static_cast<Index>(r.size()));
    }

    void write_file(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open '" + path + "' for writing");
        write(os);
        if (!os) throw IoError("write failed for '" + path + "'");
    }

    static Table read_file(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open '" + path + "'");
        Table t;
        std::string line;
        std::size_t line_no = 0;
        if (!std::getline(is, line)) throw ParseError("missing header row", 1);
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        for (auto c : split(line)) t.columns.emplace_back(c);
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto cells = split(line);
            if (cells.size() != t.columns.size())
                throw ParseError("expected " + std::to_string(t.columns.size()) + " fields", line_no);
            std::vector<double> row;
            for (auto c : cells) row.push_back(parse_double(c, line_no));
            t.rows.push_back(std::move(row));
        }
        return t;
    }

    std::vector<double> column(const std::string& name) const {
        for (std::size_t j = 0; j < columns.size(); ++j) {
            if (columns[j] != name) continue;
            std::vector<double> out;
            out.reserve(rows.size());
            for (const auto& r : rows) out.push_back(r[j]);
            return out;
        }
        throw InvalidInput("no column named '" + name + "'");
    }
};

}  // namespace ntk_lab::csv

#endif
