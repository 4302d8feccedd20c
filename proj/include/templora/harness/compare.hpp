#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/eval/metrics.hpp"

namespace templora::harness {

/// A report CSV: `# key=value` metadata, a header row and data rows.
struct CsvTable {
    std::map<std::string, std::string> meta;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    [[nodiscard]] std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return i;
        }
        throw ConfigError("report has no column '" + name + "'");
    }
    [[nodiscard]] bool has_column(const std::string& name) const {
        for (const auto& h : header) {
            if (h == name) return true;
        }
        return false;
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline CsvTable parse_csv(std::istream& is, const std::string& name = "report") {
    CsvTable t;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq != std::string::npos) {
                std::string key = line.substr(1, eq - 1);
                key.erase(0, key.find_first_not_of(' '));
                t.meta[key] = line.substr(eq + 1);
            }
            continue;
        }
        if (t.header.empty()) {
            t.header = split_csv_line(line);
            continue;
        }
        auto row = split_csv_line(line);
        if (row.size() != t.header.size()) throw IoError(name + ": row has " + std::to_string(row.size()) + " cells, header has " +
                                                         std::to_string(t.header.size()));
        t.rows.push_back(std::move(row));
    }
    if (t.header.empty()) throw IoError(name + ": no header row");
    return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    return parse_csv(is, path.string());
}

struct CompareRow {
    std::string label;
    double base = 0.0;
    double updated = 0.0;
    double percent = 0.0;
};

inline double cell_number(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw IoError("bad number '" + s + "' in " + what);
    }
}

/// Relative PPL change of `updated` against `base`, row by row. Segment
/// reports also get an overall row recombined token-weighted from the
/// buckets. Reports over different corpora are refused.
inline std::vector<CompareRow> compare_reports(const CsvTable& base, const CsvTable& updated) {
    const auto hb = base.meta.find("corpus_hash"), hu = updated.meta.find("corpus_hash");
    if (hb == base.meta.end() || hu == updated.meta.end()) throw ConfigError("compare: both reports need a corpus_hash");
    if (hb->second != hu->second) {
        throw ConfigError("compare: corpus hashes differ (" + hb->second + " vs " + hu->second + ")");
    }
    if (base.header != updated.header) throw ConfigError("compare: reports have different columns");
    if (base.rows.size() != updated.rows.size()) throw ConfigError("compare: reports have different row counts");
    const std::size_t ppl = base.column("ppl");
    const bool segments = base.has_column("segment_start");
    std::vector<CompareRow> out;
    double lb = 0.0, lu = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < base.rows.size(); ++i) {
        CompareRow r;
        if (segments) {
            const std::size_t s = base.column("segment_start"), e = base.column("segment_end");
            if (base.rows[i][s] != updated.rows[i][s] || base.rows[i][e] != updated.rows[i][e]) {
                throw ConfigError("compare: segment " + std::to_string(i) + " has different bounds");
            }
            r.label = base.rows[i][s] + "-" + base.rows[i][e];
        } else {
            const std::size_t b = base.column("bench"), v = base.column("variant");
            r.label = base.rows[i][b] + ":" + base.rows[i][v] + "#" + std::to_string(i);
            if (base.has_column("status") && (base.rows[i][base.column("status")] != "ok" || updated.rows[i][base.column("status")] != "ok")) {
                continue;
            }
        }
        r.base = cell_number(base.rows[i][ppl], "base ppl");
        r.updated = cell_number(updated.rows[i][ppl], "updated ppl");
        r.percent = eval::relative_change(r.base, r.updated);
        if (segments) {
            const double n = cell_number(base.rows[i][base.column("n_tokens")], "n_tokens");
            lb += n * std::log(r.base);
            lu += n * std::log(r.updated);
            nb += n;
        }
        out.push_back(r);
    }
    if (segments && nb > 0) {
        CompareRow all{"overall", std::exp(lb / nb), std::exp(lu / nb), 0.0};
        all.percent = eval::relative_change(all.base, all.updated);
        out.push_back(all);
    }
    return out;
}

inline void write_compare(std::ostream& os, const std::vector<CompareRow>& rows) {
    os << "label,base_ppl,updated_ppl,relative_change_pct\n";
    std::ostringstream line;
    line.precision(8);
    for (const auto& r : rows) {
        line.str("");
        line << r.label << ',' << r.base << ',' << r.updated << ',' << r.percent << '\n';
        os << line.str();
    }
}

}  // namespace templora::harness
