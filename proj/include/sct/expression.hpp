#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sct/common.hpp"

namespace sct {

enum class Stage { raw_counts, normalized };

struct Entry {
    int cell;
    int gene;
    double value;

    friend bool operator==(const Entry&, const Entry&) = default;
};

// Cell-major sparse expression matrix. Zeros are implicit: stored values are
// strictly positive, and in the raw_counts stage they are integers.
class SparseExpressionMatrix {
public:
    int n_cells = 0;
    int n_genes = 0;
    Stage stage = Stage::raw_counts;
    std::vector<Entry> entries;

    // Sorts entries by (cell, gene), enforces the invariants above and
    // rebuilds the per-cell offsets. Call after any direct edit of `entries`.
    void finalize() {
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            return a.cell != b.cell ? a.cell < b.cell : a.gene < b.gene;
        });
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const Entry& e = entries[i];
            if (e.cell < 0 || e.cell >= n_cells) {
                throw ValidationError("cell index " + std::to_string(e.cell) + " out of range [0, " +
                                      std::to_string(n_cells) + ")");
            }
            if (e.gene < 0 || e.gene >= n_genes) {
                throw ValidationError("gene index " + std::to_string(e.gene) + " out of range [0, " +
                                      std::to_string(n_genes) + ")");
            }
            if (!std::isfinite(e.value) || e.value <= 0.0) {
                throw ValidationError("entry (" + std::to_string(e.cell) + ", " + std::to_string(e.gene) +
                                      ") has non-positive value; zeros must stay implicit");
            }
            if (stage == Stage::raw_counts && e.value != std::floor(e.value)) {
                throw ValidationError("raw count at (" + std::to_string(e.cell) + ", " +
                                      std::to_string(e.gene) + ") is not an integer");
            }
            if (i > 0 && entries[i - 1].cell == e.cell && entries[i - 1].gene == e.gene) {
                throw ValidationError("duplicate entry for cell " + std::to_string(e.cell) + ", gene " +
                                      std::to_string(e.gene));
            }
        }
        offsets_.assign(static_cast<std::size_t>(n_cells) + 1, 0);
        for (const Entry& e : entries) {
            ++offsets_[static_cast<std::size_t>(e.cell) + 1];
        }
        for (int c = 0; c < n_cells; ++c) {
            offsets_[c + 1] += offsets_[c];
        }
    }

    std::span<const Entry> cell(int c) const {
        return {entries.data() + offsets_[c], entries.data() + offsets_[c + 1]};
    }

    int nnz(int c) const {
        return static_cast<int>(offsets_[c + 1] - offsets_[c]);
    }

    double library_size(int c) const {
        double s = 0.0;
        for (const Entry& e : cell(c)) {
            s += e.value;
        }
        return s;
    }

private:
    std::vector<std::size_t> offsets_ = {0};
};

// Per-cell metadata carried alongside the matrix.
struct CellRecord {
    std::string cell_id;
    std::optional<std::string> label;
    double library_size = 0.0;
};

enum class MatrixFormat { auto_detect, coordinate, dense_csv };

namespace detail {

inline void fail_parse(const std::string& path, std::size_t line, const std::string& what) {
    throw ParseError(path + ":" + std::to_string(line) + ": " + what);
}

template <typename T>
T parse_number(std::string_view tok, const std::string& path, std::size_t line) {
    T out{};
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) {
        fail_parse(path, line, "expected a number, got '" + std::string(tok) + "'");
    }
    return out;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

} // namespace detail

// Coordinate text format, the interchange format of this library:
//   line 1:  n_cells n_genes n_entries
//   line 2+: cell_index gene_index value     (0-based, '.' decimal separator)
// Dense CSV (no header, one row per cell) is accepted for small fixtures.
inline SparseExpressionMatrix load_matrix(const std::filesystem::path& path,
                                          Stage stage = Stage::raw_counts,
                                          MatrixFormat format = MatrixFormat::auto_detect) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    const std::string name = path.string();
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) {
        detail::fail_parse(name, 1, "empty file");
    }
    ++lineno;

    if (format == MatrixFormat::auto_detect) {
        format = line.find(',') != std::string::npos ? MatrixFormat::dense_csv : MatrixFormat::coordinate;
    }

    SparseExpressionMatrix m;
    m.stage = stage;

    if (format == MatrixFormat::dense_csv) {
        int n_genes = -1;
        do {
            if (line.empty() && in.eof()) break;
            std::string_view rest(line);
            int gene = 0;
            while (true) {
                std::size_t comma = rest.find(',');
                std::string_view tok = rest.substr(0, comma);
                double v = detail::parse_number<double>(tok, name, lineno);
                if (v != 0.0) {
                    m.entries.push_back({m.n_cells, gene, v});
                }
                ++gene;
                if (comma == std::string_view::npos) break;
                rest.remove_prefix(comma + 1);
            }
            if (n_genes < 0) {
                n_genes = gene;
            } else if (gene != n_genes) {
                detail::fail_parse(name, lineno, "row has " + std::to_string(gene) + " fields, expected " +
                                                     std::to_string(n_genes));
            }
            ++m.n_cells;
            ++lineno;
        } while (std::getline(in, line));
        m.n_genes = std::max(n_genes, 0);
        m.finalize();
        return m;
    }

    auto header = detail::split_ws(line);
    if (header.size() != 3) {
        detail::fail_parse(name, lineno, "header must be 'n_cells n_genes n_entries'");
    }
    m.n_cells = detail::parse_number<int>(header[0], name, lineno);
    m.n_genes = detail::parse_number<int>(header[1], name, lineno);
    const long declared = detail::parse_number<long>(header[2], name, lineno);
    if (m.n_cells < 0 || m.n_genes < 0 || declared < 0) {
        detail::fail_parse(name, lineno, "negative dimension in header");
    }
    m.entries.reserve(static_cast<std::size_t>(declared));

    while (std::getline(in, line)) {
        ++lineno;
        auto tok = detail::split_ws(line);
        if (tok.empty()) continue;
        if (tok.size() != 3) {
            detail::fail_parse(name, lineno, "expected 'cell gene value'");
        }
        Entry e;
        e.cell = detail::parse_number<int>(tok[0], name, lineno);
        e.gene = detail::parse_number<int>(tok[1], name, lineno);
        e.value = detail::parse_number<double>(tok[2], name, lineno);
        m.entries.push_back(e);
    }
    if (static_cast<long>(m.entries.size()) != declared) {
        throw ParseError(name + ": header declares " + std::to_string(declared) + " entries, file has " +
                         std::to_string(m.entries.size()));
    }
    m.finalize();
    return m;
}

// Bit-exact persistence: %.17g round-trips any double through decimal text.
inline void save_matrix(const std::filesystem::path& path, const SparseExpressionMatrix& m) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << m.n_cells << ' ' << m.n_genes << ' ' << m.entries.size() << '\n';
    char buf[64];
    for (const Entry& e : m.entries) {
        std::snprintf(buf, sizeof(buf), "%d %d %.17g\n", e.cell, e.gene, e.value);
        out << buf;
    }
    if (!out) {
        throw IoError("short write to " + path.string());
    }
}

// Labels CSV: optional "cell_id,label" header, then one "id,label" row per cell.
inline std::vector<std::pair<std::string, std::string>> load_labels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1 && line == "cell_id,label") continue;
        std::size_t comma = line.find(',');
        if (comma == std::string::npos) {
            detail::fail_parse(path.string(), lineno, "expected 'cell_id,label'");
        }
        out.emplace_back(line.substr(0, comma), line.substr(comma + 1));
    }
    return out;
}

inline void save_labels(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, std::string>>& labels) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "cell_id,label\n";
    for (const auto& [id, label] : labels) {
        out << id << ',' << label << '\n';
    }
}

// Drops cells expressing fewer than `min_genes` genes and re-densifies cell
// indices. `kept_cells` (when given) receives the surviving original indices,
// for subsetting labels and records.
inline SparseExpressionMatrix quality_filter(const SparseExpressionMatrix& m, int min_genes = 200,
                                             std::vector<int>* kept_cells = nullptr) {
    if (m.stage != Stage::raw_counts) {
        throw ValidationError("quality_filter expects raw counts");
    }
    std::vector<int> remap(m.n_cells, -1);
    int kept = 0;
    for (int c = 0; c < m.n_cells; ++c) {
        if (m.nnz(c) >= min_genes) {
            remap[c] = kept++;
        }
    }
    if (kept == 0) {
        throw ValidationError("quality_filter removed every cell (min_genes=" + std::to_string(min_genes) +
                              ")");
    }
    SparseExpressionMatrix out;
    out.n_cells = kept;
    out.n_genes = m.n_genes;
    out.stage = m.stage;
    out.entries.reserve(m.entries.size());
    for (const Entry& e : m.entries) {
        if (remap[e.cell] >= 0) {
            out.entries.push_back({remap[e.cell], e.gene, e.value});
        }
    }
    out.finalize();
    if (kept_cells) {
        kept_cells->clear();
        for (int c = 0; c < m.n_cells; ++c) {
            if (remap[c] >= 0) kept_cells->push_back(c);
        }
    }
    return out;
}

// Library-size normalization: scale each cell to `target_sum` total counts,
// then map x -> log(1 + x). Natural log; keeps the sparsity pattern intact.
inline SparseExpressionMatrix normalize(const SparseExpressionMatrix& m, double target_sum = 10000.0) {
    if (m.stage != Stage::raw_counts) {
        throw ValidationError("normalize expects raw counts");
    }
    SparseExpressionMatrix out;
    out.n_cells = m.n_cells;
    out.n_genes = m.n_genes;
    out.stage = Stage::normalized;
    out.entries.reserve(m.entries.size());
    for (int c = 0; c < m.n_cells; ++c) {
        const double lib = m.library_size(c);
        if (lib <= 0.0) {
            throw ValidationError("cell " + std::to_string(c) + " has zero library size");
        }
        const double scale = target_sum / lib;
        for (const Entry& e : m.cell(c)) {
            out.entries.push_back({e.cell, e.gene, std::log1p(e.value * scale)});
        }
    }
    out.finalize();
    return out;
}

inline std::vector<CellRecord> make_records(const SparseExpressionMatrix& raw,
                                            const std::vector<std::pair<std::string, std::string>>* labels =
                                                nullptr) {
    if (labels && static_cast<int>(labels->size()) != raw.n_cells) {
        throw ValidationError("label count " + std::to_string(labels->size()) + " != n_cells " +
                              std::to_string(raw.n_cells));
    }
    std::vector<CellRecord> out(raw.n_cells);
    for (int c = 0; c < raw.n_cells; ++c) {
        out[c].cell_id = labels ? (*labels)[c].first : "C" + std::to_string(c);
        if (labels) {
            out[c].label = (*labels)[c].second;
        }
        out[c].library_size = raw.library_size(c);
    }
    return out;
}

} // namespace sct
