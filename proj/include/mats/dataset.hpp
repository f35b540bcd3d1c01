#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mats/core.hpp"
#include "mats/sqlite_util.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Question loading
// ---------------------------------------------------------------------------

namespace detail {

inline std::string sample_id_from(const nlohmann::json& rec, std::size_t index) {
    if (rec.contains("question_id")) {
        const auto& v = rec["question_id"];
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    }
    return std::to_string(index);
}

inline std::string require_string(const nlohmann::json& rec, const char* key, std::size_t index) {
    if (!rec.contains(key) || !rec[key].is_string())
        throw ValidationError("record " + std::to_string(index) + ": missing or non-string field '" +
                              key + "'");
    return rec[key].get<std::string>();
}

}  // namespace detail

/// Parses a benchmark question file. The file is either a JSON array or JSON
/// Lines; each record needs `question` and `db_id`, with the gold query under
/// `SQL` or `query`, and optional `evidence` / `difficulty` / `question_id`.
inline std::vector<QuestionSample> load_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SetupError("cannot open question file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    nlohmann::json records = nlohmann::json::array();
    std::size_t first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    if (text[first] == '[') {
        try {
            records = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("cannot parse question file: ") + e.what());
        }
    } else {
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t eol = text.find('\n', pos);
            std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
            pos = eol == std::string::npos ? text.size() : eol + 1;
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                records.push_back(nlohmann::json::parse(line));
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError("cannot parse question file line " + std::to_string(line_no) +
                                      ": " + e.what());
            }
        }
    }
    if (!records.is_array()) throw ValidationError("question file must contain an array of records");

    std::vector<QuestionSample> samples;
    samples.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (!rec.is_object())
            throw ValidationError("record " + std::to_string(i) + ": expected an object");
        QuestionSample s;
        s.id = detail::sample_id_from(rec, i);
        s.question = detail::require_string(rec, "question", i);
        s.db_id = detail::require_string(rec, "db_id", i);
        if (rec.contains("SQL") && rec["SQL"].is_string())
            s.gold_sql = rec["SQL"].get<std::string>();
        else if (rec.contains("query") && rec["query"].is_string())
            s.gold_sql = rec["query"].get<std::string>();
        if (rec.contains("evidence") && rec["evidence"].is_string()) {
            std::string ev = rec["evidence"].get<std::string>();
            if (!ev.empty()) s.evidence = std::move(ev);
        }
        if (rec.contains("difficulty") && rec["difficulty"].is_string())
            s.difficulty = rec["difficulty"].get<std::string>();
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Schema introspection
// ---------------------------------------------------------------------------

/// Reads table, column, primary-key and foreign-key structure from a SQLite
/// database. Tables come back in sqlite_master order; views are ignored.
inline SchemaSnapshot introspect_schema(const std::string& db_path) {
    detail::DbHandle db = detail::open_read_only(db_path);
    SchemaSnapshot snapshot;

    {
        detail::StmtHandle stmt = detail::prepare(
            db.get(),
            "SELECT name FROM sqlite_master WHERE type = 'table' "
            "AND name NOT LIKE 'sqlite_%' ORDER BY rowid");
        while (sqlite3_step(stmt.get()) == SQLITE_ROW) {
            TableDef table;
            table.name = reinterpret_cast<const char*>(sqlite3_column_text(stmt.get(), 0));
            snapshot.tables.push_back(std::move(table));
        }
    }

    for (TableDef& table : snapshot.tables) {
        std::string sql = "PRAGMA table_info(" + detail::quote_identifier(table.name) + ")";
        detail::StmtHandle stmt = detail::prepare(db.get(), sql);
        while (sqlite3_step(stmt.get()) == SQLITE_ROW) {
            ColumnDef col;
            col.name = reinterpret_cast<const char*>(sqlite3_column_text(stmt.get(), 1));
            const unsigned char* type_text = sqlite3_column_text(stmt.get(), 2);
            col.declared_type = type_text ? reinterpret_cast<const char*>(type_text) : "";
            col.is_primary_key = sqlite3_column_int(stmt.get(), 5) > 0;
            table.columns.push_back(std::move(col));
        }
    }

    for (const TableDef& table : snapshot.tables) {
        std::string sql = "PRAGMA foreign_key_list(" + detail::quote_identifier(table.name) + ")";
        detail::StmtHandle stmt = detail::prepare(db.get(), sql);
        while (sqlite3_step(stmt.get()) == SQLITE_ROW) {
            const char* parent = reinterpret_cast<const char*>(sqlite3_column_text(stmt.get(), 2));
            const char* from = reinterpret_cast<const char*>(sqlite3_column_text(stmt.get(), 3));
            const unsigned char* to_raw = sqlite3_column_text(stmt.get(), 4);
            if (!parent || !from) continue;
            ForeignKey fk;
            fk.from = ColumnRef{table.name, from};
            std::string to_col = to_raw ? reinterpret_cast<const char*>(to_raw) : "";
            if (to_col.empty()) {
                // SQLite leaves the referenced column null when the FK targets
                // the parent's primary key implicitly.
                const TableDef* parent_table = snapshot.find_table(parent);
                if (parent_table) {
                    for (const ColumnDef& c : parent_table->columns)
                        if (c.is_primary_key) { to_col = c.name; break; }
                }
                if (to_col.empty()) {
                    warn("foreign key " + table.name + "." + fk.from.column + " -> " + parent +
                         ": cannot resolve referenced column; dropping");
                    continue;
                }
            }
            fk.to = ColumnRef{parent, to_col};
            snapshot.foreign_keys.push_back(std::move(fk));
        }
    }
    return snapshot;
}

// ---------------------------------------------------------------------------
// Value catalog
// ---------------------------------------------------------------------------

/// Distinct cell values for one column, in first-seen row order. `complete`
/// is false when the scan stopped at the cap, so the catalog may be missing
/// values that exist in the table.
struct ColumnValues {
    ColumnRef column;
    std::vector<Literal> values;
    bool complete = true;
};

struct ValueCatalog {
    std::vector<ColumnValues> columns;

    const ColumnValues* find(const ColumnRef& ref) const {
        for (const auto& c : columns)
            if (c.column == ref) return &c;
        return nullptr;
    }
};

namespace detail {

inline Literal literal_from_column(sqlite3_stmt* stmt, int col) {
    Literal lit;
    switch (sqlite3_column_type(stmt, col)) {
        case SQLITE_INTEGER:
            lit.kind = LiteralKind::integer;
            lit.text = format_int(sqlite3_column_int64(stmt, col));
            break;
        case SQLITE_FLOAT:
            lit.kind = LiteralKind::real;
            lit.text = format_double(sqlite3_column_double(stmt, col));
            break;
        case SQLITE_BLOB: {
            lit.kind = LiteralKind::blob;
            const void* p = sqlite3_column_blob(stmt, col);
            int len = sqlite3_column_bytes(stmt, col);
            std::string_view bytes(static_cast<const char*>(p ? p : ""), static_cast<std::size_t>(len));
            lit.text = digest_hex(bytes);
            break;
        }
        default: {
            lit.kind = LiteralKind::text;
            const unsigned char* p = sqlite3_column_text(stmt, col);
            int len = sqlite3_column_bytes(stmt, col);
            if (p) lit.text.assign(reinterpret_cast<const char*>(p), static_cast<std::size_t>(len));
            break;
        }
    }
    return lit;
}

}  // namespace detail

/// Collects up to `max_values_per_column` distinct non-null values per column
/// by scanning rows in storage order. A column whose scan fails (for example
/// a virtual table with a missing module) is kept with an empty value list
/// and a warning rather than failing the whole catalog.
inline ValueCatalog build_value_catalog(const std::string& db_path, const SchemaSnapshot& schema,
                                        std::size_t max_values_per_column = 2000) {
    detail::DbHandle db = detail::open_read_only(db_path);
    ValueCatalog catalog;
    for (const TableDef& table : schema.tables) {
        for (const ColumnDef& column : table.columns) {
            ColumnValues cv;
            cv.column = ColumnRef{table.name, column.name};
            std::string col_sql = detail::quote_identifier(column.name);
            std::string sql = "SELECT " + col_sql + " FROM " +
                              detail::quote_identifier(table.name) + " WHERE " + col_sql +
                              " IS NOT NULL";
            try {
                detail::StmtHandle stmt = detail::prepare(db.get(), sql);
                std::set<std::string> seen;
                while (true) {
                    int rc = sqlite3_step(stmt.get());
                    if (rc == SQLITE_DONE) break;
                    if (rc != SQLITE_ROW) throw MatsError(sqlite3_errmsg(db.get()));
                    Literal lit = detail::literal_from_column(stmt.get(), 0);
                    std::string key = std::to_string(static_cast<int>(lit.kind)) + ":" + lit.text;
                    if (!seen.insert(std::move(key)).second) continue;
                    cv.values.push_back(std::move(lit));
                    if (cv.values.size() >= max_values_per_column) {
                        // A further step could still find only duplicates, but
                        // we stop here and mark the catalog incomplete.
                        cv.complete = (sqlite3_step(stmt.get()) == SQLITE_DONE);
                        break;
                    }
                }
            } catch (const MatsError& e) {
                warn("value scan failed for " + cv.column.qualified() + ": " + e.what());
                cv.values.clear();
                cv.complete = false;
            }
            catalog.columns.push_back(std::move(cv));
        }
    }
    return catalog;
}

}  // namespace mats
