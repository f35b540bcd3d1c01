#pragma once

#include <sqlite3.h>

#include <filesystem>
#include <memory>
#include <string>

#include "mats/common.hpp"

namespace mats::detail {

struct SqliteCloser {
    void operator()(sqlite3* db) const noexcept {
        if (db) sqlite3_close_v2(db);
    }
};
struct StmtFinalizer {
    void operator()(sqlite3_stmt* stmt) const noexcept {
        if (stmt) sqlite3_finalize(stmt);
    }
};

using DbHandle = std::unique_ptr<sqlite3, SqliteCloser>;
using StmtHandle = std::unique_ptr<sqlite3_stmt, StmtFinalizer>;

/// Opens a database file read-only. Missing or unopenable files are setup
/// errors, never execution statuses.
inline DbHandle open_read_only(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw SetupError("database file not found: " + path);
    sqlite3* raw = nullptr;
    int rc = sqlite3_open_v2(path.c_str(), &raw, SQLITE_OPEN_READONLY, nullptr);
    DbHandle db(raw);
    if (rc != SQLITE_OK) {
        std::string msg = raw ? sqlite3_errmsg(raw) : "unknown open error";
        throw SetupError("cannot open database " + path + ": " + msg);
    }
    return db;
}

/// Double-quotes an identifier for embedding in SQL text.
inline std::string quote_identifier(const std::string& name) {
    std::string out = "\"";
    for (char c : name) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

/// Prepares the first statement of `sql`; returns the tail pointer position.
inline StmtHandle prepare(sqlite3* db, const std::string& sql, const char** tail = nullptr) {
    sqlite3_stmt* raw = nullptr;
    int rc = sqlite3_prepare_v2(db, sql.c_str(), static_cast<int>(sql.size()), &raw, tail);
    StmtHandle stmt(raw);
    if (rc != SQLITE_OK) throw MatsError(sqlite3_errmsg(db));
    return stmt;
}

}  // namespace mats::detail
