#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cctype>
#include <string>
#include <vector>

#include "mats/core.hpp"
#include "mats/sqlite_util.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// SQL trait classification
// ---------------------------------------------------------------------------

/// Lexically derived features of one SQL text. The recognizer skips string
/// literals and comments and tracks parenthesis depth; it is not a grammar.
struct SqlTraits {
    bool has_join = false;
    bool has_subquery = false;        // SELECT at depth > 0
    bool has_order_by_outer = false;  // ORDER BY at depth 0
    bool has_group_by = false;
    bool has_limit = false;
    bool uses_min = false;
    bool uses_max = false;
    bool uses_count = false;
    bool uses_avg = false;
    bool uses_sum = false;
    bool uses_divide = false;     // '/' operator outside literals
    bool uses_case_when = false;  // CASE keyword
    int logical_connectors = 0;   // AND/OR token count

    /// The validator-selection gate: queries using any of these operations
    /// can be correct with differing column selections, so the selection
    /// check is skipped for them.
    bool any_gated_operation() const {
        return uses_min || uses_max || uses_count || uses_avg || uses_sum ||
               uses_divide || uses_case_when;
    }
};

namespace detail {

struct SqlToken {
    enum Kind { word, punct } kind = word;
    std::string text;  // uppercased for words
    int depth = 0;     // parenthesis depth at the token
};

/// Lexes SQL into words and punctuation, dropping string literals, quoted
/// identifiers and comments. Best-effort: a malformed tail just ends the
/// stream.
inline std::vector<SqlToken> lex_sql(const std::string& sql) {
    std::vector<SqlToken> tokens;
    int depth = 0;
    std::size_t i = 0;
    const std::size_t n = sql.size();
    auto peek = [&](std::size_t k) -> char { return i + k < n ? sql[i + k] : '\0'; };
    while (i < n) {
        char c = sql[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (c == '-' && peek(1) == '-') {  // line comment
            while (i < n && sql[i] != '\n') ++i;
            continue;
        }
        if (c == '/' && peek(1) == '*') {  // block comment
            i += 2;
            while (i + 1 < n && !(sql[i] == '*' && sql[i + 1] == '/')) ++i;
            i = std::min(n, i + 2);
            continue;
        }
        if (c == '\'') {  // string literal, '' escapes
            ++i;
            while (i < n) {
                if (sql[i] == '\'' && peek(1) == '\'') { i += 2; continue; }
                if (sql[i] == '\'') { ++i; break; }
                ++i;
            }
            continue;
        }
        if (c == '"' || c == '`') {  // quoted identifier
            char quote = c;
            ++i;
            while (i < n && sql[i] != quote) ++i;
            if (i < n) ++i;
            continue;
        }
        if (c == '[') {  // bracket-quoted identifier
            while (i < n && sql[i] != ']') ++i;
            if (i < n) ++i;
            continue;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::string word;
            while (i < n && (std::isalnum(static_cast<unsigned char>(sql[i])) || sql[i] == '_')) {
                word.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(sql[i]))));
                ++i;
            }
            tokens.push_back({SqlToken::word, std::move(word), depth});
            continue;
        }
        if (c == '(') {
            tokens.push_back({SqlToken::punct, "(", depth});
            ++depth;
            ++i;
            continue;
        }
        if (c == ')') {
            depth = std::max(0, depth - 1);
            tokens.push_back({SqlToken::punct, ")", depth});
            ++i;
            continue;
        }
        tokens.push_back({SqlToken::punct, std::string(1, c), depth});
        ++i;
    }
    return tokens;
}

}  // namespace detail

inline SqlTraits classify_sql(const std::string& sql) {
    SqlTraits t;
    const auto tokens = detail::lex_sql(sql);
    auto next_is_open_paren = [&](std::size_t i) {
        return i + 1 < tokens.size() && tokens[i + 1].kind == detail::SqlToken::punct &&
               tokens[i + 1].text == "(";
    };
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto& tok = tokens[i];
        if (tok.kind == detail::SqlToken::punct) {
            if (tok.text == "/") t.uses_divide = true;
            continue;
        }
        const std::string& w = tok.text;
        if (w == "SELECT" && tok.depth > 0) t.has_subquery = true;
        else if (w == "JOIN") t.has_join = true;
        else if (w == "ORDER" && i + 1 < tokens.size() && tokens[i + 1].text == "BY") {
            if (tok.depth == 0) t.has_order_by_outer = true;
        } else if (w == "GROUP" && i + 1 < tokens.size() && tokens[i + 1].text == "BY") {
            t.has_group_by = true;
        } else if (w == "LIMIT") t.has_limit = true;
        else if (w == "CASE") t.uses_case_when = true;
        else if (w == "AND" || w == "OR") ++t.logical_connectors;
        else if (w == "MIN" && next_is_open_paren(i)) t.uses_min = true;
        else if (w == "MAX" && next_is_open_paren(i)) t.uses_max = true;
        else if (w == "COUNT" && next_is_open_paren(i)) t.uses_count = true;
        else if (w == "AVG" && next_is_open_paren(i)) t.uses_avg = true;
        else if (w == "SUM" && next_is_open_paren(i)) t.uses_sum = true;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace detail {

struct TimeoutState {
    std::chrono::steady_clock::time_point deadline;
    bool fired = false;
};

inline int progress_callback(void* arg) {
    auto* state = static_cast<TimeoutState*>(arg);
    if (std::chrono::steady_clock::now() >= state->deadline) {
        state->fired = true;
        return 1;  // interrupt the VM
    }
    return 0;
}

inline Value normalize_column(sqlite3_stmt* stmt, int col) {
    switch (sqlite3_column_type(stmt, col)) {
        case SQLITE_NULL:
            return std::monostate{};
        case SQLITE_INTEGER:
            return static_cast<std::int64_t>(sqlite3_column_int64(stmt, col));
        case SQLITE_FLOAT: {
            double d = sqlite3_column_double(stmt, col);
            if (!std::isfinite(d)) return std::monostate{};
            return d;
        }
        case SQLITE_TEXT: {
            const unsigned char* p = sqlite3_column_text(stmt, col);
            int len = sqlite3_column_bytes(stmt, col);
            return std::string(reinterpret_cast<const char*>(p), static_cast<std::size_t>(len));
        }
        case SQLITE_BLOB: {
            const void* p = sqlite3_column_blob(stmt, col);
            int len = sqlite3_column_bytes(stmt, col);
            std::string_view bytes(static_cast<const char*>(p ? p : ""), static_cast<std::size_t>(len));
            return BlobDigest{digest_hex(bytes)};
        }
    }
    return std::monostate{};
}

}  // namespace detail

/// Runs one SQL statement against a read-only connection with a wall-clock
/// timeout. Write statements are rejected; only the first statement of a
/// multi-statement text is executed.
inline ExecutionResponse execute_sql(const std::string& db_path, const std::string& sql,
                                     double timeout_s = 30.0) {
    auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    };

    detail::DbHandle db = detail::open_read_only(db_path);

    detail::TimeoutState timeout{start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                             std::chrono::duration<double>(timeout_s)),
                                 false};
    sqlite3_progress_handler(db.get(), 1000, detail::progress_callback, &timeout);

    sqlite3_stmt* raw = nullptr;
    int rc = sqlite3_prepare_v2(db.get(), sql.c_str(), static_cast<int>(sql.size()), &raw, nullptr);
    detail::StmtHandle stmt(raw);
    if (rc != SQLITE_OK) {
        if (timeout.fired) return ExecutionResponse::make_timeout(elapsed());
        return ExecutionResponse::make_syntax_error(sqlite3_errmsg(db.get()), elapsed());
    }
    if (!stmt) return ExecutionResponse::make_syntax_error("empty statement", elapsed());
    if (!sqlite3_stmt_readonly(stmt.get()))
        return ExecutionResponse::make_syntax_error("write statements are rejected (read-only)", elapsed());

    NormalizedTable table;
    table.column_count = sqlite3_column_count(stmt.get());
    while (true) {
        rc = sqlite3_step(stmt.get());
        if (rc == SQLITE_ROW) {
            Row row;
            row.reserve(static_cast<std::size_t>(table.column_count));
            for (int c = 0; c < table.column_count; ++c)
                row.push_back(detail::normalize_column(stmt.get(), c));
            table.rows.push_back(std::move(row));
            continue;
        }
        if (rc == SQLITE_DONE) break;
        if (timeout.fired || rc == SQLITE_INTERRUPT)
            return ExecutionResponse::make_timeout(elapsed());
        return ExecutionResponse::make_syntax_error(sqlite3_errmsg(db.get()), elapsed());
    }
    return ExecutionResponse::make_ok(std::move(table), elapsed());
}

// ---------------------------------------------------------------------------
// Result comparison
// ---------------------------------------------------------------------------

inline bool values_equal(const Value& a, const Value& b) {
    const bool a_null = std::holds_alternative<std::monostate>(a);
    const bool b_null = std::holds_alternative<std::monostate>(b);
    if (a_null || b_null) return a_null && b_null;

    auto as_number = [](const Value& v, double& out, bool& is_real) {
        if (const auto* i = std::get_if<std::int64_t>(&v)) {
            out = static_cast<double>(*i);
            is_real = false;
            return true;
        }
        if (const auto* d = std::get_if<double>(&v)) {
            out = *d;
            is_real = true;
            return true;
        }
        return false;
    };
    double xa, xb;
    bool ra, rb;
    if (as_number(a, xa, ra) && as_number(b, xb, rb)) {
        if (!ra && !rb) return std::get<std::int64_t>(a) == std::get<std::int64_t>(b);
        const double tol = 1e-6 * std::max({1.0, std::fabs(xa), std::fabs(xb)});
        return std::fabs(xa - xb) <= tol;
    }
    if (const auto* sa = std::get_if<std::string>(&a)) {
        const auto* sb = std::get_if<std::string>(&b);
        return sb && *sa == *sb;
    }
    if (const auto* ba = std::get_if<BlobDigest>(&a)) {
        const auto* bb = std::get_if<BlobDigest>(&b);
        return bb && *ba == *bb;
    }
    return false;
}

inline bool rows_equal(const Row& a, const Row& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!values_equal(a[i], b[i])) return false;
    return true;
}

/// Execution-result equality. Only ok responses can match; column arity must
/// agree and column order is significant. Order-insensitive mode compares row
/// multisets via first-fit matching under the numeric tolerance.
inline bool responses_match(const ExecutionResponse& a, const ExecutionResponse& b,
                            bool order_sensitive = false) {
    if (!a.ok() || !b.ok()) return false;
    if (a.rows.column_count != b.rows.column_count) return false;
    if (a.rows.rows.size() != b.rows.rows.size()) return false;

    if (order_sensitive) {
        for (std::size_t i = 0; i < a.rows.rows.size(); ++i)
            if (!rows_equal(a.rows.rows[i], b.rows.rows[i])) return false;
        return true;
    }
    std::vector<bool> used(b.rows.rows.size(), false);
    for (const Row& row : a.rows.rows) {
        bool found = false;
        for (std::size_t j = 0; j < b.rows.rows.size(); ++j) {
            if (used[j]) continue;
            if (rows_equal(row, b.rows.rows[j])) {
                used[j] = true;
                found = true;
                break;
            }
        }
        if (!found) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

inline double median(std::vector<double> values) {
    if (values.empty()) throw MatsError("median of empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

/// Median wall-clock duration over `repeats` sequential runs. Every run must
/// succeed; timing a failing query is an error.
inline double time_execution(const std::string& db_path, const std::string& sql, int repeats,
                             double timeout_s = 30.0) {
    if (repeats < 1) throw ValidationError("repeats must be >= 1");
    std::vector<double> durations;
    durations.reserve(static_cast<std::size_t>(repeats));
    for (int i = 0; i < repeats; ++i) {
        ExecutionResponse r = execute_sql(db_path, sql, timeout_s);
        if (!r.ok())
            throw MatsError(std::string("timing requires all-ok runs; got ") + to_string(r.status) +
                            (r.error_text.empty() ? "" : ": " + r.error_text));
        durations.push_back(r.duration_s);
    }
    return median(std::move(durations));
}

}  // namespace mats
