#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mats/common.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Benchmark samples
// ---------------------------------------------------------------------------

/// One benchmark item: a natural-language question over a named database,
/// optionally with external knowledge and a ground-truth SQL query.
struct QuestionSample {
    std::string id;
    std::string question;
    std::string db_id;
    std::optional<std::string> evidence;
    std::optional<std::string> gold_sql;
    std::optional<std::string> difficulty;  // dataset-provided label, never inferred
};

// ---------------------------------------------------------------------------
// Schema model
// ---------------------------------------------------------------------------

struct ColumnDef {
    std::string name;
    std::string declared_type;
    bool is_primary_key = false;
};

struct TableDef {
    std::string name;
    std::vector<ColumnDef> columns;  // at least one
};

struct ColumnRef {
    std::string table;
    std::string column;

    bool operator==(const ColumnRef&) const = default;
    std::string qualified() const { return table + "." + column; }
};

struct ForeignKey {
    ColumnRef from;  // child side
    ColumnRef to;    // parent side

    bool operator==(const ForeignKey&) const = default;
};

struct SchemaSnapshot {
    std::vector<TableDef> tables;
    std::vector<ForeignKey> foreign_keys;

    const TableDef* find_table(const std::string& name) const {
        for (const auto& t : tables)
            if (t.name == name) return &t;
        return nullptr;
    }

    bool has_column(const ColumnRef& ref) const {
        const TableDef* t = find_table(ref.table);
        if (!t) return false;
        for (const auto& c : t->columns)
            if (c.name == ref.column) return true;
        return false;
    }

    std::size_t column_count() const {
        std::size_t n = 0;
        for (const auto& t : tables) n += t.columns.size();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Literal values. Database values travel as text plus a type tag: prompts are
// text, and result comparison happens on execution output, not on catalogs.
// ---------------------------------------------------------------------------

enum class LiteralKind { integer, real, text, blob };

struct Literal {
    std::string text;
    LiteralKind kind = LiteralKind::text;

    bool operator==(const Literal&) const = default;

    /// SQL-flavored rendering used in schema comments: text quoted, numbers bare.
    std::string rendered() const {
        switch (kind) {
            case LiteralKind::text: {
                std::string quoted = "'";
                for (char c : text) {
                    quoted.push_back(c);
                    if (c == '\'') quoted.push_back('\'');
                }
                quoted.push_back('\'');
                return quoted;
            }
            case LiteralKind::blob:
                return "<blob:" + text + ">";
            default:
                return text;
        }
    }
};

/// Per-column BM25 matches feeding the schema prompt.
struct MatchedValue {
    Literal value;
    double score = 0.0;  // >= 0
};

struct ColumnMatches {
    ColumnRef column;
    std::vector<MatchedValue> values;  // at most k entries, catalog order for ties
};

struct MatchedValues {
    std::vector<ColumnMatches> columns;

    const ColumnMatches* find(const ColumnRef& ref) const {
        for (const auto& cm : columns)
            if (cm.column == ref) return &cm;
        return nullptr;
    }
};

// ---------------------------------------------------------------------------
// SQL candidates
// ---------------------------------------------------------------------------

enum class CandidateOrigin { greedy, sampled, advanced, fixed };

inline const char* to_string(CandidateOrigin o) {
    switch (o) {
        case CandidateOrigin::greedy: return "greedy";
        case CandidateOrigin::sampled: return "sampled";
        case CandidateOrigin::advanced: return "advanced";
        case CandidateOrigin::fixed: return "fixed";
    }
    return "?";
}

struct SqlCandidate {
    std::string plan;  // reasoning text preceding the query, may be empty
    std::string sql;   // non-empty once extracted
    CandidateOrigin origin = CandidateOrigin::greedy;
    double temperature = 0.0;  // 0 is the greedy sentinel
};

// ---------------------------------------------------------------------------
// Execution responses
// ---------------------------------------------------------------------------

/// Digest stand-in for blob cells; blobs never travel raw through prompts.
struct BlobDigest {
    std::string hex;
    bool operator==(const BlobDigest&) const = default;
};

using Value = std::variant<std::monostate, std::int64_t, double, std::string, BlobDigest>;
using Row = std::vector<Value>;

/// Rectangular result table with normalized scalars.
struct NormalizedTable {
    int column_count = 0;
    std::vector<Row> rows;
};

enum class ExecStatus { ok, syntax_error, timeout };

inline const char* to_string(ExecStatus s) {
    switch (s) {
        case ExecStatus::ok: return "ok";
        case ExecStatus::syntax_error: return "syntax_error";
        case ExecStatus::timeout: return "timeout";
    }
    return "?";
}

struct ExecutionResponse {
    ExecStatus status = ExecStatus::syntax_error;
    NormalizedTable rows;        // meaningful iff status == ok
    std::string error_text;      // meaningful iff status == syntax_error
    double duration_s = 0.0;

    bool ok() const { return status == ExecStatus::ok; }

    static ExecutionResponse make_ok(NormalizedTable table, double duration) {
        ExecutionResponse r;
        r.status = ExecStatus::ok;
        r.rows = std::move(table);
        r.duration_s = duration;
        return r;
    }
    static ExecutionResponse make_syntax_error(std::string message, double duration) {
        ExecutionResponse r;
        r.status = ExecStatus::syntax_error;
        r.error_text = std::move(message);
        r.duration_s = duration;
        return r;
    }
    static ExecutionResponse make_timeout(double duration) {
        ExecutionResponse r;
        r.status = ExecStatus::timeout;
        r.duration_s = duration;
        return r;
    }
};

// ---------------------------------------------------------------------------
// Validator feedback
// ---------------------------------------------------------------------------

enum class FeedbackKind { selection, condition };

inline const char* to_string(FeedbackKind k) {
    return k == FeedbackKind::selection ? "selection" : "condition";
}

enum class Verdict { correct, incorrect, unparseable };

inline const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::correct: return "correct";
        case Verdict::incorrect: return "incorrect";
        case Verdict::unparseable: return "unparseable";
    }
    return "?";
}

struct Feedback {
    FeedbackKind kind = FeedbackKind::selection;
    std::string raw_text;  // full agent completion; empty for gate-skipped checks
    Verdict verdict = Verdict::correct;

    bool indicates_error() const { return verdict == Verdict::incorrect; }
};

// ---------------------------------------------------------------------------
// Schema prompt rendering
// ---------------------------------------------------------------------------

/// Renders the canonical schema prompt: one CREATE-TABLE block per table in
/// snapshot order, matched values as trailing column comments, foreign-key
/// lines, then the evidence block under its fixed header. Pure: identical
/// inputs give byte-identical output.
inline std::string render_schema_prompt(const SchemaSnapshot& snapshot,
                                        const MatchedValues& matched,
                                        const std::optional<std::string>& evidence = std::nullopt) {
    for (const auto& cm : matched.columns) {
        if (!snapshot.has_column(cm.column))
            throw ValidationError("matched values reference unknown column: " + cm.column.qualified());
    }

    std::string out;
    for (const auto& table : snapshot.tables) {
        out += "CREATE TABLE " + table.name + " (\n";
        for (std::size_t i = 0; i < table.columns.size(); ++i) {
            const auto& col = table.columns[i];
            out += "  " + col.name;
            if (!col.declared_type.empty()) out += " " + col.declared_type;
            if (col.is_primary_key) out += " PRIMARY KEY";
            if (i + 1 < table.columns.size()) out += ",";
            const ColumnMatches* cm = matched.find({table.name, col.name});
            if (cm && !cm->values.empty()) {
                out += " -- values:";
                for (std::size_t v = 0; v < cm->values.size(); ++v) {
                    out += v == 0 ? " " : ", ";
                    out += cm->values[v].value.rendered();
                }
            }
            out += "\n";
        }
        out += ");\n";
    }
    if (!snapshot.foreign_keys.empty()) {
        out += "Foreign keys:\n";
        for (const auto& fk : snapshot.foreign_keys)
            out += "  " + fk.from.qualified() + " -> " + fk.to.qualified() + "\n";
    }
    if (evidence && !evidence->empty()) {
        out += "External knowledge:\n" + *evidence + "\n";
    }
    return out;
}

}  // namespace mats
