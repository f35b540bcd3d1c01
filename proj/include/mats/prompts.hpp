#pragma once

#include <map>
#include <string>

#include "mats/core.hpp"

namespace mats {

/// Bump when any template text changes; fixtures are keyed on prompt digests,
/// so recorded fixtures pin the version they were made against.
inline constexpr const char* kTemplateVersion = "mats-templates-v1";

namespace prompts {

inline constexpr const char* kPlanner =
    "You are a SQL expert. Given a database schema and a question, think through a short plan\n"
    "and then write one SQLite query answering the question.\n"
    "\n"
    "{{schema}}"
    "Question: {{question}}\n"
    "\n"
    "Respond with your plan, then the final query in a ```sql fenced block.\n";

inline constexpr const char* kValidatorSelection =
    "You are reviewing the column selection of a SQLite query: does it return the columns the\n"
    "question asks for, no more and no fewer?\n"
    "\n"
    "{{schema}}"
    "Question: {{question}}\n"
    "\n"
    "SQL:\n"
    "```sql\n"
    "{{sql}}\n"
    "```\n"
    "\n"
    "{{response}}"
    "\n"
    "Explain briefly, then end with exactly one line: \"The SQL is correct.\" or \"The SQL is incorrect.\"\n";

inline constexpr const char* kValidatorCondition =
    "You are reviewing the filter conditions of a SQLite query. If the execution result contains\n"
    "None or an empty set, that likely indicates an incorrect condition; consider whether a\n"
    "condition such as \"column A IS NOT NULL\" is missing, or whether a comparison uses a wrong\n"
    "value.\n"
    "\n"
    "{{schema}}"
    "Question: {{question}}\n"
    "\n"
    "SQL:\n"
    "```sql\n"
    "{{sql}}\n"
    "```\n"
    "\n"
    "{{response}}"
    "\n"
    "Explain briefly, then end with exactly one line: \"The SQL is correct.\" or \"The SQL is incorrect.\"\n";

inline constexpr const char* kFix =
    "A SQLite query for the question below was flagged as incorrect. Rewrite it so it answers\n"
    "the question.\n"
    "\n"
    "{{schema}}"
    "Question: {{question}}\n"
    "\n"
    "Original SQL:\n"
    "```sql\n"
    "{{sql}}\n"
    "```\n"
    "\n"
    "{{response}}"
    "\n"
    "Feedback:\n"
    "{{feedback}}"
    "\n"
    "Respond with the corrected query in a ```sql fenced block.\n";

inline constexpr const char* kSelection =
    "Several candidate SQLite queries attempt to answer the same question. Using their execution\n"
    "results, pick the candidate that answers it best.\n"
    "\n"
    "{{schema}}"
    "Question: {{question}}\n"
    "\n"
    "{{candidates}}"
    "\n"
    "Reply with the number of the best candidate (1-{{count}}), or \"none\" if no candidate is correct.\n";

inline constexpr const char* kFeedbackEditor =
    "Below is draft feedback about a SQLite query. Rewrite it so it is specific and actionable,\n"
    "keeping a final verdict line.\n"
    "\n"
    "Question: {{question}}\n"
    "\n"
    "SQL:\n"
    "```sql\n"
    "{{sql}}\n"
    "```\n"
    "\n"
    "{{response}}"
    "\n"
    "Draft feedback:\n"
    "{{draft}}\n"
    "\n"
    "Reply with the improved feedback, ending with \"The SQL is correct.\" or \"The SQL is incorrect.\"\n";

}  // namespace prompts

/// Substitutes every {{key}} in `tmpl` from `values`. An unknown or leftover
/// placeholder is an error so template drift fails loudly.
inline std::string render_template(const std::string& tmpl,
                                   const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        std::size_t open = tmpl.find("{{", pos);
        if (open == std::string::npos) {
            out.append(tmpl, pos, std::string::npos);
            break;
        }
        out.append(tmpl, pos, open - pos);
        std::size_t close = tmpl.find("}}", open + 2);
        if (close == std::string::npos)
            throw ValidationError("template has an unterminated placeholder");
        std::string key = tmpl.substr(open + 2, close - open - 2);
        auto it = values.find(key);
        if (it == values.end())
            throw ValidationError("template placeholder '" + key + "' has no value");
        out += it->second;
        pos = close + 2;
    }
    return out;
}

namespace detail {

inline std::string render_prompt_value(const Value& v) {
    if (std::holds_alternative<std::monostate>(v)) return "None";
    if (const auto* i = std::get_if<std::int64_t>(&v)) return format_int(*i);
    if (const auto* d = std::get_if<double>(&v)) return format_double(*d);
    if (const auto* b = std::get_if<BlobDigest>(&v)) return "<blob:" + b->hex + ">";
    const std::string& s = std::get<std::string>(v);
    std::string out = "'";
    for (char c : s) {
        if (c == '\'' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    out += "'";
    return out;
}

}  // namespace detail

/// Prompt rendering of an execution outcome. Rows print as Python-style
/// tuples with None for null so the condition heuristic has something to
/// look at; output is truncated to `max_rows` x `max_cols` with ellipses.
inline std::string render_response_block(const ExecutionResponse& response,
                                         std::size_t max_rows = 20, std::size_t max_cols = 10) {
    if (response.status == ExecStatus::timeout)
        return "Execution result: timed out.\n";
    if (response.status == ExecStatus::syntax_error)
        return "Execution result: error: " + response.error_text + "\n";
    const NormalizedTable& table = response.rows;
    if (table.rows.empty()) return "Execution result: empty set\n";

    std::string out = "Execution result (" + std::to_string(table.rows.size()) + " row" +
                      (table.rows.size() == 1 ? "" : "s") + "):\n";
    const std::size_t shown = std::min(max_rows, table.rows.size());
    for (std::size_t r = 0; r < shown; ++r) {
        const Row& row = table.rows[r];
        out += "(";
        const std::size_t cols = std::min(max_cols, row.size());
        for (std::size_t c = 0; c < cols; ++c) {
            if (c) out += ", ";
            out += detail::render_prompt_value(row[c]);
        }
        if (row.size() > cols) out += ", ...";
        if (row.size() == 1) out += ",";
        out += ")\n";
    }
    if (table.rows.size() > shown)
        out += "... (" + std::to_string(table.rows.size() - shown) + " more rows)\n";
    return out;
}

}  // namespace mats
