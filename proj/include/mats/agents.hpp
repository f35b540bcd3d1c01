#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "mats/backend.hpp"
#include "mats/core.hpp"
#include "mats/executor.hpp"
#include "mats/prompts.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Completion parsing
// ---------------------------------------------------------------------------

struct ExtractedSql {
    std::string plan;  // free text preceding the query
    std::string sql;
};

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline bool starts_with_word(std::string_view text, std::string_view word) {
    if (text.size() < word.size()) return false;
    for (std::size_t i = 0; i < word.size(); ++i)
        if (std::tolower(static_cast<unsigned char>(text[i])) !=
            std::tolower(static_cast<unsigned char>(word[i])))
            return false;
    if (text.size() > word.size()) {
        char next = text[word.size()];
        if (std::isalnum(static_cast<unsigned char>(next)) || next == '_') return false;
    }
    return true;
}

}  // namespace detail

/// Pulls the SQL out of an agent completion. Prefers the last ```sql fenced
/// block; otherwise the completion's last line starting with SELECT or WITH
/// opens the query and everything from there to the end is taken. Text before
/// the query is kept as the plan.
inline std::optional<ExtractedSql> extract_sql(const std::string& completion) {
    // Last ```sql fence, case-insensitive.
    std::string lower = lowercase(completion);
    std::size_t fence = lower.rfind("```sql");
    if (fence != std::string::npos) {
        std::size_t body = completion.find('\n', fence);
        if (body != std::string::npos) {
            ++body;
            std::size_t close = completion.find("```", body);
            std::string sql = detail::trim(completion.substr(
                body, close == std::string::npos ? std::string::npos : close - body));
            if (!sql.empty())
                return ExtractedSql{detail::trim(completion.substr(0, fence)), std::move(sql)};
        }
    }
    // Fallback: last line opening with SELECT or WITH.
    std::size_t best = std::string::npos;
    std::size_t pos = 0;
    while (pos <= completion.size()) {
        std::size_t eol = completion.find('\n', pos);
        std::size_t len = (eol == std::string::npos ? completion.size() : eol) - pos;
        std::string_view line(completion.data() + pos, len);
        std::size_t indent = 0;
        while (indent < line.size() && std::isspace(static_cast<unsigned char>(line[indent])))
            ++indent;
        std::string_view stripped = line.substr(indent);
        if (detail::starts_with_word(stripped, "select") || detail::starts_with_word(stripped, "with"))
            best = pos + indent;
        if (eol == std::string::npos) break;
        pos = eol + 1;
    }
    if (best == std::string::npos) return std::nullopt;
    std::string sql = detail::trim(completion.substr(best));
    // A stray closing fence after the statement is not part of the SQL.
    if (std::size_t close = sql.rfind("```"); close != std::string::npos)
        sql = detail::trim(sql.substr(0, close));
    if (sql.empty()) return std::nullopt;
    return ExtractedSql{detail::trim(completion.substr(0, best)), std::move(sql)};
}

/// Reads the validator's verdict: the last line matching "the sql is
/// correct/incorrect" (case-insensitive) wins. Anything else is unparseable.
inline Verdict parse_verdict(const std::string& completion) {
    static const std::regex pattern("the\\s+sql\\s+is\\s+(correct|incorrect)",
                                    std::regex::icase);
    auto begin = std::sregex_iterator(completion.begin(), completion.end(), pattern);
    auto end = std::sregex_iterator();
    Verdict verdict = Verdict::unparseable;
    for (auto it = begin; it != end; ++it) {
        std::string word = lowercase((*it)[1].str());
        verdict = word == "correct" ? Verdict::correct : Verdict::incorrect;
    }
    return verdict;
}

/// Canonical SQL text for deduplication: lowercase outside single-quoted
/// literals, whitespace runs collapsed, trailing semicolons dropped.
inline std::string normalize_sql(const std::string& sql) {
    std::string out;
    out.reserve(sql.size());
    bool in_string = false;
    bool pending_space = false;
    for (std::size_t i = 0; i < sql.size(); ++i) {
        char c = sql[i];
        if (in_string) {
            out.push_back(c);
            if (c == '\'') {
                if (i + 1 < sql.size() && sql[i + 1] == '\'') {
                    out.push_back('\'');
                    ++i;
                } else {
                    in_string = false;
                }
            }
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = true;
            continue;
        }
        if (pending_space && !out.empty()) out.push_back(' ');
        pending_space = false;
        if (c == '\'') {
            in_string = true;
            out.push_back(c);
            continue;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    while (!out.empty() && (out.back() == ';' || out.back() == ' ')) out.pop_back();
    return out;
}

/// Indices of candidates surviving dedup by normalized SQL; the first
/// occurrence of each query text is kept, so with the greedy candidate at
/// index 0 it always survives.
inline std::vector<std::size_t> dedup_candidates(const std::vector<SqlCandidate>& candidates) {
    std::vector<std::size_t> kept;
    std::vector<std::string> seen;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        std::string key = normalize_sql(candidates[i].sql);
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
        seen.push_back(std::move(key));
        kept.push_back(i);
    }
    return kept;
}

// ---------------------------------------------------------------------------
// Agent context and prompts
// ---------------------------------------------------------------------------

/// Everything the agents see about one sample: the question, the rendered
/// (post-filter) schema text, and where the database lives.
struct AgentContext {
    QuestionSample sample;
    std::string schema_prompt;
    std::string db_path;
};

inline std::string build_planner_prompt(const AgentContext& ctx) {
    return render_template(prompts::kPlanner,
                           {{"schema", ctx.schema_prompt}, {"question", ctx.sample.question}});
}

inline std::string build_validator_prompt(FeedbackKind kind, const AgentContext& ctx,
                                          const std::string& sql,
                                          const ExecutionResponse& response) {
    const char* tmpl =
        kind == FeedbackKind::selection ? prompts::kValidatorSelection : prompts::kValidatorCondition;
    return render_template(tmpl, {{"schema", ctx.schema_prompt},
                                  {"question", ctx.sample.question},
                                  {"sql", sql},
                                  {"response", render_response_block(response)}});
}

inline std::string build_fix_prompt(const AgentContext& ctx, const std::string& sql,
                                    const ExecutionResponse& response,
                                    const std::vector<std::string>& error_feedback) {
    std::string feedback;
    for (const std::string& f : error_feedback) {
        feedback += "- " + f;
        if (feedback.back() != '\n') feedback += "\n";
    }
    if (feedback.empty()) feedback = "- The query result looks wrong.\n";
    return render_template(prompts::kFix, {{"schema", ctx.schema_prompt},
                                           {"question", ctx.sample.question},
                                           {"sql", sql},
                                           {"response", render_response_block(response)},
                                           {"feedback", feedback}});
}

inline std::string build_selection_prompt(const AgentContext& ctx,
                                          const std::vector<std::string>& sqls,
                                          const std::vector<ExecutionResponse>& responses) {
    if (sqls.size() != responses.size())
        throw ValidationError("selection prompt: candidates and responses must align");
    std::string block;
    for (std::size_t i = 0; i < sqls.size(); ++i) {
        block += "Candidate " + std::to_string(i + 1) + ":\n```sql\n" + sqls[i] + "\n```\n" +
                 render_response_block(responses[i]) + "\n";
    }
    return render_template(prompts::kSelection, {{"schema", ctx.schema_prompt},
                                                 {"question", ctx.sample.question},
                                                 {"candidates", block},
                                                 {"count", std::to_string(sqls.size())}});
}

inline std::string build_feedback_editor_prompt(const AgentContext& ctx, const std::string& sql,
                                                const ExecutionResponse& response,
                                                const std::string& draft) {
    return render_template(prompts::kFeedbackEditor,
                           {{"question", ctx.sample.question},
                            {"sql", sql},
                            {"response", render_response_block(response)},
                            {"draft", draft}});
}

// ---------------------------------------------------------------------------
// Planner
// ---------------------------------------------------------------------------

/// One greedy completion plus K-1 multinomial samples at temperature T, each
/// parsed into (plan, sql). Completions without extractable SQL are dropped,
/// so fewer than K candidates can come back; zero extractable is an error.
inline std::vector<SqlCandidate> plan_candidates(Backend& planner, const AgentContext& ctx, int K,
                                                 double T) {
    if (K < 1) throw ValidationError("plan_candidates: K must be >= 1");
    const std::string prompt = build_planner_prompt(ctx);

    std::vector<std::pair<std::string, CandidateOrigin>> completions;
    GenerationRequest greedy{prompt, 1, 0.0};
    for (std::string& text : planner.complete(greedy).completions)
        completions.emplace_back(std::move(text), CandidateOrigin::greedy);
    if (K > 1) {
        GenerationRequest sampled{prompt, K - 1, T};
        for (std::string& text : planner.complete(sampled).completions)
            completions.emplace_back(std::move(text), CandidateOrigin::sampled);
    }

    std::vector<SqlCandidate> candidates;
    for (auto& [text, origin] : completions) {
        std::optional<ExtractedSql> extracted = extract_sql(text);
        if (!extracted) {
            warn("planner completion without extractable SQL dropped (sample " + ctx.sample.id + ")");
            continue;
        }
        SqlCandidate c;
        c.plan = std::move(extracted->plan);
        c.sql = std::move(extracted->sql);
        c.origin = origin;
        c.temperature = origin == CandidateOrigin::greedy ? 0.0 : T;
        candidates.push_back(std::move(c));
    }
    if (candidates.empty())
        throw MatsError("no extractable SQL in any planner completion for sample " + ctx.sample.id);
    return candidates;
}

// ---------------------------------------------------------------------------
// Validators
// ---------------------------------------------------------------------------

/// Runs one validator over a candidate and its execution response. The
/// selection validator is gated: queries using min/max/count/avg/sum, the
/// division operator or CASE WHEN legitimately reshape output columns, so
/// they pass without any backend call. An unparseable verdict is kept as its
/// own state; downstream treats it like "correct" (no fix on parser noise).
inline Feedback validate(Backend& validator, FeedbackKind kind, const AgentContext& ctx,
                         const SqlCandidate& candidate, const ExecutionResponse& response) {
    if (kind == FeedbackKind::selection && classify_sql(candidate.sql).any_gated_operation())
        return Feedback{kind, "", Verdict::correct};

    const std::string prompt = build_validator_prompt(kind, ctx, candidate.sql, response);
    GenerationRequest request{prompt, 1, 0.0};
    GenerationResult result = validator.complete(request);
    Feedback feedback{kind, result.completions.front(), parse_verdict(result.completions.front())};
    if (feedback.verdict == Verdict::unparseable)
        warn("validator verdict unparseable (sample " + ctx.sample.id + ", " +
             (kind == FeedbackKind::selection ? "selection" : "condition") + ")");
    return feedback;
}

// ---------------------------------------------------------------------------
// Fix agent
// ---------------------------------------------------------------------------

/// Asks the fix agent to rewrite a flagged query. Only error-indicating
/// feedback texts reach the prompt. Returns the repaired candidate, or
/// nothing when the completion has no extractable SQL (the caller keeps the
/// original in that case).
inline std::optional<SqlCandidate> fix_candidate(Backend& fixer, const AgentContext& ctx,
                                                 const SqlCandidate& candidate,
                                                 const ExecutionResponse& response,
                                                 const std::vector<Feedback>& feedbacks) {
    std::vector<std::string> errors;
    for (const Feedback& f : feedbacks)
        if (f.indicates_error()) errors.push_back(f.raw_text);
    if (errors.empty())
        throw ValidationError("fix_candidate requires at least one error-indicating feedback");

    const std::string prompt = build_fix_prompt(ctx, candidate.sql, response, errors);
    GenerationRequest request{prompt, 1, 0.0};
    GenerationResult result = fixer.complete(request);
    std::optional<ExtractedSql> extracted = extract_sql(result.completions.front());
    if (!extracted) {
        warn("fix completion without extractable SQL (sample " + ctx.sample.id + ")");
        return std::nullopt;
    }
    SqlCandidate fixed;
    fixed.plan = std::move(extracted->plan);
    fixed.sql = std::move(extracted->sql);
    fixed.origin = CandidateOrigin::fixed;
    fixed.temperature = 0.0;
    return fixed;
}

// ---------------------------------------------------------------------------
// Selection agent
// ---------------------------------------------------------------------------

namespace detail {

/// Parses a selection reply: the last nonempty line carries either "none" or
/// a 1-based candidate number. Anything else is unparseable.
inline std::optional<std::optional<std::size_t>> parse_selection_answer(const std::string& text,
                                                                        std::size_t count) {
    std::string last;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        std::string line = trim(std::string_view(text).substr(
            pos, (eol == std::string::npos ? text.size() : eol) - pos));
        if (!line.empty()) last = line;
        if (eol == std::string::npos) break;
        pos = eol + 1;
    }
    if (last.empty()) return std::nullopt;
    std::string lower = lowercase(last);
    if (lower.find("none") != std::string::npos) return std::optional<std::size_t>{};
    std::size_t i = 0;
    while (i < lower.size() && !std::isdigit(static_cast<unsigned char>(lower[i]))) ++i;
    if (i == lower.size()) return std::nullopt;
    std::size_t value = 0;
    while (i < lower.size() && std::isdigit(static_cast<unsigned char>(lower[i]))) {
        value = value * 10 + static_cast<std::size_t>(lower[i] - '0');
        ++i;
    }
    if (value < 1 || value > count) return std::nullopt;
    return std::optional<std::size_t>{value - 1};
}

}  // namespace detail

/// Tournament selection: the candidate list is split into consecutive chunks
/// of at most `subset_size`; the agent picks a winner per chunk and winners
/// advance until one remains. A single-entry chunk advances without a call.
/// "none" removes a chunk from play; a round whose chunks all answer none
/// yields no selection. An unparseable answer falls back to the chunk's
/// lowest-index executable candidate.
inline std::optional<std::size_t> select_best(Backend& selector, const AgentContext& ctx,
                                              const std::vector<SqlCandidate>& candidates,
                                              const std::vector<ExecutionResponse>& responses,
                                              std::size_t subset_size = 5) {
    if (candidates.empty()) throw ValidationError("select_best: no candidates");
    if (candidates.size() != responses.size())
        throw ValidationError("select_best: candidates and responses must align");
    if (subset_size < 2) throw ValidationError("select_best: subset size must be >= 2");

    std::vector<std::size_t> alive(candidates.size());
    for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;

    while (alive.size() > 1) {
        std::vector<std::size_t> winners;
        for (std::size_t start = 0; start < alive.size(); start += subset_size) {
            const std::size_t end = std::min(start + subset_size, alive.size());
            std::vector<std::size_t> chunk(alive.begin() + static_cast<std::ptrdiff_t>(start),
                                           alive.begin() + static_cast<std::ptrdiff_t>(end));
            if (chunk.size() == 1) {
                winners.push_back(chunk.front());
                continue;
            }
            std::vector<std::string> sqls;
            std::vector<ExecutionResponse> resps;
            for (std::size_t idx : chunk) {
                sqls.push_back(candidates[idx].sql);
                resps.push_back(responses[idx]);
            }
            const std::string prompt = build_selection_prompt(ctx, sqls, resps);
            GenerationRequest request{prompt, 1, 0.0};
            GenerationResult result = selector.complete(request);
            auto answer = detail::parse_selection_answer(result.completions.front(), chunk.size());
            if (!answer) {
                // Unparseable: advance the chunk's first executable candidate.
                std::size_t fallback = chunk.front();
                for (std::size_t idx : chunk)
                    if (responses[idx].ok()) { fallback = idx; break; }
                warn("selection answer unparseable (sample " + ctx.sample.id +
                     "); advancing candidate " + std::to_string(fallback));
                winners.push_back(fallback);
                continue;
            }
            if (answer->has_value()) winners.push_back(chunk[**answer]);
        }
        if (winners.empty()) return std::nullopt;
        alive = std::move(winners);
    }
    return alive.front();
}

}  // namespace mats
