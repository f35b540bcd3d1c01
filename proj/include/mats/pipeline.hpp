#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mats/agents.hpp"
#include "mats/backend.hpp"
#include "mats/core.hpp"
#include "mats/dataset.hpp"
#include "mats/executor.hpp"
#include "mats/retrieval.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
    int planner_k = 10;             // candidate count K
    double planner_temperature = 1.0;
    std::size_t value_match_k = 2;
    RankerBudget budget;
    std::size_t selection_subset_size = 5;
    double exec_timeout_s = 30.0;
    std::size_t max_catalog_values = 2000;
    std::size_t max_result_rows_stored = 100;
    int sample_parallelism = 1;
    int candidate_parallelism = 1;
    // Optional precomputed ranker scores replacing the lexical ranker
    // (single-database runs; keys are table names).
    std::string scores_file;
};

/// One backend handle per agent role. `advanced` is optional and only used
/// by preference-data construction.
struct Backends {
    std::shared_ptr<Backend> planner;
    std::shared_ptr<Backend> validator;
    std::shared_ptr<Backend> fixer;
    std::shared_ptr<Backend> selector;
    std::shared_ptr<Backend> advanced;

    void require_core() const {
        if (!planner || !validator || !fixer || !selector)
            throw SetupError("pipeline needs planner, validator, fixer and selector backends");
    }
};

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct SchemaStats {
    std::size_t tables_before = 0;
    std::size_t tables_after = 0;
    std::size_t columns_before = 0;
    std::size_t columns_after = 0;
};

struct CandidateReport {
    SqlCandidate candidate;
    ExecutionResponse response;
    std::vector<Feedback> feedbacks;
    std::optional<SqlCandidate> fixed;
    std::optional<ExecutionResponse> fixed_response;

    const std::string& final_sql() const { return fixed ? fixed->sql : candidate.sql; }
    const ExecutionResponse& final_response() const {
        return fixed_response ? *fixed_response : response;
    }
};

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

struct PipelineResult {
    std::string sample_id;
    std::string db_id;
    std::optional<std::string> failure;
    SchemaStats schema;
    std::vector<CandidateReport> candidates;
    std::optional<std::size_t> selected;   // index into candidates
    bool selection_fallback = false;       // true when "none" fell back to greedy
    std::string final_sql;
    ExecutionResponse final_response;
    std::optional<bool> ex_match;          // present iff the sample carries gold SQL
    std::vector<StageTiming> timings;      // wall-clock; kept out of the results file
    double wall_s = 0.0;
};

inline nlohmann::ordered_json to_json(const ExecutionResponse& response,
                                      std::size_t max_rows_stored) {
    nlohmann::ordered_json doc;
    doc["status"] = to_string(response.status);
    if (!response.ok()) {
        doc["error"] = response.error_text;
        return doc;
    }
    doc["columns"] = response.rows.column_count;
    doc["row_count"] = response.rows.rows.size();
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    const std::size_t shown = std::min(max_rows_stored, response.rows.rows.size());
    for (std::size_t r = 0; r < shown; ++r) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (const Value& v : response.rows.rows[r]) {
            if (std::holds_alternative<std::monostate>(v)) row.push_back(nullptr);
            else if (const auto* i = std::get_if<std::int64_t>(&v)) row.push_back(*i);
            else if (const auto* d = std::get_if<double>(&v)) row.push_back(*d);
            else if (const auto* b = std::get_if<BlobDigest>(&v))
                row.push_back(nlohmann::ordered_json{{"blob", b->hex}});
            else row.push_back(std::get<std::string>(v));
        }
        rows.push_back(std::move(row));
    }
    doc["rows"] = std::move(rows);
    if (shown < response.rows.rows.size()) doc["rows_truncated"] = true;
    return doc;
}

/// Serializes one result. Timings are nondeterministic, so they stay out of
/// the default form; reruns against identical fixtures must produce
/// byte-identical files.
inline nlohmann::ordered_json to_json(const PipelineResult& result, bool include_timings = false,
                                      std::size_t max_rows_stored = 100) {
    nlohmann::ordered_json doc;
    doc["result_version"] = 1;
    doc["sample_id"] = result.sample_id;
    doc["db_id"] = result.db_id;
    if (result.failure) doc["failure"] = *result.failure;
    doc["schema"] = {{"tables_before", result.schema.tables_before},
                     {"tables_after", result.schema.tables_after},
                     {"columns_before", result.schema.columns_before},
                     {"columns_after", result.schema.columns_after}};
    nlohmann::ordered_json candidates = nlohmann::ordered_json::array();
    for (const CandidateReport& report : result.candidates) {
        nlohmann::ordered_json c;
        c["plan"] = report.candidate.plan;
        c["sql"] = report.candidate.sql;
        c["origin"] = to_string(report.candidate.origin);
        c["temperature"] = report.candidate.temperature;
        c["response"] = to_json(report.response, max_rows_stored);
        nlohmann::ordered_json feedbacks = nlohmann::ordered_json::array();
        for (const Feedback& f : report.feedbacks) {
            feedbacks.push_back({{"kind", f.kind == FeedbackKind::selection ? "selection" : "condition"},
                                 {"verdict", to_string(f.verdict)},
                                 {"text", f.raw_text}});
        }
        c["feedbacks"] = std::move(feedbacks);
        if (report.fixed) {
            c["fixed"] = {{"sql", report.fixed->sql}, {"plan", report.fixed->plan}};
            c["fixed_response"] = to_json(*report.fixed_response, max_rows_stored);
        }
        candidates.push_back(std::move(c));
    }
    doc["candidates"] = std::move(candidates);
    if (result.selected) doc["selected"] = *result.selected;
    else doc["selected"] = nullptr;
    doc["selection_fallback"] = result.selection_fallback;
    doc["final_sql"] = result.final_sql;
    doc["final_response"] = to_json(result.final_response, max_rows_stored);
    if (result.ex_match) doc["ex_match"] = *result.ex_match;
    if (include_timings) {
        nlohmann::ordered_json timings = nlohmann::ordered_json::object();
        for (const StageTiming& t : result.timings) timings[t.stage] = t.seconds;
        doc["timings"] = std::move(timings);
        doc["wall_s"] = result.wall_s;
    }
    return doc;
}

// ---------------------------------------------------------------------------
// Database resolution and context construction
// ---------------------------------------------------------------------------

/// Resolves a database file under the benchmark layout
/// `<root>/<db_id>/<db_id>.sqlite`, falling back to the flat
/// `<root>/<db_id>.sqlite`.
inline std::string db_path_for(const std::string& db_root, const std::string& db_id) {
    namespace fs = std::filesystem;
    fs::path nested = fs::path(db_root) / db_id / (db_id + ".sqlite");
    if (fs::exists(nested)) return nested.string();
    fs::path flat = fs::path(db_root) / (db_id + ".sqlite");
    if (fs::exists(flat)) return flat.string();
    throw SetupError("no database for '" + db_id + "' under " + db_root + " (tried " +
                     nested.string() + " and " + flat.string() + ")");
}

/// Schema-insight stage as a unit: introspect, catalog values, match against
/// the question, rank, prune, and render the schema prompt.
inline AgentContext build_agent_context(const QuestionSample& sample, const PipelineConfig& config,
                                        const std::string& db_path,
                                        SchemaStats* stats_out = nullptr) {
    SchemaSnapshot schema = introspect_schema(db_path);
    ValueCatalog catalog = build_value_catalog(db_path, schema, config.max_catalog_values);
    MatchedValues matched = match_values(sample.question, catalog, config.value_match_k);
    ElementScores scores = config.scores_file.empty()
                               ? rank_elements(sample.question, schema, matched)
                               : load_scores_file(config.scores_file);
    SchemaSnapshot pruned = filter_schema(schema, scores, config.budget);

    // Matches on pruned-away columns must not leak into the prompt.
    MatchedValues kept;
    for (const ColumnMatches& cm : matched.columns)
        if (pruned.has_column(cm.column) && !cm.values.empty()) kept.columns.push_back(cm);

    if (stats_out) {
        stats_out->tables_before = schema.tables.size();
        stats_out->tables_after = pruned.tables.size();
        stats_out->columns_before = schema.column_count();
        stats_out->columns_after = pruned.column_count();
    }
    AgentContext ctx;
    ctx.sample = sample;
    ctx.db_path = db_path;
    ctx.schema_prompt = render_schema_prompt(pruned, kept, sample.evidence);
    return ctx;
}

// ---------------------------------------------------------------------------
// Single-sample run
// ---------------------------------------------------------------------------

namespace detail {

class StageClock {
public:
    explicit StageClock(std::vector<StageTiming>& sink) : sink_(sink) {}
    void mark(const std::string& stage) {
        auto now = std::chrono::steady_clock::now();
        sink_.push_back({stage, std::chrono::duration<double>(now - last_).count()});
        last_ = now;
    }

private:
    std::vector<StageTiming>& sink_;
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

/// Runs fn(0..n-1) across up to `degree` threads. Results must be written to
/// index-addressed slots by the caller, keeping merges deterministic.
inline void parallel_for(std::size_t n, int degree, const std::function<void(std::size_t)>& fn) {
    if (degree <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const std::size_t worker_count = std::min<std::size_t>(static_cast<std::size_t>(degree), n);
    std::mutex error_mutex;
    std::exception_ptr first_error;
    for (std::size_t w = 0; w < worker_count; ++w) {
        workers.emplace_back([&] {
            while (true) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline PipelineResult run_sample_impl(const QuestionSample& sample, const PipelineConfig& config,
                                      const Backends& backends, const std::string& db_root) {
    PipelineResult result;
    result.sample_id = sample.id;
    result.db_id = sample.db_id;
    StageClock clock(result.timings);

    const std::string db_path = db_path_for(db_root, sample.db_id);
    AgentContext ctx = build_agent_context(sample, config, db_path, &result.schema);
    clock.mark("schema_insight");

    std::vector<SqlCandidate> candidates =
        plan_candidates(*backends.planner, ctx, config.planner_k, config.planner_temperature);
    clock.mark("plan");

    result.candidates.resize(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        result.candidates[i].candidate = candidates[i];
    parallel_for(candidates.size(), config.candidate_parallelism, [&](std::size_t i) {
        result.candidates[i].response =
            execute_sql(ctx.db_path, candidates[i].sql, config.exec_timeout_s);
    });
    clock.mark("execute");

    parallel_for(candidates.size(), config.candidate_parallelism, [&](std::size_t i) {
        CandidateReport& report = result.candidates[i];
        report.feedbacks.push_back(validate(*backends.validator, FeedbackKind::selection, ctx,
                                            report.candidate, report.response));
        report.feedbacks.push_back(validate(*backends.validator, FeedbackKind::condition, ctx,
                                            report.candidate, report.response));
    });
    clock.mark("validate");

    for (CandidateReport& report : result.candidates) {
        bool any_error = false;
        for (const Feedback& f : report.feedbacks) any_error = any_error || f.indicates_error();
        if (!any_error) continue;
        std::optional<SqlCandidate> fixed =
            fix_candidate(*backends.fixer, ctx, report.candidate, report.response, report.feedbacks);
        if (!fixed) continue;
        report.fixed_response = execute_sql(ctx.db_path, fixed->sql, config.exec_timeout_s);
        report.fixed = std::move(fixed);
    }
    clock.mark("fix");

    std::vector<SqlCandidate> final_versions;
    std::vector<ExecutionResponse> final_responses;
    final_versions.reserve(result.candidates.size());
    for (const CandidateReport& report : result.candidates) {
        SqlCandidate v = report.fixed ? *report.fixed : report.candidate;
        if (report.fixed) v.origin = CandidateOrigin::fixed;
        final_versions.push_back(std::move(v));
        final_responses.push_back(report.final_response());
    }
    const std::vector<std::size_t> kept = dedup_candidates(final_versions);
    std::vector<SqlCandidate> pool;
    std::vector<ExecutionResponse> pool_responses;
    for (std::size_t idx : kept) {
        pool.push_back(final_versions[idx]);
        pool_responses.push_back(final_responses[idx]);
    }

    std::optional<std::size_t> winner =
        select_best(*backends.selector, ctx, pool, pool_responses, config.selection_subset_size);
    clock.mark("select");

    if (winner) {
        result.selected = kept[*winner];
    } else {
        // "none" falls back to the greedy candidate's latest version.
        result.selection_fallback = true;
        std::size_t greedy_index = 0;
        for (std::size_t i = 0; i < result.candidates.size(); ++i)
            if (result.candidates[i].candidate.origin == CandidateOrigin::greedy) {
                greedy_index = i;
                break;
            }
        result.selected = greedy_index;
    }
    const CandidateReport& chosen = result.candidates[*result.selected];
    result.final_sql = chosen.final_sql();
    result.final_response = chosen.final_response();

    if (sample.gold_sql) {
        ExecutionResponse gold = execute_sql(ctx.db_path, *sample.gold_sql, config.exec_timeout_s);
        const bool order_sensitive = classify_sql(*sample.gold_sql).has_order_by_outer;
        result.ex_match = responses_match(gold, result.final_response, order_sensitive);
    }
    clock.mark("score");
    return result;
}

}  // namespace detail

/// Full single-sample pipeline: schema insight, planning, execution,
/// validation, one fix pass, dedup, tournament selection, scoring. Failures
/// are recorded in the result rather than thrown so a benchmark keeps going.
inline PipelineResult run_sample(const QuestionSample& sample, const PipelineConfig& config,
                                 const Backends& backends, const std::string& db_root) {
    backends.require_core();
    auto start = std::chrono::steady_clock::now();
    PipelineResult result;
    try {
        result = detail::run_sample_impl(sample, config, backends, db_root);
    } catch (const std::exception& e) {
        result.sample_id = sample.id;
        result.db_id = sample.db_id;
        result.failure = e.what();
        result.final_response =
            ExecutionResponse::make_syntax_error("sample failed: " + std::string(e.what()), 0.0);
        if (sample.gold_sql) result.ex_match = false;
        warn("sample " + sample.id + " failed: " + e.what());
    }
    result.wall_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

// ---------------------------------------------------------------------------
// Benchmark run
// ---------------------------------------------------------------------------

struct BenchmarkSummary {
    std::size_t total = 0;
    std::size_t failures = 0;
    std::size_t with_gold = 0;
    std::size_t ex_matches = 0;
    double total_wall_s = 0.0;

    std::optional<double> ex_percent() const {
        if (with_gold == 0) return std::nullopt;
        return 100.0 * static_cast<double>(ex_matches) / static_cast<double>(with_gold);
    }
    double avg_seconds_per_sample() const {
        return total == 0 ? 0.0 : total_wall_s / static_cast<double>(total);
    }
};

/// Runs every sample, invoking `on_result` in sample order as results become
/// available (so callers can persist incrementally even with parallelism).
inline BenchmarkSummary run_benchmark(const std::vector<QuestionSample>& samples,
                                      const PipelineConfig& config, const Backends& backends,
                                      const std::string& db_root,
                                      const std::function<void(const PipelineResult&)>& on_result) {
    backends.require_core();
    BenchmarkSummary summary;
    summary.total = samples.size();

    std::vector<std::optional<PipelineResult>> results(samples.size());
    std::mutex mutex;
    std::condition_variable ready;
    std::size_t emitted = 0;

    auto account = [&](const PipelineResult& r) {
        if (r.failure) ++summary.failures;
        if (r.ex_match) {
            ++summary.with_gold;
            if (*r.ex_match) ++summary.ex_matches;
        }
        summary.total_wall_s += r.wall_s;
        if (on_result) on_result(r);
    };

    if (config.sample_parallelism <= 1) {
        for (const QuestionSample& sample : samples)
            account(run_sample(sample, config, backends, db_root));
        return summary;
    }

    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const std::size_t worker_count =
        std::min<std::size_t>(static_cast<std::size_t>(config.sample_parallelism), samples.size());
    for (std::size_t w = 0; w < worker_count; ++w) {
        workers.emplace_back([&] {
            while (true) {
                std::size_t i = next.fetch_add(1);
                if (i >= samples.size()) return;
                PipelineResult r = run_sample(samples[i], config, backends, db_root);
                {
                    std::lock_guard<std::mutex> lock(mutex);
                    results[i] = std::move(r);
                }
                ready.notify_all();
            }
        });
    }
    {
        std::unique_lock<std::mutex> lock(mutex);
        while (emitted < samples.size()) {
            ready.wait(lock, [&] { return results[emitted].has_value(); });
            while (emitted < samples.size() && results[emitted]) {
                PipelineResult r = std::move(*results[emitted]);
                results[emitted].reset();
                ++emitted;
                lock.unlock();
                account(r);
                lock.lock();
            }
        }
    }
    for (auto& t : workers) t.join();
    return summary;
}

}  // namespace mats
