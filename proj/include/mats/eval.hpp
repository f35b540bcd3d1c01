#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mats/core.hpp"
#include "mats/executor.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// One evaluated sample: both queries, both execution outcomes, optional
/// wall-clock durations (present only for queries that ran ok) and the gold
/// query's lexical traits for breakdowns.
struct EvalRecord {
    std::string sample_id;
    std::string db_path;
    std::string gold_sql;
    std::string predicted_sql;
    ExecutionResponse gold_response;
    ExecutionResponse predicted_response;
    std::optional<double> gold_duration_s;
    std::optional<double> predicted_duration_s;
    SqlTraits gold_traits;
    std::optional<std::string> difficulty;
};

/// Executes gold and prediction once each and assembles the record.
inline EvalRecord make_eval_record(const QuestionSample& sample, const std::string& predicted_sql,
                                   const std::string& db_path, double timeout_s = 30.0) {
    if (!sample.gold_sql) throw ValidationError("evaluation needs gold SQL (sample " + sample.id + ")");
    EvalRecord record;
    record.sample_id = sample.id;
    record.db_path = db_path;
    record.gold_sql = *sample.gold_sql;
    record.predicted_sql = predicted_sql;
    record.gold_response = execute_sql(db_path, record.gold_sql, timeout_s);
    record.predicted_response = execute_sql(db_path, predicted_sql, timeout_s);
    if (record.gold_response.ok()) record.gold_duration_s = record.gold_response.duration_s;
    if (record.predicted_response.ok())
        record.predicted_duration_s = record.predicted_response.duration_s;
    record.gold_traits = classify_sql(record.gold_sql);
    record.difficulty = sample.difficulty;
    return record;
}

/// The match rule shared by all metrics: result equality under the order
/// sensitivity demanded by the gold query.
inline bool record_matches(const EvalRecord& record) {
    return responses_match(record.gold_response, record.predicted_response,
                           record.gold_traits.has_order_by_outer);
}

// ---------------------------------------------------------------------------
// Execution accuracy
// ---------------------------------------------------------------------------

/// EX percentage; empty input has no defined value.
inline std::optional<double> execution_accuracy(const std::vector<EvalRecord>& records) {
    if (records.empty()) return std::nullopt;
    std::size_t matches = 0;
    for (const EvalRecord& r : records)
        if (record_matches(r)) ++matches;
    return 100.0 * static_cast<double>(matches) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Test-suite accuracy
// ---------------------------------------------------------------------------

struct TsOutcome {
    std::size_t passed = 0;
    std::size_t failed = 0;
    std::size_t excluded = 0;  // gold failed on some variant

    std::optional<double> percent() const {
        const std::size_t denom = passed + failed;
        if (denom == 0) return std::nullopt;
        return 100.0 * static_cast<double>(passed) / static_cast<double>(denom);
    }
};

/// TS: a sample passes only when the prediction matches gold on every
/// variant database. A variant on which gold itself fails excludes the whole
/// sample from the denominator (a broken variant cannot indict the
/// prediction); a missing or failing variant database fails the sample.
inline TsOutcome test_suite_accuracy(const std::vector<EvalRecord>& records,
                                     const std::map<std::string, std::vector<std::string>>& variants,
                                     double timeout_s = 30.0) {
    TsOutcome outcome;
    for (const EvalRecord& record : records) {
        auto it = variants.find(record.sample_id);
        if (it == variants.end() || it->second.empty())
            throw ValidationError("test-suite accuracy: sample " + record.sample_id +
                                  " lists no variant databases");
        bool excluded = false;
        bool all_match = true;
        for (const std::string& variant_db : it->second) {
            ExecutionResponse gold;
            try {
                gold = execute_sql(variant_db, record.gold_sql, timeout_s);
            } catch (const SetupError& e) {
                warn("sample " + record.sample_id + ": variant unusable (" + e.what() + ")");
                all_match = false;
                break;
            }
            if (!gold.ok()) {
                warn("sample " + record.sample_id + ": gold fails on variant " + variant_db +
                     "; sample excluded");
                excluded = true;
                break;
            }
            ExecutionResponse predicted;
            try {
                predicted = execute_sql(variant_db, record.predicted_sql, timeout_s);
            } catch (const SetupError&) {
                all_match = false;
                break;
            }
            if (!responses_match(gold, predicted, record.gold_traits.has_order_by_outer)) {
                all_match = false;
                break;
            }
        }
        if (excluded) ++outcome.excluded;
        else if (all_match) ++outcome.passed;
        else ++outcome.failed;
    }
    return outcome;
}

// ---------------------------------------------------------------------------
// Valid efficiency score
// ---------------------------------------------------------------------------

/// Measures (db_path, sql, repeats) -> seconds. Injectable so scores can be
/// computed from controlled timings.
using TimingFn = std::function<double(const std::string&, const std::string&, int)>;

struct VesOutcome {
    double percent = 0.0;
    std::vector<double> per_sample;  // aligned with the input records
};

/// VES: per sample the score is 0 for a non-match and t_gold / t_pred for a
/// match, averaged and scaled to percent. Durations are clamped to one
/// microsecond so instant queries cannot divide by zero.
inline VesOutcome valid_efficiency_score(const std::vector<EvalRecord>& records, int repeats = 3,
                                         double timeout_s = 30.0, TimingFn timer = {}) {
    if (!timer) {
        timer = [timeout_s](const std::string& db_path, const std::string& sql, int reps) {
            return time_execution(db_path, sql, reps, timeout_s);
        };
    }
    VesOutcome outcome;
    outcome.per_sample.reserve(records.size());
    double sum = 0.0;
    for (const EvalRecord& record : records) {
        double score = 0.0;
        if (record_matches(record)) {
            try {
                const double t_gold =
                    std::max(timer(record.db_path, record.gold_sql, repeats), 1e-6);
                const double t_pred =
                    std::max(timer(record.db_path, record.predicted_sql, repeats), 1e-6);
                score = t_gold / t_pred;
            } catch (const MatsError& e) {
                warn("sample " + record.sample_id + ": timing failed (" + std::string(e.what()) +
                     "); scored 0");
                score = 0.0;
            }
        }
        outcome.per_sample.push_back(score);
        sum += score;
    }
    outcome.percent =
        records.empty() ? 0.0 : 100.0 * sum / static_cast<double>(records.size());
    return outcome;
}

// ---------------------------------------------------------------------------
// Breakdown report
// ---------------------------------------------------------------------------

struct BreakdownBucket {
    std::string axis;
    std::string bucket;
    std::size_t total = 0;
    std::size_t matches = 0;

    std::optional<double> ex_percent() const {
        if (total == 0) return std::nullopt;
        return 100.0 * static_cast<double>(matches) / static_cast<double>(total);
    }
};

struct BreakdownReport {
    std::vector<BreakdownBucket> buckets;

    const BreakdownBucket* find(const std::string& axis, const std::string& bucket) const {
        for (const auto& b : buckets)
            if (b.axis == axis && b.bucket == bucket) return &b;
        return nullptr;
    }
};

/// EX split along lexical trait axes of the gold SQL plus the dataset's
/// difficulty labels. Within each axis the buckets partition the records
/// (unlabeled difficulty gets its own bucket).
inline BreakdownReport breakdown_report(const std::vector<EvalRecord>& records) {
    // Axis name, bucket name, membership predicate. Buckets within an axis
    // are mutually exclusive and exhaustive.
    using Pred = std::function<bool(const EvalRecord&)>;
    std::vector<std::tuple<std::string, std::string, Pred>> shape = {
        {"join", "with-join", [](const EvalRecord& r) { return r.gold_traits.has_join; }},
        {"join", "no-join", [](const EvalRecord& r) { return !r.gold_traits.has_join; }},
        {"subquery", "with-subquery", [](const EvalRecord& r) { return r.gold_traits.has_subquery; }},
        {"subquery", "no-subquery", [](const EvalRecord& r) { return !r.gold_traits.has_subquery; }},
        {"order-by", "with-order-by",
         [](const EvalRecord& r) { return r.gold_traits.has_order_by_outer; }},
        {"order-by", "no-order-by",
         [](const EvalRecord& r) { return !r.gold_traits.has_order_by_outer; }},
        {"logical-connectors", "0",
         [](const EvalRecord& r) { return r.gold_traits.logical_connectors == 0; }},
        {"logical-connectors", "1",
         [](const EvalRecord& r) { return r.gold_traits.logical_connectors == 1; }},
        {"logical-connectors", "2+",
         [](const EvalRecord& r) { return r.gold_traits.logical_connectors >= 2; }},
    };

    BreakdownReport report;
    for (auto& [axis, bucket, pred] : shape) {
        BreakdownBucket b;
        b.axis = axis;
        b.bucket = bucket;
        for (const EvalRecord& r : records) {
            if (!pred(r)) continue;
            ++b.total;
            if (record_matches(r)) ++b.matches;
        }
        report.buckets.push_back(std::move(b));
    }

    // Difficulty axis from dataset labels, in first-seen order.
    std::vector<std::string> labels;
    for (const EvalRecord& r : records) {
        std::string label = r.difficulty.value_or("unlabeled");
        if (std::find(labels.begin(), labels.end(), label) == labels.end())
            labels.push_back(label);
    }
    for (const std::string& label : labels) {
        BreakdownBucket b;
        b.axis = "difficulty";
        b.bucket = label;
        for (const EvalRecord& r : records) {
            if (r.difficulty.value_or("unlabeled") != label) continue;
            ++b.total;
            if (record_matches(r)) ++b.matches;
        }
        report.buckets.push_back(std::move(b));
    }
    return report;
}

inline void write_breakdown_tsv(const BreakdownReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SetupError("cannot write breakdown table: " + path);
    out << "axis\tbucket\ttotal\tmatches\tex_percent\n";
    for (const BreakdownBucket& b : report.buckets) {
        out << b.axis << "\t" << b.bucket << "\t" << b.total << "\t" << b.matches << "\t";
        if (auto ex = b.ex_percent()) out << format_double(*ex);
        else out << "n/a";
        out << "\n";
    }
}

inline void write_breakdown_json(const BreakdownReport& report, const std::string& path) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const BreakdownBucket& b : report.buckets) {
        nlohmann::ordered_json entry;
        entry["axis"] = b.axis;
        entry["bucket"] = b.bucket;
        entry["total"] = b.total;
        entry["matches"] = b.matches;
        if (auto ex = b.ex_percent()) entry["ex_percent"] = *ex;
        else entry["ex_percent"] = nullptr;
        doc.push_back(std::move(entry));
    }
    std::ofstream out(path);
    if (!out) throw SetupError("cannot write breakdown data: " + path);
    out << doc.dump(2) << "\n";
}

/// Plot-ready static image: one horizontal bar per bucket, EX percent as bar
/// length, grouped by axis.
inline void write_breakdown_svg(const BreakdownReport& report, const std::string& path) {
    const int row_h = 26;
    const int label_w = 260;
    const int bar_max = 400;
    const int top = 30;
    const int height = top + row_h * static_cast<int>(report.buckets.size()) + 10;
    const int width = label_w + bar_max + 110;

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
           "\" height=\"" + std::to_string(height) + "\" font-family=\"sans-serif\" font-size=\"13\">\n";
    svg += "<text x=\"10\" y=\"20\" font-weight=\"bold\">Execution accuracy by bucket</text>\n";
    int y = top;
    for (const BreakdownBucket& b : report.buckets) {
        const double ex = b.ex_percent().value_or(0.0);
        const int bar = static_cast<int>(ex / 100.0 * bar_max + 0.5);
        svg += "<text x=\"10\" y=\"" + std::to_string(y + 17) + "\">" + b.axis + " / " + b.bucket +
               "</text>\n";
        svg += "<rect x=\"" + std::to_string(label_w) + "\" y=\"" + std::to_string(y + 4) +
               "\" width=\"" + std::to_string(bar) + "\" height=\"" + std::to_string(row_h - 8) +
               "\" fill=\"#4878a8\"/>\n";
        std::string value = b.ex_percent() ? format_double(ex) + "%" : "n/a";
        svg += "<text x=\"" + std::to_string(label_w + bar + 6) + "\" y=\"" + std::to_string(y + 17) +
               "\">" + value + " (" + std::to_string(b.matches) + "/" + std::to_string(b.total) +
               ")</text>\n";
        y += row_h;
    }
    svg += "</svg>\n";
    std::ofstream out(path);
    if (!out) throw SetupError("cannot write breakdown plot: " + path);
    out << svg;
}

}  // namespace mats
