#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mats/agents.hpp"
#include "mats/backend.hpp"
#include "mats/core.hpp"
#include "mats/executor.hpp"
#include "mats/pipeline.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Observations and actions
// ---------------------------------------------------------------------------

enum class AgentKind { planner, validator, fix };

inline const char* to_string(AgentKind kind) {
    switch (kind) {
        case AgentKind::planner: return "planner";
        case AgentKind::validator: return "validator";
        case AgentKind::fix: return "fix";
    }
    return "planner";
}

/// What the policy saw when acting: the exact prompt plus bookkeeping.
struct Observation {
    AgentKind agent = AgentKind::planner;
    std::string prompt;
    std::string sample_id;
    int iteration = 1;
};

enum class ActionSource { policy, assistant };

struct Action {
    std::string text;
    ActionSource source = ActionSource::policy;
};

struct ActionSet {
    std::vector<Action> actions;

    std::vector<std::string> texts() const {
        std::vector<std::string> out;
        out.reserve(actions.size());
        for (const Action& a : actions) out.push_back(a.text);
        return out;
    }
};

/// Draws K-1 policy samples at temperature T plus one greedy assistant
/// action on the same observation; without an assistant all K come from the
/// policy. Transport and model errors degrade to a partial set with a
/// warning (fixture misses still throw: those are authoring bugs). Callers
/// skip the sample when fewer than two actions come back.
inline ActionSet sample_actions(Backend& policy, Backend* assistant, const Observation& obs, int K,
                                double T) {
    if (K < 1) throw ValidationError("sample_actions: K must be >= 1");
    if (assistant && K < 2)
        throw ValidationError("sample_actions: K must be >= 2 with an assistant configured");

    ActionSet set;
    const int policy_count = assistant ? K - 1 : K;
    if (T == 0.0 && policy_count > 1)
        throw ValidationError("sample_actions: multiple policy samples need a temperature > 0");
    if (policy_count > 0) {
        GenerationRequest request{obs.prompt, policy_count, T};
        try {
            for (std::string& text : policy.complete(request).completions)
                set.actions.push_back({std::move(text), ActionSource::policy});
        } catch (const FixtureMissError&) {
            throw;
        } catch (const MatsError& e) {
            warn("policy sampling failed for sample " + obs.sample_id + ": " + e.what());
        }
    }
    if (assistant) {
        GenerationRequest request{obs.prompt, 1, 0.0};
        try {
            set.actions.push_back(
                {assistant->complete(request).completions.front(), ActionSource::assistant});
        } catch (const FixtureMissError&) {
            throw;
        } catch (const MatsError& e) {
            warn("assistant sampling failed for sample " + obs.sample_id + ": " + e.what());
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Preference pairs
// ---------------------------------------------------------------------------

struct PreferencePair {
    AgentKind agent = AgentKind::planner;
    std::string prompt;
    std::string chosen;
    std::string rejected;  // empty string only for planner/fix pairs
    std::string sample_id;
    int iteration = 1;
};

namespace detail {

inline std::vector<std::string> dedup_texts(const std::vector<std::string>& texts) {
    std::vector<std::string> out;
    for (const std::string& t : texts)
        if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    return out;
}

/// Executes the SQL inside an action text and compares against gold. Actions
/// without extractable SQL count as mismatches.
inline bool action_matches_gold(const std::string& action_text, const ExecutionResponse& gold,
                                const std::string& db_path, bool order_sensitive,
                                double timeout_s) {
    std::optional<ExtractedSql> extracted = extract_sql(action_text);
    if (!extracted) return false;
    ExecutionResponse response = execute_sql(db_path, extracted->sql, timeout_s);
    return responses_match(gold, response, order_sensitive);
}

/// Shared Algorithm-1 style partition-and-pair: dedup, execute, split into
/// gold-matching (C) and non-matching (R), apply the empty-string rule, and
/// emit the C x R cross product. Chosen actions are re-executed once more at
/// emission time as a guard against unstable databases.
inline std::vector<PreferencePair> partition_and_pair(AgentKind agent, const Observation& obs,
                                                      const std::vector<std::string>& action_texts,
                                                      const ExecutionResponse& gold,
                                                      const std::string& db_path,
                                                      bool order_sensitive, double timeout_s) {
    if (!gold.ok()) throw ValidationError("preference pairing needs a gold query that executes");

    std::vector<std::string> chosen, rejected;
    for (const std::string& text : dedup_texts(action_texts)) {
        if (action_matches_gold(text, gold, db_path, order_sensitive, timeout_s))
            chosen.push_back(text);
        else
            rejected.push_back(text);
    }
    if (chosen.empty()) return {};
    if (rejected.empty()) rejected.push_back("");

    std::vector<PreferencePair> pairs;
    for (const std::string& c : chosen) {
        if (!action_matches_gold(c, gold, db_path, order_sensitive, timeout_s)) {
            warn("chosen action failed re-execution check for sample " + obs.sample_id +
                 "; dropping its pairs");
            continue;
        }
        for (const std::string& r : rejected) {
            if (c == r) continue;
            pairs.push_back({agent, obs.prompt, c, r, obs.sample_id, obs.iteration});
        }
    }
    return pairs;
}

}  // namespace detail

/// Planner preference pairs: actions whose SQL reproduces the gold result
/// become chosen, the rest rejected; every chosen is paired with every
/// rejected. All-correct sets pair against the empty string; sets with no
/// correct action yield nothing.
inline std::vector<PreferencePair> build_planner_pairs(const Observation& obs,
                                                       const std::vector<std::string>& action_texts,
                                                       const ExecutionResponse& gold,
                                                       const std::string& db_path,
                                                       bool order_sensitive, double timeout_s = 30.0) {
    return detail::partition_and_pair(AgentKind::planner, obs, action_texts, gold, db_path,
                                      order_sensitive, timeout_s);
}

/// Fix-agent preference pairs: same construction as the planner's, applied
/// to fix completions under a fix observation (original SQL plus the
/// error-indicating feedback).
inline std::vector<PreferencePair> build_fix_pairs(const Observation& obs,
                                                   const std::vector<std::string>& action_texts,
                                                   const ExecutionResponse& gold,
                                                   const std::string& db_path, bool order_sensitive,
                                                   double timeout_s = 30.0) {
    return detail::partition_and_pair(AgentKind::fix, obs, action_texts, gold, db_path,
                                      order_sensitive, timeout_s);
}

// ---------------------------------------------------------------------------
// Validator pairs
// ---------------------------------------------------------------------------

/// Outcome of labeling validator actions: chosen/rejected feedback texts per
/// validator kind, plus a log of actions whose two labeling branches
/// disagreed (the fix-mediated label wins).
struct ValidatorPartition {
    std::vector<std::string> chosen_selection;
    std::vector<std::string> rejected_selection;
    std::vector<std::string> chosen_condition;
    std::vector<std::string> rejected_condition;
    std::vector<std::string> conflicts;
};

/// Labels validator feedback actions two ways. When the planner SQL already
/// matches gold, each action's own verdict is its label: saying "correct" is
/// right. Independently, aligned action pairs (a_s, a_c) are tested through
/// the fix agent: the error-indicating subset of the two feedbacks drives
/// one fix attempt (none indicating means the SQL stands as-is), and both
/// actions inherit the outcome of executing the result against gold. When
/// both branches label one action they can disagree; the fix-mediated label
/// wins and the conflict is recorded.
inline ValidatorPartition build_validator_pairs(const AgentContext& ctx, Backend& fixer,
                                                const std::vector<std::string>& actions_selection,
                                                const std::vector<std::string>& actions_condition,
                                                const std::string& planner_sql,
                                                const ExecutionResponse& planner_response,
                                                const ExecutionResponse& gold, bool order_sensitive,
                                                double timeout_s = 30.0) {
    if (!gold.ok()) throw ValidationError("validator pairing needs a gold query that executes");
    const bool planner_correct = responses_match(gold, planner_response, order_sensitive);

    const std::vector<std::string> sel = detail::dedup_texts(actions_selection);
    const std::vector<std::string> cond = detail::dedup_texts(actions_condition);
    std::vector<std::optional<bool>> label_sel(sel.size()), label_cond(cond.size());

    ValidatorPartition partition;
    if (planner_correct) {
        for (std::size_t i = 0; i < sel.size(); ++i)
            label_sel[i] = parse_verdict(sel[i]) == Verdict::correct;
        for (std::size_t i = 0; i < cond.size(); ++i)
            label_cond[i] = parse_verdict(cond[i]) == Verdict::correct;
    }

    auto relabel = [&](std::vector<std::optional<bool>>& labels, std::size_t i,
                       const std::vector<std::string>& texts, const char* kind, bool value) {
        if (labels[i] && *labels[i] != value) {
            partition.conflicts.push_back(std::string(kind) + " action " + std::to_string(i) +
                                          " relabeled by fix outcome (verdict label " +
                                          (*labels[i] ? "chosen" : "rejected") + " -> " +
                                          (value ? "chosen" : "rejected") + ")");
        }
        labels[i] = value;
    };

    const std::size_t aligned = std::min(sel.size(), cond.size());
    for (std::size_t i = 0; i < aligned; ++i) {
        std::vector<std::string> errors;
        if (parse_verdict(sel[i]) == Verdict::incorrect) errors.push_back(sel[i]);
        if (parse_verdict(cond[i]) == Verdict::incorrect) errors.push_back(cond[i]);

        bool outcome;
        if (errors.empty()) {
            // Neither feedback asks for a change, so the SQL stands as-is.
            outcome = planner_correct;
        } else {
            const std::string prompt = build_fix_prompt(ctx, planner_sql, planner_response, errors);
            GenerationRequest request{prompt, 1, 0.0};
            GenerationResult result = fixer.complete(request);
            std::optional<ExtractedSql> extracted = extract_sql(result.completions.front());
            if (!extracted) {
                outcome = false;
            } else {
                ExecutionResponse fixed = execute_sql(ctx.db_path, extracted->sql, timeout_s);
                outcome = responses_match(gold, fixed, order_sensitive);
            }
        }
        relabel(label_sel, i, sel, "selection", outcome);
        relabel(label_cond, i, cond, "condition", outcome);
    }

    for (std::size_t i = 0; i < sel.size(); ++i) {
        if (!label_sel[i]) continue;
        (*label_sel[i] ? partition.chosen_selection : partition.rejected_selection).push_back(sel[i]);
    }
    for (std::size_t i = 0; i < cond.size(); ++i) {
        if (!label_cond[i]) continue;
        (*label_cond[i] ? partition.chosen_condition : partition.rejected_condition).push_back(cond[i]);
    }
    return partition;
}

/// Cross products over a validator partition. Unlike planner/fix pairing
/// there is no empty-string stand-in: a kind yields pairs only when it has
/// both chosen and rejected feedback.
inline std::vector<PreferencePair> pairs_from_partition(const ValidatorPartition& partition,
                                                        const Observation& obs_selection,
                                                        const Observation& obs_condition) {
    std::vector<PreferencePair> pairs;
    auto emit = [&](const std::vector<std::string>& chosen, const std::vector<std::string>& rejected,
                    const Observation& obs) {
        if (chosen.empty() || rejected.empty()) return;
        for (const std::string& c : chosen)
            for (const std::string& r : rejected) {
                if (c == r) continue;
                pairs.push_back({AgentKind::validator, obs.prompt, c, r, obs.sample_id, obs.iteration});
            }
    };
    emit(partition.chosen_selection, partition.rejected_selection, obs_selection);
    emit(partition.chosen_condition, partition.rejected_condition, obs_condition);
    return pairs;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// Writes pairs as JSONL with a stable field order; reruns over identical
/// pairs produce byte-identical files.
inline std::size_t emit_pairs(const std::vector<PreferencePair>& pairs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SetupError("cannot write pair file: " + path);
    for (const PreferencePair& pair : pairs) {
        nlohmann::ordered_json doc;
        doc["agent"] = to_string(pair.agent);
        doc["prompt"] = pair.prompt;
        doc["chosen"] = pair.chosen;
        doc["rejected"] = pair.rejected;
        doc["sample_id"] = pair.sample_id;
        doc["iteration"] = pair.iteration;
        out << doc.dump() << "\n";
    }
    if (!out) throw SetupError("write failure on pair file: " + path);
    return pairs.size();
}

// ---------------------------------------------------------------------------
// Iteration orchestration
// ---------------------------------------------------------------------------

struct RlefConfig {
    int action_count = 10;        // K
    double temperature = 1.0;     // T
    int iterations = 1;
    double stop_threshold = 0.05; // relative pair-count change that stops the loop
};

struct IterationRecord {
    int iteration = 1;
    std::size_t planner_pairs = 0;
    std::size_t validator_pairs = 0;
    std::size_t fix_pairs = 0;
    std::size_t skipped_samples = 0;
    std::optional<double> relative_change;
    bool stop = false;

    std::size_t total() const { return planner_pairs + validator_pairs + fix_pairs; }
};

struct IterationManifest {
    std::vector<IterationRecord> iterations;

    void save(const std::string& path) const {
        nlohmann::ordered_json doc;
        nlohmann::ordered_json list = nlohmann::ordered_json::array();
        for (const IterationRecord& rec : iterations) {
            nlohmann::ordered_json entry;
            entry["iteration"] = rec.iteration;
            entry["planner_pairs"] = rec.planner_pairs;
            entry["validator_pairs"] = rec.validator_pairs;
            entry["fix_pairs"] = rec.fix_pairs;
            entry["total_pairs"] = rec.total();
            entry["skipped_samples"] = rec.skipped_samples;
            if (rec.relative_change) entry["relative_change"] = *rec.relative_change;
            entry["stop"] = rec.stop;
            list.push_back(std::move(entry));
        }
        doc["iterations"] = std::move(list);
        std::ofstream out(path);
        if (!out) throw SetupError("cannot write iteration manifest: " + path);
        out << doc.dump(2) << "\n";
    }
};

/// Dataset-size stabilization: stop once the pair count moves by less than
/// the threshold fraction relative to the previous iteration.
inline bool dataset_size_stable(std::size_t previous, std::size_t current, double threshold) {
    if (previous == 0) return current == 0;
    const double change = std::abs(static_cast<double>(current) - static_cast<double>(previous)) /
                          static_cast<double>(previous);
    return change < threshold;
}

struct SamplePairs {
    std::vector<PreferencePair> planner;
    std::vector<PreferencePair> validator;
    std::vector<PreferencePair> fix;
    bool skipped = false;
    std::string skip_reason;
};

/// Builds every pair family for one sample in one iteration: planner pairs
/// from a fresh action set, validator pairs over feedback drafts for the
/// greedy planner SQL (with the assistant, when configured, contributing an
/// edited draft), and fix pairs when that SQL is wrong and feedback flags it.
inline SamplePairs build_sample_pairs(const QuestionSample& sample, const PipelineConfig& pconfig,
                                      const RlefConfig& rconfig, const Backends& backends,
                                      const std::string& db_root, int iteration) {
    backends.require_core();
    if (!sample.gold_sql) {
        SamplePairs out;
        out.skipped = true;
        out.skip_reason = "no gold SQL";
        return out;
    }
    SamplePairs out;
    const std::string db_path = db_path_for(db_root, sample.db_id);
    AgentContext ctx = build_agent_context(sample, pconfig, db_path);

    // Gold executes once and anchors every label in this sample.
    const ExecutionResponse gold = execute_sql(db_path, *sample.gold_sql, pconfig.exec_timeout_s);
    if (!gold.ok()) {
        out.skipped = true;
        out.skip_reason = "gold SQL does not execute: " + gold.error_text;
        warn("sample " + sample.id + " skipped: " + out.skip_reason);
        return out;
    }
    const bool order_sensitive = classify_sql(*sample.gold_sql).has_order_by_outer;

    // Planner pairs.
    Observation planner_obs{AgentKind::planner, build_planner_prompt(ctx), sample.id, iteration};
    ActionSet planner_actions = sample_actions(*backends.planner, backends.advanced.get(),
                                               planner_obs, rconfig.action_count,
                                               rconfig.temperature);
    if (planner_actions.actions.size() < 2) {
        out.skipped = true;
        out.skip_reason = "fewer than two planner actions";
        warn("sample " + sample.id + " skipped: " + out.skip_reason);
        return out;
    }
    out.planner = build_planner_pairs(planner_obs, planner_actions.texts(), gold, db_path,
                                      order_sensitive, pconfig.exec_timeout_s);

    // The validator and fix stages react to the planner's deterministic
    // answer, mirroring what the pipeline would execute.
    GenerationRequest greedy{planner_obs.prompt, 1, 0.0};
    std::optional<ExtractedSql> planner_greedy = extract_sql(
        backends.planner->complete(greedy).completions.front());
    if (!planner_greedy) {
        warn("sample " + sample.id + ": greedy planner completion has no SQL; validator and fix "
             "pairs skipped");
        return out;
    }
    const std::string planner_sql = planner_greedy->sql;
    const ExecutionResponse planner_response =
        execute_sql(db_path, planner_sql, pconfig.exec_timeout_s);

    Observation obs_sel{AgentKind::validator,
                        build_validator_prompt(FeedbackKind::selection, ctx, planner_sql,
                                               planner_response),
                        sample.id, iteration};
    Observation obs_cond{AgentKind::validator,
                         build_validator_prompt(FeedbackKind::condition, ctx, planner_sql,
                                                planner_response),
                         sample.id, iteration};

    // K-1 policy drafts per kind; the assistant contributes by editing the
    // first draft rather than answering the raw observation.
    auto validator_actions = [&](const Observation& obs) {
        const int policy_count =
            backends.advanced ? rconfig.action_count - 1 : rconfig.action_count;
        ActionSet set = sample_actions(*backends.validator, nullptr,
                                       obs, policy_count, rconfig.temperature);
        if (backends.advanced && !set.actions.empty()) {
            const std::string editor_prompt = build_feedback_editor_prompt(
                ctx, planner_sql, planner_response, set.actions.front().text);
            GenerationRequest request{editor_prompt, 1, 0.0};
            set.actions.push_back({backends.advanced->complete(request).completions.front(),
                                   ActionSource::assistant});
        }
        return set;
    };
    ActionSet actions_sel = validator_actions(obs_sel);
    ActionSet actions_cond = validator_actions(obs_cond);
    if (actions_sel.actions.size() >= 2 && actions_cond.actions.size() >= 2) {
        ValidatorPartition partition = build_validator_pairs(
            ctx, *backends.fixer, actions_sel.texts(), actions_cond.texts(), planner_sql,
            planner_response, gold, order_sensitive, pconfig.exec_timeout_s);
        for (const std::string& conflict : partition.conflicts)
            warn("sample " + sample.id + ": " + conflict);
        out.validator = pairs_from_partition(partition, obs_sel, obs_cond);
    } else {
        warn("sample " + sample.id + ": too few validator actions; validator pairs skipped");
    }

    // Fix pairs exist only when the planner SQL is wrong and the greedy
    // validators actually flag it; the flagged feedback forms the prompt.
    if (!responses_match(gold, planner_response, order_sensitive)) {
        SqlCandidate candidate;
        candidate.sql = planner_sql;
        candidate.origin = CandidateOrigin::greedy;
        std::vector<Feedback> feedbacks{
            validate(*backends.validator, FeedbackKind::selection, ctx, candidate, planner_response),
            validate(*backends.validator, FeedbackKind::condition, ctx, candidate, planner_response)};
        std::vector<std::string> errors;
        for (const Feedback& f : feedbacks)
            if (f.indicates_error()) errors.push_back(f.raw_text);
        if (!errors.empty()) {
            Observation fix_obs{AgentKind::fix,
                                build_fix_prompt(ctx, planner_sql, planner_response, errors),
                                sample.id, iteration};
            ActionSet fix_actions = sample_actions(*backends.fixer, backends.advanced.get(),
                                                   fix_obs, rconfig.action_count,
                                                   rconfig.temperature);
            if (fix_actions.actions.size() >= 2)
                out.fix = build_fix_pairs(fix_obs, fix_actions.texts(), gold, db_path,
                                          order_sensitive, pconfig.exec_timeout_s);
            else
                warn("sample " + sample.id + ": too few fix actions; fix pairs skipped");
        }
    }
    return out;
}

/// Runs up to `iterations` pair-building passes over the sample set, writing
/// per-iteration JSONL files plus a manifest under `out_dir`, and stopping
/// early once the dataset size stabilizes.
inline IterationManifest build_rlef_dataset(const std::vector<QuestionSample>& samples,
                                            const PipelineConfig& pconfig,
                                            const RlefConfig& rconfig, const Backends& backends,
                                            const std::string& db_root,
                                            const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    IterationManifest manifest;
    std::optional<std::size_t> previous_total;

    for (int t = 1; t <= rconfig.iterations; ++t) {
        std::vector<PreferencePair> planner, validator, fix;
        IterationRecord record;
        record.iteration = t;
        for (const QuestionSample& sample : samples) {
            SamplePairs built =
                build_sample_pairs(sample, pconfig, rconfig, backends, db_root, t);
            if (built.skipped) {
                ++record.skipped_samples;
                continue;
            }
            planner.insert(planner.end(), built.planner.begin(), built.planner.end());
            validator.insert(validator.end(), built.validator.begin(), built.validator.end());
            fix.insert(fix.end(), built.fix.begin(), built.fix.end());
        }

        char dir_name[16];
        std::snprintf(dir_name, sizeof(dir_name), "iter%02d", t);
        const fs::path iter_dir = fs::path(out_dir) / dir_name;
        fs::create_directories(iter_dir);
        record.planner_pairs = emit_pairs(planner, (iter_dir / "planner.jsonl").string());
        record.validator_pairs = emit_pairs(validator, (iter_dir / "validator.jsonl").string());
        record.fix_pairs = emit_pairs(fix, (iter_dir / "fix.jsonl").string());

        if (previous_total) {
            record.relative_change =
                previous_total == 0
                    ? 0.0
                    : std::abs(static_cast<double>(record.total()) -
                               static_cast<double>(*previous_total)) /
                          static_cast<double>(*previous_total);
            record.stop = dataset_size_stable(*previous_total, record.total(),
                                              rconfig.stop_threshold);
        }
        previous_total = record.total();
        manifest.iterations.push_back(record);
        manifest.save((fs::path(out_dir) / "manifest.json").string());
        if (record.stop) break;
    }
    return manifest;
}

}  // namespace mats
