// Operator entry points: run, build-rlef, eval, orpo-score, make-demo.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mats/backend.hpp"
#include "mats/dataset.hpp"
#include "mats/eval.hpp"
#include "mats/http_backend_impl.hpp"
#include "mats/orpo.hpp"
#include "mats/pipeline.hpp"
#include "mats/prompts.hpp"
#include "mats/rlef.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Configuration plumbing
// ---------------------------------------------------------------------------

struct CliConfig {
    std::string dataset;
    std::string db_root;
    std::string out_dir;
    std::string config_file;

    // backend specs: "scripted:<fixture.json>" or "http:<base url>"
    std::string planner, validator, fixer, selector, advanced;
    std::string model;

    int planner_k = 10;
    double temperature = 1.0;
    std::size_t value_k = 2;
    std::size_t chunk_k = 5;
    std::size_t max_tables = 6;
    std::size_t max_columns = 10;
    double timeout_s = 30.0;
    std::size_t catalog_cap = 2000;
    int parallel = 1;
    int candidate_parallel = 1;
    std::string scores_file;
    std::string seed_label;

    int iterations = 1;
    double stop_threshold = 0.05;

    mats::PipelineConfig pipeline() const {
        mats::PipelineConfig c;
        c.planner_k = planner_k;
        c.planner_temperature = temperature;
        c.value_match_k = value_k;
        c.budget.max_tables = max_tables;
        c.budget.max_columns_per_table = max_columns;
        c.selection_subset_size = chunk_k;
        c.exec_timeout_s = timeout_s;
        c.max_catalog_values = catalog_cap;
        c.sample_parallelism = parallel;
        c.candidate_parallelism = candidate_parallel;
        c.scores_file = scores_file;
        return c;
    }

    ordered_json snapshot() const {
        ordered_json doc;
        doc["dataset"] = dataset;
        doc["db_root"] = db_root;
        doc["out_dir"] = out_dir;
        doc["backends"] = {{"planner", planner},
                           {"validator", validator},
                           {"fixer", fixer},
                           {"selector", selector},
                           {"advanced", advanced}};
        doc["model"] = model;
        doc["planner_k"] = planner_k;
        doc["temperature"] = temperature;
        doc["value_k"] = value_k;
        doc["chunk_k"] = chunk_k;
        doc["max_tables"] = max_tables;
        doc["max_columns"] = max_columns;
        doc["timeout_s"] = timeout_s;
        doc["catalog_cap"] = catalog_cap;
        doc["parallel"] = parallel;
        doc["candidate_parallel"] = candidate_parallel;
        doc["scores_file"] = scores_file;
        doc["seed_label"] = seed_label;
        doc["iterations"] = iterations;
        doc["stop_threshold"] = stop_threshold;
        doc["template_version"] = mats::kTemplateVersion;
        return doc;
    }
};

/// Loads defaults from a JSON config file; flags parsed afterwards override.
void apply_config_file(CliConfig& config, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw mats::SetupError("cannot open config file: " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw mats::SetupError("cannot parse config file " + path + ": " + e.what());
    }
    auto str = [&](const char* key, std::string& field) {
        if (doc.contains(key)) field = doc[key].get<std::string>();
    };
    str("dataset", config.dataset);
    str("db_root", config.db_root);
    str("out_dir", config.out_dir);
    str("planner", config.planner);
    str("validator", config.validator);
    str("fixer", config.fixer);
    str("selector", config.selector);
    str("advanced", config.advanced);
    str("model", config.model);
    str("scores_file", config.scores_file);
    str("seed_label", config.seed_label);
    if (doc.contains("planner_k")) config.planner_k = doc["planner_k"].get<int>();
    if (doc.contains("temperature")) config.temperature = doc["temperature"].get<double>();
    if (doc.contains("value_k")) config.value_k = doc["value_k"].get<std::size_t>();
    if (doc.contains("chunk_k")) config.chunk_k = doc["chunk_k"].get<std::size_t>();
    if (doc.contains("max_tables")) config.max_tables = doc["max_tables"].get<std::size_t>();
    if (doc.contains("max_columns")) config.max_columns = doc["max_columns"].get<std::size_t>();
    if (doc.contains("timeout_s")) config.timeout_s = doc["timeout_s"].get<double>();
    if (doc.contains("catalog_cap")) config.catalog_cap = doc["catalog_cap"].get<std::size_t>();
    if (doc.contains("parallel")) config.parallel = doc["parallel"].get<int>();
    if (doc.contains("candidate_parallel"))
        config.candidate_parallel = doc["candidate_parallel"].get<int>();
    if (doc.contains("iterations")) config.iterations = doc["iterations"].get<int>();
    if (doc.contains("stop_threshold")) config.stop_threshold = doc["stop_threshold"].get<double>();
}

std::shared_ptr<mats::Backend> make_backend(const std::string& spec, const std::string& model,
                                            const char* role) {
    if (spec.empty()) return nullptr;
    if (spec.rfind("scripted:", 0) == 0)
        return mats::ScriptedBackend::from_file(spec.substr(9));
    if (spec.rfind("http:", 0) == 0) {
        mats::HttpBackendConfig config;
        config.base_url = spec.substr(5);
        config.model = model;
        if (const char* token = std::getenv("MATS_API_TOKEN")) config.auth_token = token;
        return std::make_shared<mats::HttpBackend>(config);
    }
    throw mats::SetupError(std::string(role) +
                           ": backend spec must start with scripted: or http: (got '" + spec + "')");
}

mats::Backends make_backends(const CliConfig& config, bool need_core) {
    mats::Backends backends;
    backends.planner = make_backend(config.planner, config.model, "planner");
    backends.validator = make_backend(config.validator, config.model, "validator");
    backends.fixer = make_backend(config.fixer, config.model, "fixer");
    backends.selector = make_backend(config.selector, config.model, "selector");
    backends.advanced = make_backend(config.advanced, config.model, "advanced");
    if (need_core) backends.require_core();
    return backends;
}

void write_snapshot(const CliConfig& config) {
    fs::create_directories(config.out_dir);
    std::ofstream out(fs::path(config.out_dir) / "config_snapshot.json");
    if (!out) throw mats::SetupError("cannot write config snapshot under " + config.out_dir);
    out << config.snapshot().dump(2) << "\n";
}

void require(bool ok, const std::string& field) {
    if (!ok) throw mats::SetupError("missing or invalid configuration: " + field);
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

int cmd_run(const CliConfig& config) {
    require(!config.dataset.empty(), "dataset");
    require(!config.db_root.empty(), "db_root");
    require(!config.out_dir.empty(), "out_dir");
    require(fs::exists(config.db_root), "db_root (path does not exist)");

    const std::vector<mats::QuestionSample> samples = mats::load_samples(config.dataset);
    const mats::Backends backends = make_backends(config, true);
    const mats::PipelineConfig pconfig = config.pipeline();
    write_snapshot(config);
    std::cout << "effective config: " << config.snapshot().dump() << "\n";

    std::ofstream results(fs::path(config.out_dir) / "results.jsonl");
    std::ofstream timings(fs::path(config.out_dir) / "timings.jsonl");
    if (!results || !timings)
        throw mats::SetupError("cannot open output files under " + config.out_dir);

    mats::BenchmarkSummary summary = mats::run_benchmark(
        samples, pconfig, backends, config.db_root, [&](const mats::PipelineResult& result) {
            results << mats::to_json(result, false, pconfig.max_result_rows_stored).dump() << "\n";
            ordered_json timing;
            timing["sample_id"] = result.sample_id;
            ordered_json stages = ordered_json::object();
            for (const mats::StageTiming& t : result.timings) stages[t.stage] = t.seconds;
            timing["stages"] = std::move(stages);
            timing["wall_s"] = result.wall_s;
            timings << timing.dump() << "\n";
        });
    results.flush();
    timings.flush();

    ordered_json report;
    report["samples"] = summary.total;
    report["failures"] = summary.failures;
    report["with_gold"] = summary.with_gold;
    report["ex_matches"] = summary.ex_matches;
    if (auto ex = summary.ex_percent()) report["ex_percent"] = *ex;
    else report["ex_percent"] = nullptr;
    report["avg_seconds_per_sample"] = summary.avg_seconds_per_sample();
    std::ofstream summary_out(fs::path(config.out_dir) / "summary.json");
    summary_out << report.dump(2) << "\n";

    std::cout << "samples: " << summary.total << " (failures: " << summary.failures << ")\n";
    if (auto ex = summary.ex_percent())
        std::cout << "EX: " << mats::format_double(*ex) << "% (" << summary.ex_matches << "/"
                  << summary.with_gold << ")\n";
    else
        std::cout << "EX: n/a (no gold SQL)\n";
    std::cout << "avg time per sample: " << mats::format_double(summary.avg_seconds_per_sample())
              << "s\n";
    return 0;
}

// ---------------------------------------------------------------------------
// build-rlef
// ---------------------------------------------------------------------------

int cmd_build_rlef(const CliConfig& config) {
    require(!config.dataset.empty(), "dataset");
    require(!config.db_root.empty(), "db_root");
    require(!config.out_dir.empty(), "out_dir");

    const std::vector<mats::QuestionSample> samples = mats::load_samples(config.dataset);
    bool any_gold = false;
    for (const auto& s : samples) any_gold = any_gold || s.gold_sql.has_value();
    require(any_gold, "dataset (preference pairs need gold SQL)");

    const mats::Backends backends = make_backends(config, true);
    if (!backends.advanced)
        mats::warn("no assistant endpoint configured; sampling policy actions only");

    mats::RlefConfig rconfig;
    rconfig.action_count = config.planner_k;
    rconfig.temperature = config.temperature;
    rconfig.iterations = config.iterations;
    rconfig.stop_threshold = config.stop_threshold;

    write_snapshot(config);
    std::cout << "effective config: " << config.snapshot().dump() << "\n";

    mats::IterationManifest manifest = mats::build_rlef_dataset(
        samples, config.pipeline(), rconfig, backends, config.db_root, config.out_dir);
    for (const mats::IterationRecord& rec : manifest.iterations) {
        std::cout << "iteration " << rec.iteration << ": planner=" << rec.planner_pairs
                  << " validator=" << rec.validator_pairs << " fix=" << rec.fix_pairs
                  << " total=" << rec.total() << " skipped_samples=" << rec.skipped_samples;
        if (rec.relative_change)
            std::cout << " relative_change=" << mats::format_double(*rec.relative_change);
        std::cout << (rec.stop ? " stop=yes" : " stop=no") << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalFlags {
    std::string results_path;
    std::string ts_variants;
    bool ves = false;
    int repeats = 3;
};

int cmd_eval(const CliConfig& config, const EvalFlags& flags) {
    require(!flags.results_path.empty(), "results");
    require(!config.dataset.empty(), "dataset");
    require(!config.db_root.empty(), "db_root");
    require(!config.out_dir.empty(), "out_dir");

    // Results file: one pipeline result per line; we need id -> final sql.
    std::ifstream results_in(flags.results_path);
    if (!results_in) throw mats::SetupError("cannot open results file: " + flags.results_path);
    std::map<std::string, std::string> predictions;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(results_in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw mats::ValidationError("results line " + std::to_string(line_no) + ": " + e.what());
        }
        predictions[rec.at("sample_id").get<std::string>()] =
            rec.value("final_sql", std::string());
    }

    const std::vector<mats::QuestionSample> all_samples = mats::load_samples(config.dataset);
    std::vector<mats::QuestionSample> samples;
    for (const auto& s : all_samples)
        if (s.gold_sql) samples.push_back(s);

    std::set<std::string> dataset_ids;
    for (const auto& s : samples) dataset_ids.insert(s.id);
    std::vector<std::string> orphans;
    for (const auto& [id, sql] : predictions)
        if (!dataset_ids.count(id)) orphans.push_back("result:" + id);
    for (const auto& s : samples)
        if (!predictions.count(s.id)) orphans.push_back("dataset:" + s.id);
    if (!orphans.empty()) {
        std::string msg = "sample ids do not line up:";
        for (const auto& o : orphans) msg += " " + o;
        throw mats::ValidationError(msg);
    }

    write_snapshot(config);

    std::vector<mats::EvalRecord> records;
    for (const auto& sample : samples) {
        const std::string db_path = mats::db_path_for(config.db_root, sample.db_id);
        records.push_back(mats::make_eval_record(sample, predictions.at(sample.id), db_path,
                                                 config.timeout_s));
    }

    ordered_json report;
    auto ex = mats::execution_accuracy(records);
    if (ex) {
        report["ex_percent"] = *ex;
        std::cout << "EX: " << mats::format_double(*ex) << "%\n";
    } else {
        report["ex_percent"] = nullptr;
        std::cout << "EX: n/a\n";
    }
    report["samples"] = records.size();

    if (!flags.ts_variants.empty()) {
        std::map<std::string, std::vector<std::string>> variants;
        for (const auto& sample : samples) {
            const fs::path dir = fs::path(flags.ts_variants) / sample.db_id;
            std::vector<std::string> files;
            if (fs::exists(dir))
                for (const auto& entry : fs::directory_iterator(dir))
                    if (entry.path().extension() == ".sqlite" || entry.path().extension() == ".db")
                        files.push_back(entry.path().string());
            std::sort(files.begin(), files.end());
            if (files.empty())
                throw mats::SetupError("no variant databases for " + sample.db_id + " under " +
                                       flags.ts_variants);
            variants[sample.id] = std::move(files);
        }
        mats::TsOutcome ts = mats::test_suite_accuracy(records, variants, config.timeout_s);
        if (auto pct = ts.percent()) {
            report["ts_percent"] = *pct;
            std::cout << "TS: " << mats::format_double(*pct) << "% (" << ts.passed << "/"
                      << ts.passed + ts.failed << ", excluded " << ts.excluded << ")\n";
        } else {
            report["ts_percent"] = nullptr;
            std::cout << "TS: n/a (all samples excluded)\n";
        }
        report["ts_excluded"] = ts.excluded;
    }

    if (flags.ves) {
        mats::VesOutcome ves = mats::valid_efficiency_score(records, flags.repeats, config.timeout_s);
        report["ves_percent"] = ves.percent;
        std::cout << "VES: " << mats::format_double(ves.percent) << "%\n";
    }

    mats::BreakdownReport breakdown = mats::breakdown_report(records);
    mats::write_breakdown_tsv(breakdown, (fs::path(config.out_dir) / "breakdown.tsv").string());
    mats::write_breakdown_json(breakdown, (fs::path(config.out_dir) / "breakdown.json").string());
    mats::write_breakdown_svg(breakdown, (fs::path(config.out_dir) / "breakdown.svg").string());

    std::ofstream report_out(fs::path(config.out_dir) / "eval_summary.json");
    report_out << report.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// orpo-score
// ---------------------------------------------------------------------------

int cmd_orpo_score(const std::string& pairs_path, double lambda, bool lambda_set, bool unnormalized,
                   const std::string& out_dir) {
    const std::vector<mats::ScoredPair> pairs = mats::load_scored_pairs(pairs_path);
    if (pairs.empty()) {
        std::cout << "no pairs in " << pairs_path << "\n";
        return 0;
    }
    std::ofstream jsonl;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        jsonl.open(fs::path(out_dir) / "orpo_scores.jsonl");
        if (!jsonl) throw mats::SetupError("cannot write scores under " + out_dir);
    }
    double sum_total = 0.0, sum_nll = 0.0, sum_or = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const mats::ScoredPair& pair = pairs[i];
        const double lam = lambda_set ? lambda : pair.lambda;
        mats::OrpoLoss loss = mats::orpo_loss(pair.chosen, pair.rejected, lam, !unnormalized);
        sum_total += loss.total;
        sum_nll += loss.nll_part;
        sum_or += loss.or_part;
        std::cout << "pair " << i + 1 << ": total=" << mats::format_double(loss.total)
                  << " nll=" << mats::format_double(loss.nll_part)
                  << " or=" << mats::format_double(loss.or_part) << "\n";
        if (jsonl) {
            ordered_json rec;
            rec["pair"] = i + 1;
            rec["lambda"] = lam;
            rec["total"] = loss.total;
            rec["nll"] = loss.nll_part;
            rec["or"] = loss.or_part;
            jsonl << rec.dump() << "\n";
        }
    }
    const double n = static_cast<double>(pairs.size());
    std::cout << "mean: total=" << mats::format_double(sum_total / n)
              << " nll=" << mats::format_double(sum_nll / n)
              << " or=" << mats::format_double(sum_or / n) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// make-demo
// ---------------------------------------------------------------------------

void exec_ddl(sqlite3* db, const std::string& sql) {
    char* err = nullptr;
    if (sqlite3_exec(db, sql.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
        std::string msg = err ? err : "unknown error";
        sqlite3_free(err);
        throw mats::SetupError("demo database setup failed: " + msg);
    }
}

/// Builds a self-contained playground: a tiny database, a two-question
/// dataset, scripted fixtures for all roles, and a ready-to-run config.
int cmd_make_demo(const std::string& out_dir) {
    fs::create_directories(fs::path(out_dir) / "db" / "concert_hall");
    fs::create_directories(fs::path(out_dir) / "fixtures");
    const std::string db_path = (fs::path(out_dir) / "db" / "concert_hall" /
                                 "concert_hall.sqlite").string();
    fs::remove(db_path);
    {
        sqlite3* raw = nullptr;
        if (sqlite3_open(db_path.c_str(), &raw) != SQLITE_OK)
            throw mats::SetupError("cannot create demo database");
        mats::detail::DbHandle db(raw);
        exec_ddl(db.get(),
                 "CREATE TABLE singer (singer_id INTEGER PRIMARY KEY, name TEXT, country TEXT, "
                 "age INTEGER);"
                 "CREATE TABLE concert (concert_id INTEGER PRIMARY KEY, title TEXT, singer_id "
                 "INTEGER, year INTEGER, FOREIGN KEY (singer_id) REFERENCES singer(singer_id));"
                 "INSERT INTO singer VALUES (1, 'Joe Sharp', 'Netherlands', 52), (2, 'Timbaland', "
                 "'United States', 43), (3, 'Rose White', 'France', 41);"
                 "INSERT INTO concert VALUES (10, 'Super Bootcamp', 1, 2014), (11, 'Home Visits', "
                 "2, 2015), (12, 'Week 1', 2, 2015);");
    }

    // Dataset.
    const std::string dataset_path = (fs::path(out_dir) / "questions.jsonl").string();
    {
        std::ofstream out(dataset_path);
        ordered_json q1;
        q1["question_id"] = "demo-1";
        q1["question"] = "How many concerts did Timbaland give?";
        q1["db_id"] = "concert_hall";
        q1["SQL"] = "SELECT count(*) FROM concert JOIN singer ON concert.singer_id = "
                    "singer.singer_id WHERE singer.name = 'Timbaland'";
        q1["difficulty"] = "simple";
        out << q1.dump() << "\n";
        ordered_json q2;
        q2["question_id"] = "demo-2";
        q2["question"] = "List the names of singers from France.";
        q2["db_id"] = "concert_hall";
        q2["SQL"] = "SELECT name FROM singer WHERE country = 'France'";
        q2["evidence"] = "country holds the full country name";
        q2["difficulty"] = "simple";
        out << q2.dump() << "\n";
    }

    // Fixtures: reproduce the exact prompts the pipeline will issue.
    CliConfig demo_config;
    demo_config.planner_k = 2;
    demo_config.temperature = 1.0;
    const mats::PipelineConfig pconfig = demo_config.pipeline();
    const std::vector<mats::QuestionSample> samples = mats::load_samples(dataset_path);

    mats::ScriptedFixture planner_fx, validator_fx, fixer_fx, selector_fx;
    const std::string ok_draft = "The result lines up with the question.\nThe SQL is correct.";
    const std::string bad_selection_draft =
        "The projection drops a column the question asks for.\nThe SQL is incorrect.";
    const std::string bad_condition_draft =
        "The filter misses a constraint from the question.\nThe SQL is incorrect.";
    for (const auto& sample : samples) {
        mats::AgentContext ctx = mats::build_agent_context(sample, pconfig, db_path);
        const std::string planner_prompt = mats::build_planner_prompt(ctx);
        const std::string gold = *sample.gold_sql;
        const std::string completion =
            "Plan: join as needed and filter.\n```sql\n" + gold + "\n```";
        const std::string wrong_completion =
            "Plan: a rough first guess.\n```sql\nSELECT 42\n```";
        planner_fx.enqueue({planner_prompt, 1, 0.0}, {completion});
        planner_fx.enqueue({planner_prompt, 1, 1.0}, {completion});
        // Action batch for preference-pair building: one winning and one
        // losing draft so every sample contributes a planner pair.
        planner_fx.enqueue({planner_prompt, demo_config.planner_k, 1.0},
                           {completion, wrong_completion});

        mats::ExecutionResponse response = mats::execute_sql(db_path, gold, pconfig.exec_timeout_s);
        for (mats::FeedbackKind kind : {mats::FeedbackKind::selection, mats::FeedbackKind::condition}) {
            const std::string prompt = mats::build_validator_prompt(kind, ctx, gold, response);
            // The gated aggregate query never reaches the selection validator
            // during a pipeline run; pair building still samples both kinds.
            if (kind != mats::FeedbackKind::selection ||
                !mats::classify_sql(gold).any_gated_operation()) {
                // Every candidate is validated before deduplication, and both
                // demo completions carry the same SQL, so each validator prompt
                // is asked once per candidate.
                for (int copy = 0; copy < demo_config.planner_k; ++copy)
                    validator_fx.enqueue({prompt, 1, 0.0}, {ok_draft});
            }
            validator_fx.enqueue({prompt, demo_config.planner_k, 1.0},
                                 {ok_draft, kind == mats::FeedbackKind::selection
                                                ? bad_selection_draft
                                                : bad_condition_draft});
        }
        // Pair building probes the error drafts through the fixer; a reply
        // with no SQL keeps them on the losing side.
        const std::string fix_prompt = mats::build_fix_prompt(
            ctx, gold, response, {bad_selection_draft, bad_condition_draft});
        fixer_fx.enqueue({fix_prompt, 1, 0.0}, {"I do not see a safe repair for this query."});
    }
    planner_fx.save((fs::path(out_dir) / "fixtures" / "planner.json").string(),
                    (fs::path(out_dir) / "fixtures" / "planner_prompts.json").string());
    validator_fx.save((fs::path(out_dir) / "fixtures" / "validator.json").string(),
                      (fs::path(out_dir) / "fixtures" / "validator_prompts.json").string());
    fixer_fx.save((fs::path(out_dir) / "fixtures" / "fixer.json").string());
    selector_fx.save((fs::path(out_dir) / "fixtures" / "selector.json").string());

    // Config file wired to the generated artifacts.
    ordered_json config;
    config["dataset"] = dataset_path;
    config["db_root"] = (fs::path(out_dir) / "db").string();
    config["out_dir"] = (fs::path(out_dir) / "out").string();
    config["planner"] = "scripted:" + (fs::path(out_dir) / "fixtures" / "planner.json").string();
    config["validator"] =
        "scripted:" + (fs::path(out_dir) / "fixtures" / "validator.json").string();
    config["fixer"] = "scripted:" + (fs::path(out_dir) / "fixtures" / "fixer.json").string();
    config["selector"] = "scripted:" + (fs::path(out_dir) / "fixtures" / "selector.json").string();
    config["planner_k"] = demo_config.planner_k;
    config["temperature"] = demo_config.temperature;
    const std::string config_path = (fs::path(out_dir) / "config.json").string();
    std::ofstream config_out(config_path);
    config_out << config.dump(2) << "\n";

    std::cout << "demo written under " << out_dir << "\n"
              << "try: mats run --config " << config_path << "\n"
              << "     mats build-rlef --config " << config_path << " --out "
              << (fs::path(out_dir) / "rlef").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-agent Text2SQL pipeline: planning, execution-guided validation and "
                 "repair, preference-pair construction, and evaluation"};
    app.require_subcommand(1);

    CliConfig config;
    // The config file seeds defaults, so it must load before flag parsing.
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") config.config_file = argv[i + 1];
    try {
        if (!config.config_file.empty()) apply_config_file(config, config.config_file);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    auto add_common = [&](CLI::App* cmd, bool with_backends) {
        cmd->add_option("--config", config.config_file, "JSON config file (flags override it)");
        cmd->add_option("--dataset", config.dataset, "question file (JSON array or JSONL)");
        cmd->add_option("--db-root", config.db_root, "directory containing the databases");
        cmd->add_option("--out", config.out_dir, "output directory");
        cmd->add_option("--timeout", config.timeout_s, "per-query execution timeout in seconds");
        if (with_backends) {
            cmd->add_option("--planner", config.planner, "planner backend (scripted:<file> or http:<url>)");
            cmd->add_option("--validator", config.validator, "validator backend");
            cmd->add_option("--fixer", config.fixer, "fix backend");
            cmd->add_option("--selector", config.selector, "selection backend");
            cmd->add_option("--advanced", config.advanced, "assistant backend (optional)");
            cmd->add_option("--model", config.model, "model name for http backends");
            cmd->add_option("-K,--candidates", config.planner_k, "candidate count K");
            cmd->add_option("-T,--temperature", config.temperature, "sampling temperature");
            cmd->add_option("--value-k", config.value_k, "matched values per column");
            cmd->add_option("--chunk-k", config.chunk_k, "selection tournament subset size");
            cmd->add_option("--max-tables", config.max_tables, "schema budget: tables");
            cmd->add_option("--max-columns", config.max_columns, "schema budget: columns per table");
            cmd->add_option("--catalog-cap", config.catalog_cap, "distinct values scanned per column");
            cmd->add_option("--scores-file", config.scores_file, "precomputed ranker scores (JSON)");
            cmd->add_option("--seed-label", config.seed_label, "free-form label stored in the snapshot");
        }
    };

    CLI::App* run = app.add_subcommand("run", "run the pipeline over a dataset");
    add_common(run, true);
    run->add_option("--parallel", config.parallel, "concurrent samples");
    run->add_option("--candidate-parallel", config.candidate_parallel,
                    "concurrent candidates within a sample");

    CLI::App* rlef = app.add_subcommand("build-rlef", "build preference pairs from execution feedback");
    add_common(rlef, true);
    rlef->add_option("--iterations", config.iterations, "pair-building iterations");
    rlef->add_option("--stop-threshold", config.stop_threshold,
                     "relative pair-count change that stops iterating");

    EvalFlags eval_flags;
    CLI::App* eval = app.add_subcommand("eval", "score a results file (EX, optional TS/VES)");
    add_common(eval, false);
    eval->add_option("--results", eval_flags.results_path, "results.jsonl from a run")->required();
    eval->add_option("--ts-variants", eval_flags.ts_variants,
                     "directory of variant databases (<dir>/<db_id>/*.sqlite) enabling TS");
    eval->add_flag("--ves", eval_flags.ves, "measure the valid efficiency score");
    eval->add_option("--repeats", eval_flags.repeats, "timing repetitions for VES");

    std::string pairs_path, orpo_out;
    double lambda = 0.5;
    bool unnormalized = false;
    CLI::App* orpo = app.add_subcommand("orpo-score", "score preference pairs with the ORPO objective");
    orpo->add_option("--pairs", pairs_path, "scored-pair JSONL file")->required();
    CLI::Option* lambda_opt =
        orpo->add_option("--lambda", lambda, "odds-ratio weight (overrides per-line values)");
    orpo->add_flag("--unnormalized", unnormalized, "use raw sequence probability in the odds");
    orpo->add_option("--out", orpo_out, "also write orpo_scores.jsonl here");

    std::string demo_out = "demo";
    CLI::App* demo = app.add_subcommand("make-demo", "write a runnable demo (db, dataset, fixtures)");
    demo->add_option("--out", demo_out, "demo directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config);
        if (rlef->parsed()) return cmd_build_rlef(config);
        if (eval->parsed()) return cmd_eval(config, eval_flags);
        if (orpo->parsed())
            return cmd_orpo_score(pairs_path, lambda, lambda_opt->count() > 0, unnormalized,
                                  orpo_out);
        if (demo->parsed()) return cmd_make_demo(demo_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
