#pragma once

#include <algorithm>
#include <cmath>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mats/core.hpp"
#include "mats/dataset.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

/// Lowercased word tokens. Splits on every non-alphanumeric character and on
/// lower-to-upper camel-case boundaries; no stemming.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    char prev = '\0';
    auto flush = [&] {
        if (!current.empty()) {
            tokens.push_back(current);
            current.clear();
        }
    };
    for (char c : text) {
        if (!std::isalnum(static_cast<unsigned char>(c))) {
            flush();
            prev = c;
            continue;
        }
        if (std::isupper(static_cast<unsigned char>(c)) &&
            std::islower(static_cast<unsigned char>(prev)))
            flush();
        current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        prev = c;
    }
    flush();
    return tokens;
}

// ---------------------------------------------------------------------------
// BM25
// ---------------------------------------------------------------------------

struct CorpusStats {
    std::size_t doc_count = 0;
    double avg_doc_len = 0.0;
    std::map<std::string, std::size_t> doc_freq;
};

inline CorpusStats build_corpus_stats(const std::vector<std::vector<std::string>>& docs) {
    CorpusStats stats;
    stats.doc_count = docs.size();
    std::size_t total_len = 0;
    for (const auto& doc : docs) {
        total_len += doc.size();
        std::set<std::string> seen(doc.begin(), doc.end());
        for (const auto& term : seen) ++stats.doc_freq[term];
    }
    stats.avg_doc_len = docs.empty() ? 0.0 : static_cast<double>(total_len) / static_cast<double>(docs.size());
    return stats;
}

/// Okapi BM25 with idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)). Query terms
/// contribute independently, so a duplicated query term counts twice.
inline double bm25_score(const std::vector<std::string>& query_terms,
                         const std::vector<std::string>& doc_terms, const CorpusStats& stats,
                         double k1 = 1.2, double b = 0.75) {
    if (query_terms.empty() || doc_terms.empty() || stats.doc_count == 0) return 0.0;
    std::map<std::string, std::size_t> tf;
    for (const auto& t : doc_terms) ++tf[t];
    const double len = static_cast<double>(doc_terms.size());
    const double avg = stats.avg_doc_len > 0.0 ? stats.avg_doc_len : len;
    const double n_docs = static_cast<double>(stats.doc_count);

    double score = 0.0;
    for (const auto& term : query_terms) {
        auto it = tf.find(term);
        if (it == tf.end()) continue;
        const double f = static_cast<double>(it->second);
        auto df_it = stats.doc_freq.find(term);
        const double df = df_it == stats.doc_freq.end() ? 0.0 : static_cast<double>(df_it->second);
        const double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
        const double denom = f + k1 * (1.0 - b + b * len / avg);
        score += idf * f * (k1 + 1.0) / denom;
    }
    return score;
}

// ---------------------------------------------------------------------------
// Value matching
// ---------------------------------------------------------------------------

/// Per column: the top `k` catalog values whose BM25 score against the
/// question is positive. When no value scores positive, the column falls back
/// to one representative value (the first catalog entry) at score 0. Each
/// value is one document; its column's value list is the scoring corpus.
inline MatchedValues match_values(const std::string& question, const ValueCatalog& catalog,
                                  std::size_t k = 2) {
    if (k < 1) throw ValidationError("match_values: k must be >= 1");
    const std::vector<std::string> query = tokenize(question);

    MatchedValues matched;
    for (const ColumnValues& cv : catalog.columns) {
        ColumnMatches cm;
        cm.column = cv.column;
        if (cv.values.empty()) {
            matched.columns.push_back(std::move(cm));
            continue;
        }
        std::vector<std::vector<std::string>> docs;
        docs.reserve(cv.values.size());
        for (const Literal& v : cv.values) docs.push_back(tokenize(v.text));
        const CorpusStats stats = build_corpus_stats(docs);

        std::vector<std::pair<double, std::size_t>> scored;  // (score, catalog index)
        for (std::size_t i = 0; i < cv.values.size(); ++i) {
            double s = bm25_score(query, docs[i], stats);
            if (s > 0.0) scored.emplace_back(s, i);
        }
        if (scored.empty()) {
            cm.values.push_back(MatchedValue{cv.values.front(), 0.0});
            matched.columns.push_back(std::move(cm));
            continue;
        }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            return a.first > b.first;  // ties keep catalog order
        });
        const std::size_t take = std::min(k, scored.size());
        for (std::size_t i = 0; i < take; ++i)
            cm.values.push_back(MatchedValue{cv.values[scored[i].second], scored[i].first});
        matched.columns.push_back(std::move(cm));
    }
    return matched;
}

// ---------------------------------------------------------------------------
// Element ranking
// ---------------------------------------------------------------------------

/// Relevance scores for schema elements, keyed by table name and by
/// "table.column".
struct ElementScores {
    std::map<std::string, double> tables;
    std::map<std::string, double> columns;

    double table_score(const std::string& table) const {
        auto it = tables.find(table);
        return it == tables.end() ? 0.0 : it->second;
    }
    double column_score(const std::string& table, const std::string& column) const {
        auto it = columns.find(table + "." + column);
        return it == columns.end() ? 0.0 : it->second;
    }
};

namespace detail {

inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 0.0;
    std::size_t inter = 0;
    for (const auto& t : a)
        if (b.count(t)) ++inter;
    const std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

/// Lexical ranker: each element's score is the normalized token overlap
/// (Jaccard) between the question and the element's token set. A column's set
/// is its name tokens plus tokens of values matched to it; a table's set is
/// its name tokens plus the union of its columns' sets.
inline ElementScores rank_elements(const std::string& question, const SchemaSnapshot& snapshot,
                                   const MatchedValues& matched) {
    const std::vector<std::string> qtokens_vec = tokenize(question);
    const std::set<std::string> qtokens(qtokens_vec.begin(), qtokens_vec.end());

    ElementScores scores;
    for (const TableDef& table : snapshot.tables) {
        std::vector<std::string> tname = tokenize(table.name);
        std::set<std::string> table_set(tname.begin(), tname.end());
        for (const ColumnDef& column : table.columns) {
            std::vector<std::string> cname = tokenize(column.name);
            std::set<std::string> col_set(cname.begin(), cname.end());
            if (const ColumnMatches* cm = matched.find(ColumnRef{table.name, column.name})) {
                for (const MatchedValue& mv : cm->values) {
                    for (auto& tok : tokenize(mv.value.text)) col_set.insert(std::move(tok));
                }
            }
            scores.columns[table.name + "." + column.name] = detail::jaccard(qtokens, col_set);
            table_set.insert(col_set.begin(), col_set.end());
        }
        scores.tables[table.name] = detail::jaccard(qtokens, table_set);
    }
    return scores;
}

/// Reads a precomputed scores file: a JSON object mapping "table" and
/// "table.column" keys to numbers. Lets an external ranker replace the
/// lexical one without changing the filtering code.
inline ElementScores load_scores_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SetupError("cannot open scores file: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("cannot parse scores file: ") + e.what());
    }
    if (!doc.is_object()) throw ValidationError("scores file must be a JSON object");
    ElementScores scores;
    for (const auto& [key, value] : doc.items()) {
        if (!value.is_number())
            throw ValidationError("scores file entry '" + key + "' is not a number");
        if (key.find('.') != std::string::npos)
            scores.columns[key] = value.get<double>();
        else
            scores.tables[key] = value.get<double>();
    }
    return scores;
}

// ---------------------------------------------------------------------------
// Schema filtering
// ---------------------------------------------------------------------------

struct RankerBudget {
    std::size_t max_tables = 6;
    std::size_t max_columns_per_table = 10;
};

namespace detail {

/// Indices of the `limit` highest-scoring items, returned in ascending index
/// order. Ties keep the lower index, so a constant scorer yields a prefix.
inline std::vector<std::size_t> top_indices(const std::vector<double>& scores, std::size_t limit) {
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(std::min(limit, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace detail

/// Prunes a schema to the budgeted top-scoring tables and columns. Primary
/// keys of kept tables always survive, as do foreign-key endpoint columns
/// whose both tables survive; foreign keys touching dropped elements are
/// removed. Relative order of the input is preserved throughout.
inline SchemaSnapshot filter_schema(const SchemaSnapshot& snapshot, const ElementScores& scores,
                                    const RankerBudget& budget) {
    if (budget.max_tables < 1 || budget.max_columns_per_table < 1)
        throw ValidationError("filter_schema: budgets must be >= 1");

    std::vector<double> table_scores;
    table_scores.reserve(snapshot.tables.size());
    for (const TableDef& t : snapshot.tables) table_scores.push_back(scores.table_score(t.name));
    const std::vector<std::size_t> kept_tables =
        detail::top_indices(table_scores, budget.max_tables);

    std::set<std::string> kept_table_names;
    for (std::size_t ti : kept_tables) kept_table_names.insert(snapshot.tables[ti].name);

    // FK endpoint columns are forced only when both endpoint tables survive.
    std::set<std::string> forced_columns;
    for (const ForeignKey& fk : snapshot.foreign_keys) {
        if (kept_table_names.count(fk.from.table) && kept_table_names.count(fk.to.table)) {
            forced_columns.insert(fk.from.qualified());
            forced_columns.insert(fk.to.qualified());
        }
    }

    SchemaSnapshot out;
    for (std::size_t ti : kept_tables) {
        const TableDef& table = snapshot.tables[ti];
        std::vector<double> col_scores;
        col_scores.reserve(table.columns.size());
        for (const ColumnDef& c : table.columns)
            col_scores.push_back(scores.column_score(table.name, c.name));
        const std::vector<std::size_t> top =
            detail::top_indices(col_scores, budget.max_columns_per_table);
        std::set<std::size_t> keep(top.begin(), top.end());
        for (std::size_t ci = 0; ci < table.columns.size(); ++ci) {
            const ColumnDef& c = table.columns[ci];
            if (c.is_primary_key || forced_columns.count(table.name + "." + c.name))
                keep.insert(ci);
        }
        TableDef kept_table;
        kept_table.name = table.name;
        for (std::size_t ci = 0; ci < table.columns.size(); ++ci)
            if (keep.count(ci)) kept_table.columns.push_back(table.columns[ci]);
        out.tables.push_back(std::move(kept_table));
    }
    for (const ForeignKey& fk : snapshot.foreign_keys) {
        if (out.has_column(fk.from) && out.has_column(fk.to)) out.foreign_keys.push_back(fk);
    }
    return out;
}

}  // namespace mats
