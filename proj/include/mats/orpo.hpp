#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mats/common.hpp"

namespace mats {

// ---------------------------------------------------------------------------
// Scored sequences
// ---------------------------------------------------------------------------

/// Token log-probabilities for one prompt + completion. The first
/// `prompt_boundary` entries belong to the prompt and never contribute to the
/// loss; the remaining m = size - prompt_boundary entries are the completion.
struct ScoredSequence {
    std::vector<double> token_logprobs;
    std::size_t prompt_boundary = 0;

    std::size_t completion_length() const {
        return token_logprobs.size() > prompt_boundary ? token_logprobs.size() - prompt_boundary : 0;
    }

    void validate() const {
        if (prompt_boundary > token_logprobs.size())
            throw ValidationError("prompt boundary exceeds sequence length");
        if (completion_length() == 0)
            throw ValidationError("sequence has an empty completion");
        for (double lp : token_logprobs) {
            if (!std::isfinite(lp)) throw ValidationError("non-finite token logprob");
            if (lp > 0.0) throw ValidationError("positive token logprob (probability > 1)");
        }
    }

    double completion_sum() const {
        double s = 0.0;
        for (std::size_t i = prompt_boundary; i < token_logprobs.size(); ++i)
            s += token_logprobs[i];
        return s;
    }
};

// ---------------------------------------------------------------------------
// Loss components
// ---------------------------------------------------------------------------

/// Average negative log-likelihood over the completion tokens only. Prompt
/// logprobs are excluded entirely, so changing them never moves this value.
inline double completion_nll(const ScoredSequence& seq) {
    seq.validate();
    return -seq.completion_sum() / static_cast<double>(seq.completion_length());
}

inline constexpr double kLikelihoodClamp = 1e-12;

/// Sequence probability used inside the odds. Normalized mode takes the
/// geometric mean over completion tokens, unnormalized the raw product; both
/// are clamped to (eps, 1-eps) so the odds stay finite.
inline double sequence_likelihood(const ScoredSequence& seq, bool normalized = true) {
    seq.validate();
    double log_p = seq.completion_sum();
    if (normalized) log_p /= static_cast<double>(seq.completion_length());
    double p = std::exp(log_p);
    if (p < kLikelihoodClamp) p = kLikelihoodClamp;
    if (p > 1.0 - kLikelihoodClamp) p = 1.0 - kLikelihoodClamp;
    return p;
}

inline double odds(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ValidationError("odds requires p in (0, 1)");
    return p / (1.0 - p);
}

namespace detail {

/// -ln(sigmoid(z)) evaluated without overflow for large |z|.
inline double neg_log_sigmoid(double z) {
    if (z >= 0.0) return std::log1p(std::exp(-z));
    return -z + std::log1p(std::exp(z));
}

}  // namespace detail

/// The odds-ratio penalty -ln(sigmoid(ln(odds_w) - ln(odds_l))). Always
/// positive; equals ln 2 exactly when the two likelihoods coincide.
inline double or_penalty(const ScoredSequence& chosen, const ScoredSequence& rejected,
                         bool normalized = true) {
    const double pw = sequence_likelihood(chosen, normalized);
    const double pl = sequence_likelihood(rejected, normalized);
    const double z = std::log(odds(pw)) - std::log(odds(pl));
    return detail::neg_log_sigmoid(z);
}

struct OrpoLoss {
    double total = 0.0;
    double nll_part = 0.0;
    double or_part = 0.0;
};

/// total = completion_nll(chosen) + lambda * or_penalty(chosen, rejected).
inline OrpoLoss orpo_loss(const ScoredSequence& chosen, const ScoredSequence& rejected,
                          double lambda = 0.5, bool normalized = true) {
    if (lambda < 0.0) throw ValidationError("lambda must be >= 0");
    OrpoLoss loss;
    loss.nll_part = completion_nll(chosen);
    loss.or_part = or_penalty(chosen, rejected, normalized);
    loss.total = loss.nll_part + lambda * loss.or_part;
    return loss;
}

// ---------------------------------------------------------------------------
// Analytic gradient
// ---------------------------------------------------------------------------

/// Partial derivatives of orpo_loss with respect to every input token
/// logprob. Prompt entries are zero; entries whose likelihood sits on a clamp
/// boundary are zero through the odds term.
struct OrpoGradient {
    std::vector<double> chosen;
    std::vector<double> rejected;
};

inline OrpoGradient orpo_loss_gradient(const ScoredSequence& chosen, const ScoredSequence& rejected,
                                       double lambda = 0.5, bool normalized = true) {
    if (lambda < 0.0) throw ValidationError("lambda must be >= 0");
    chosen.validate();
    rejected.validate();

    const double m_w = static_cast<double>(chosen.completion_length());
    const double m_l = static_cast<double>(rejected.completion_length());
    const double c_w = normalized ? 1.0 / m_w : 1.0;
    const double c_l = normalized ? 1.0 / m_l : 1.0;

    const double pw = sequence_likelihood(chosen, normalized);
    const double pl = sequence_likelihood(rejected, normalized);
    auto clamped = [](double p) {
        return p <= kLikelihoodClamp || p >= 1.0 - kLikelihoodClamp;
    };
    const double z = std::log(odds(pw)) - std::log(odds(pl));
    const double sig = 1.0 / (1.0 + std::exp(-z));

    // d(-ln sigmoid(z))/dz = sigmoid(z) - 1; dz/d(logprob) flows through
    // ln P - ln(1-P) with derivative 1/(1-P) per unit of ln P.
    const double dOR_dlpw = clamped(pw) ? 0.0 : (sig - 1.0) * c_w / (1.0 - pw);
    const double dOR_dlpl = clamped(pl) ? 0.0 : (1.0 - sig) * c_l / (1.0 - pl);

    OrpoGradient grad;
    grad.chosen.assign(chosen.token_logprobs.size(), 0.0);
    grad.rejected.assign(rejected.token_logprobs.size(), 0.0);
    for (std::size_t i = chosen.prompt_boundary; i < chosen.token_logprobs.size(); ++i)
        grad.chosen[i] = -1.0 / m_w + lambda * dOR_dlpw;
    for (std::size_t j = rejected.prompt_boundary; j < rejected.token_logprobs.size(); ++j)
        grad.rejected[j] = lambda * dOR_dlpl;
    return grad;
}

// ---------------------------------------------------------------------------
// Batch scoring input
// ---------------------------------------------------------------------------

/// One line of a scored-pair file: two logprob vectors sharing a prompt
/// boundary (or carrying separate ones) plus the mixing weight.
struct ScoredPair {
    ScoredSequence chosen;
    ScoredSequence rejected;
    double lambda = 0.5;
};

/// Loads a JSONL file of {chosen_logprobs, rejected_logprobs, boundary,
/// lambda} records. `boundary` is one integer applied to both sequences or a
/// two-element array [chosen, rejected]; `lambda` defaults to 0.5.
inline std::vector<ScoredPair> load_scored_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SetupError("cannot open scored-pair file: " + path);
    std::vector<ScoredPair> pairs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("scored-pair line " + std::to_string(line_no) + ": " + e.what());
        }
        auto logprobs = [&](const char* key) -> std::vector<double> {
            if (!rec.contains(key) || !rec[key].is_array())
                throw ValidationError("scored-pair line " + std::to_string(line_no) +
                                      ": missing array field '" + key + "'");
            return rec[key].get<std::vector<double>>();
        };
        ScoredPair pair;
        pair.chosen.token_logprobs = logprobs("chosen_logprobs");
        pair.rejected.token_logprobs = logprobs("rejected_logprobs");
        if (rec.contains("boundary")) {
            const auto& b = rec["boundary"];
            if (b.is_number_unsigned() || b.is_number_integer()) {
                pair.chosen.prompt_boundary = b.get<std::size_t>();
                pair.rejected.prompt_boundary = b.get<std::size_t>();
            } else if (b.is_array() && b.size() == 2) {
                pair.chosen.prompt_boundary = b[0].get<std::size_t>();
                pair.rejected.prompt_boundary = b[1].get<std::size_t>();
            } else {
                throw ValidationError("scored-pair line " + std::to_string(line_no) +
                                      ": 'boundary' must be an integer or [chosen, rejected]");
            }
        }
        if (rec.contains("lambda")) pair.lambda = rec["lambda"].get<double>();
        try {
            pair.chosen.validate();
            pair.rejected.validate();
        } catch (const ValidationError& e) {
            throw ValidationError("scored-pair line " + std::to_string(line_no) + ": " + e.what());
        }
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

}  // namespace mats
