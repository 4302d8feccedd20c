#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/ops.hpp"
#include "templora/core/rng.hpp"
#include "templora/engine/config.hpp"

namespace templora {

/// Applies the repetition penalty in place: every token present in `context`
/// has a positive logit divided by rho and a non-positive one multiplied by it.
inline void apply_repetition_penalty(std::vector<double>& logits, std::span<const TokenId> context, double rho) {
    std::vector<bool> seen(logits.size(), false);
    for (TokenId t : context) {
        if (t >= 0 && static_cast<std::size_t>(t) < logits.size()) seen[static_cast<std::size_t>(t)] = true;
    }
    for (std::size_t v = 0; v < logits.size(); ++v) {
        if (!seen[v]) continue;
        logits[v] = logits[v] > 0.0 ? logits[v] / rho : logits[v] * rho;
    }
}

/// Lowest id among the maximal entries.
inline TokenId argmax_token(std::span<const double> logits) {
    if (logits.empty()) throw ShapeError("sampler: empty logits");
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

/// Picks the next token. `context` is the token set visible in the window
/// (used by the repetition penalty); `rng` is used only for temperature sampling.
template <class T>
TokenId sample_next(std::span<const T> logits, const SamplerSpec& spec, std::span<const TokenId> context, Rng& rng) {
    std::vector<double> z(logits.begin(), logits.end());
    for (double v : z) {
        if (!std::isfinite(v)) throw NumericError("sampler: non-finite logit");
    }
    switch (spec.kind) {
        case SamplerSpec::Kind::Greedy: return argmax_token(z);
        case SamplerSpec::Kind::RepetitionPenalty:
            apply_repetition_penalty(z, context, spec.penalty);
            return argmax_token(z);
        case SamplerSpec::Kind::Temperature: {
            const double m = *std::max_element(z.begin(), z.end());
            double total = 0.0;
            for (auto& v : z) {
                v = std::exp((v - m) / spec.temperature);
                total += v;
            }
            double u = rng.uniform() * total;
            for (std::size_t i = 0; i < z.size(); ++i) {
                if (u < z[i]) return static_cast<TokenId>(i);
                u -= z[i];
            }
            return static_cast<TokenId>(z.size() - 1);
        }
    }
    throw ConfigError("sampler: unknown kind");
}

/// Negative log-probability of `token` under softmax(logits).
template <class T>
double token_surprisal(std::span<const T> logits, TokenId token) {
    double m = -std::numeric_limits<double>::infinity();
    for (T v : logits) m = std::max(m, static_cast<double>(v));
    double total = 0.0;
    for (T v : logits) total += std::exp(static_cast<double>(v) - m);
    return m + std::log(total) - static_cast<double>(logits[static_cast<std::size_t>(token)]);
}

}  // namespace templora
