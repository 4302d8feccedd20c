#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "templora/core/error.hpp"
#include "templora/core/graph.hpp"
#include "templora/core/ops.hpp"
#include "templora/lora/adapter.hpp"
#include "templora/model/transformer.hpp"

namespace templora::eval {

/// Per-token NLL of tokens[1..] under strided evaluation. Targets are taken
/// in blocks of `stride` starting at token 1; each block is predicted from a
/// single forward over the block and the (window - stride) tokens before it,
/// so no forward consumes more than `window` positions and every token is
/// scored exactly once. Entry k of the result is the NLL of tokens[k + 1].
template <class T>
std::vector<double> sliding_window_nll(const Transformer<T>& model, std::span<const TokenId> tokens, std::size_t window,
                                       std::size_t stride, const LoraAdapter<T>* adapter = nullptr, ForwardStats* stats = nullptr) {
    if (tokens.size() < 2) throw ConfigError("sliding_window_ppl: need at least 2 tokens");
    if (stride < 1 || stride > window || window > model.config().context_window) {
        throw ConfigError("sliding_window_ppl: require 1 <= stride <= window <= W (stride " + std::to_string(stride) + ", window " +
                          std::to_string(window) + ")");
    }
    const std::size_t context = window - stride;
    std::vector<double> out;
    out.reserve(tokens.size() - 1);
    for (std::size_t b = 1; b < tokens.size(); b += stride) {
        const std::size_t e = std::min(tokens.size(), b + stride);
        const std::size_t start = (b - 1) - std::min(context, b - 1);
        Graph<T> g(false);
        Var<T> logits = forward(g, model, tokens.subspan(start, e - 1 - start), static_cast<KVCache<T>*>(nullptr), adapter,
                                ForwardOptions{.stats = stats});
        const auto nll = token_nll(logits.value(), tokens.subspan(start + 1, e - 1 - start));
        out.insert(out.end(), nll.end() - static_cast<std::ptrdiff_t>(e - b), nll.end());
    }
    return out;
}

inline double mean(std::span<const double> v) {
    if (v.empty()) throw ConfigError("mean of an empty range");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double ppl_from_nll(std::span<const double> nll) { return std::exp(mean(nll)); }

template <class T>
double sliding_window_ppl(const Transformer<T>& model, std::span<const TokenId> tokens, std::size_t window, std::size_t stride,
                          const LoraAdapter<T>* adapter = nullptr) {
    return ppl_from_nll(sliding_window_nll(model, tokens, window, stride, adapter));
}

struct SegmentStats {
    std::size_t start = 0;  ///< first token index of the bucket
    std::size_t end = 0;    ///< one past the last token index that can fall in it
    std::size_t n_tokens = 0;
    double nll_sum = 0.0;
    [[nodiscard]] double mean_nll() const { return n_tokens ? nll_sum / static_cast<double>(n_tokens) : 0.0; }
    [[nodiscard]] double ppl() const { return std::exp(mean_nll()); }
};

struct EvalReport {
    std::vector<SegmentStats> segments;
    std::size_t n_tokens = 0;
    double nll_sum = 0.0;
    std::optional<double> bleu;
    std::map<std::string, std::string> metadata;  ///< config_hash, seed, ...

    [[nodiscard]] double mean_nll() const { return n_tokens ? nll_sum / static_cast<double>(n_tokens) : 0.0; }
    [[nodiscard]] double ppl() const { return std::exp(mean_nll()); }

    /// Index of the bucket holding absolute token position `index`.
    [[nodiscard]] std::size_t bucket_of(std::size_t index) const {
        for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
            if (index < segments[s + 1].start) return s;
        }
        return segments.size() - 1;
    }
};

/// Buckets a per-token NLL stream by absolute position. `nll[k]` belongs to
/// token `first_index + k`; `boundaries` are the interior bucket starts, so
/// {2000, 6000, 10000} gives four buckets.
inline EvalReport segment_report(std::span<const double> nll, std::span<const std::size_t> boundaries, std::size_t first_index = 1) {
    for (std::size_t i = 1; i < boundaries.size(); ++i) {
        if (boundaries[i] <= boundaries[i - 1]) throw ConfigError("segment_report: boundaries must be strictly increasing");
    }
    if (!boundaries.empty() && boundaries.front() == 0) throw ConfigError("segment_report: boundaries must be positive");
    EvalReport r;
    const std::size_t last = first_index + nll.size();
    std::size_t begin = 0;
    for (std::size_t b : boundaries) {
        r.segments.push_back(SegmentStats{begin, b, 0, 0.0});
        begin = b;
    }
    r.segments.push_back(SegmentStats{begin, std::max(begin, last), 0, 0.0});
    for (std::size_t k = 0; k < nll.size(); ++k) {
        auto& s = r.segments[r.bucket_of(first_index + k)];
        s.nll_sum += nll[k];
        ++s.n_tokens;
        r.nll_sum += nll[k];
        ++r.n_tokens;
    }
    return r;
}

/// `count` equal-width buckets over token positions [0, length).
inline std::vector<std::size_t> equal_boundaries(std::size_t length, std::size_t count) {
    std::vector<std::size_t> b;
    for (std::size_t i = 1; i < count; ++i) b.push_back(length * i / count);
    return b;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : r.segments) {
        segs.push_back({{"segment_start", s.start}, {"segment_end", s.end}, {"n_tokens", s.n_tokens}, {"ppl", s.ppl()}});
    }
    nlohmann::json j = {{"segments", segs}, {"n_tokens", r.n_tokens}, {"ppl", r.ppl()}, {"metadata", r.metadata}};
    j["bleu"] = r.bleu ? nlohmann::json(*r.bleu) : nlohmann::json(nullptr);
    return j;
}

/// CSV with `# key=value` metadata lines, a header and one row per bucket.
inline void write_csv(std::ostream& os, const EvalReport& r) {
    for (const auto& [k, v] : r.metadata) os << "# " << k << '=' << v << '\n';
    os << "segment_start,segment_end,n_tokens,ppl\n";
    os.precision(10);
    for (const auto& s : r.segments) os << s.start << ',' << s.end << ',' << s.n_tokens << ',' << s.ppl() << '\n';
}

// ---------------------------------------------------------------------------
// BLEU (single reference, no smoothing).

struct BleuStats {
    std::vector<std::size_t> matches;  ///< clipped n-gram matches, n = 1..max_n
    std::vector<std::size_t> totals;   ///< candidate n-gram counts
    std::size_t candidate_length = 0;
    std::size_t reference_length = 0;

    BleuStats& operator+=(const BleuStats& o) {
        if (matches.empty()) {
            matches.assign(o.matches.size(), 0);
            totals.assign(o.totals.size(), 0);
        }
        for (std::size_t i = 0; i < matches.size(); ++i) {
            matches[i] += o.matches[i];
            totals[i] += o.totals[i];
        }
        candidate_length += o.candidate_length;
        reference_length += o.reference_length;
        return *this;
    }

    [[nodiscard]] double score() const {
        if (candidate_length == 0) return 0.0;
        double log_sum = 0.0;
        for (std::size_t i = 0; i < matches.size(); ++i) {
            if (totals[i] == 0 || matches[i] == 0) return 0.0;
            log_sum += std::log(static_cast<double>(matches[i]) / static_cast<double>(totals[i]));
        }
        const double c = static_cast<double>(candidate_length), r = static_cast<double>(reference_length);
        const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
        return bp * std::exp(log_sum / static_cast<double>(matches.size()));
    }
};

inline BleuStats bleu_stats(std::span<const TokenId> candidate, std::span<const TokenId> reference, std::size_t max_n = 4) {
    if (reference.empty()) throw ConfigError("bleu: reference must be non-empty");
    if (max_n < 1) throw ConfigError("bleu: max_n must be >= 1");
    BleuStats s;
    s.matches.assign(max_n, 0);
    s.totals.assign(max_n, 0);
    s.candidate_length = candidate.size();
    s.reference_length = reference.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
        std::map<std::vector<TokenId>, std::size_t> ref_counts, cand_counts;
        for (std::size_t i = 0; i + n <= reference.size(); ++i) ++ref_counts[{reference.begin() + i, reference.begin() + i + n}];
        for (std::size_t i = 0; i + n <= candidate.size(); ++i) ++cand_counts[{candidate.begin() + i, candidate.begin() + i + n}];
        for (const auto& [gram, count] : cand_counts) {
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) s.matches[n - 1] += std::min(count, it->second);
            s.totals[n - 1] += count;
        }
    }
    return s;
}

/// Geometric mean of clipped n-gram precisions times the brevity penalty.
inline double bleu(std::span<const TokenId> candidate, std::span<const TokenId> reference, std::size_t max_n = 4) {
    return bleu_stats(candidate, reference, max_n).score();
}

/// Corpus-level BLEU: n-gram counts and lengths summed over all pairs first.
inline double corpus_bleu(const std::vector<std::vector<TokenId>>& candidates, const std::vector<std::vector<TokenId>>& references,
                          std::size_t max_n = 4) {
    if (candidates.size() != references.size()) throw ConfigError("corpus_bleu: candidate/reference count mismatch");
    BleuStats total;
    for (std::size_t i = 0; i < candidates.size(); ++i) total += bleu_stats(candidates[i], references[i], max_n);
    return total.matches.empty() ? 0.0 : total.score();
}

/// Signed percent change from `base` to `updated`.
inline double relative_change(double base, double updated) {
    if (base == 0.0) throw ConfigError("relative_change: base must be non-zero");
    return (updated - base) / base * 100.0;
}

}  // namespace templora::eval
