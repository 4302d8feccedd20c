#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/ops.hpp"
#include "templora/core/rng.hpp"

namespace templora::corpus {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kSourceSep = 1;
inline constexpr TokenId kTargetSep = 2;
inline constexpr TokenId kFirstContent = 4;

/// Documents used for base pretraining and for evaluation come from disjoint
/// seed namespaces, so no evaluation document can appear in pretraining.
enum class SeedSpace { Pretrain, Eval };

inline std::uint64_t document_seed(SeedSpace space, std::uint64_t family_seed, std::uint64_t index) {
    return Rng(family_seed).substream(space == SeedSpace::Pretrain ? "pretrain-docs" : "eval-docs").substream(index).next_u64();
}

/// Order-2 Markov source over the token range [lo, lo + span), shared by
/// every document of a family. The successor set of state (a, b) is a hash of
/// b (`branching` candidates); a selects one of `rotations` orderings of the
/// 1/(i+1) weights over those candidates. Keeping the table this size makes
/// the background learnable by a small model while still depending on the
/// two previous tokens.
class HashedMarkov {
public:
    HashedMarkov(std::uint64_t family_seed, TokenId lo, std::size_t span, std::size_t branching = 6, std::size_t rotations = 3)
        : key_(mix64(family_seed ^ 0x6D61726B6F76ULL)), lo_(lo), span_(span), branching_(branching), rotations_(rotations) {
        detail::require(span >= 1 && branching >= 1 && rotations >= 1, "markov: empty token range");
        double z = 0.0;
        for (std::size_t i = 0; i < branching_; ++i) z += 1.0 / static_cast<double>(i + 1);
        for (std::size_t i = 0; i < branching_; ++i) weights_.push_back(1.0 / static_cast<double>(i + 1) / z);
    }

    /// i-th most likely successor of state (a, b).
    [[nodiscard]] TokenId candidate(TokenId a, TokenId b, std::size_t i) const {
        const std::size_t r = mix64(key_ ^ 0x726F74ULL ^ static_cast<std::uint64_t>(a)) % rotations_;
        const std::size_t slot = (i + r) % branching_;
        const std::uint64_t h = mix64(key_ ^ (static_cast<std::uint64_t>(b) * 0x9E3779B1ULL) ^ mix64(slot + 1));
        return lo_ + static_cast<TokenId>(h % span_);
    }
    [[nodiscard]] const std::vector<double>& weights() const { return weights_; }
    [[nodiscard]] std::size_t branching() const { return branching_; }

    /// Probability of `next` in state (a, b), summing weights of colliding candidates.
    [[nodiscard]] double probability(TokenId a, TokenId b, TokenId next) const {
        double p = 0.0;
        for (std::size_t i = 0; i < branching_; ++i) {
            if (candidate(a, b, i) == next) p += weights_[i];
        }
        return p;
    }

    TokenId sample(TokenId a, TokenId b, Rng& rng) const {
        double u = rng.uniform();
        for (std::size_t i = 0; i < branching_; ++i) {
            if (u < weights_[i]) return candidate(a, b, i);
            u -= weights_[i];
        }
        return candidate(a, b, branching_ - 1);
    }

private:
    std::uint64_t key_;
    TokenId lo_;
    std::size_t span_;
    std::size_t branching_;
    std::size_t rotations_;
    std::vector<double> weights_;
};

// ---------------------------------------------------------------------------
// Glossary-consistency documents.
//
// Vocabulary layout for V tokens: ids 0..3 are specials, then filler tokens,
// then a source pool and a target pool of V/4 ids each. A document repeats
//   [SRC_SEP, s_1 .. s_L, TGT_SEP, t_1 .. t_L]
// where each s_j is either Markov filler or one of the document's M source
// symbols, and t_j copies filler and replaces source symbol s by map(s). The
// map is a fresh injective assignment into the target pool per document.

struct GlossarySpec {
    std::uint64_t seed = 0;
    std::uint64_t family_seed = 7;
    std::size_t length = 16384;
    std::size_t vocab_size = 512;
    std::size_t mapping_size = 64;    ///< M
    std::size_t segment_length = 32;  ///< L, tokens per source (and target) segment
    double symbol_rate = 0.25;        ///< fraction of source positions carrying a mapped symbol

    [[nodiscard]] std::size_t pool_size() const { return vocab_size / 4; }
    [[nodiscard]] TokenId source_base() const { return static_cast<TokenId>(vocab_size - 2 * pool_size()); }
    [[nodiscard]] TokenId target_base() const { return static_cast<TokenId>(vocab_size - pool_size()); }
    [[nodiscard]] std::size_t filler_count() const { return static_cast<std::size_t>(source_base()) - kFirstContent; }

    void validate() const {
        detail::require(vocab_size >= 16, "glossary: vocab_size must be >= 16");
        detail::require(mapping_size >= 1 && mapping_size <= vocab_size / 4, "glossary: mapping size must be in [1, V/4]");
        detail::require(segment_length >= 1, "glossary: segment_length must be positive");
        detail::require(symbol_rate >= 0.0 && symbol_rate <= 1.0, "glossary: symbol_rate must be in [0, 1]");
        detail::require(length >= 1, "glossary: length must be positive");
    }
};

/// One source/target pair, as half-open token ranges into the document.
struct GlossarySegment {
    std::size_t begin = 0;  ///< index of the SRC_SEP token
    std::size_t source_begin = 0, source_end = 0;
    std::size_t target_begin = 0, target_end = 0;  ///< target_begin - 1 is the TGT_SEP token
    [[nodiscard]] std::size_t end() const { return target_end; }
};

struct GlossaryDoc {
    std::vector<TokenId> tokens;
    std::vector<GlossarySegment> segments;      ///< complete pairs only
    std::vector<std::pair<TokenId, TokenId>> mapping;  ///< (source, target), M entries

    [[nodiscard]] std::vector<std::size_t> boundaries() const {
        std::vector<std::size_t> b;
        for (const auto& s : segments) b.push_back(s.begin);
        return b;
    }
    [[nodiscard]] TokenId map(TokenId source) const {
        for (const auto& [s, t] : mapping) {
            if (s == source) return t;
        }
        return -1;
    }
};

inline GlossaryDoc gen_glossary_doc(const GlossarySpec& spec) {
    spec.validate();
    Rng rng = Rng(spec.seed).substream("glossary");
    Rng map_rng = rng.substream("mapping");
    const std::size_t pool = spec.pool_size();

    std::vector<TokenId> sources(pool), targets(pool);
    std::iota(sources.begin(), sources.end(), spec.source_base());
    std::iota(targets.begin(), targets.end(), spec.target_base());
    for (std::size_t i = pool; i > 1; --i) std::swap(sources[i - 1], sources[map_rng.below(i)]);
    for (std::size_t i = pool; i > 1; --i) std::swap(targets[i - 1], targets[map_rng.below(i)]);

    GlossaryDoc doc;
    std::vector<TokenId> lookup(spec.vocab_size, -1);
    for (std::size_t i = 0; i < spec.mapping_size; ++i) {
        doc.mapping.emplace_back(sources[i], targets[i]);
        lookup[static_cast<std::size_t>(sources[i])] = targets[i];
    }

    const HashedMarkov markov(spec.family_seed, kFirstContent, spec.filler_count());
    Rng body = rng.substream("body");
    TokenId a = kFirstContent, b = kFirstContent;
    const std::size_t L = spec.segment_length;
    while (doc.tokens.size() < spec.length) {
        GlossarySegment seg;
        seg.begin = doc.tokens.size();
        doc.tokens.push_back(kSourceSep);
        seg.source_begin = doc.tokens.size();
        for (std::size_t j = 0; j < L; ++j) {
            if (body.uniform() < spec.symbol_rate) {
                doc.tokens.push_back(doc.mapping[body.below(spec.mapping_size)].first);
            } else {
                const TokenId next = markov.sample(a, b, body);
                doc.tokens.push_back(next);
                a = b;
                b = next;
            }
        }
        seg.source_end = doc.tokens.size();
        doc.tokens.push_back(kTargetSep);
        seg.target_begin = doc.tokens.size();
        for (std::size_t j = seg.source_begin; j < seg.source_end; ++j) {
            const TokenId s = doc.tokens[j];
            doc.tokens.push_back(lookup[static_cast<std::size_t>(s)] >= 0 ? lookup[static_cast<std::size_t>(s)] : s);
        }
        seg.target_end = doc.tokens.size();
        if (seg.target_end <= spec.length) doc.segments.push_back(seg);
    }
    doc.tokens.resize(spec.length);
    return doc;
}

// ---------------------------------------------------------------------------
// Novel-like documents: hashed order-2 Markov background over [4, V) with
// per-document entity n-grams injected at a configured rate.

struct NovelSpec {
    std::uint64_t seed = 0;
    std::uint64_t family_seed = 11;
    std::size_t length = 16384;
    std::size_t vocab_size = 512;
    std::size_t entity_count = 32;
    std::size_t entity_length = 4;  ///< n-gram length k
    double rate = 20.0;             ///< entity occurrences per 1000 tokens

    void validate() const {
        detail::require(vocab_size > static_cast<std::size_t>(kFirstContent) + 1, "novel: vocab_size too small");
        detail::require(entity_length >= 1 && entity_count >= 1, "novel: entities must be non-empty");
        const double r = rate / 1000.0;
        detail::require(rate >= 0.0 && r * static_cast<double>(entity_length) < 1.0, "novel: rate too high for the entity length");
    }
};

struct NovelDoc {
    std::vector<TokenId> tokens;
    std::vector<std::vector<TokenId>> entities;
    std::vector<std::size_t> entity_starts;  ///< where each injected entity begins
};

inline NovelDoc gen_novel_doc(const NovelSpec& spec) {
    spec.validate();
    Rng rng = Rng(spec.seed).substream("novel");
    Rng ent_rng = rng.substream("entities");
    const std::size_t span = spec.vocab_size - static_cast<std::size_t>(kFirstContent);
    NovelDoc doc;
    for (std::size_t e = 0; e < spec.entity_count; ++e) {
        std::vector<TokenId> gram(spec.entity_length);
        for (auto& t : gram) t = kFirstContent + static_cast<TokenId>(ent_rng.below(span));
        doc.entities.push_back(std::move(gram));
    }
    // Start an entity with probability p per step so that the expected number
    // of occurrences per emitted token equals rate / 1000.
    const double r = spec.rate / 1000.0;
    const double p = r / (1.0 - r * static_cast<double>(spec.entity_length - 1));
    const HashedMarkov markov(spec.family_seed, kFirstContent, span);
    Rng body = rng.substream("body");
    TokenId a = kFirstContent, b = kFirstContent;
    while (doc.tokens.size() < spec.length) {
        if (body.uniform() < p) {
            doc.entity_starts.push_back(doc.tokens.size());
            const auto& gram = doc.entities[body.below(spec.entity_count)];
            doc.tokens.insert(doc.tokens.end(), gram.begin(), gram.end());
            a = gram.size() >= 2 ? gram[gram.size() - 2] : b;
            b = gram.back();
        } else {
            const TokenId next = markov.sample(a, b, body);
            doc.tokens.push_back(next);
            a = b;
            b = next;
        }
    }
    doc.tokens.resize(spec.length);
    while (!doc.entity_starts.empty() && doc.entity_starts.back() + spec.entity_length > spec.length) doc.entity_starts.pop_back();
    return doc;
}

}  // namespace templora::corpus
