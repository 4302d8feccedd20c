#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/graph.hpp"
#include "templora/core/ops.hpp"
#include "templora/core/optim.hpp"
#include "templora/corpus/generators.hpp"
#include "templora/model/transformer.hpp"

namespace templora::corpus {

enum class CorpusKind { Glossary, Novel, Mixed };

inline CorpusKind parse_corpus_kind(const std::string& s) {
    if (s == "glossary") return CorpusKind::Glossary;
    if (s == "novel") return CorpusKind::Novel;
    if (s == "mixed") return CorpusKind::Mixed;
    throw ConfigError("corpus kind must be glossary, novel or mixed (got '" + s + "')");
}

inline std::string to_string(CorpusKind k) {
    switch (k) {
        case CorpusKind::Glossary: return "glossary";
        case CorpusKind::Novel: return "novel";
        default: return "mixed";
    }
}

/// A family of documents sharing background statistics. Per-document seeds
/// and lengths are filled in by make_document.
struct CorpusFamily {
    CorpusKind kind = CorpusKind::Glossary;
    GlossarySpec glossary;
    NovelSpec novel;

    [[nodiscard]] std::size_t vocab_size() const { return kind == CorpusKind::Novel ? novel.vocab_size : glossary.vocab_size; }
};

/// Deterministic document `index` of the family in the given seed namespace.
inline std::vector<TokenId> make_document(const CorpusFamily& family, SeedSpace space, std::uint64_t index, std::size_t length) {
    CorpusKind kind = family.kind;
    if (kind == CorpusKind::Mixed) kind = index % 2 == 0 ? CorpusKind::Glossary : CorpusKind::Novel;
    if (kind == CorpusKind::Glossary) {
        GlossarySpec s = family.glossary;
        s.seed = document_seed(space, s.family_seed, index);
        s.length = length;
        return gen_glossary_doc(s).tokens;
    }
    NovelSpec s = family.novel;
    s.seed = document_seed(space, s.family_seed, index);
    s.length = length;
    return gen_novel_doc(s).tokens;
}

struct PretrainOptions {
    std::size_t steps = 2000;
    std::size_t seq_len = 0;     ///< tokens per sequence; 0 means the context window
    std::size_t batch = 1;       ///< sequences per optimizer step (gradient accumulation)
    double lr = 3e-3;
    double min_lr_ratio = 0.1;   ///< cosine floor as a fraction of lr
    std::size_t warmup_steps = 100;
    double weight_decay = 0.0;
    double grad_clip = 1.0;      ///< global norm; 0 disables
};

struct PretrainResult {
    std::vector<double> loss_curve;  ///< mean training loss per step
};

inline double pretrain_lr(const PretrainOptions& o, std::size_t step) {
    if (step < o.warmup_steps) return o.lr * static_cast<double>(step + 1) / static_cast<double>(o.warmup_steps);
    const double span = static_cast<double>(std::max<std::size_t>(1, o.steps - o.warmup_steps));
    const double t = std::min(1.0, static_cast<double>(step - o.warmup_steps) / span);
    const double floor = o.lr * o.min_lr_ratio;
    return floor + (o.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Next-token training of every base weight on freshly sampled pretraining
/// documents. Deterministic for a given model init, family, options.
/// `on_step(step, loss)` is called after each optimizer step if provided.
template <class T>
PretrainResult pretrain_base(Transformer<T>& model, const CorpusFamily& family, const PretrainOptions& opts,
                             const std::function<void(std::size_t, double)>& on_step = {}) {
    if (opts.steps < 1) throw ConfigError("pretrain: steps must be >= 1");
    if (family.vocab_size() != model.config().vocab_size) throw ConfigError("pretrain: corpus and model vocab sizes differ");
    const std::size_t len = opts.seq_len == 0 ? model.config().context_window : opts.seq_len;
    if (len < 2 || len > model.config().context_window) throw ConfigError("pretrain: seq_len must be in [2, W]");
    AdamW<T> opt(AdamWOptions{.lr = opts.lr, .weight_decay = opts.weight_decay});
    std::vector<Parameter<T>*> params;
    for (auto& p : model.parameters()) params.push_back(&p);

    PretrainResult result;
    for (std::size_t step = 0; step < opts.steps; ++step) {
        for (auto* p : params) p->zero_grad();
        double loss = 0.0;
        for (std::size_t b = 0; b < opts.batch; ++b) {
            const auto doc = make_document(family, SeedSpace::Pretrain, step * opts.batch + b, len + 1);
            Graph<T> g(true);
            Var<T> logits = forward_base_train(g, model, std::span<const TokenId>(doc).first(len));
            Var<T> l = ops::cross_entropy(logits, std::span<const TokenId>(doc).subspan(1, len));
            if (opts.batch > 1) l = ops::scale(l, static_cast<T>(1.0 / static_cast<double>(opts.batch)));
            g.backward(l);
            loss += static_cast<double>(l.value()[0]);
        }
        if (opts.grad_clip > 0.0) {
            double sq = 0.0;
            for (auto* p : params) {
                for (T v : p->grad.values()) sq += static_cast<double>(v) * static_cast<double>(v);
            }
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) throw NumericError("pretrain: non-finite gradient at step " + std::to_string(step));
            if (norm > opts.grad_clip) {
                const T s = static_cast<T>(opts.grad_clip / norm);
                for (auto* p : params) {
                    for (auto& v : p->grad.values()) v *= s;
                }
            }
        }
        opt.step(params, pretrain_lr(opts, step));
        result.loss_curve.push_back(loss);
        if (on_step) on_step(step, loss);
    }
    return result;
}

}  // namespace templora::corpus
