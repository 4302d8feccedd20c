#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/graph.hpp"
#include "templora/core/ops.hpp"
#include "templora/core/rng.hpp"
#include "templora/lora/adapter.hpp"
#include "templora/model/transformer.hpp"

namespace templora {

/// Allocates a fresh temporary adapter for `model`. Base weights are not touched.
template <class T>
LoraAdapter<T> attach(const Transformer<T>& model, const LoraConfig& config, std::uint64_t seed) {
    return LoraAdapter<T>(model.config(), config, Rng(seed).substream("lora"));
}

/// Releases the adapter. Idempotent.
template <class T>
void destroy(std::optional<LoraAdapter<T>>& adapter) {
    adapter.reset();
}

/// x W^T + (alpha/r) (dropout(x) A^T) B^T for one targeted projection.
/// Dropout is applied only in Train mode.
template <class T>
Tensor<T> adapted_projection(const Tensor<T>& x, const Tensor<T>& w_base, const LoraAdapter<T>& adapter, std::size_t layer,
                             Projection proj, Mode mode = Mode::Eval, Rng* rng = nullptr) {
    Graph<T> g(false);
    Var<T> in = g.borrow(x);
    Var<T> y = ops::linear(in, g.borrow(w_base));
    if (mode == Mode::Train && adapter.config().dropout > 0.0) {
        if (rng == nullptr) throw ConfigError("adapted_projection: train mode needs a dropout stream");
        in = ops::dropout(in, adapter.config().dropout, *rng);
    }
    Var<T> delta = ops::linear(ops::linear(in, g.borrow(adapter.down(layer, proj).value)), g.borrow(adapter.up(layer, proj).value));
    return ops::add(y, ops::scale(delta, static_cast<T>(adapter.scaling()))).value();
}

struct TrainReport {
    int steps = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
    double mean_loss = 0.0;
};

/// Learning-rate multiplier for step `step` of `steps` in chunk update
/// `update`: a linear ramp over all steps of the first `warmup` updates.
inline double warmup_factor(std::int64_t update, int step, int steps, int warmup) {
    if (warmup <= 0 || update >= warmup) return 1.0;
    const double done = static_cast<double>(update) * steps + step + 1;
    return done / (static_cast<double>(warmup) * steps);
}

/// One progressive update: trains the adapter to produce
/// history[chunk_begin, chunk_end) given the preceding `context_tokens` (L_T)
/// tokens as input. Only chunk positions contribute to the loss. Runs
/// `epochs` passes; the optimizer state persists across calls; the adapter's
/// version increases by one (unless epochs == 0, which is a no-op).
template <class T>
TrainReport train_chunk(LoraAdapter<T>& adapter, const Transformer<T>& model, std::span<const TokenId> history,
                        std::size_t chunk_begin, std::size_t chunk_end, std::size_t context_tokens, ForwardStats* stats = nullptr) {
    const LoraConfig& lc = adapter.config();
    if (chunk_end > history.size() || chunk_begin >= chunk_end) throw ConfigError("train_chunk: empty or out-of-range chunk");
    const std::size_t W = model.config().context_window;
    const std::size_t lead = std::min(context_tokens, chunk_begin);
    const std::size_t chunk_len = chunk_end - chunk_begin;
    const std::size_t piece = lc.batch_tokens == 0 ? chunk_len : std::min(lc.batch_tokens, chunk_len);
    if (lead + piece > W) {
        throw ConfigError("train_chunk: L_T (" + std::to_string(lead) + ") + chunk (" + std::to_string(piece) + ") exceeds W = " +
                          std::to_string(W));
    }
    TrainReport report;
    if (lc.epochs == 0) return report;

    std::vector<std::pair<std::size_t, std::size_t>> pieces;
    for (std::size_t b = chunk_begin; b < chunk_end; b += piece) pieces.emplace_back(b, std::min(chunk_end, b + piece));
    const int steps = lc.epochs * static_cast<int>(pieces.size());
    const std::int64_t update = adapter.version();
    auto params = adapter.parameters();

    int step = 0;
    double total = 0.0;
    for (int epoch = 0; epoch < lc.epochs; ++epoch) {
        for (const auto& [pb, pe] : pieces) {
            const std::size_t start = pb - std::min(context_tokens, pb);
            if (pe - start < 2 || (pb == 0 && pe == 1)) {
                ++step;
                continue;
            }
            std::span<const TokenId> inputs = history.subspan(start, pe - 1 - start);
            std::span<const TokenId> targets = history.subspan(start + 1, pe - 1 - start);
            std::vector<std::uint8_t> mask(targets.size());
            for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (start + 1 + i) >= pb ? 1 : 0;

            for (auto* p : params) p->zero_grad();
            Graph<T> g(true);
            Rng drop = adapter.dropout_stream(update, step);
            Var<T> logits = forward_adapter_train(g, model, inputs, adapter, drop, stats);
            Var<T> loss = ops::cross_entropy(logits, targets, mask);
            g.backward(loss);
            const double lr = lc.lr * warmup_factor(update, step, steps, lc.warmup_chunks);
            adapter.optimizer().step(params, lr);

            const double l = static_cast<double>(loss.value()[0]);
            if (report.steps == 0) report.first_loss = l;
            report.last_loss = l;
            total += l;
            ++report.steps;
            ++step;
        }
    }
    if (report.steps > 0) report.mean_loss = total / report.steps;
    adapter.mark_update_complete();
    return report;
}

/// Teacher-forced mean NLL of history[chunk_begin, chunk_end) given the
/// preceding `context_tokens` tokens, in eval mode.
template <class T>
double chunk_nll(const Transformer<T>& model, const LoraAdapter<T>* adapter, std::span<const TokenId> history,
                 std::size_t chunk_begin, std::size_t chunk_end, std::size_t context_tokens) {
    const std::size_t start = chunk_begin - std::min(context_tokens, chunk_begin);
    const std::size_t first_target = std::max<std::size_t>(chunk_begin, start + 1);
    if (chunk_end <= first_target) throw ConfigError("chunk_nll: nothing to score");
    Graph<T> g(false);
    std::span<const TokenId> inputs = history.subspan(start, chunk_end - 1 - start);
    Var<T> logits = forward(g, model, inputs, static_cast<KVCache<T>*>(nullptr), adapter);
    const auto nll = token_nll(logits.value(), history.subspan(start + 1, chunk_end - 1 - start));
    double total = 0.0;
    for (std::size_t i = first_target - start - 1; i < nll.size(); ++i) total += nll[i];
    return total / static_cast<double>(chunk_end - first_target);
}

}  // namespace templora
