#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "templora/core/error.hpp"
#include "templora/core/graph.hpp"
#include "templora/core/rng.hpp"
#include "templora/engine/config.hpp"
#include "templora/engine/sampler.hpp"
#include "templora/engine/trainer.hpp"
#include "templora/lora/lora.hpp"
#include "templora/model/kv_cache.hpp"
#include "templora/model/transformer.hpp"

namespace templora {

/// Bookkeeping for one produced or scored token: the adapter version used,
/// the contiguous context span [window_begin, window_end), the first pinned
/// sink token (-1 when no sinks are detached) and the running NLL.
struct TokenEvent {
    std::size_t token_index = 0;
    std::int64_t version = 0;
    std::size_t window_begin = 0;
    std::size_t window_end = 0;
    std::int64_t sink_begin = -1;
    double nll = 0.0;
    double cumulative_nll = 0.0;
};

inline nlohmann::json to_json(const TokenEvent& e) {
    return {{"token_index", e.token_index}, {"version", e.version},   {"window_begin", e.window_begin}, {"window_end", e.window_end},
            {"sink_begin", e.sink_begin},   {"nll", e.nll},           {"cumulative_nll", e.cumulative_nll}};
}

/// Line-delimited JSON, one record per token.
inline void write_events(std::ostream& os, std::span<const TokenEvent> events) {
    for (const auto& e : events) os << to_json(e).dump() << '\n';
}

template <class T>
std::unique_ptr<Trainer<T>> make_trainer(const Transformer<T>& model, const EngineConfig& cfg, const ParallelOptions& parallel = {}) {
    LoraAdapter<T> adapter = attach(model, cfg.lora, Rng(cfg.seed).substream("adapter").next_u64());
    if (cfg.deployment == Deployment::Parallelized) {
        return std::make_unique<ThreadTrainer<T>>(model, std::move(adapter), cfg.training_length, parallel);
    }
    return std::make_unique<SyncTrainer<T>>(model, std::move(adapter), cfg.training_length);
}

template <class T>
std::unique_ptr<Trainer<T>> make_replay_trainer(const Transformer<T>& model, const EngineConfig& cfg, SwapSchedule schedule) {
    LoraAdapter<T> adapter = attach(model, cfg.lora, Rng(cfg.seed).substream("adapter").next_u64());
    return std::make_unique<ReplayTrainer<T>>(model, std::move(adapter), cfg.training_length, std::move(schedule));
}

/// Streaming generation with progressive chunk updates.
///
/// The stream Y starts as the prompt. Tokens are produced (or teacher-forced)
/// in chunks of Δ; each completed chunk, with the L_T tokens before it, is
/// handed to the trainer. Before the first token of every chunk the context is
/// reset to the L_X most recent tokens: recomputed from scratch, or, with cache
/// reuse, trimmed from the existing cache. With attention sinks the cache is
/// never recomputed; the four oldest entries stay pinned and the rest slide.
///
/// Invariant: the cache holds Y[window, cached_) and Y[cached_, size) is
/// still to be fed, so at most one token is pending between generation steps.
template <class T>
class GenerationSession {
public:
    GenerationSession(const Transformer<T>& model, const EngineConfig& cfg, std::span<const TokenId> prompt,
                      std::unique_ptr<Trainer<T>> trainer = nullptr)
        : model_(model),
          cfg_(cfg.validated(model.config())),
          cache_(model.config(), 0, cfg_.attention_sink ? KVCache<T>::kAttentionSinks : 0),
          tokens_(prompt.begin(), prompt.end()),
          prompt_length_(prompt.size()),
          sample_rng_(Rng(cfg_.seed).substream("sample")) {
        if (prompt.empty()) throw ConfigError("session: prompt must contain at least one token");
        for (TokenId t : prompt) {
            if (t < 0 || static_cast<std::size_t>(t) >= model.config().vocab_size) throw ConfigError("session: prompt token outside [0, V)");
        }
        if (cfg_.temp_lora) trainer_ = trainer ? std::move(trainer) : make_trainer(model, cfg_);
        chunk_start_ = prompt_length_;
        if (trainer_ && cfg_.pretrain_prompt) pretrain_on_prompt();
    }

    /// Generates `n` tokens and returns them.
    std::vector<TokenId> generate(std::size_t n) {
        require_stream_mode();
        std::vector<TokenId> out;
        out.reserve(n);
        for (std::size_t k = 0; k < n; ++k) out.push_back(step());
        return out;
    }

    /// Teacher-forces `tokens` onto the stream a chunk at a time and returns
    /// the NLL of each. Each chunk is scored before it is trained on.
    std::vector<double> feed(std::span<const TokenId> tokens) {
        require_stream_mode();
        std::vector<double> out;
        out.reserve(tokens.size());
        while (!tokens.empty()) {
            const std::size_t room = cfg_.chunk_size - (tokens_.size() - chunk_start_);
            const std::size_t n = std::min(room, tokens.size());
            const auto nll = score(tokens.first(n));
            out.insert(out.end(), nll.begin(), nll.end());
            tokens = tokens.subspan(n);
            maybe_complete_chunk();
        }
        return out;
    }

    /// Segment mode: teacher-forces `prefix`, generates `target_length` tokens
    /// and then trains on the whole segment. Returns the generated tokens.
    std::vector<TokenId> translate_segment(std::span<const TokenId> prefix, std::size_t target_length) {
        if (!segment_mode_ && tokens_.size() != prompt_length_) throw ConfigError("session: segment mode must start right after the prompt");
        const std::size_t W = model_.config().context_window;
        const std::size_t length = prefix.size() + target_length;
        if (length == 0) return {};
        if (length + cfg_.training_length > W) {
            throw ConfigError("session: segment of " + std::to_string(length) + " tokens exceeds W - L_T = " +
                              std::to_string(W - cfg_.training_length));
        }
        segment_mode_ = true;
        segment_keep_ = std::min(cfg_.input_length, W - length);
        if (tokens_.size() != chunk_start_) {
            chunk_start_ = tokens_.size();
            reset_pending_ = true;
        }
        if (!prefix.empty()) score(prefix);
        std::vector<TokenId> out;
        for (std::size_t k = 0; k < target_length; ++k) out.push_back(step());
        complete_chunk(chunk_start_, tokens_.size());
        chunk_start_ = tokens_.size();
        reset_pending_ = true;
        return out;
    }

    /// Releases the adapter and stops the trainer, first waiting for
    /// outstanding updates unless `wait` is false. The base model is never
    /// modified.
    void finish(bool wait = true) {
        if (trainer_) {
            if (wait) trainer_->drain();
            trainer_events_ = trainer_->events();
            train_stats_ = trainer_->stats();
        }
        trainer_.reset();
        active_.reset();
    }

    [[nodiscard]] const std::vector<TokenId>& tokens() const { return tokens_; }
    [[nodiscard]] std::span<const TokenId> generated() const { return std::span<const TokenId>(tokens_).subspan(prompt_length_); }
    [[nodiscard]] std::size_t prompt_length() const { return prompt_length_; }
    [[nodiscard]] const std::vector<TokenEvent>& events() const { return events_; }
    [[nodiscard]] const SwapSchedule& swaps() const { return swaps_; }
    [[nodiscard]] std::int64_t version() const { return active_ ? active_->version() : 0; }
    [[nodiscard]] std::shared_ptr<const LoraAdapter<T>> adapter() const { return active_; }
    [[nodiscard]] const EngineConfig& config() const { return cfg_; }
    [[nodiscard]] const ForwardStats& stats() const { return stats_; }
    [[nodiscard]] const KVCache<T>& cache() const { return cache_; }
    [[nodiscard]] std::size_t submitted_updates() const { return submitted_; }
    [[nodiscard]] std::vector<TrainerEvent> trainer_events() const { return trainer_ ? trainer_->events() : trainer_events_; }
    [[nodiscard]] ForwardStats train_stats() const { return trainer_ ? trainer_->stats() : train_stats_; }
    [[nodiscard]] std::size_t prompt_updates() const { return prompt_updates_; }

private:
    /// Trains on the part of a long prompt that will not be in the first
    /// window: prompt[0, P - L_X) in chunks of Δ. A trailing piece shorter than
    /// Δ/4 is skipped.
    void pretrain_on_prompt() {
        if (prompt_length_ <= cfg_.input_length) return;
        const std::size_t end = prompt_length_ - cfg_.input_length;
        const std::size_t min_piece = std::max<std::size_t>(1, cfg_.chunk_size / 4);
        for (std::size_t b = 0; b < end; b += cfg_.chunk_size) {
            const std::size_t e = std::min(end, b + cfg_.chunk_size);
            if (e - b < min_piece && b > 0) break;
            complete_chunk(b, e);
            ++prompt_updates_;
        }
        trainer_->drain();
    }

    void require_stream_mode() const {
        if (segment_mode_) throw ConfigError("session: generate/feed cannot be mixed with segment mode");
    }

    void begin_step() {
        if (trainer_) {
            if (auto a = trainer_->poll(tokens_.size())) {
                active_ = std::move(a);
                swaps_.push_back({tokens_.size(), active_->version()});
            }
        }
        if (reset_pending_) {
            reset_window();
            reset_pending_ = false;
        }
    }

    void reset_window() {
        const std::size_t i = tokens_.size();
        const std::size_t keep = std::min(segment_mode_ ? segment_keep_ : cfg_.input_length, i);
        if (!cfg_.cache_reuse || cache_.length() == 0) {
            last_logits_ = slide_and_recompute(model_, cache_, std::span<const TokenId>(tokens_), keep, active_.get(), &stats_);
            cached_ = i;
            window_ = i - keep;
            sink_begin_ = static_cast<std::int64_t>(window_);
            return;
        }
        if (cfg_.attention_sink) return;
        const std::size_t begin = std::max(window_, i - keep);
        cache_.keep_last(cached_ - begin);
        window_ = begin;
        last_logits_.reset();
    }

    /// Makes room for `incoming` new entries by sink eviction.
    void ensure_room(std::size_t incoming) {
        if (!cfg_.attention_sink) return;
        const std::size_t W = model_.config().context_window;
        if (cache_.length() + incoming <= W) return;
        sink_evict(cache_, W - incoming);
        window_ = cached_ - (cache_.length() - KVCache<T>::kAttentionSinks);
    }

    [[nodiscard]] std::int64_t detached_sink() const { return cache_.sinks_detached() ? sink_begin_ : -1; }

    TokenId step() {
        begin_step();
        const std::size_t i = tokens_.size();
        std::vector<T> logits;
        if (cached_ == i) {
            if (!last_logits_) throw ConfigError("session: no logits for the pending position");
            logits.assign(last_logits_->values().begin(), last_logits_->values().end());
        } else {
            std::span<const TokenId> pending = std::span<const TokenId>(tokens_).subspan(cached_, i - cached_);
            ensure_room(pending.size());
            Graph<T> g(false);
            const Tensor<T> out =
                forward(g, model_, pending, &cache_, active_.get(), ForwardOptions{.last_only = true, .stats = &stats_}).value();
            logits.assign(out.values().begin(), out.values().end());
            cached_ = i;
            last_logits_ = out;
        }
        std::vector<TokenId> context(cache_.tokens().begin(), cache_.tokens().end());
        Rng rng = sample_rng_.substream(static_cast<std::uint64_t>(i));
        const TokenId next = sample_next<T>(logits, cfg_.sampler, context, rng);
        record(i, token_surprisal<T>(logits, next));
        tokens_.push_back(next);
        maybe_complete_chunk();
        return next;
    }

    std::vector<double> score(std::span<const TokenId> piece) {
        begin_step();
        const std::size_t i = tokens_.size();
        for (TokenId t : piece) {
            if (t < 0 || static_cast<std::size_t>(t) >= model_.config().vocab_size) throw ConfigError("session: token outside [0, V)");
        }
        tokens_.insert(tokens_.end(), piece.begin(), piece.end());
        const std::size_t n = tokens_.size();
        std::span<const TokenId> all(tokens_);
        std::vector<double> nll;
        nll.reserve(piece.size());
        if (cached_ == i) {
            if (!last_logits_) throw ConfigError("session: no logits for the pending position");
            nll.push_back(token_surprisal<T>(last_logits_->values(), tokens_[i]));
        }
        if (n - 1 > cached_) {
            const std::size_t first = cached_;
            std::span<const TokenId> inputs = all.subspan(first, n - 1 - first);
            ensure_room(inputs.size());
            Graph<T> g(false);
            const Tensor<T> out = forward(g, model_, inputs, &cache_, active_.get(), ForwardOptions{.stats = &stats_}).value();
            const std::size_t skip = first < i ? i - 1 - first : 0;
            const auto rows = token_nll(out, all.subspan(first + 1, n - 1 - first));
            nll.insert(nll.end(), rows.begin() + static_cast<std::ptrdiff_t>(skip), rows.end());
            cached_ = n - 1;
        }
        last_logits_.reset();
        for (std::size_t k = 0; k < piece.size(); ++k) record(i + k, nll[k]);
        return nll;
    }

    void record(std::size_t index, double nll) {
        cumulative_nll_ += nll;
        events_.push_back(TokenEvent{index, version(), window_, index, detached_sink(), nll, cumulative_nll_});
    }

    void maybe_complete_chunk() {
        if (segment_mode_) return;
        if (tokens_.size() - chunk_start_ < cfg_.chunk_size) return;
        complete_chunk(chunk_start_, tokens_.size());
        chunk_start_ = tokens_.size();
        reset_pending_ = true;
    }

    void complete_chunk(std::size_t begin, std::size_t end) {
        if (!trainer_) return;
        const std::size_t lead = std::min(cfg_.training_length, begin);
        TrainJob job;
        job.tokens.assign(tokens_.begin() + static_cast<std::ptrdiff_t>(begin - lead), tokens_.begin() + static_cast<std::ptrdiff_t>(end));
        job.chunk_begin = lead;
        job.chunk_end = lead + (end - begin);
        job.stream_end = end;
        trainer_->submit(std::move(job));
        ++submitted_;
    }

    const Transformer<T>& model_;
    EngineConfig cfg_;
    KVCache<T> cache_;
    std::vector<TokenId> tokens_;
    std::size_t prompt_length_;
    Rng sample_rng_;
    std::unique_ptr<Trainer<T>> trainer_;
    std::shared_ptr<const LoraAdapter<T>> active_;

    std::size_t chunk_start_ = 0;
    bool reset_pending_ = true;
    bool segment_mode_ = false;
    std::size_t segment_keep_ = 0;
    std::size_t cached_ = 0;
    std::size_t window_ = 0;
    std::int64_t sink_begin_ = -1;
    std::optional<Tensor<T>> last_logits_;

    std::vector<TokenEvent> events_;
    SwapSchedule swaps_;
    double cumulative_nll_ = 0.0;
    ForwardStats stats_;
    std::size_t submitted_ = 0;
    std::size_t prompt_updates_ = 0;
    std::vector<TrainerEvent> trainer_events_;
    ForwardStats train_stats_;
};

}  // namespace templora
