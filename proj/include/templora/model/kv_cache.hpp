#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/ops.hpp"
#include "templora/core/tensor.hpp"
#include "templora/model/config.hpp"

namespace templora {

/// Per-layer key/value store for incremental decoding.
///
/// Keys are stored already rotated at their entry's rotary position. Entries
/// in the non-sink region are contiguous in the token stream, so their
/// distance to a new query is the same whether measured in absolute or
/// cache-slot terms. Sink entries (the first `sink_count` slots, pinned once
/// eviction starts) also keep their unrotated keys and are re-rotated before
/// each forward so that their distance to the queries is slot-based.
template <class T>
class KVCache {
public:
    static constexpr std::size_t kAttentionSinks = 4;

    KVCache(const ModelConfig& cfg, std::size_t capacity = 0, std::size_t sink_count = 0)
        : n_layers_(cfg.n_layers),
          width_(cfg.d_model),
          head_dim_(cfg.head_dim()),
          capacity_(capacity == 0 ? cfg.context_window : capacity),
          sink_count_(sink_count) {
        detail::require(capacity_ <= cfg.context_window, "kv cache: capacity exceeds the context window");
        detail::require(sink_count == 0 || sink_count == kAttentionSinks, "kv cache: sink_count must be 0 or 4");
        detail::require(sink_count_ < capacity_, "kv cache: capacity must exceed sink count");
        keys_.assign(n_layers_, Tensor<T>::matrix(capacity_, width_));
        values_.assign(n_layers_, Tensor<T>::matrix(capacity_, width_));
        if (sink_count_ > 0) raw_sink_keys_.assign(n_layers_, Tensor<T>::matrix(sink_count_, width_));
    }

    [[nodiscard]] std::size_t length() const { return tokens_.size(); }
    [[nodiscard]] std::size_t capacity() const { return capacity_; }
    [[nodiscard]] std::size_t sink_count() const { return sink_count_; }
    [[nodiscard]] std::size_t n_layers() const { return n_layers_; }
    [[nodiscard]] std::span<const TokenId> tokens() const { return tokens_; }
    /// Rotary positions the cached keys were encoded at. For pinned sinks this
    /// is the encoding position used by the most recent forward.
    [[nodiscard]] std::span<const std::int64_t> positions() const { return positions_; }
    [[nodiscard]] std::int64_t next_position() const { return next_position_; }
    [[nodiscard]] bool sinks_detached() const { return detached_; }

    [[nodiscard]] std::span<const T> keys(std::size_t layer) const { return {keys_[layer].data(), length() * width_}; }
    [[nodiscard]] std::span<const T> values(std::size_t layer) const { return {values_[layer].data(), length() * width_}; }

    void clear() {
        tokens_.clear();
        positions_.clear();
        next_position_ = 0;
        detached_ = false;
    }

    /// Drops the oldest entries so that only the most recent `keep` remain.
    /// Stored rotations are kept; the next token continues at next_position().
    void keep_last(std::size_t keep) {
        detail::require(sink_count_ == 0, "kv cache: keep_last is not available with attention sinks");
        if (keep >= length()) return;
        erase_rows(0, length() - keep);
    }

    /// Keeps the first sink_count entries plus the most recent (window - sink_count).
    void evict_with_sinks(std::size_t window) {
        if (sink_count_ == 0) throw ConfigError("sink_evict: cache was created without attention sinks");
        if (window <= sink_count_) throw ConfigError("sink_evict: window must exceed the 4 sink entries");
        if (length() <= window) return;
        erase_rows(sink_count_, length() - window);
        detached_ = true;
    }

    /// Rotary position of the k-th new token in the next forward.
    [[nodiscard]] std::int64_t position_for_new(std::size_t k) const { return next_position_ + static_cast<std::int64_t>(k); }

    /// Re-rotates pinned sink keys of `layer` so that their distance to the next
    /// query equals the slot distance. Called once per layer per forward.
    void prepare_layer(std::size_t layer, double rope_base) {
        if (!detached_ || sink_count_ == 0) return;
        const std::int64_t offset = next_position_ - static_cast<std::int64_t>(length());
        std::vector<std::int64_t> pos(sink_count_);
        for (std::size_t i = 0; i < sink_count_; ++i) pos[i] = offset + static_cast<std::int64_t>(i);
        T* dst = keys_[layer].data();
        std::copy_n(raw_sink_keys_[layer].data(), sink_count_ * width_, dst);
        kernels::rope_rotate(dst, sink_count_, width_, head_dim_, pos, rope_base, 1);
        if (layer + 1 == n_layers_) std::copy(pos.begin(), pos.end(), positions_.begin());
    }

    [[nodiscard]] KvPrefix<T> prefix(std::size_t layer) const {
        return KvPrefix<T>{keys_[layer].data(), values_[layer].data(), length()};
    }

    /// Writes new rows for `layer` after the current entries; visible after commit().
    void stage(std::size_t layer, const Tensor<T>& raw_keys, const Tensor<T>& rotated_keys, const Tensor<T>& vals) {
        const std::size_t t = rotated_keys.rows();
        if (length() + t > capacity_) {
            throw CapacityError("kv cache: " + std::to_string(length()) + " + " + std::to_string(t) + " entries exceed capacity " +
                                std::to_string(capacity_));
        }
        std::copy_n(rotated_keys.data(), t * width_, keys_[layer].data() + length() * width_);
        std::copy_n(vals.data(), t * width_, values_[layer].data() + length() * width_);
        for (std::size_t r = 0; r < t; ++r) {
            const std::size_t slot = length() + r;
            if (slot < sink_count_) std::copy_n(raw_keys.row(r).data(), width_, raw_sink_keys_[layer].row(slot).data());
        }
    }

    void commit(std::span<const TokenId> new_tokens) {
        for (std::size_t k = 0; k < new_tokens.size(); ++k) {
            tokens_.push_back(new_tokens[k]);
            positions_.push_back(position_for_new(k));
        }
        next_position_ += static_cast<std::int64_t>(new_tokens.size());
    }

    [[nodiscard]] std::size_t bytes() const {
        std::size_t n = 0;
        for (const auto& k : keys_) n += k.bytes();
        for (const auto& v : values_) n += v.bytes();
        for (const auto& r : raw_sink_keys_) n += r.bytes();
        return n;
    }

private:
    void erase_rows(std::size_t begin, std::size_t count) {
        const std::size_t end = begin + count;
        for (std::size_t l = 0; l < n_layers_; ++l) {
            for (Tensor<T>* m : {&keys_[l], &values_[l]}) {
                T* d = m->data();
                std::copy(d + end * width_, d + length() * width_, d + begin * width_);
            }
        }
        tokens_.erase(tokens_.begin() + static_cast<std::ptrdiff_t>(begin), tokens_.begin() + static_cast<std::ptrdiff_t>(end));
        positions_.erase(positions_.begin() + static_cast<std::ptrdiff_t>(begin),
                         positions_.begin() + static_cast<std::ptrdiff_t>(end));
    }

    std::size_t n_layers_;
    std::size_t width_;
    std::size_t head_dim_;
    std::size_t capacity_;
    std::size_t sink_count_;
    std::vector<Tensor<T>> keys_;
    std::vector<Tensor<T>> values_;
    std::vector<Tensor<T>> raw_sink_keys_;
    std::vector<TokenId> tokens_;
    std::vector<std::int64_t> positions_;
    std::int64_t next_position_ = 0;
    bool detached_ = false;
};

}  // namespace templora
