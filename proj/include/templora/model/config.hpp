#pragma once

#include <cstddef>
#include <string>

#include "templora/core/error.hpp"

namespace templora {

/// Hyperparameters of the miniature decoder-only transformer.
struct ModelConfig {
    std::size_t vocab_size = 2048;
    std::size_t d_model = 256;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 688;
    std::size_t context_window = 512;  ///< W
    double rope_base = 10000.0;
    double rms_eps = 1e-5;

    [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        detail::require(vocab_size >= 2, "model: vocab_size must be >= 2");
        detail::require(n_heads > 0 && d_model % n_heads == 0, "model: d_model must be divisible by n_heads");
        detail::require(head_dim() % 2 == 0, "model: head dimension must be even for rotary embeddings");
        detail::require(context_window >= 8, "model: context_window must be >= 8");
        detail::require(n_layers >= 1 && d_ff >= 1, "model: n_layers and d_ff must be positive");
        detail::require(rope_base > 1.0 && rms_eps > 0.0, "model: rope_base must be > 1 and rms_eps > 0");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace templora
