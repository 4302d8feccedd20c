#pragma once

#include <string>
#include <vector>

#include "templora/core/rng.hpp"
#include "templora/lora/adapter.hpp"
#include "templora/model/transformer.hpp"

namespace fixtures {

inline templora::ModelConfig tiny_config(std::size_t window = 32) {
    templora::ModelConfig c;
    c.vocab_size = 50;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 24;
    c.context_window = window;
    return c;
}

/// Model whose weights are large enough that attention patterns and logits
/// are far from uniform (the default 0.02 init makes many checks vacuous).
template <class T>
templora::Transformer<T> spiky_model(const templora::ModelConfig& cfg, std::uint64_t seed, double stddev = 0.35) {
    templora::Transformer<T> m(cfg, templora::Rng(seed));
    templora::Rng rng = templora::Rng(seed).substream("spiky");
    for (auto& p : m.parameters()) {
        const bool norm = p.name.find("norm") != std::string::npos;
        for (auto& v : p.value.values()) v = static_cast<T>(norm ? 1.0 + 0.2 * rng.normal() : stddev * rng.normal());
    }
    return m;
}

/// Sets every adapter factor (including the zero-initialized up-projections) to random values.
template <class T>
void randomize_adapter(templora::LoraAdapter<T>& adapter, std::uint64_t seed, double stddev = 0.2) {
    templora::Rng rng = templora::Rng(seed).substream("adapter");
    for (auto* p : adapter.parameters()) {
        for (auto& v : p->value.values()) v = static_cast<T>(stddev * rng.normal());
    }
}

inline std::vector<templora::TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    templora::Rng rng = templora::Rng(seed).substream("tokens");
    std::vector<templora::TokenId> out(n);
    for (auto& t : out) t = static_cast<templora::TokenId>(rng.below(vocab));
    return out;
}

}  // namespace fixtures
