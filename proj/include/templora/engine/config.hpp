#pragma once

#include <cstdint>
#include <string>

#include "templora/core/error.hpp"
#include "templora/lora/adapter.hpp"
#include "templora/model/config.hpp"

namespace templora {

enum class Deployment { Cascaded, Parallelized };

struct SamplerSpec {
    enum class Kind { Greedy, RepetitionPenalty, Temperature };
    Kind kind = Kind::Greedy;
    double penalty = 1.12;     ///< RepetitionPenalty only
    double temperature = 1.0;  ///< Temperature only

    static SamplerSpec greedy() { return {}; }
    static SamplerSpec repetition_penalty(double rho = 1.12) { return {Kind::RepetitionPenalty, rho, 1.0}; }
    static SamplerSpec with_temperature(double t) { return {Kind::Temperature, 1.12, t}; }
};

inline std::string to_string(SamplerSpec::Kind k) {
    switch (k) {
        case SamplerSpec::Kind::Greedy: return "greedy";
        case SamplerSpec::Kind::RepetitionPenalty: return "repetition_penalty";
        default: return "temperature";
    }
}

inline SamplerSpec::Kind parse_sampler_kind(const std::string& s) {
    if (s == "greedy") return SamplerSpec::Kind::Greedy;
    if (s == "repetition_penalty") return SamplerSpec::Kind::RepetitionPenalty;
    if (s == "temperature") return SamplerSpec::Kind::Temperature;
    throw ConfigError("sampler must be greedy, repetition_penalty or temperature (got '" + s + "')");
}

struct EngineConfig {
    std::size_t chunk_size = 128;       ///< Δ
    std::size_t input_length = 0;       ///< L_X; 0 means W - Δ
    std::size_t training_length = 128;  ///< L_T
    bool temp_lora = true;              ///< false runs the same window management with the base model only
    bool cache_reuse = false;
    bool attention_sink = false;
    bool pretrain_prompt = true;
    Deployment deployment = Deployment::Cascaded;
    SamplerSpec sampler;
    LoraConfig lora;
    std::uint64_t seed = 0;

    /// Checks the constraints against the model and fills defaults. Returns the normalized copy.
    [[nodiscard]] EngineConfig validated(const ModelConfig& model) const {
        EngineConfig c = *this;
        const std::size_t W = model.context_window;
        if (c.chunk_size == 0) throw ConfigError("engine: chunk_size must be >= 1");
        if (c.chunk_size >= W) {
            throw ConfigError("engine: chunk_size (" + std::to_string(c.chunk_size) + ") must be smaller than W (" + std::to_string(W) + ")");
        }
        if (c.input_length == 0) c.input_length = W - c.chunk_size;
        if (c.input_length + c.chunk_size > W) {
            throw ConfigError("engine: constraint L_X + chunk_size <= W violated (" + std::to_string(c.input_length) + " + " +
                              std::to_string(c.chunk_size) + " > " + std::to_string(W) + ")");
        }
        if (c.training_length + c.chunk_size > W) {
            throw ConfigError("engine: constraint L_T + chunk_size <= W violated (" + std::to_string(c.training_length) + " + " +
                              std::to_string(c.chunk_size) + " > " + std::to_string(W) + ")");
        }
        if (c.attention_sink && !c.cache_reuse) {
            throw ConfigError("engine: attention_sink requires cache_reuse (without reuse every update recomputes the cache)");
        }
        if (c.attention_sink && W <= c.chunk_size + 4) throw ConfigError("engine: attention_sink needs W > chunk_size + 4");
        if (c.sampler.kind == SamplerSpec::Kind::RepetitionPenalty && !(c.sampler.penalty > 0.0)) {
            throw ConfigError("engine: repetition penalty must be > 0");
        }
        if (c.sampler.kind == SamplerSpec::Kind::Temperature && !(c.sampler.temperature > 0.0)) {
            throw ConfigError("engine: temperature must be > 0");
        }
        if (c.temp_lora) c.lora.validate();
        return c;
    }
};

}  // namespace templora
