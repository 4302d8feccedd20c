#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/optim.hpp"
#include "templora/core/rng.hpp"
#include "templora/core/tensor.hpp"
#include "templora/model/config.hpp"

namespace templora {

/// Projection matrices that can carry a low-rank adapter.
enum class Projection : std::size_t { Q = 0, K, V, O, Gate, Up, Down };
inline constexpr std::size_t kProjectionCount = 7;
inline constexpr std::array<std::string_view, kProjectionCount> kProjectionNames = {"q", "k", "v", "o", "gate", "up", "down"};

inline std::optional<Projection> parse_projection(std::string_view name) {
    for (std::size_t i = 0; i < kProjectionNames.size(); ++i) {
        if (kProjectionNames[i] == name) return static_cast<Projection>(i);
    }
    return std::nullopt;
}

/// (d_in, d_out) of a projection.
inline std::pair<std::size_t, std::size_t> projection_dims(const ModelConfig& cfg, Projection p) {
    switch (p) {
        case Projection::Gate:
        case Projection::Up: return {cfg.d_model, cfg.d_ff};
        case Projection::Down: return {cfg.d_ff, cfg.d_model};
        default: return {cfg.d_model, cfg.d_model};
    }
}

struct LoraConfig {
    std::size_t rank = 16;
    double alpha = 16.0;
    double dropout = 0.05;
    std::vector<std::string> targets = {"q", "k", "v", "o"};
    int epochs = 2;
    double lr = 5e-4;
    int warmup_chunks = 2;
    /// Tokens per optimizer step; 0 trains the whole chunk as one step per epoch.
    std::size_t batch_tokens = 0;

    void validate() const {
        detail::require(rank >= 1, "lora: rank must be >= 1");
        detail::require(dropout >= 0.0 && dropout < 1.0, "lora: dropout must be in [0, 1)");
        detail::require(warmup_chunks >= 0, "lora: warmup_chunks must be >= 0");
        detail::require(epochs >= 0, "lora: epochs must be >= 0");
        detail::require(lr >= 0.0 && std::isfinite(lr), "lora: lr must be finite and >= 0");
        detail::require(!targets.empty(), "lora: at least one target is required");
    }

    /// The 7B-scale setting (rank 64, alpha 64, lr 5e-5).
    static LoraConfig reference_preset() {
        LoraConfig c;
        c.rank = 64;
        c.alpha = 64.0;
        c.lr = 5e-5;
        return c;
    }
};

/// The temporary low-rank module: for each targeted projection W (d_out x d_in)
/// a down-projection A (r x d_in) and an up-projection B (d_out x r), applied as
///   y = x W^T + (alpha / r) * (dropout(x) A^T) B^T.
/// B starts at zero, so a fresh adapter leaves the model's outputs unchanged.
template <class T>
class LoraAdapter {
public:
    LoraAdapter(const ModelConfig& model, LoraConfig config, Rng init_rng)
        : model_(model), config_(std::move(config)), rng_(init_rng), optimizer_(AdamWOptions{.lr = config_.lr}) {
        config_.validate();
        std::array<bool, kProjectionCount> enabled{};
        for (const auto& name : config_.targets) {
            auto p = parse_projection(name);
            if (!p) throw ConfigError("lora: unknown target '" + name + "' (expected q, k, v, o, gate, up or down)");
            enabled[static_cast<std::size_t>(*p)] = true;
        }
        slots_.resize(model.n_layers * kProjectionCount);
        Rng init = rng_.substream("init");
        for (std::size_t layer = 0; layer < model.n_layers; ++layer) {
            for (std::size_t pi = 0; pi < kProjectionCount; ++pi) {
                if (!enabled[pi]) continue;
                const auto [d_in, d_out] = projection_dims(model, static_cast<Projection>(pi));
                const std::string base = "layers." + std::to_string(layer) + "." + std::string(kProjectionNames[pi]);
                Tensor<T> a({config_.rank, d_in});
                Rng r = init.substream(layer * kProjectionCount + pi);
                const double stddev = 1.0 / std::sqrt(static_cast<double>(d_in));
                for (auto& v : a.values()) v = static_cast<T>(r.normal() * stddev);
                slots_[layer * kProjectionCount + pi] =
                    Slot{Parameter<T>(base + ".lora_a", std::move(a)), Parameter<T>(base + ".lora_b", Tensor<T>({d_out, config_.rank}))};
            }
        }
    }

    [[nodiscard]] const LoraConfig& config() const { return config_; }
    [[nodiscard]] const ModelConfig& model_config() const { return model_; }
    [[nodiscard]] double scaling() const { return config_.alpha / static_cast<double>(config_.rank); }

    /// Number of completed chunk updates (the adapter's version k).
    [[nodiscard]] std::int64_t version() const { return version_; }
    void mark_update_complete() { ++version_; }

    [[nodiscard]] bool has(std::size_t layer, Projection p) const {
        return slots_[layer * kProjectionCount + static_cast<std::size_t>(p)].has_value();
    }
    Parameter<T>& down(std::size_t layer, Projection p) { return slot(layer, p).a; }
    Parameter<T>& up(std::size_t layer, Projection p) { return slot(layer, p).b; }
    const Parameter<T>& down(std::size_t layer, Projection p) const { return slot(layer, p).a; }
    const Parameter<T>& up(std::size_t layer, Projection p) const { return slot(layer, p).b; }

    /// Trainable tensors in fixed order: layer-major, projection order q..down, A before B.
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& s : slots_) {
            if (!s) continue;
            out.push_back(&s->a);
            out.push_back(&s->b);
        }
        return out;
    }
    std::vector<const Parameter<T>*> parameters() const {
        std::vector<const Parameter<T>*> out;
        for (const auto& s : slots_) {
            if (!s) continue;
            out.push_back(&s->a);
            out.push_back(&s->b);
        }
        return out;
    }

    [[nodiscard]] std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto* p : parameters()) n += p->value.size();
        return n;
    }

    [[nodiscard]] std::size_t bytes() const {
        std::size_t n = 0;
        for (const auto* p : parameters()) n += p->value.bytes() + p->grad.bytes();
        for (const auto& m : optimizer_.first_moments()) n += m.bytes();
        for (const auto& v : optimizer_.second_moments()) n += v.bytes();
        return n;
    }

    AdamW<T>& optimizer() { return optimizer_; }
    const AdamW<T>& optimizer() const { return optimizer_; }

    /// Dropout stream for optimizer step `step` of chunk update `update`.
    [[nodiscard]] Rng dropout_stream(std::int64_t update, std::int64_t step) const {
        return rng_.substream("dropout").substream(static_cast<std::uint64_t>(update)).substream(static_cast<std::uint64_t>(step));
    }

    void set_version(std::int64_t v) { version_ = v; }

private:
    struct Slot {
        Parameter<T> a;
        Parameter<T> b;
    };

    Slot& slot(std::size_t layer, Projection p) {
        auto& s = slots_.at(layer * kProjectionCount + static_cast<std::size_t>(p));
        if (!s) throw ConfigError("lora: projection not targeted");
        return *s;
    }
    const Slot& slot(std::size_t layer, Projection p) const {
        const auto& s = slots_.at(layer * kProjectionCount + static_cast<std::size_t>(p));
        if (!s) throw ConfigError("lora: projection not targeted");
        return *s;
    }

    ModelConfig model_;
    LoraConfig config_;
    Rng rng_;
    std::vector<std::optional<Slot>> slots_;
    AdamW<T> optimizer_;
    std::int64_t version_ = 0;
};

}  // namespace templora
