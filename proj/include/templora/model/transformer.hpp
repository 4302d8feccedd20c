#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/graph.hpp"
#include "templora/core/ops.hpp"
#include "templora/core/rng.hpp"
#include "templora/core/tensor.hpp"
#include "templora/lora/adapter.hpp"
#include "templora/model/config.hpp"
#include "templora/model/kv_cache.hpp"

namespace templora {

enum class Mode { Train, Eval };

/// Instrumentation shared by all forwards that receive it.
struct ForwardStats {
    std::size_t calls = 0;
    std::size_t max_positions = 0;  ///< largest (cached + new) span consumed by one forward
    std::size_t tokens = 0;
};

struct ForwardOptions {
    Mode mode = Mode::Eval;
    double ntk_scale = 1.0;
    bool last_only = false;  ///< compute logits for the final position only
    Rng* dropout_rng = nullptr;
    ForwardStats* stats = nullptr;
};

/// Dynamic NTK factor for a sequence of `length` tokens on a model trained at `window`.
inline double dynamic_ntk_scale(std::size_t length, std::size_t window) {
    return length > window ? static_cast<double>(length) / static_cast<double>(window) : 1.0;
}

/// Dense weights of the decoder in a fixed order:
///   embed, then per layer {attn_norm, q, k, v, o, ffn_norm, gate, up, down}, final_norm, head.
template <class T>
class Transformer {
public:
    static constexpr std::size_t kPerLayer = 9;
    enum LayerSlot : std::size_t { AttnNorm = 0, Wq, Wk, Wv, Wo, FfnNorm, Wgate, Wup, Wdown };

    Transformer(ModelConfig cfg, Rng init) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t d = cfg_.d_model, f = cfg_.d_ff, V = cfg_.vocab_size;
        const double resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
        auto gaussian = [&](std::string name, Shape shape, double stddev) {
            Tensor<T> t(std::move(shape));
            Rng r = init.substream(name);
            for (auto& v : t.values()) v = static_cast<T>(r.normal() * stddev);
            params_.emplace_back(std::move(name), std::move(t));
        };
        auto ones = [&](std::string name, std::size_t n) { params_.emplace_back(std::move(name), Tensor<T>({n}, T{1})); };
        gaussian("embed", {V, d}, 0.02);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            ones(p + "attn_norm", d);
            gaussian(p + "q", {d, d}, 0.02);
            gaussian(p + "k", {d, d}, 0.02);
            gaussian(p + "v", {d, d}, 0.02);
            gaussian(p + "o", {d, d}, resid);
            ones(p + "ffn_norm", d);
            gaussian(p + "gate", {f, d}, 0.02);
            gaussian(p + "up", {f, d}, 0.02);
            gaussian(p + "down", {d, f}, resid);
        }
        ones("final_norm", d);
        gaussian("head", {V, d}, 0.02);
    }

    /// Adopts existing weights; shapes are checked against the config.
    Transformer(ModelConfig cfg, std::vector<Parameter<T>> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
        const auto expected = expected_shapes(cfg_);
        detail::require_shape(params_.size() == expected.size(), "transformer: wrong parameter count");
        for (std::size_t i = 0; i < expected.size(); ++i) {
            detail::require_shape(params_[i].value.shape() == expected[i],
                                  "transformer: parameter " + params_[i].name + " has shape " + shape_str(params_[i].value.shape()));
        }
    }

    static std::vector<Shape> expected_shapes(const ModelConfig& c) {
        const std::size_t d = c.d_model, f = c.d_ff;
        std::vector<Shape> s{{c.vocab_size, d}};
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            s.insert(s.end(), {{d}, {d, d}, {d, d}, {d, d}, {d, d}, {d}, {f, d}, {f, d}, {d, f}});
        }
        s.push_back({d});
        s.push_back({c.vocab_size, d});
        return s;
    }
    static std::vector<std::string> parameter_names(const ModelConfig& c) {
        std::vector<std::string> n{"embed"};
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            for (const char* s : {"attn_norm", "q", "k", "v", "o", "ffn_norm", "gate", "up", "down"}) n.push_back(p + s);
        }
        n.emplace_back("final_norm");
        n.emplace_back("head");
        return n;
    }

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] std::vector<Parameter<T>>& parameters() { return params_; }
    [[nodiscard]] const std::vector<Parameter<T>>& parameters() const { return params_; }

    static constexpr std::size_t embed_index() { return 0; }
    [[nodiscard]] std::size_t layer_index(std::size_t layer, LayerSlot s) const { return 1 + layer * kPerLayer + s; }
    [[nodiscard]] std::size_t final_norm_index() const { return 1 + cfg_.n_layers * kPerLayer; }
    [[nodiscard]] std::size_t head_index() const { return 2 + cfg_.n_layers * kPerLayer; }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }
    [[nodiscard]] std::size_t parameter_bytes() const { return parameter_count() * sizeof(T); }

    /// FNV-1a over the raw bytes of every weight.
    [[nodiscard]] std::uint64_t checksum() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (const auto& p : params_) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
            for (std::size_t i = 0; i < p.value.bytes(); ++i) {
                h ^= bytes[i];
                h *= 0x100000001B3ULL;
            }
        }
        return h;
    }

    template <class U>
    [[nodiscard]] Transformer<U> cast() const {
        std::vector<Parameter<U>> out;
        for (const auto& p : params_) out.emplace_back(p.name, p.value.template cast<U>(), p.requires_grad);
        return Transformer<U>(cfg_, std::move(out));
    }

private:
    ModelConfig cfg_;
    std::vector<Parameter<T>> params_;
};

namespace detail {

/// Slices rows [begin, end) of x (differentiable).
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
    const Tensor<T>& X = x.value();
    const std::size_t c = X.cols();
    Tensor<T> out = Tensor<T>::matrix(end - begin, c);
    std::copy_n(X.data() + begin * c, (end - begin) * c, out.data());
    const std::size_t ix = x.id;
    return x.graph->make(std::move(out), x.requires_grad(), [ix, begin, c](Graph<T>& g, std::size_t self) {
        const Tensor<T>& d = g.grad(self);
        T* dst = g.grad(ix).data() + begin * c;
        for (std::size_t i = 0; i < d.size(); ++i) dst[i] += d[i];
    });
}

template <class T, class BaseBinder, class LoraBinder>
Var<T> forward_impl([[maybe_unused]] Graph<T>& g, const Transformer<T>& model, std::span<const TokenId> tokens, KVCache<T>* cache,
                    const LoraConfig* lora_cfg, BaseBinder&& base, LoraBinder&& lora, const ForwardOptions& opts) {
    const ModelConfig& cfg = model.config();
    const std::size_t t = tokens.size();
    if (t == 0) throw ConfigError("forward: empty token span");
    const std::size_t cached = cache ? cache->length() : 0;
    if (cached + t > cfg.context_window || (cache && cached + t > cache->capacity())) {
        throw CapacityError("forward: " + std::to_string(cached) + " cached + " + std::to_string(t) +
                            " new tokens exceed the window of " + std::to_string(cache ? cache->capacity() : cfg.context_window));
    }
    if (opts.stats) {
        ++opts.stats->calls;
        opts.stats->tokens += t;
        opts.stats->max_positions = std::max(opts.stats->max_positions, cached + t);
    }
    const bool train = opts.mode == Mode::Train;
    const double rope_base = kernels::ntk_rope_base(cfg.rope_base, opts.ntk_scale, cfg.head_dim());

    std::vector<std::int64_t> positions(t);
    for (std::size_t k = 0; k < t; ++k) positions[k] = cache ? cache->position_for_new(k) : static_cast<std::int64_t>(k);

    auto project = [&](Var<T> x, std::size_t layer, typename Transformer<T>::LayerSlot slot, Projection proj) {
        Var<T> y = ops::linear(x, base(model.layer_index(layer, slot)));
        if (lora_cfg != nullptr) {
            if (auto ab = lora(layer, proj)) {
                Var<T> in = x;
                if (train && lora_cfg->dropout > 0.0) {
                    if (opts.dropout_rng == nullptr) throw ConfigError("forward: train mode needs a dropout stream");
                    in = ops::dropout(in, lora_cfg->dropout, *opts.dropout_rng);
                }
                const T s = static_cast<T>(lora_cfg->alpha / static_cast<double>(lora_cfg->rank));
                Var<T> delta = ops::linear(ops::linear(in, ab->first), ab->second);
                y = ops::add(y, ops::scale(delta, s));
            }
        }
        return y;
    };

    using L = Transformer<T>;
    const T eps = static_cast<T>(cfg.rms_eps);
    Var<T> x = ops::embedding(base(L::embed_index()), tokens);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        Var<T> h = ops::rmsnorm(x, base(model.layer_index(l, L::AttnNorm)), eps);
        Var<T> q = project(h, l, L::Wq, Projection::Q);
        Var<T> k_raw = project(h, l, L::Wk, Projection::K);
        Var<T> v = project(h, l, L::Wv, Projection::V);
        q = ops::rope(q, positions, cfg.head_dim(), rope_base);
        Var<T> k = ops::rope(k_raw, positions, cfg.head_dim(), rope_base);
        KvPrefix<T> prefix{};
        if (cache) {
            cache->prepare_layer(l, rope_base);
            prefix = cache->prefix(l);
        }
        Var<T> a = ops::attention(q, k, v, cfg.n_heads, prefix);
        if (cache) cache->stage(l, k_raw.value(), k.value(), v.value());
        x = ops::add(x, project(a, l, L::Wo, Projection::O));

        Var<T> h2 = ops::rmsnorm(x, base(model.layer_index(l, L::FfnNorm)), eps);
        Var<T> gate = ops::silu(project(h2, l, L::Wgate, Projection::Gate));
        Var<T> up = project(h2, l, L::Wup, Projection::Up);
        x = ops::add(x, project(ops::mul(gate, up), l, L::Wdown, Projection::Down));
    }
    if (cache) cache->commit(tokens);
    if (opts.last_only && t > 1) x = slice_rows(x, t - 1, t);
    x = ops::rmsnorm(x, base(model.final_norm_index()), eps);
    return ops::linear(x, base(model.head_index()));
}

}  // namespace detail

/// Inference forward: logits [t x V] for `tokens` conditioned on the cache
/// contents (if any), which are then extended by t entries. All weights are
/// borrowed read-only, so one Transformer can serve several threads.
template <class T>
Var<T> forward(Graph<T>& g, const Transformer<T>& model, std::span<const TokenId> tokens, KVCache<T>* cache = nullptr,
               const LoraAdapter<T>* adapter = nullptr, const ForwardOptions& opts = {}) {
    auto base = [&](std::size_t i) { return g.borrow(model.parameters()[i].value); };
    auto lora = [&](std::size_t layer, Projection p) -> std::optional<std::pair<Var<T>, Var<T>>> {
        if (!adapter->has(layer, p)) return std::nullopt;
        return std::pair{g.borrow(adapter->down(layer, p).value), g.borrow(adapter->up(layer, p).value)};
    };
    return detail::forward_impl(g, model, tokens, cache, adapter ? &adapter->config() : nullptr, base, lora, opts);
}

/// Training forward with the adapter's factors bound as trainable leaves and
/// its dropout active. Base weights stay frozen. No cache.
template <class T>
Var<T> forward_adapter_train(Graph<T>& g, const Transformer<T>& model, std::span<const TokenId> tokens, LoraAdapter<T>& adapter,
                             Rng& dropout_rng, ForwardStats* stats = nullptr) {
    auto base = [&](std::size_t i) { return g.borrow(model.parameters()[i].value); };
    auto lora = [&](std::size_t layer, Projection p) -> std::optional<std::pair<Var<T>, Var<T>>> {
        if (!adapter.has(layer, p)) return std::nullopt;
        return std::pair{g.param(adapter.down(layer, p)), g.param(adapter.up(layer, p))};
    };
    ForwardOptions opts{.mode = Mode::Train, .dropout_rng = &dropout_rng, .stats = stats};
    return detail::forward_impl(g, model, tokens, static_cast<KVCache<T>*>(nullptr), &adapter.config(), base, lora, opts);
}

/// Forward with every base weight trainable (base-model pretraining).
template <class T>
Var<T> forward_base_train(Graph<T>& g, Transformer<T>& model, std::span<const TokenId> tokens) {
    auto base = [&](std::size_t i) { return g.param(model.parameters()[i]); };
    auto none = [](std::size_t, Projection) -> std::optional<std::pair<Var<T>, Var<T>>> { return std::nullopt; };
    ForwardOptions opts{.mode = Mode::Train};
    return detail::forward_impl(g, static_cast<const Transformer<T>&>(model), tokens, static_cast<KVCache<T>*>(nullptr),
                                static_cast<const LoraConfig*>(nullptr), base, none, opts);
}

/// Discards the cache and rebuilds it from the last `keep` tokens of `history`
/// with positions restarting at 0. Returns logits of the final kept token.
template <class T>
Tensor<T> slide_and_recompute(const Transformer<T>& model, KVCache<T>& cache, std::span<const TokenId> history, std::size_t keep,
                              const LoraAdapter<T>* adapter = nullptr, ForwardStats* stats = nullptr) {
    if (keep > model.config().context_window || keep > cache.capacity()) {
        throw ConfigError("slide_and_recompute: keep " + std::to_string(keep) + " exceeds the window");
    }
    if (keep > history.size()) throw ConfigError("slide_and_recompute: history shorter than keep");
    if (keep == 0) throw ConfigError("slide_and_recompute: keep must be positive");
    cache.clear();
    Graph<T> g(false);
    ForwardOptions opts{.last_only = true, .stats = stats};
    return forward(g, model, history.subspan(history.size() - keep), &cache, adapter, opts).value();
}

/// Attention-sink eviction: pins the first four entries and keeps the most recent
/// (window - 4). No recomputation; positions become slot-relative.
template <class T>
void sink_evict(KVCache<T>& cache, std::size_t window) {
    cache.evict_with_sinks(window);
}

}  // namespace templora
