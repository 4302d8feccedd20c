#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "templora/core/binary_io.hpp"
#include "templora/core/error.hpp"
#include "templora/lora/adapter.hpp"
#include "templora/model/config.hpp"
#include "templora/model/transformer.hpp"

namespace templora {

// Checkpoint container (all integers and floats little-endian):
//
//   model file     "TLMD" u32 version | config block | f32 weights in Transformer order
//   adapter file   "TLAD" u32 version | config block | lora block | i64 adapter version
//                  | f32 A, B per targeted projection, layer-major
//
//   config block   u32 vocab_size, d_model, n_layers, n_heads, d_ff, context_window
//                  f64 rope_base, rms_eps
//   lora block     u32 rank, f64 alpha, f64 dropout, u32 epochs, f64 lr,
//                  u32 warmup_chunks, u32 batch_tokens, u32 target bitmask (bit i = projection i)
//
// Optimizer moments are not stored.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_model_config(std::ostream& os, const ModelConfig& c) {
    for (std::size_t v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.context_window}) {
        binio::write_u32(os, static_cast<std::uint32_t>(v));
    }
    binio::write_f64(os, c.rope_base);
    binio::write_f64(os, c.rms_eps);
}

inline ModelConfig read_model_config(std::istream& is) {
    ModelConfig c;
    c.vocab_size = binio::read_u32(is);
    c.d_model = binio::read_u32(is);
    c.n_layers = binio::read_u32(is);
    c.n_heads = binio::read_u32(is);
    c.d_ff = binio::read_u32(is);
    c.context_window = binio::read_u32(is);
    c.rope_base = binio::read_f64(is);
    c.rms_eps = binio::read_f64(is);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw IoError(std::string("checkpoint: invalid model config: ") + e.what());
    }
    return c;
}

template <class T>
void write_values(std::ostream& os, const Tensor<T>& t) {
    for (T v : t.values()) binio::write_f32(os, static_cast<float>(v));
}

template <class T>
Tensor<T> read_values(std::istream& is, const Shape& shape) {
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(binio::read_f32(is));
    return t;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return is;
}

}  // namespace detail

template <class T>
void write_model(std::ostream& os, const Transformer<T>& model) {
    binio::write_magic(os, "TLMD");
    binio::write_u32(os, kCheckpointVersion);
    detail::write_model_config(os, model.config());
    for (const auto& p : model.parameters()) detail::write_values(os, p.value);
    if (!os) throw IoError("checkpoint: write failed");
}

template <class T>
Transformer<T> read_model(std::istream& is) {
    binio::expect_magic(is, "TLMD");
    if (const auto v = binio::read_u32(is); v != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(v));
    ModelConfig cfg = detail::read_model_config(is);
    const auto shapes = Transformer<T>::expected_shapes(cfg);
    const auto names = Transformer<T>::parameter_names(cfg);
    std::vector<Parameter<T>> params;
    for (std::size_t i = 0; i < shapes.size(); ++i) params.emplace_back(names[i], detail::read_values<T>(is, shapes[i]));
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint: trailing bytes");
    return Transformer<T>(cfg, std::move(params));
}

template <class T>
void save_model(const std::filesystem::path& path, const Transformer<T>& model) {
    auto os = detail::open_out(path);
    write_model(os, model);
}

template <class T = float>
Transformer<T> load_model(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    return read_model<T>(is);
}

template <class T>
void write_adapter(std::ostream& os, const LoraAdapter<T>& adapter) {
    const LoraConfig& lc = adapter.config();
    binio::write_magic(os, "TLAD");
    binio::write_u32(os, kCheckpointVersion);
    detail::write_model_config(os, adapter.model_config());
    binio::write_u32(os, static_cast<std::uint32_t>(lc.rank));
    binio::write_f64(os, lc.alpha);
    binio::write_f64(os, lc.dropout);
    binio::write_u32(os, static_cast<std::uint32_t>(lc.epochs));
    binio::write_f64(os, lc.lr);
    binio::write_u32(os, static_cast<std::uint32_t>(lc.warmup_chunks));
    binio::write_u32(os, static_cast<std::uint32_t>(lc.batch_tokens));
    std::uint32_t mask = 0;
    for (const auto& name : lc.targets) mask |= 1u << static_cast<std::uint32_t>(*parse_projection(name));
    binio::write_u32(os, mask);
    binio::write_u64(os, static_cast<std::uint64_t>(adapter.version()));
    for (const auto* p : adapter.parameters()) detail::write_values(os, p->value);
    if (!os) throw IoError("adapter checkpoint: write failed");
}

template <class T>
LoraAdapter<T> read_adapter(std::istream& is, std::uint64_t seed = 0) {
    binio::expect_magic(is, "TLAD");
    if (const auto v = binio::read_u32(is); v != kCheckpointVersion) throw IoError("adapter checkpoint: unsupported version " + std::to_string(v));
    ModelConfig mc = detail::read_model_config(is);
    LoraConfig lc;
    lc.rank = binio::read_u32(is);
    lc.alpha = binio::read_f64(is);
    lc.dropout = binio::read_f64(is);
    lc.epochs = static_cast<int>(binio::read_u32(is));
    lc.lr = binio::read_f64(is);
    lc.warmup_chunks = static_cast<int>(binio::read_u32(is));
    lc.batch_tokens = binio::read_u32(is);
    const std::uint32_t mask = binio::read_u32(is);
    lc.targets.clear();
    for (std::size_t i = 0; i < kProjectionCount; ++i) {
        if (mask & (1u << i)) lc.targets.emplace_back(kProjectionNames[i]);
    }
    const auto version = static_cast<std::int64_t>(binio::read_u64(is));
    LoraAdapter<T> adapter(mc, lc, Rng(seed));
    for (auto* p : adapter.parameters()) p->value = detail::read_values<T>(is, p->value.shape());
    adapter.set_version(version);
    return adapter;
}

template <class T>
void save_adapter(const std::filesystem::path& path, const LoraAdapter<T>& adapter) {
    auto os = detail::open_out(path);
    write_adapter(os, adapter);
}

template <class T = float>
LoraAdapter<T> load_adapter(const std::filesystem::path& path, std::uint64_t seed = 0) {
    auto is = detail::open_in(path);
    return read_adapter<T>(is, seed);
}

}  // namespace templora
