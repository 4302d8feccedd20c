#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/corpus/pretrain.hpp"
#include "templora/engine/config.hpp"
#include "templora/model/config.hpp"

namespace templora::harness {

/// Evaluation options shared by eval-ppl and the bench commands.
struct EvalOptions {
    std::size_t doc_length = 16384;
    std::size_t documents = 10;
    std::size_t segments = 4;             ///< equal-width position buckets when `boundaries` is empty
    std::vector<std::size_t> boundaries;  ///< explicit interior bucket starts
    std::size_t repeats = 3;              ///< timing repetitions (median reported)
    std::size_t generate_tokens = 1024;   ///< tokens generated per latency measurement
};

/// Everything a CLI run needs, read from a flat `key=value` file.
struct RunConfig {
    ModelConfig model;
    EngineConfig engine;
    corpus::CorpusFamily corpus;
    corpus::PretrainOptions pretrain;
    EvalOptions eval;
    std::uint64_t seed = 0;
    std::string model_path;  ///< checkpoint used by the evaluation commands

    /// Canonical `key=value` lines, sorted by key.
    [[nodiscard]] std::string to_text() const;
    /// FNV-1a of to_text(); identifies the configuration in reports.
    [[nodiscard]] std::uint64_t hash() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    T out{};
    is >> out;
    if (!is || !is.eof()) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
    if constexpr (std::is_unsigned_v<T>) {
        if (v.find('-') != std::string::npos) throw ConfigError("config: " + key + " must be non-negative");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

inline std::string fmt(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T, class Access>
Field number_field(const std::string& key, Access access) {
    return {[key, access](RunConfig& c, const std::string& v) { access(c) = parse_number<T>(key, v); },
            [access](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>) {
                    return fmt(access(const_cast<RunConfig&>(c)));
                } else {
                    return std::to_string(access(const_cast<RunConfig&>(c)));
                }
            }};
}

template <class Access>
Field bool_field(const std::string& key, Access access) {
    return {[key, access](RunConfig& c, const std::string& v) { access(c) = parse_bool(key, v); },
            [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

inline std::vector<std::size_t> parse_offsets(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(v)) out.push_back(parse_number<std::size_t>(key, item));
    return out;
}

inline const std::map<std::string, Field>& fields() {
    using S = std::size_t;
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> f;
        f["seed"] = number_field<std::uint64_t>("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });

        f["model.path"] = {[](RunConfig& c, const std::string& v) { c.model_path = v; },
                           [](const RunConfig& c) { return c.model_path; }};
        f["model.vocab_size"] = number_field<S>("model.vocab_size", [](RunConfig& c) -> S& { return c.model.vocab_size; });
        f["model.d_model"] = number_field<S>("model.d_model", [](RunConfig& c) -> S& { return c.model.d_model; });
        f["model.n_layers"] = number_field<S>("model.n_layers", [](RunConfig& c) -> S& { return c.model.n_layers; });
        f["model.n_heads"] = number_field<S>("model.n_heads", [](RunConfig& c) -> S& { return c.model.n_heads; });
        f["model.d_ff"] = number_field<S>("model.d_ff", [](RunConfig& c) -> S& { return c.model.d_ff; });
        f["model.context_window"] = number_field<S>("model.context_window", [](RunConfig& c) -> S& { return c.model.context_window; });
        f["model.rope_base"] = number_field<double>("model.rope_base", [](RunConfig& c) -> double& { return c.model.rope_base; });
        f["model.rms_eps"] = number_field<double>("model.rms_eps", [](RunConfig& c) -> double& { return c.model.rms_eps; });

        f["engine.chunk_size"] = number_field<S>("engine.chunk_size", [](RunConfig& c) -> S& { return c.engine.chunk_size; });
        f["engine.input_length"] = number_field<S>("engine.input_length", [](RunConfig& c) -> S& { return c.engine.input_length; });
        f["engine.training_length"] =
            number_field<S>("engine.training_length", [](RunConfig& c) -> S& { return c.engine.training_length; });
        f["engine.temp_lora"] = bool_field("engine.temp_lora", [](RunConfig& c) -> bool& { return c.engine.temp_lora; });
        f["engine.cache_reuse"] = bool_field("engine.cache_reuse", [](RunConfig& c) -> bool& { return c.engine.cache_reuse; });
        f["engine.attention_sink"] = bool_field("engine.attention_sink", [](RunConfig& c) -> bool& { return c.engine.attention_sink; });
        f["engine.pretrain_prompt"] = bool_field("engine.pretrain_prompt", [](RunConfig& c) -> bool& { return c.engine.pretrain_prompt; });
        f["engine.deployment"] = {
            [](RunConfig& c, const std::string& v) {
                if (v == "cascaded") {
                    c.engine.deployment = Deployment::Cascaded;
                } else if (v == "parallelized") {
                    c.engine.deployment = Deployment::Parallelized;
                } else {
                    throw ConfigError("config: engine.deployment must be cascaded or parallelized, got '" + v + "'");
                }
            },
            [](const RunConfig& c) { return std::string(c.engine.deployment == Deployment::Cascaded ? "cascaded" : "parallelized"); }};
        f["engine.sampler"] = {[](RunConfig& c, const std::string& v) { c.engine.sampler.kind = parse_sampler_kind(v); },
                               [](const RunConfig& c) { return to_string(c.engine.sampler.kind); }};
        f["engine.penalty"] = number_field<double>("engine.penalty", [](RunConfig& c) -> double& { return c.engine.sampler.penalty; });
        f["engine.temperature"] =
            number_field<double>("engine.temperature", [](RunConfig& c) -> double& { return c.engine.sampler.temperature; });

        f["lora.rank"] = number_field<S>("lora.rank", [](RunConfig& c) -> S& { return c.engine.lora.rank; });
        f["lora.alpha"] = number_field<double>("lora.alpha", [](RunConfig& c) -> double& { return c.engine.lora.alpha; });
        f["lora.dropout"] = number_field<double>("lora.dropout", [](RunConfig& c) -> double& { return c.engine.lora.dropout; });
        f["lora.targets"] = {[](RunConfig& c, const std::string& v) { c.engine.lora.targets = split_list(v); },
                             [](const RunConfig& c) { return join(c.engine.lora.targets); }};
        f["lora.epochs"] = number_field<int>("lora.epochs", [](RunConfig& c) -> int& { return c.engine.lora.epochs; });
        f["lora.lr"] = number_field<double>("lora.lr", [](RunConfig& c) -> double& { return c.engine.lora.lr; });
        f["lora.warmup_chunks"] = number_field<int>("lora.warmup_chunks", [](RunConfig& c) -> int& { return c.engine.lora.warmup_chunks; });
        f["lora.batch_tokens"] = number_field<S>("lora.batch_tokens", [](RunConfig& c) -> S& { return c.engine.lora.batch_tokens; });

        f["corpus.kind"] = {[](RunConfig& c, const std::string& v) { c.corpus.kind = corpus::parse_corpus_kind(v); },
                            [](const RunConfig& c) { return corpus::to_string(c.corpus.kind); }};
        f["corpus.family_seed"] = number_field<std::uint64_t>("corpus.family_seed", [](RunConfig& c) -> std::uint64_t& {
            return c.corpus.glossary.family_seed;
        });
        f["corpus.vocab_size"] = {
            [](RunConfig& c, const std::string& v) {
                c.corpus.glossary.vocab_size = c.corpus.novel.vocab_size = parse_number<S>("corpus.vocab_size", v);
            },
            [](const RunConfig& c) { return std::to_string(c.corpus.vocab_size()); }};
        f["corpus.mapping_size"] = number_field<S>("corpus.mapping_size", [](RunConfig& c) -> S& { return c.corpus.glossary.mapping_size; });
        f["corpus.segment_length"] =
            number_field<S>("corpus.segment_length", [](RunConfig& c) -> S& { return c.corpus.glossary.segment_length; });
        f["corpus.symbol_rate"] =
            number_field<double>("corpus.symbol_rate", [](RunConfig& c) -> double& { return c.corpus.glossary.symbol_rate; });
        f["corpus.novel_family_seed"] = number_field<std::uint64_t>("corpus.novel_family_seed", [](RunConfig& c) -> std::uint64_t& {
            return c.corpus.novel.family_seed;
        });
        f["corpus.entity_count"] = number_field<S>("corpus.entity_count", [](RunConfig& c) -> S& { return c.corpus.novel.entity_count; });
        f["corpus.entity_length"] = number_field<S>("corpus.entity_length", [](RunConfig& c) -> S& { return c.corpus.novel.entity_length; });
        f["corpus.entity_rate"] = number_field<double>("corpus.entity_rate", [](RunConfig& c) -> double& { return c.corpus.novel.rate; });

        f["pretrain.steps"] = number_field<S>("pretrain.steps", [](RunConfig& c) -> S& { return c.pretrain.steps; });
        f["pretrain.seq_len"] = number_field<S>("pretrain.seq_len", [](RunConfig& c) -> S& { return c.pretrain.seq_len; });
        f["pretrain.batch"] = number_field<S>("pretrain.batch", [](RunConfig& c) -> S& { return c.pretrain.batch; });
        f["pretrain.lr"] = number_field<double>("pretrain.lr", [](RunConfig& c) -> double& { return c.pretrain.lr; });
        f["pretrain.min_lr_ratio"] = number_field<double>("pretrain.min_lr_ratio", [](RunConfig& c) -> double& { return c.pretrain.min_lr_ratio; });
        f["pretrain.warmup_steps"] = number_field<S>("pretrain.warmup_steps", [](RunConfig& c) -> S& { return c.pretrain.warmup_steps; });
        f["pretrain.weight_decay"] = number_field<double>("pretrain.weight_decay", [](RunConfig& c) -> double& { return c.pretrain.weight_decay; });
        f["pretrain.grad_clip"] = number_field<double>("pretrain.grad_clip", [](RunConfig& c) -> double& { return c.pretrain.grad_clip; });

        f["eval.doc_length"] = number_field<S>("eval.doc_length", [](RunConfig& c) -> S& { return c.eval.doc_length; });
        f["eval.documents"] = number_field<S>("eval.documents", [](RunConfig& c) -> S& { return c.eval.documents; });
        f["eval.segments"] = number_field<S>("eval.segments", [](RunConfig& c) -> S& { return c.eval.segments; });
        f["eval.boundaries"] = {
            [](RunConfig& c, const std::string& v) { c.eval.boundaries = parse_offsets("eval.boundaries", v); },
            [](const RunConfig& c) {
                std::vector<std::string> s;
                for (auto b : c.eval.boundaries) s.push_back(std::to_string(b));
                return join(s);
            }};
        f["eval.repeats"] = number_field<S>("eval.repeats", [](RunConfig& c) -> S& { return c.eval.repeats; });
        f["eval.generate_tokens"] = number_field<S>("eval.generate_tokens", [](RunConfig& c) -> S& { return c.eval.generate_tokens; });
        return f;
    }();
    return table;
}

}  // namespace detail

/// Sets one dotted key; unknown keys are a ConfigError.
inline void set_option(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& f = detail::fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(c, value);
}

/// Desk-scale defaults: the miniature model, the glossary corpus it is
/// pretrained on and the adapter preset tuned for it.
inline RunConfig desk_defaults() {
    RunConfig c;
    c.model.vocab_size = 512;
    c.model.d_model = 128;
    c.model.n_layers = 4;
    c.model.n_heads = 4;
    c.model.d_ff = 344;
    c.model.context_window = 512;
    c.engine.chunk_size = 128;
    c.engine.training_length = 128;
    c.engine.sampler = SamplerSpec::greedy();
    c.engine.lora.rank = 8;
    c.engine.lora.alpha = 8.0;
    c.engine.lora.targets = {"gate", "up", "down"};
    c.engine.lora.lr = 2e-3;
    c.corpus.kind = corpus::CorpusKind::Glossary;
    c.corpus.glossary.vocab_size = 512;
    c.corpus.glossary.mapping_size = 16;
    c.corpus.glossary.symbol_rate = 0.5;
    c.corpus.novel.vocab_size = 512;
    c.pretrain.steps = 3000;
    c.pretrain.lr = 3e-3;
    return c;
}

/// Parses `key=value` lines over `base`; blank lines and `#` comments are ignored.
inline RunConfig parse_config(const std::string& text, RunConfig base = desk_defaults()) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        set_option(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

/// Applies TEMPLORA_SEED if set: it overrides the run seed and the engine seed.
inline void apply_seed_override(RunConfig& c) {
    if (const char* s = std::getenv("TEMPLORA_SEED"); s != nullptr && *s != '\0') {
        c.seed = detail::parse_number<std::uint64_t>("TEMPLORA_SEED", s);
        c.engine.seed = c.seed;
    }
}

/// Checks every section; engine constraints are checked against the model window.
inline void validate(const RunConfig& c) {
    c.model.validate();
    (void)c.engine.validated(c.model);
    c.corpus.glossary.validate();
    c.corpus.novel.validate();
    if (c.corpus.vocab_size() != c.model.vocab_size) throw ConfigError("config: corpus.vocab_size must equal model.vocab_size");
    if (c.eval.repeats < 1) throw ConfigError("config: eval.repeats must be >= 1");
    if (c.eval.segments < 1) throw ConfigError("config: eval.segments must be >= 1");
}

inline std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [key, field] : detail::fields()) out += key + "=" + field.get(*this) + "\n";
    return out;
}

inline std::uint64_t RunConfig::hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : to_text()) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

}  // namespace templora::harness
