#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "templora/core/error.hpp"
#include "templora/engine/config.hpp"
#include "templora/engine/session.hpp"
#include "templora/eval/metrics.hpp"
#include "templora/model/transformer.hpp"

namespace templora {

struct StreamResult {
    std::vector<double> nll;  ///< nll[k] is the NLL of document token k + 1
    std::vector<TokenEvent> events;
    std::size_t updates = 0;
    ForwardStats stats;        ///< inference forwards
    ForwardStats train_stats;  ///< adapter-training forwards
    eval::EvalReport report;
};

/// Teacher-forced perplexity of a document under progressive adaptation.
/// Token 0 is the prompt; every later chunk of Δ tokens is scored with the
/// current adapter and only afterwards trained on. With temp_lora off the same
/// window management runs on the base model alone.
template <class T>
StreamResult teacher_forced_stream(const Transformer<T>& model, std::span<const TokenId> document, const EngineConfig& cfg,
                                   std::span<const std::size_t> boundaries = {}) {
    if (document.size() < 2) throw ConfigError("teacher_forced_stream: document needs at least 2 tokens");
    EngineConfig c = cfg;
    c.deployment = Deployment::Cascaded;
    GenerationSession<T> session(model, c, document.first(1));
    StreamResult r;
    r.nll = session.feed(document.subspan(1));
    r.events = session.events();
    r.updates = session.submitted_updates();
    r.stats = session.stats();
    session.finish();
    r.train_stats = session.train_stats();
    r.report = eval::segment_report(r.nll, boundaries, 1);
    return r;
}

/// One unit of segment mode: a teacher-forced prefix followed by
/// `target_length` generated tokens; the reference is kept for scoring.
struct Segment {
    std::vector<TokenId> prefix;
    std::size_t target_length = 0;
    std::vector<TokenId> reference;
};

/// Segment mode: every segment is a chunk. Returns the generated tokens of each.
template <class T>
std::vector<std::vector<TokenId>> generate_segment_mode(GenerationSession<T>& session, const std::vector<Segment>& segments) {
    std::vector<std::vector<TokenId>> out;
    out.reserve(segments.size());
    for (const auto& s : segments) out.push_back(session.translate_segment(s.prefix, s.target_length));
    return out;
}

struct ParallelResult {
    std::vector<TokenId> tokens;  ///< prompt followed by the generated tokens
    SwapSchedule schedule;
    std::vector<TokenEvent> events;
    std::vector<TrainerEvent> trainer_events;
};

/// Generation with updates on a background trainer. Never waits for training
/// unless `parallel.wait_for_updates` is set; the trainer is stopped (pending
/// jobs dropped) when generation ends.
template <class T>
ParallelResult run_parallelized(const Transformer<T>& model, const EngineConfig& cfg, std::span<const TokenId> prompt,
                                std::size_t n_tokens, const ParallelOptions& parallel = {}) {
    EngineConfig c = cfg.validated(model.config());
    if (!c.temp_lora) throw ConfigError("run_parallelized: temp_lora is disabled");
    c.deployment = Deployment::Parallelized;
    GenerationSession<T> session(model, c, prompt, make_trainer(model, c, parallel));
    session.generate(n_tokens);
    ParallelResult r;
    r.tokens = session.tokens();
    r.schedule = session.swaps();
    r.events = session.events();
    session.finish(false);
    r.trainer_events = session.trainer_events();
    return r;
}

/// Cascaded run that activates trained versions exactly where `schedule` says.
template <class T>
std::vector<TokenId> replay_schedule(const Transformer<T>& model, const EngineConfig& cfg, std::span<const TokenId> prompt,
                                     std::size_t n_tokens, const SwapSchedule& schedule) {
    EngineConfig c = cfg.validated(model.config());
    c.deployment = Deployment::Cascaded;
    GenerationSession<T> session(model, c, prompt, make_replay_trainer(model, c, schedule));
    session.generate(n_tokens);
    return session.tokens();
}

inline nlohmann::json to_json(const EngineConfig& c) {
    return {{"chunk_size", c.chunk_size},
            {"input_length", c.input_length},
            {"training_length", c.training_length},
            {"temp_lora", c.temp_lora},
            {"cache_reuse", c.cache_reuse},
            {"attention_sink", c.attention_sink},
            {"pretrain_prompt", c.pretrain_prompt},
            {"deployment", c.deployment == Deployment::Cascaded ? "cascaded" : "parallelized"},
            {"sampler", {{"kind", to_string(c.sampler.kind)}, {"penalty", c.sampler.penalty}, {"temperature", c.sampler.temperature}}},
            {"lora",
             {{"rank", c.lora.rank},
              {"alpha", c.lora.alpha},
              {"dropout", c.lora.dropout},
              {"targets", c.lora.targets},
              {"epochs", c.lora.epochs},
              {"lr", c.lora.lr},
              {"warmup_chunks", c.lora.warmup_chunks},
              {"batch_tokens", c.lora.batch_tokens}}},
            {"seed", c.seed}};
}

inline nlohmann::json to_json(const ModelConfig& m) {
    return {{"vocab_size", m.vocab_size}, {"d_model", m.d_model},       {"n_layers", m.n_layers},
            {"n_heads", m.n_heads},       {"d_ff", m.d_ff},             {"context_window", m.context_window},
            {"rope_base", m.rope_base},   {"rms_eps", m.rms_eps}};
}

/// Run manifest: everything needed to reproduce a run.
inline void write_manifest(std::ostream& os, const ModelConfig& model, const EngineConfig& engine, std::uint64_t model_checksum,
                           const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json j = {{"model", to_json(model)}, {"engine", to_json(engine)}, {"model_checksum", model_checksum}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    os << j.dump(2) << '\n';
}

}  // namespace templora
