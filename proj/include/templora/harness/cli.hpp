#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/corpus/generators.hpp"
#include "templora/corpus/io.hpp"
#include "templora/corpus/pretrain.hpp"
#include "templora/engine/session.hpp"
#include "templora/engine/stream.hpp"
#include "templora/eval/metrics.hpp"
#include "templora/harness/bench.hpp"
#include "templora/harness/compare.hpp"
#include "templora/harness/config.hpp"
#include "templora/model/checkpoint.hpp"

namespace templora::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

inline const std::vector<std::pair<std::string, std::string>>& subcommands() {
    static const std::vector<std::pair<std::string, std::string>> list = {
        {"pretrain", "pretrain a base model on the configured corpus family"},
        {"gen-corpus", "write evaluation or pretraining documents as token files"},
        {"generate", "generate tokens with progressive adapter updates"},
        {"eval-ppl", "teacher-forced perplexity of a document, bucketed by position"},
        {"bench-window", "perplexity, memory and latency across context windows"},
        {"bench-chunk", "perplexity across chunk sizes"},
        {"bench-traincost", "chunk training cost against generating the chunk"},
        {"bench-ntk", "windowed evaluation against dynamic NTK extension"},
        {"sweep", "perplexity along one adapter hyper-parameter axis"},
        {"compare", "relative change between two reports"},
    };
    return list;
}

inline std::string usage() {
    std::string u = "usage: templora <subcommand> [--config FILE] [--seed N] [--out PATH] [options]\n\nsubcommands:\n";
    for (const auto& [name, help] : subcommands()) {
        u += "  " + name + std::string(name.size() < 16 ? 16 - name.size() : 1, ' ') + help + "\n";
    }
    u += "\nRun `templora <subcommand> --help` for its options.\n";
    return u;
}

namespace cli_detail {

template <class N>
std::vector<N> parse_list(const std::string& v, const std::string& what) {
    std::vector<N> out;
    for (const auto& item : detail::split_list(v)) out.push_back(detail::parse_number<N>(what, item));
    if (out.empty()) throw ConfigError(what + ": empty list");
    return out;
}

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> set;
};

inline void add_common(CLI::App& app, Common& c) {
    app.add_option("--config", c.config, "flat key=value configuration file");
    app.add_option("--seed", c.seed, "run seed (overrides the config and TEMPLORA_SEED)");
    app.add_option("--out", c.out, "output path");
    app.add_option("--set", c.set, "override one config key (key=value), repeatable");
}

inline RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? desk_defaults() : load_config(c.config);
    for (const auto& kv : c.set) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_option(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.engine.seed = cfg.seed;
    apply_seed_override(cfg);
    if (c.seed) cfg.seed = cfg.engine.seed = *c.seed;
    validate(cfg);
    return cfg;
}

inline std::ofstream open_out(const std::string& path) {
    if (path.empty()) throw ConfigError("--out is required");
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os) throw IoError("cannot write " + path);
    return os;
}

inline Transformer<float> load_checkpoint(const RunConfig& cfg, const std::string& flag) {
    const std::string path = flag.empty() ? cfg.model_path : flag;
    if (path.empty()) throw ConfigError("no model: pass --model or set model.path");
    Transformer<float> m = load_model<float>(path);
    if (m.config().vocab_size != cfg.model.vocab_size) throw ConfigError("model vocabulary differs from model.vocab_size in the config");
    return m;
}

struct Documents {
    std::vector<std::vector<TokenId>> docs;
    std::uint64_t hash = 0;
};

inline Documents load_documents(const RunConfig& cfg, const std::vector<std::string>& files, std::size_t count) {
    Documents d;
    if (!files.empty()) {
        for (const auto& f : files) {
            auto tf = corpus::read_tokens(f);
            if (tf.vocab_size > cfg.model.vocab_size) throw ConfigError(f + ": vocabulary larger than the model's");
            d.docs.push_back(std::move(tf.tokens));
        }
    } else {
        std::vector<std::uint64_t> seeds(count);
        for (std::size_t i = 0; i < count; ++i) seeds[i] = i;
        d.docs = eval_documents(cfg, seeds);
    }
    d.hash = documents_hash(d.docs);
    return d;
}

inline ReportMeta meta_for(const RunConfig& cfg, const Documents& d, const std::string& model_path) {
    ReportMeta m;
    m.config_hash = cfg.hash();
    m.corpus_hash = d.hash;
    m.extra["seed"] = std::to_string(cfg.seed);
    m.extra["model"] = model_path.empty() ? cfg.model_path : model_path;
    m.extra["timing"] = "median of " + std::to_string(cfg.eval.repeats) + " repetitions, steady clock";
    return m;
}

}  // namespace cli_detail

/// Runs one CLI invocation. `args` excludes the program name.
inline int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    using namespace cli_detail;
    if (args.empty()) {
        err << usage();
        return kExitConfig;
    }
    const std::string& sub = args.front();
    if (sub == "--help" || sub == "-h" || sub == "help") {
        out << usage();
        return kExitOk;
    }
    bool known = false;
    for (const auto& [name, help] : subcommands()) known = known || name == sub;
    if (!known) {
        err << "unknown subcommand '" << sub << "'\n\n" << usage();
        return kExitConfig;
    }

    CLI::App app("templora " + sub, "templora " + sub);
    Common common;
    add_common(app, common);
    std::string model, prompt, events, manifest, json, loss, split = "eval", axis, windows = "512,256,128", chunks = "64,128,256",
                                                      batches = "0", values, factors = "2,4,8";
    std::vector<std::string> docs, positional;
    std::size_t tokens = 256, prompt_length = 0, count = 1, first = 0, stride = 0;
    std::optional<std::size_t> n_docs;
    bool base = false;

    if (sub == "pretrain") {
        app.add_option("--loss", loss, "write the loss curve (step,loss) to this CSV");
    } else if (sub == "gen-corpus") {
        app.add_option("--count", count, "number of documents");
        app.add_option("--first", first, "index of the first document");
        app.add_option("--split", split, "eval or pretrain seed namespace");
    } else if (sub == "generate") {
        app.add_option("--model", model, "base model checkpoint");
        app.add_option("--prompt", prompt, "prompt token file (default: the start of evaluation document 0)");
        app.add_option("--prompt-length", prompt_length, "prompt tokens taken from the default document");
        app.add_option("--tokens", tokens, "tokens to generate");
        app.add_option("--events", events, "per-token events as JSON lines");
        app.add_option("--manifest", manifest, "run manifest (JSON)");
    } else if (sub == "eval-ppl") {
        app.add_option("--model", model, "base model checkpoint");
        app.add_option("--doc", docs, "document token file")->required();
        app.add_option("--json", json, "also write the report as JSON");
        app.add_option("--events", events, "per-token events as JSON lines");
        app.add_flag("--base", base, "evaluate the base model without adapter updates");
    } else if (sub == "compare") {
        app.add_option("reports", positional, "base report then updated report")->expected(2)->required();
    } else {
        app.add_option("--model", model, "base model checkpoint");
        app.add_option("--doc", docs, "document token files (default: generated evaluation documents)");
        app.add_option("--docs", n_docs, "number of generated evaluation documents");
        if (sub == "bench-window") app.add_option("--windows", windows, "comma-separated context windows");
        if (sub == "bench-chunk" || sub == "bench-traincost") app.add_option("--chunks", chunks, "comma-separated chunk sizes");
        if (sub == "bench-traincost") app.add_option("--batches", batches, "comma-separated optimizer batch sizes (0 = whole chunk)");
        if (sub == "sweep") {
            app.add_option("--axis", axis, "epochs, rank or lr")->required();
            app.add_option("--values", values, "comma-separated axis values")->required();
        }
        if (sub == "bench-ntk") {
            app.add_option("--factors", factors, "comma-separated extension factors");
            app.add_option("--stride", stride, "targets per forward (default W/2)");
        }
    }

    std::vector<std::string> rest(args.begin() + 1, args.end());
    std::reverse(rest.begin(), rest.end());
    try {
        app.parse(rest);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "templora " << sub << ": " << e.what() << "\n" << app.help();
        return kExitConfig;
    }

    try {
        if (sub == "compare") {
            const auto rows = compare_reports(read_csv(positional[0]), read_csv(positional[1]));
            if (common.out.empty()) {
                write_compare(out, rows);
            } else {
                auto os = open_out(common.out);
                write_compare(os, rows);
            }
            return kExitOk;
        }

        RunConfig cfg = resolve(common);

        if (sub == "pretrain") {
            Transformer<float> m(cfg.model, Rng(cfg.seed).substream("init"));
            auto os = open_out(common.out);
            os.close();
            const auto r = corpus::pretrain_base(m, cfg.corpus, cfg.pretrain, [&](std::size_t step, double l) {
                if (step % 100 == 0 || step + 1 == cfg.pretrain.steps) err << "step " << step << " loss " << l << '\n';
            });
            save_model(common.out, m);
            if (!loss.empty()) {
                auto ls = open_out(loss);
                ls << "# config_hash=" << hex(cfg.hash()) << "\nstep,loss\n";
                ls.precision(10);
                for (std::size_t i = 0; i < r.loss_curve.size(); ++i) ls << i << ',' << r.loss_curve[i] << '\n';
            }
            out << "saved " << common.out << " (checksum " << hex(m.checksum()) << ")\n";
            return kExitOk;
        }

        if (sub == "gen-corpus") {
            if (common.out.empty()) throw ConfigError("--out is required");
            if (split != "eval" && split != "pretrain") throw ConfigError("gen-corpus: --split must be eval or pretrain");
            const auto space = split == "eval" ? corpus::SeedSpace::Eval : corpus::SeedSpace::Pretrain;
            const bool single = count == 1 && std::filesystem::path(common.out).extension() == ".tlc";
            const std::filesystem::path dir = single ? std::filesystem::path(common.out).parent_path() : std::filesystem::path(common.out);
            if (!dir.empty()) std::filesystem::create_directories(dir);
            for (std::size_t i = first; i < first + count; ++i) {
                std::filesystem::path path = single ? std::filesystem::path(common.out) : dir / ("doc_" + std::to_string(i) + ".tlc");
                corpus::CorpusKind kind = cfg.corpus.kind;
                if (kind == corpus::CorpusKind::Mixed) kind = i % 2 == 0 ? corpus::CorpusKind::Glossary : corpus::CorpusKind::Novel;
                if (kind == corpus::CorpusKind::Glossary) {
                    corpus::GlossarySpec s = cfg.corpus.glossary;
                    s.seed = corpus::document_seed(space, s.family_seed, i);
                    s.length = cfg.eval.doc_length;
                    const auto doc = corpus::gen_glossary_doc(s);
                    corpus::write_tokens(path, doc.tokens, cfg.model.vocab_size);
                    const auto b = doc.boundaries();
                    corpus::write_boundaries(std::filesystem::path(path).replace_extension(".bounds"), b);
                } else {
                    corpus::write_tokens(path, corpus::make_document(cfg.corpus, space, i, cfg.eval.doc_length), cfg.model.vocab_size);
                }
                out << path.string() << '\n';
            }
            return kExitOk;
        }

        const Transformer<float> m = load_checkpoint(cfg, model);
        const std::string model_path = model.empty() ? cfg.model_path : model;

        if (sub == "generate") {
            std::vector<TokenId> p;
            if (!prompt.empty()) {
                p = corpus::read_tokens(prompt).tokens;
            } else {
                const std::size_t len = prompt_length ? prompt_length : cfg.engine.validated(cfg.model).input_length;
                p = corpus::make_document(cfg.corpus, corpus::SeedSpace::Eval, 0, len);
            }
            GenerationSession<float> s(m, cfg.engine, p);
            s.generate(tokens);
            s.finish();
            corpus::write_tokens(common.out.empty() ? "generated.tlc" : common.out, s.tokens(), cfg.model.vocab_size);
            if (!events.empty()) {
                auto os = open_out(events);
                write_events(os, s.events());
            }
            if (!manifest.empty()) {
                auto os = open_out(manifest);
                write_manifest(os, m.config(), s.config(), m.checksum(),
                               {{"config_hash", hex(cfg.hash())}, {"prompt_tokens", p.size()}, {"generated_tokens", tokens},
                                {"updates", s.submitted_updates()}, {"model", model_path}});
            }
            out << "generated " << tokens << " tokens, " << s.submitted_updates() << " updates\n";
            return kExitOk;
        }

        if (sub == "eval-ppl") {
            const auto doc = corpus::read_tokens(docs.front()).tokens;
            EngineConfig e = cfg.engine;
            if (base) e.temp_lora = false;
            const auto bounds = cfg.eval.boundaries.empty() ? eval::equal_boundaries(doc.size(), cfg.eval.segments) : cfg.eval.boundaries;
            const auto r = teacher_forced_stream(m, doc, e, bounds);
            eval::EvalReport rep = r.report;
            rep.metadata["config_hash"] = hex(cfg.hash());
            rep.metadata["corpus_hash"] = hex(corpus::corpus_hash(doc));
            rep.metadata["seed"] = std::to_string(cfg.seed);
            rep.metadata["mode"] = e.temp_lora ? "temp_lora" : "base";
            rep.metadata["updates"] = std::to_string(r.updates);
            rep.metadata["model_checksum"] = hex(m.checksum());
            auto os = open_out(common.out);
            eval::write_csv(os, rep);
            if (!json.empty()) {
                auto js = open_out(json);
                js << eval::to_json(rep).dump(2) << '\n';
            }
            if (!events.empty()) {
                auto es = open_out(events);
                write_events(es, r.events);
            }
            out << "ppl " << rep.ppl() << " over " << rep.n_tokens << " tokens\n";
            return kExitOk;
        }

        const Documents d = load_documents(cfg, docs, n_docs.value_or(cfg.eval.documents));
        std::vector<BenchRow> rows;
        if (sub == "bench-window") {
            WindowBenchOptions o;
            o.windows = parse_list<std::size_t>(windows, "--windows");
            o.repeats = cfg.eval.repeats;
            o.generate_tokens = cfg.eval.generate_tokens;
            rows = bench_window(m, d.docs, cfg.engine, o, cfg.seed);
        } else if (sub == "bench-chunk") {
            const auto c = parse_list<std::size_t>(chunks, "--chunks");
            rows = bench_chunk(m, d.docs, cfg.engine, c, cfg.seed);
        } else if (sub == "bench-traincost") {
            const auto c = parse_list<std::size_t>(chunks, "--chunks");
            const auto b = parse_list<std::size_t>(batches, "--batches");
            rows = bench_traincost(m, d.docs.front(), cfg.engine, c, b, cfg.eval.repeats, cfg.seed);
        } else if (sub == "sweep") {
            const auto v = parse_list<double>(values, "--values");
            rows = sweep_hparams(m, d.docs, cfg.engine, parse_axis(axis), v, cfg.seed);
        } else if (sub == "bench-ntk") {
            const auto f = parse_list<double>(factors, "--factors");
            rows = bench_ntk(m, d.docs, f, stride ? stride : m.config().context_window / 2, cfg.seed);
        }
        auto os = open_out(common.out);
        write_bench_csv(os, rows, meta_for(cfg, d, model_path));
        out << rows.size() << " rows written to " << common.out << '\n';
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace templora::harness
