#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/memory.hpp"
#include "templora/corpus/io.hpp"
#include "templora/corpus/pretrain.hpp"
#include "templora/engine/session.hpp"
#include "templora/engine/stream.hpp"
#include "templora/eval/metrics.hpp"
#include "templora/harness/config.hpp"
#include "templora/lora/lora.hpp"

namespace templora::harness {

/// One benchmark measurement. Columns are written in declaration order.
struct BenchRow {
    std::string bench;    ///< window | chunk | traincost | sweep | ntk
    std::string variant;  ///< base | tl | train | generate | ntk | ...
    std::uint64_t seed = 0;
    std::size_t window = 0;
    std::size_t chunk_size = 0;
    std::size_t input_length = 0;
    std::size_t training_length = 0;
    std::size_t rank = 0;
    double lr = 0.0;
    int epochs = 0;
    std::size_t batch_tokens = 0;
    bool temp_lora = false;
    bool cache_reuse = false;
    double ntk_factor = 1.0;
    double ppl = 0.0;
    std::int64_t peak_memory_bytes = 0;
    double latency_per_1k_s = 0.0;
    double train_time_per_chunk_s = 0.0;
    double generate_time_per_chunk_s = 0.0;
    std::string status = "ok";  ///< ok, or "skipped: <reason>"

    [[nodiscard]] bool skipped() const { return status != "ok"; }
};

inline const std::vector<std::string>& bench_columns() {
    static const std::vector<std::string> cols = {
        "bench",         "variant",         "seed",       "window",       "chunk_size",         "input_length",
        "training_length", "rank",          "lr",         "epochs",       "batch_tokens",       "temp_lora",
        "cache_reuse",   "ntk_factor",      "ppl",        "peak_memory_bytes", "latency_per_1k_s", "train_time_per_chunk_s",
        "generate_time_per_chunk_s", "status"};
    return cols;
}

/// Report provenance written as `# key=value` lines above the CSV header.
struct ReportMeta {
    std::uint64_t config_hash = 0;
    std::uint64_t corpus_hash = 0;
    std::map<std::string, std::string> extra;
};

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows, const ReportMeta& meta) {
    os << "# config_hash=" << hex(meta.config_hash) << '\n';
    os << "# corpus_hash=" << hex(meta.corpus_hash) << '\n';
    os << "# memory=peak live tensor bytes from engine accounting, model weights included\n";
    for (const auto& [k, v] : meta.extra) os << "# " << k << '=' << v << '\n';
    const auto& cols = bench_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
    os << '\n';
    std::ostringstream line;
    line.precision(10);
    for (const auto& r : rows) {
        line.str("");
        line << r.bench << ',' << r.variant << ',' << r.seed << ',' << r.window << ',' << r.chunk_size << ',' << r.input_length << ','
             << r.training_length << ',' << r.rank << ',' << r.lr << ',' << r.epochs << ',' << r.batch_tokens << ','
             << (r.temp_lora ? 1 : 0) << ',' << (r.cache_reuse ? 1 : 0) << ',' << r.ntk_factor << ',' << r.ppl << ','
             << r.peak_memory_bytes << ',' << r.latency_per_1k_s << ',' << r.train_time_per_chunk_s << ','
             << r.generate_time_per_chunk_s << ',' << r.status << '\n';
        os << line.str();
    }
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ConfigError("median of an empty sample");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// The same weights under a different context window (and so cache capacity).
template <class T>
Transformer<T> with_window(const Transformer<T>& model, std::size_t window) {
    ModelConfig cfg = model.config();
    cfg.context_window = window;
    return Transformer<T>(cfg, model.parameters());
}

/// Evaluation documents of the configured family, one per seed.
inline std::vector<std::vector<TokenId>> eval_documents(const RunConfig& c, std::span<const std::uint64_t> seeds) {
    std::vector<std::vector<TokenId>> docs;
    for (std::uint64_t s : seeds) docs.push_back(corpus::make_document(c.corpus, corpus::SeedSpace::Eval, s, c.eval.doc_length));
    return docs;
}

inline std::uint64_t documents_hash(const std::vector<std::vector<TokenId>>& docs) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& d : docs) h = corpus::corpus_hash(d, h);
    return h;
}

/// Token-weighted teacher-forced PPL of several documents under one engine config.
struct StreamSummary {
    double ppl = 0.0;
    std::vector<StreamResult> runs;
    std::int64_t peak_memory_bytes = 0;
};

template <class T>
StreamSummary stream_ppl(const Transformer<T>& model, const std::vector<std::vector<TokenId>>& docs, const EngineConfig& cfg,
                         std::span<const std::size_t> boundaries = {}) {
    StreamSummary s;
    double nll = 0.0;
    std::size_t n = 0;
    MemoryMeter meter;
    for (const auto& d : docs) {
        s.runs.push_back(teacher_forced_stream(model, d, cfg, boundaries));
        nll += s.runs.back().report.nll_sum;
        n += s.runs.back().report.n_tokens;
    }
    s.ppl = std::exp(nll / static_cast<double>(n));
    s.peak_memory_bytes = meter.peak_bytes() + static_cast<std::int64_t>(model.parameter_bytes());
    return s;
}

/// Wraps a trainer and accumulates the wall-clock time spent inside it, so
/// inference latency can be reported without the cascaded training cost.
template <class T>
class TimedTrainer final : public Trainer<T> {
public:
    explicit TimedTrainer(std::unique_ptr<Trainer<T>> inner) : inner_(std::move(inner)) {}
    void submit(TrainJob job) override {
        Timer t(seconds_);
        inner_->submit(std::move(job));
    }
    std::shared_ptr<const LoraAdapter<T>> poll(std::size_t token_index) override {
        Timer t(seconds_);
        return inner_->poll(token_index);
    }
    void drain() override {
        Timer t(seconds_);
        inner_->drain();
    }
    [[nodiscard]] std::vector<TrainerEvent> events() const override { return inner_->events(); }
    [[nodiscard]] ForwardStats stats() const override { return inner_->stats(); }
    [[nodiscard]] double seconds() const { return seconds_; }

private:
    struct Timer {
        explicit Timer(double& acc) : acc_(acc), t0_(std::chrono::steady_clock::now()) {}
        ~Timer() { acc_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }
        double& acc_;
        std::chrono::steady_clock::time_point t0_;
    };
    std::unique_ptr<Trainer<T>> inner_;
    double seconds_ = 0.0;
};

struct LatencySample {
    double inference_seconds = 0.0;  ///< wall-clock minus time spent in the trainer
    double training_seconds = 0.0;
    std::int64_t peak_memory_bytes = 0;
};

/// Generates `n` tokens after `prompt` and splits the wall-clock into
/// inference and training time.
template <class T>
LatencySample time_generation(const Transformer<T>& model, const EngineConfig& cfg, std::span<const TokenId> prompt, std::size_t n) {
    EngineConfig c = cfg;
    c.deployment = Deployment::Cascaded;
    LatencySample out;
    MemoryMeter meter;
    TimedTrainer<T>* timed = nullptr;
    std::unique_ptr<Trainer<T>> trainer;
    if (c.temp_lora) {
        auto t = std::make_unique<TimedTrainer<T>>(make_trainer(model, c.validated(model.config())));
        timed = t.get();
        trainer = std::move(t);
    }
    const auto t0 = std::chrono::steady_clock::now();
    {
        GenerationSession<T> s(model, c, prompt, std::move(trainer));
        const double before = timed ? timed->seconds() : 0.0;  // prompt pretraining is not generation
        s.generate(n);
        const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.training_seconds = timed ? timed->seconds() - before : 0.0;
        out.inference_seconds = total - (timed ? timed->seconds() : 0.0);
    }
    out.peak_memory_bytes = meter.peak_bytes() + static_cast<std::int64_t>(model.parameter_bytes());
    return out;
}

/// Median inference seconds per 1K generated tokens over `repeats` runs.
template <class T>
LatencySample generation_latency(const Transformer<T>& model, const EngineConfig& cfg, std::span<const TokenId> prompt, std::size_t n,
                                 std::size_t repeats) {
    std::vector<double> inf, train;
    std::int64_t peak = 0;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
        const auto s = time_generation(model, cfg, prompt, n);
        inf.push_back(s.inference_seconds * 1000.0 / static_cast<double>(n));
        train.push_back(s.training_seconds * 1000.0 / static_cast<double>(n));
        peak = std::max(peak, s.peak_memory_bytes);
    }
    return {median(inf), median(train), peak};
}

inline BenchRow row_for(const std::string& bench, const std::string& variant, std::uint64_t seed, std::size_t window,
                        const EngineConfig& e) {
    BenchRow r;
    r.bench = bench;
    r.variant = variant;
    r.seed = seed;
    r.window = window;
    r.chunk_size = e.chunk_size;
    r.input_length = e.input_length == 0 ? window - e.chunk_size : e.input_length;
    r.training_length = e.training_length;
    r.rank = e.lora.rank;
    r.lr = e.lora.lr;
    r.epochs = e.lora.epochs;
    r.batch_tokens = e.lora.batch_tokens;
    r.temp_lora = e.temp_lora;
    r.cache_reuse = e.cache_reuse;
    return r;
}

struct WindowBenchOptions {
    std::vector<std::size_t> windows;  ///< windows for the adapted rows
    std::size_t repeats = 3;
    std::size_t generate_tokens = 1024;
};

/// Window-shrink sweep. The first row is the base model at its full window
/// (the reference); then one adapted row per window, skipped when the window
/// cannot hold a training span (W < Δ + L_T). Latency is greedy decoding
/// time per 1K tokens with the adapter's training time excluded, the cost
/// seen by inference when training runs on a separate worker.
template <class T>
std::vector<BenchRow> bench_window(const Transformer<T>& model, const std::vector<std::vector<TokenId>>& docs, const EngineConfig& tl,
                                   const WindowBenchOptions& opts, std::uint64_t seed = 0) {
    if (docs.empty()) throw ConfigError("bench_window: no documents");
    std::vector<BenchRow> rows;
    const std::size_t full = model.config().context_window;
    const std::size_t prompt_len = std::min<std::size_t>(docs.front().size(), full);
    const std::span<const TokenId> prompt(docs.front().data(), prompt_len);

    EngineConfig base = tl;
    base.temp_lora = false;
    base.cache_reuse = false;
    base.attention_sink = false;
    base.input_length = 0;
    base.sampler = SamplerSpec::greedy();
    {
        BenchRow r = row_for("window", "base", seed, full, base);
        const auto s = stream_ppl(model, docs, base);
        const auto lat = generation_latency(model, base, prompt, opts.generate_tokens, opts.repeats);
        r.ppl = s.ppl;
        r.peak_memory_bytes = std::max(s.peak_memory_bytes, lat.peak_memory_bytes);
        r.latency_per_1k_s = lat.inference_seconds;
        rows.push_back(r);
    }
    for (std::size_t w : opts.windows) {
        EngineConfig e = tl;
        e.input_length = 0;
        e.sampler = SamplerSpec::greedy();
        BenchRow r = row_for("window", "tl", seed, w, e);
        if (w > full) {
            r.status = "skipped: window exceeds the trained window";
            rows.push_back(r);
            continue;
        }
        if (w < e.chunk_size + e.training_length) {
            r.status = "skipped: W < chunk_size + training_length";
            rows.push_back(r);
            continue;
        }
        const Transformer<T> m = with_window(model, w);
        const auto s = stream_ppl(m, docs, e);
        const auto lat = generation_latency(m, e, prompt.first(std::min(prompt.size(), w)), opts.generate_tokens, opts.repeats);
        r.ppl = s.ppl;
        r.peak_memory_bytes = std::max(s.peak_memory_bytes, lat.peak_memory_bytes);
        r.latency_per_1k_s = lat.inference_seconds;
        r.train_time_per_chunk_s = lat.training_seconds * static_cast<double>(e.chunk_size) / 1000.0;
        rows.push_back(r);
    }
    return rows;
}

/// Adapted stream PPL for each chunk size Δ (with L_X = W - Δ and L_T = Δ).
template <class T>
std::vector<BenchRow> bench_chunk(const Transformer<T>& model, const std::vector<std::vector<TokenId>>& docs, const EngineConfig& tl,
                                  std::span<const std::size_t> chunk_sizes, std::uint64_t seed = 0) {
    std::vector<BenchRow> rows;
    const std::size_t W = model.config().context_window;
    for (std::size_t delta : chunk_sizes) {
        EngineConfig e = tl;
        e.chunk_size = delta;
        e.training_length = delta;
        e.input_length = 0;
        BenchRow r = row_for("chunk", "tl", seed, W, e);
        if (2 * delta > W) {
            r.status = "skipped: W < chunk_size + training_length";
            rows.push_back(r);
            continue;
        }
        const auto s = stream_ppl(model, docs, e);
        r.ppl = s.ppl;
        r.peak_memory_bytes = s.peak_memory_bytes;
        rows.push_back(r);
    }
    return rows;
}

struct TrainCost {
    double train_seconds = 0.0;
    double generate_seconds = 0.0;
    std::int64_t train_peak_bytes = 0;
    std::int64_t generate_peak_bytes = 0;
    int steps = 0;
};

/// Wall-clock and peak memory of one chunk update (L_T context + Δ chunk)
/// against generating the same Δ tokens one at a time from an L_X prompt.
template <class T>
TrainCost measure_train_cost(const Transformer<T>& model, const EngineConfig& cfg, std::span<const TokenId> text, std::size_t repeats) {
    const EngineConfig e = cfg.validated(model.config());
    const std::size_t delta = e.chunk_size, lt = e.training_length, lx = e.input_length;
    if (text.size() < std::max(lt, lx) + delta) throw ConfigError("train cost: text shorter than the measured span");
    std::vector<double> train, gen;
    TrainCost out;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
        {
            LoraAdapter<T> adapter = attach(model, e.lora, Rng(e.seed).substream("adapter").next_u64());
            MemoryMeter meter;
            const auto t0 = std::chrono::steady_clock::now();
            const auto rep = train_chunk(adapter, model, text.first(lt + delta), lt, lt + delta, lt);
            train.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
            out.train_peak_bytes = std::max(out.train_peak_bytes, meter.peak_bytes());
            out.steps = rep.steps;
        }
        {
            EngineConfig g = e;
            g.temp_lora = false;
            g.sampler = SamplerSpec::greedy();
            MemoryMeter meter;
            const auto t0 = std::chrono::steady_clock::now();
            GenerationSession<T> s(model, g, text.first(lx));
            s.generate(delta);
            gen.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
            out.generate_peak_bytes = std::max(out.generate_peak_bytes, meter.peak_bytes());
        }
    }
    out.train_seconds = median(train);
    out.generate_seconds = median(gen);
    const auto weights = static_cast<std::int64_t>(model.parameter_bytes());
    out.train_peak_bytes += weights;
    out.generate_peak_bytes += weights;
    return out;
}

/// Train-versus-generate cost for each chunk size and optimizer batch size
/// (0 means one step per epoch over the whole chunk). Two rows per setting.
template <class T>
std::vector<BenchRow> bench_traincost(const Transformer<T>& model, std::span<const TokenId> text, const EngineConfig& cfg,
                                      std::span<const std::size_t> chunk_sizes, std::span<const std::size_t> batch_sizes,
                                      std::size_t repeats, std::uint64_t seed = 0) {
    std::vector<BenchRow> rows;
    const std::size_t W = model.config().context_window;
    for (std::size_t delta : chunk_sizes) {
        for (std::size_t batch : batch_sizes) {
            EngineConfig e = cfg;
            e.chunk_size = delta;
            e.training_length = std::min(cfg.training_length, W - delta);
            e.input_length = 0;
            e.lora.batch_tokens = batch;
            BenchRow train = row_for("traincost", "train", seed, W, e);
            BenchRow gen = row_for("traincost", "generate", seed, W, e);
            if (batch > delta) {
                train.status = gen.status = "skipped: batch_tokens > chunk_size";
            } else if (delta >= W) {
                train.status = gen.status = "skipped: chunk_size >= W";
            } else {
                const auto c = measure_train_cost(model, e, text, repeats);
                train.train_time_per_chunk_s = gen.train_time_per_chunk_s = c.train_seconds;
                train.generate_time_per_chunk_s = gen.generate_time_per_chunk_s = c.generate_seconds;
                train.peak_memory_bytes = c.train_peak_bytes;
                gen.peak_memory_bytes = c.generate_peak_bytes;
                gen.latency_per_1k_s = c.generate_seconds * 1000.0 / static_cast<double>(delta);
            }
            rows.push_back(train);
            rows.push_back(gen);
        }
    }
    return rows;
}

enum class SweepAxis { Epochs, Rank, Lr };

inline SweepAxis parse_axis(const std::string& s) {
    if (s == "epochs") return SweepAxis::Epochs;
    if (s == "rank") return SweepAxis::Rank;
    if (s == "lr") return SweepAxis::Lr;
    throw ConfigError("sweep axis must be epochs, rank or lr (got '" + s + "')");
}

/// PPL for each value on one hyper-parameter axis. The first row is the base
/// model (the axis origin). Rank sweeps keep alpha equal to rank, so the
/// adapter's output scale does not change with the rank.
template <class T>
std::vector<BenchRow> sweep_hparams(const Transformer<T>& model, const std::vector<std::vector<TokenId>>& docs, const EngineConfig& tl,
                                    SweepAxis axis, std::span<const double> values, std::uint64_t seed = 0) {
    if (values.empty()) throw ConfigError("sweep: no values");
    std::vector<BenchRow> rows;
    const std::size_t W = model.config().context_window;
    EngineConfig base = tl;
    base.temp_lora = false;
    BenchRow b = row_for("sweep", "base", seed, W, base);
    const auto bs = stream_ppl(model, docs, base);
    b.ppl = bs.ppl;
    b.peak_memory_bytes = bs.peak_memory_bytes;
    rows.push_back(b);
    for (double v : values) {
        EngineConfig e = tl;
        switch (axis) {
            case SweepAxis::Epochs:
                e.lora.epochs = static_cast<int>(v);
                break;
            case SweepAxis::Rank:
                e.lora.rank = static_cast<std::size_t>(v);
                e.lora.alpha = v;
                break;
            case SweepAxis::Lr:
                e.lora.lr = v;
                break;
        }
        BenchRow r = row_for("sweep", "tl", seed, W, e);
        const auto s = stream_ppl(model, docs, e);
        r.ppl = s.ppl;
        r.peak_memory_bytes = s.peak_memory_bytes;
        rows.push_back(r);
    }
    return rows;
}

/// Per-token NLL with the window stretched to `factor` x W by dynamic NTK
/// scaling: blocks of `stride` targets, each predicted from up to factor x W
/// positions, with the rotary base rescaled for the length of each forward.
/// factor 1 is the plain windowed evaluation.
template <class T>
std::vector<double> ntk_extended_nll(const Transformer<T>& model, std::span<const TokenId> tokens, double factor, std::size_t stride) {
    if (factor < 1.0) throw ConfigError("ntk: factor must be >= 1");
    const std::size_t W = model.config().context_window;
    const auto window = static_cast<std::size_t>(std::llround(factor * static_cast<double>(W)));
    if (stride < 1 || stride > window) throw ConfigError("ntk: stride must be in [1, window]");
    if (tokens.size() < 2) throw ConfigError("ntk: need at least 2 tokens");
    const Transformer<T> extended = with_window(model, window);
    std::vector<double> out;
    out.reserve(tokens.size() - 1);
    for (std::size_t b = 1; b < tokens.size(); b += stride) {
        const std::size_t e = std::min(tokens.size(), b + stride);
        const std::size_t start = (b - 1) - std::min(window - stride, b - 1);
        const std::size_t len = e - 1 - start;
        Graph<T> g(false);
        ForwardOptions fo;
        fo.ntk_scale = dynamic_ntk_scale(len, W);
        Var<T> logits = forward(g, extended, tokens.subspan(start, len), static_cast<KVCache<T>*>(nullptr),
                                 static_cast<const LoraAdapter<T>*>(nullptr), fo);
        const auto nll = token_nll(logits.value(), tokens.subspan(start + 1, len));
        out.insert(out.end(), nll.end() - static_cast<std::ptrdiff_t>(e - b), nll.end());
    }
    return out;
}

/// Windowed baseline (factor 1) followed by one NTK-extended row per factor.
template <class T>
std::vector<BenchRow> bench_ntk(const Transformer<T>& model, const std::vector<std::vector<TokenId>>& docs, std::span<const double> factors,
                                std::size_t stride, std::uint64_t seed = 0) {
    std::vector<BenchRow> rows;
    const std::size_t W = model.config().context_window;
    auto run = [&](double f, const std::string& variant) {
        BenchRow r;
        r.bench = "ntk";
        r.variant = variant;
        r.seed = seed;
        r.window = static_cast<std::size_t>(std::llround(f * static_cast<double>(W)));
        r.chunk_size = stride;
        r.ntk_factor = f;
        double nll = 0.0;
        std::size_t n = 0;
        MemoryMeter meter;
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& d : docs) {
            for (double x : ntk_extended_nll(model, std::span<const TokenId>(d), f, stride)) nll += x;
            n += d.size() - 1;
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        r.ppl = std::exp(nll / static_cast<double>(n));
        r.peak_memory_bytes = meter.peak_bytes() + static_cast<std::int64_t>(model.parameter_bytes());
        r.latency_per_1k_s = secs * 1000.0 / static_cast<double>(n);
        rows.push_back(r);
    };
    run(1.0, "windowed");
    for (double f : factors) run(f, "ntk");
    return rows;
}

}  // namespace templora::harness
