#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/lora/adapter.hpp"
#include "templora/lora/lora.hpp"
#include "templora/model/transformer.hpp"

namespace templora {

/// A completed chunk handed to the trainer. `tokens` holds the chunk and up to
/// L_T tokens before it; chunk_begin/chunk_end index into `tokens`.
struct TrainJob {
    std::vector<TokenId> tokens;
    std::size_t chunk_begin = 0;
    std::size_t chunk_end = 0;
    std::size_t stream_end = 0;  ///< absolute index one past the chunk in the stream
};

/// The adapter version that became active before generating token `token_index`.
struct SwapEvent {
    std::size_t token_index = 0;
    std::int64_t version = 0;
    friend bool operator==(const SwapEvent&, const SwapEvent&) = default;
};
using SwapSchedule = std::vector<SwapEvent>;

struct TrainerEvent {
    enum class Kind { Update, Failure };
    Kind kind = Kind::Update;
    std::int64_t version = 0;  ///< version after the update (Failure: version kept)
    std::size_t stream_end = 0;
    double seconds = 0.0;
    double mean_loss = 0.0;
    std::string message;
};

/// Owns the adapter being trained and decides when a trained version becomes
/// visible to the generator.
template <class T>
class Trainer {
public:
    virtual ~Trainer() = default;
    virtual void submit(TrainJob job) = 0;
    /// Called before producing token `token_index`; returns a newer adapter to
    /// activate, or nullptr to keep the current one.
    virtual std::shared_ptr<const LoraAdapter<T>> poll(std::size_t token_index) = 0;
    /// Blocks until every submitted job has been processed.
    virtual void drain() {}
    [[nodiscard]] virtual std::vector<TrainerEvent> events() const = 0;
    [[nodiscard]] virtual ForwardStats stats() const = 0;
};

namespace detail {

template <class T>
TrainerEvent run_job(LoraAdapter<T>& adapter, const Transformer<T>& model, const TrainJob& job, std::size_t training_length,
                     ForwardStats* stats) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainReport r = train_chunk(adapter, model, job.tokens, job.chunk_begin, job.chunk_end, training_length, stats);
    TrainerEvent e;
    e.version = adapter.version();
    e.stream_end = job.stream_end;
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    e.mean_loss = r.mean_loss;
    return e;
}

}  // namespace detail

/// Trains each chunk on submission; the result is active from the next token.
template <class T>
class SyncTrainer final : public Trainer<T> {
public:
    SyncTrainer(const Transformer<T>& model, LoraAdapter<T> initial, std::size_t training_length)
        : model_(model), master_(std::move(initial)), training_length_(training_length) {}

    void submit(TrainJob job) override {
        events_.push_back(detail::run_job(master_, model_, job, training_length_, &stats_));
        pending_ = true;
    }
    std::shared_ptr<const LoraAdapter<T>> poll(std::size_t) override {
        if (!pending_) return nullptr;
        pending_ = false;
        return std::make_shared<const LoraAdapter<T>>(master_);
    }
    [[nodiscard]] std::vector<TrainerEvent> events() const override { return events_; }
    [[nodiscard]] ForwardStats stats() const override { return stats_; }

private:
    const Transformer<T>& model_;
    LoraAdapter<T> master_;
    std::size_t training_length_;
    bool pending_ = false;
    std::vector<TrainerEvent> events_;
    ForwardStats stats_;
};

/// Trains synchronously but activates versions only where a recorded schedule
/// says so. Replaying a parallel run's schedule reproduces its output.
template <class T>
class ReplayTrainer final : public Trainer<T> {
public:
    ReplayTrainer(const Transformer<T>& model, LoraAdapter<T> initial, std::size_t training_length, SwapSchedule schedule)
        : model_(model), master_(std::move(initial)), training_length_(training_length), schedule_(std::move(schedule)) {}

    void submit(TrainJob job) override {
        events_.push_back(detail::run_job(master_, model_, job, training_length_, &stats_));
        snapshots_[master_.version()] = std::make_shared<const LoraAdapter<T>>(master_);
    }
    std::shared_ptr<const LoraAdapter<T>> poll(std::size_t token_index) override {
        std::shared_ptr<const LoraAdapter<T>> out;
        while (next_ < schedule_.size() && schedule_[next_].token_index <= token_index) {
            const SwapEvent& s = schedule_[next_++];
            if (s.token_index < token_index) throw ConfigError("replay: schedule entry for token " + std::to_string(s.token_index) + " was skipped");
            auto it = snapshots_.find(s.version);
            if (it == snapshots_.end()) {
                throw ConfigError("replay: version " + std::to_string(s.version) + " is not trained before token " +
                                  std::to_string(token_index));
            }
            out = it->second;
        }
        return out;
    }
    [[nodiscard]] std::vector<TrainerEvent> events() const override { return events_; }
    [[nodiscard]] ForwardStats stats() const override { return stats_; }

private:
    const Transformer<T>& model_;
    LoraAdapter<T> master_;
    std::size_t training_length_;
    SwapSchedule schedule_;
    std::size_t next_ = 0;
    std::map<std::int64_t, std::shared_ptr<const LoraAdapter<T>>> snapshots_;
    std::vector<TrainerEvent> events_;
    ForwardStats stats_;
};

struct ParallelOptions {
    /// Called on the trainer thread before each update with the version being
    /// trained from. May block (tests use it to stall the trainer) or throw.
    std::function<void(std::int64_t, std::stop_token)> before_update;
    /// Makes poll() wait until all submitted jobs are done: the limit of an
    /// instantaneous trainer.
    bool wait_for_updates = false;
};

/// Trains on a background thread, at most one job at a time. Completed
/// versions are published as immutable snapshots and picked up by poll().
/// A failed update leaves the published adapter in place.
template <class T>
class ThreadTrainer final : public Trainer<T> {
public:
    ThreadTrainer(const Transformer<T>& model, LoraAdapter<T> initial, std::size_t training_length, ParallelOptions opts = {})
        : model_(model), master_(std::move(initial)), training_length_(training_length), opts_(std::move(opts)) {
        published_ = std::make_shared<const LoraAdapter<T>>(master_);
        delivered_ = master_.version();
        worker_ = std::jthread([this](std::stop_token st) { run(st); });
    }
    ~ThreadTrainer() override {
        worker_.request_stop();
        work_cv_.notify_all();
        if (worker_.joinable()) worker_.join();
    }
    ThreadTrainer(const ThreadTrainer&) = delete;
    ThreadTrainer& operator=(const ThreadTrainer&) = delete;

    void submit(TrainJob job) override {
        {
            std::lock_guard lk(mu_);
            queue_.push_back(std::move(job));
        }
        work_cv_.notify_one();
    }
    std::shared_ptr<const LoraAdapter<T>> poll(std::size_t) override {
        if (opts_.wait_for_updates) drain();
        std::lock_guard lk(mu_);
        if (published_->version() == delivered_) return nullptr;
        delivered_ = published_->version();
        return published_;
    }
    void drain() override {
        std::unique_lock lk(mu_);
        idle_cv_.wait(lk, [&] { return queue_.empty() && !busy_; });
    }
    [[nodiscard]] std::vector<TrainerEvent> events() const override {
        std::lock_guard lk(mu_);
        return events_;
    }
    [[nodiscard]] ForwardStats stats() const override {
        std::lock_guard lk(mu_);
        return stats_;
    }
    [[nodiscard]] std::size_t queued() const {
        std::lock_guard lk(mu_);
        return queue_.size() + (busy_ ? 1 : 0);
    }

private:
    void run(std::stop_token st) {
        while (!st.stop_requested()) {
            TrainJob job;
            {
                std::unique_lock lk(mu_);
                if (!work_cv_.wait(lk, st, [&] { return !queue_.empty(); })) return;
                job = std::move(queue_.front());
                queue_.pop_front();
                busy_ = true;
            }
            ForwardStats local;
            TrainerEvent event;
            try {
                if (opts_.before_update) opts_.before_update(master_.version(), st);
                if (st.stop_requested()) return;
                event = detail::run_job(master_, model_, job, training_length_, &local);
                auto snapshot = std::make_shared<const LoraAdapter<T>>(master_);
                std::lock_guard lk(mu_);
                published_ = std::move(snapshot);
            } catch (const std::exception& e) {
                std::lock_guard lk(mu_);
                master_ = *published_;
                event = TrainerEvent{TrainerEvent::Kind::Failure, master_.version(), job.stream_end, 0.0, 0.0, e.what()};
            }
            {
                std::lock_guard lk(mu_);
                events_.push_back(event);
                stats_.calls += local.calls;
                stats_.tokens += local.tokens;
                stats_.max_positions = std::max(stats_.max_positions, local.max_positions);
                busy_ = false;
            }
            idle_cv_.notify_all();
        }
    }

    const Transformer<T>& model_;
    LoraAdapter<T> master_;
    std::size_t training_length_;
    ParallelOptions opts_;

    mutable std::mutex mu_;
    std::condition_variable_any work_cv_;
    std::condition_variable idle_cv_;
    std::deque<TrainJob> queue_;
    bool busy_ = false;
    std::shared_ptr<const LoraAdapter<T>> published_;
    std::int64_t delivered_ = 0;
    std::vector<TrainerEvent> events_;
    ForwardStats stats_;
    std::jthread worker_;
};

}  // namespace templora
