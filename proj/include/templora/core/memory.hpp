#pragma once

#include <cstddef>
#include <cstdint>
#include <new>

namespace templora {

/// Scoped accounting of live tensor bytes allocated on the current thread.
///
/// Installing a meter makes every tensor buffer allocation/free on this
/// thread report to it until the meter is destroyed; meters nest. Bytes
/// allocated before the meter was installed are not counted, so callers add
/// resident state (e.g. model weights) explicitly when reporting totals.
class MemoryMeter {
public:
    MemoryMeter() : previous_(active_) { active_ = this; }
    ~MemoryMeter() { active_ = previous_; }
    MemoryMeter(const MemoryMeter&) = delete;
    MemoryMeter& operator=(const MemoryMeter&) = delete;

    [[nodiscard]] std::int64_t current_bytes() const { return current_; }
    [[nodiscard]] std::int64_t peak_bytes() const { return peak_; }

    static void on_alloc(std::size_t bytes) {
        for (MemoryMeter* m = active_; m != nullptr; m = m->previous_) {
            m->current_ += static_cast<std::int64_t>(bytes);
            if (m->current_ > m->peak_) m->peak_ = m->current_;
        }
    }
    static void on_free(std::size_t bytes) {
        for (MemoryMeter* m = active_; m != nullptr; m = m->previous_) {
            m->current_ -= static_cast<std::int64_t>(bytes);
        }
    }

private:
    static inline thread_local MemoryMeter* active_ = nullptr;
    MemoryMeter* previous_;
    std::int64_t current_ = 0;
    std::int64_t peak_ = 0;
};

template <class T>
struct TrackedAllocator {
    using value_type = T;

    TrackedAllocator() noexcept = default;
    template <class U>
    TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        MemoryMeter::on_alloc(n * sizeof(T));
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) noexcept {
        MemoryMeter::on_free(n * sizeof(T));
        ::operator delete(p);
    }

    template <class U>
    bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

}  // namespace templora
