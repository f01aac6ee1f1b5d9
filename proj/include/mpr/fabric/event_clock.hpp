#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <vector>

namespace mpr::fabric {

/// Simulated time source and pending-event queue.
///
/// Events scheduled for the same instant run in the order they were
/// scheduled. Time never moves backwards.
class EventClock {
public:
    using Action = std::function<void()>;

    double now() const { return now_; }

    void schedule_at(double time, Action action);
    void schedule_in(double delay, Action action) { schedule_at(now_ + delay, std::move(action)); }

    bool empty() const { return queue_.empty(); }
    std::size_t pending() const { return queue_.size(); }

    /// Time of the earliest pending event; only valid when !empty().
    double next_time() const { return queue_.top().time; }

    /// Moves the clock forward. Moving to a time earlier than now() is a no-op.
    void advance_to(double time);

    /// Pops and runs every event due at or before now(), including events
    /// scheduled for now() by the actions themselves. Returns the count run.
    std::size_t run_due();

private:
    struct Entry {
        double time;
        std::uint64_t seq;
        Action action;
    };
    struct Later {
        bool operator()(const Entry& a, const Entry& b) const {
            if (a.time != b.time) return a.time > b.time;
            return a.seq > b.seq;
        }
    };

    double now_ = 0.0;
    std::uint64_t next_seq_ = 0;
    std::priority_queue<Entry, std::vector<Entry>, Later> queue_;
};

}  // namespace mpr::fabric
