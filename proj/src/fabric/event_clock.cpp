#include "mpr/fabric/event_clock.hpp"

#include <algorithm>

namespace mpr::fabric {

void EventClock::schedule_at(double time, Action action) {
    queue_.push(Entry{std::max(time, now_), next_seq_++, std::move(action)});
}

void EventClock::advance_to(double time) {
    if (time > now_) now_ = time;
}

std::size_t EventClock::run_due() {
    std::size_t ran = 0;
    while (!queue_.empty() && queue_.top().time <= now_) {
        // priority_queue::top is const; the entry is popped before running so
        // the action may schedule further events.
        Action action = std::move(const_cast<Entry&>(queue_.top()).action);
        queue_.pop();
        action();
        ++ran;
    }
    return ran;
}

}  // namespace mpr::fabric
