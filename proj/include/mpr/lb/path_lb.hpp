#pragma once

#include "mpr/core/connection.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

namespace mpr::lb {

/// Lossless paths post whole sub-flows; lossy paths run the chunk window
/// and post one data WR per path at a time.
enum class Mode { lossless, lossy };

std::string_view to_string(Mode mode);

class LbError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- allocation

/// data_i = floor(total * cap_i / sum(caps)), remainder to path 0.
/// Whole-number caps take an exact integer path, so scaling every cap by
/// the same integer never changes the result. Throws LbError for empty caps
/// or a non-positive cap.
std::vector<std::uint64_t> allocate(std::uint64_t total, const std::vector<double>& caps);

class AllocationPolicy {
public:
    virtual ~AllocationPolicy() = default;
    virtual std::vector<std::uint64_t> allocate(std::uint64_t total, const std::vector<double>& caps) const = 0;
};

class ProportionalAllocation : public AllocationPolicy {
public:
    std::vector<std::uint64_t> allocate(std::uint64_t total, const std::vector<double>& caps) const override {
        return lb::allocate(total, caps);
    }
};

// ---------------------------------------------------------------- chunk window

enum class Phase { binary_growth, linear_probe, stable };
enum class Outcome { success, retry_exceeded };

std::string_view to_string(Phase phase);

struct WindowConfig {
    std::uint64_t initial = 64 * 1024;
    std::uint64_t block = 4096;         // minimum chunk and step granularity
    std::uint64_t step_divisor = 8;     // linear step = last_good / divisor, block-rounded
    std::uint64_t max_chunk = 1ull << 40;
};

struct ChunkWindow {
    std::size_t path = 0;
    std::uint64_t current = 0;
    std::uint64_t last_good = 0;
    Phase phase = Phase::binary_growth;
    std::uint64_t linear_step = 0;
    friend bool operator==(const ChunkWindow&, const ChunkWindow&) = default;
};

ChunkWindow initial_window(std::size_t path, const WindowConfig& config = {});

/// One step of the search:
///   growth  + ok   -> last_good = current, current *= 2
///   growth  + drop -> current = last_good, start linear probing
///                     (nothing good yet: clamp to one block, stable)
///   linear  + ok   -> last_good = current, current += step
///   linear  + drop -> back to last_good, stable
///   stable  + ok   -> unchanged
///   stable  + drop -> halve (block-rounded, at least one block), stay stable
ChunkWindow window_update(const ChunkWindow& window, Outcome outcome, const WindowConfig& config = {});

class WindowPolicy {
public:
    virtual ~WindowPolicy() = default;
    virtual ChunkWindow initial(std::size_t path) const = 0;
    virtual ChunkWindow update(const ChunkWindow& window, Outcome outcome) const = 0;
};

class BinaryLinearWindow : public WindowPolicy {
public:
    explicit BinaryLinearWindow(WindowConfig config = {}) : config_(config) {}
    ChunkWindow initial(std::size_t path) const override { return initial_window(path, config_); }
    ChunkWindow update(const ChunkWindow& w, Outcome o) const override { return window_update(w, o, config_); }
    const WindowConfig& config() const { return config_; }

private:
    WindowConfig config_;
};

// ---------------------------------------------------------------- plan

struct Chunk {
    std::uint64_t offset = 0;  // absolute, in the MP_WR's address space
    std::uint64_t length = 0;
};

struct SubFlow {
    std::size_t path = 0;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    std::vector<Chunk> chunks;
};

struct SubFlowPlan {
    std::uint64_t mp_wr_id = 0;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    std::vector<SubFlow> entries;  // one per path, zero-length ones included

    std::size_t chunk_count() const;
};

struct PlanOptions {
    Mode mode = Mode::lossless;
    std::uint64_t block = 4096;
    /// Lossless chunk cap; 0 = whole sub-flow.
    std::uint64_t max_chunk = 0;
};

/// Splits [offset, offset+length) over paths by `allocation`, then cuts each
/// sub-flow into chunks: whole (lossless) or window-sized (lossy). Chunk
/// lengths are block multiples except the last of each sub-flow. A range
/// shorter than one block goes to path 0 as a single chunk.
SubFlowPlan plan(std::uint64_t mp_wr_id, std::uint64_t offset, std::uint64_t length, const std::vector<double>& caps,
                 const std::vector<ChunkWindow>& windows, const PlanOptions& options,
                 const AllocationPolicy& allocation = ProportionalAllocation{});

// ---------------------------------------------------------------- scheduling

struct Post {
    std::size_t path = 0;
    Chunk chunk;
    std::uint32_t attempt = 1;
};

/// Round-robin posting discipline over one plan. Lossless: a path is eligible
/// while it has fewer than `max_in_flight` WRs out. Lossy: only with zero in
/// flight, and the next chunk is cut from the path's remaining bytes at the
/// window size current at posting time.
class Scheduler {
public:
    Scheduler(const SubFlowPlan& plan, Mode mode, std::uint32_t max_in_flight, std::uint64_t block = 4096,
              std::uint32_t max_attempts = 8);

    /// `allow(path)` can veto a path for reasons outside this plan, such as
    /// WRs of other transfers already on it.
    std::optional<Post> next_post(const std::vector<ChunkWindow>& windows,
                                  const std::function<bool(std::size_t)>& allow = {});

    void on_success(const Post& post);
    /// Requeues the chunk at the head of its path. False once the chunk has
    /// used up its attempts; the scheduler then stops handing out work.
    bool on_failure(const Post& post);

    std::size_t in_flight(std::size_t path) const { return paths_.at(path).in_flight; }
    std::size_t in_flight_total() const;
    bool exhausted() const;  // nothing left to post
    bool finished() const;   // nothing left to post or waiting
    bool failed() const { return failed_; }
    std::uint64_t bytes_done() const { return bytes_done_; }

private:
    struct Pending {
        Chunk range;
        std::uint32_t attempts = 0;  // failed tries so far
        bool fixed = false;          // lossless: post as is
    };
    struct PathQueue {
        std::deque<Pending> pending;
        std::size_t in_flight = 0;
    };

    Mode mode_;
    std::uint32_t max_in_flight_;
    std::uint64_t block_;
    std::uint32_t max_attempts_;
    std::vector<PathQueue> paths_;
    std::size_t cursor_ = 0;
    bool failed_ = false;
    std::uint64_t bytes_done_ = 0;
};

// ---------------------------------------------------------------- probing

struct ProbeSample {
    std::uint64_t size = 0;
    double fct = 0.0;
};

struct PathCapacity {
    std::size_t path = 0;
    double cap = 0.0;  // bytes/s
    std::vector<ProbeSample> samples;
    bool failed = false;
};

constexpr std::uint64_t kMinProbeSize = 512 * 1024;

/// Path monitor: writes one probe per path into the peer's probe sink and
/// sets cap = size / FCT from the latest probe. Probes run side by side on
/// lossless fabrics and one after another on lossy ones. A failed probe
/// gets the smallest successful cap (1 B/s if none) and is flagged.
class PathMonitor {
public:
    /// wr_ids of probe WRs: mp_wr_id 0, chunk index = path.
    static constexpr std::uint64_t kProbeMpId = 0;

    /// Throws LbError when probe_size is under kMinProbeSize or larger than
    /// either probe sink, or when the connection has WRs outstanding.
    const std::vector<PathCapacity>& probe(core::Connection& conn, std::uint64_t probe_size, Mode mode);

    bool probed() const { return !caps_.empty(); }
    const std::vector<PathCapacity>& capacities() const { return caps_; }
    std::vector<double> caps() const;

private:
    std::vector<PathCapacity> caps_;
};

Mode connection_mode(core::Connection& conn);

}  // namespace mpr::lb
