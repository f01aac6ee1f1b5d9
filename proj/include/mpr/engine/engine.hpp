#pragma once

#include "mpr/core/connection.hpp"
#include "mpr/lb/path_lb.hpp"

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

namespace mpr::engine {

class EngineError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// wr_id layout: high 40 bits MP id, low 24 bits chunk index.
constexpr unsigned kChunkBits = 24;
constexpr std::uint64_t kMaxMpId = (1ull << 40) - 1;
constexpr std::uint32_t kMaxChunkIndex = (1u << kChunkBits) - 1;

constexpr std::uint64_t encode_wr_id(std::uint64_t mp_wr_id, std::uint32_t chunk) {
    return (mp_wr_id << kChunkBits) | chunk;
}
constexpr std::uint64_t decode_mp_id(std::uint64_t wr_id) { return wr_id >> kChunkBits; }
constexpr std::uint32_t decode_chunk(std::uint64_t wr_id) {
    return static_cast<std::uint32_t>(wr_id & kMaxChunkIndex);
}

enum class MpVerb { write, read, send };
enum class SendClass { small, large };
enum class MpStatus { success, failed };

std::string_view to_string(MpVerb verb);
std::string_view to_string(SendClass c);

/// small iff length <= threshold. Throws EngineError for a zero threshold.
SendClass classify_send(std::uint64_t length, std::uint64_t threshold);

struct RemoteTarget {
    core::RemoteRegion region;
    std::uint64_t offset = 0;
};

struct MpWorkRequest {
    std::uint64_t mp_wr_id = 0;  // 1 .. kMaxMpId, 0 is reserved for probes
    MpVerb verb = MpVerb::write;
    verbs::Sge local;
    std::optional<RemoteTarget> remote;  // WRITE/READ
};

struct MpCompletion {
    std::uint64_t mp_wr_id = 0;
    MpVerb verb = MpVerb::write;
    MpStatus status = MpStatus::success;
    std::uint64_t byte_len = 0;
    /// Receiver side of a large send: where the payload landed in the staging MR.
    std::optional<std::uint64_t> staging_offset;
    double time = 0.0;
    std::size_t wr_count = 0;  // data WRs posted, retries included
    bool receiver = false;
};

struct EngineConfig {
    std::uint64_t block = 4096;
    std::uint64_t send_threshold = 1 << 20;
    std::uint32_t max_attempts = 8;
    /// Lossless chunk cap, 0 = one WR per sub-flow.
    std::uint64_t max_chunk = 0;
    lb::WindowConfig window;
    std::uint64_t probe_size = lb::kMinProbeSize;
    /// Unset: lossy if any path of the connection is lossy.
    std::optional<lb::Mode> mode;
    /// React to CQ events by polling and posting from the simulator. Off:
    /// completions wait in the CQ until progress() or on_completion().
    bool auto_progress = true;
};

/// One realized sub-flow split, as posted.
struct PlanRecord {
    std::uint64_t mp_wr_id = 0;
    std::vector<std::uint64_t> path_bytes;
    std::size_t planned_wrs = 0;
};

struct EngineStats {
    std::uint64_t data_wrs_posted = 0;
    std::uint64_t data_wrs_ok = 0;
    std::uint64_t data_bytes_ok = 0;
    std::uint64_t max_ok_wr = 0;  // largest data WR that went through
    std::uint64_t retries = 0;
    std::uint64_t notifications = 0;
    /// Largest total of data bytes on the wire at one time (lossy rounds).
    std::uint64_t max_bytes_in_flight = 0;
    std::vector<PlanRecord> plans;

    double mean_ok_wr() const { return data_wrs_ok ? double(data_bytes_ok) / data_wrs_ok : 0.0; }
};

/// Decomposer/reassembler for one endpoint of a connection.
class Engine {
public:
    explicit Engine(core::Connection& conn, EngineConfig config = {},
                    std::unique_ptr<lb::AllocationPolicy> allocation = nullptr,
                    std::unique_ptr<lb::WindowPolicy> window = nullptr);
    ~Engine();
    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    core::Connection& connection() { return conn_; }
    const EngineConfig& config() const { return config_; }
    lb::Mode mode() const { return mode_; }

    /// Probes every path and installs the capacity estimates.
    const std::vector<lb::PathCapacity>& probe();
    /// Installs estimates directly.
    void set_caps(std::vector<double> caps);
    const std::vector<double>& caps() const { return caps_; }
    const std::vector<lb::ChunkWindow>& windows() const { return windows_; }

    /// Sender: large sends WRITE into this advertised region of the peer.
    void use_staging(const core::RemoteRegion& region);
    /// Receiver: the MR large sends land in. Advertises it to the peer.
    void provide_staging(verbs::MrId mr);

    /// Splits and starts an MP_WR. Throws EngineError (or MpError) on a bad
    /// request, an unprobed connection or a missing remote region.
    void mp_post(const MpWorkRequest& wr);
    /// Receiver: one RECV for the next MP_SEND. `buffer` takes a small send;
    /// a large send only needs the RECV itself and may pass an empty buffer.
    void mp_post_recv(std::uint64_t mp_wr_id, std::optional<verbs::Sge> buffer = std::nullopt);

    /// Feeds one CQE to the engine. Returns the MP completion it finishes, if
    /// any. Posts follow-up WRs unless auto_progress is off and `pump` is false.
    std::optional<MpCompletion> on_completion(const verbs::Completion& cqe, bool pump = true);
    /// Drains the CQ through on_completion and queues finished MP completions.
    void progress();

    /// Ready MP completions, oldest first.
    std::vector<MpCompletion> poll(std::size_t max = SIZE_MAX);
    /// Runs the simulation until `mp_wr_id` finishes; returns its completion
    /// (also removed from the ready queue). Throws EngineError if the fabric
    /// goes idle first.
    MpCompletion wait(std::uint64_t mp_wr_id);

    std::size_t active() const { return ops_.size() + recvs_.size(); }
    const EngineStats& stats() const { return stats_; }
    /// Plan used for an active MP_WR.
    const lb::SubFlowPlan* plan_of(std::uint64_t mp_wr_id) const;

private:
    enum class Kind { write, read, small_send, large_send };

    struct Op {
        MpWorkRequest wr;
        Kind kind = Kind::write;
        lb::SubFlowPlan plan;
        std::unique_ptr<lb::Scheduler> scheduler;
        std::map<std::uint32_t, lb::Post> outstanding;
        std::uint32_t next_chunk = 0;
        std::uint64_t remote_base = 0;  // remote offset of local.offset
        std::uint32_t remote_rkey = 0;
        bool started = false;
        bool notified = false;
        bool failed = false;
        std::uint32_t send_attempts = 0;
        std::size_t wr_count = 0;
    };

    struct RecvOp {
        std::optional<verbs::Sge> buffer;
    };

    void arm();
    void start(Op& op);
    void pump();
    void pump_op(Op& op);
    void post_chunk(Op& op, const lb::Post& post);
    void post_send_wr(Op& op, std::uint64_t length, std::optional<std::uint64_t> imm);
    std::optional<MpCompletion> finish_if_done(std::uint64_t mp_wr_id);
    std::optional<MpCompletion> handle_recv(const verbs::Completion& cqe);
    std::uint64_t staging_slot(std::uint64_t length, std::uint64_t cursor, std::uint64_t size) const;
    std::uint64_t bytes_in_flight() const;
    void start_next_send();

    core::Connection& conn_;
    EngineConfig config_;
    lb::Mode mode_;
    std::unique_ptr<lb::AllocationPolicy> allocation_;
    std::unique_ptr<lb::WindowPolicy> window_;
    lb::PathMonitor monitor_;
    std::vector<double> caps_;
    std::vector<lb::ChunkWindow> windows_;
    std::vector<std::size_t> data_in_flight_;  // per path, all ops

    std::map<std::uint64_t, Op> ops_;
    std::deque<std::uint64_t> send_queue_;
    std::optional<std::uint64_t> active_send_;
    std::map<std::uint64_t, RecvOp> recvs_;
    std::deque<std::uint64_t> recv_order_;

    std::optional<core::RemoteRegion> peer_staging_;
    std::uint64_t send_cursor_ = 0;
    std::optional<verbs::MrId> staging_mr_;
    std::uint64_t staging_size_ = 0;
    std::uint64_t recv_cursor_ = 0;

    std::deque<MpCompletion> ready_;
    EngineStats stats_;
    bool armed_ = false;
    bool probing_ = false;
    std::shared_ptr<bool> alive_;
};

}  // namespace mpr::engine
