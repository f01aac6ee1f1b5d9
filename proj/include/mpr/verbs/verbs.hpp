#pragma once

#include "mpr/fabric/fabric.hpp"

#include <compare>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mpr::verbs {

/// Strongly typed handle for verbs objects owned by one Host.
template <typename Tag>
struct Handle {
    std::uint32_t value = 0;
    friend auto operator<=>(Handle, Handle) = default;
};

using PdId = Handle<struct PdTag>;
using MrId = Handle<struct MrTag>;
using QpId = Handle<struct QpTag>;
using CqId = Handle<struct CqTag>;

/// Which end of the fabric a host sits on.
enum class Side { a, b };

constexpr Side peer(Side side) { return side == Side::a ? Side::b : Side::a; }

enum class Opcode { send, recv, write, read };

enum class WcStatus {
    success,
    retry_exceeded,      // burst dropped in a lossy fabric
    rnr_retry_exceeded,  // SEND arrived with no RECV posted
    local_access_error,  // local range outside the MR
    local_length_error,  // RECV buffer smaller than the arriving SEND
    remote_access_error, // bad rkey, wrong PD or remote range outside the MR
    remote_op_error,     // peer QP could not take the request
};

enum class QpState { init, rtr, rts, error };

/// `owned`: the MR holds real bytes. `none`: length/key bookkeeping only, for
/// flows too large to keep in memory; deliveries into it move no bytes.
enum class Backing { owned, none };

std::string_view to_string(Opcode op);
std::string_view to_string(WcStatus status);

/// Synchronous verbs failure (bad state, bad handle, queue full, PD mismatch).
class VerbsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Sge {
    MrId mr;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct RemoteAddress {
    std::uint32_t rkey = 0;
    std::uint64_t offset = 0;
};

struct WorkRequest {
    std::uint64_t wr_id = 0;
    Opcode opcode = Opcode::send;
    Sge local;
    std::optional<RemoteAddress> remote;  // WRITE/READ only
    bool signaled = true;
    std::optional<std::uint64_t> imm;     // SEND only; delivered with the receiver's completion
};

struct Completion {
    std::uint64_t wr_id = 0;
    QpId qp;
    Opcode opcode = Opcode::send;
    WcStatus status = WcStatus::success;
    std::uint64_t byte_len = 0;
    std::optional<std::uint64_t> imm;
    double time = 0.0;
};

struct QpAttrs {
    std::uint32_t max_send_wr = 256;
    std::uint32_t max_recv_wr = 256;
    std::string qp_type = "RC";
    double rate_limit = 0.0;  // bytes/s, 0 = NIC line rate
    friend bool operator==(const QpAttrs&, const QpAttrs&) = default;
};

struct MemoryRegionInfo {
    MrId id;
    PdId pd;
    std::uint64_t length = 0;
    std::uint32_t lkey = 0;
    std::uint32_t rkey = 0;
    Backing backing = Backing::owned;
};

struct CopyStats {
    std::uint64_t simulator_copies = 0;   // NIC-side placement into registered memory
    std::uint64_t simulator_bytes = 0;
    std::uint64_t middleware_copies = 0;  // CPU copies made by code above the verbs layer
    std::uint64_t middleware_bytes = 0;
};

struct CompletionRecord {
    Side side;
    CqId cq;
    Completion completion;
};

class Network;

/// Verbs objects of one endpoint. All calls are made from the single
/// simulation thread; remote effects happen when the fabric delivers.
class Host {
public:
    Host(Network& network, Side side);
    Host(const Host&) = delete;
    Host& operator=(const Host&) = delete;

    Side side() const { return side_; }
    Network& network() { return network_; }

    PdId alloc_pd();
    void dealloc_pd(PdId pd);

    MrId reg_mr(PdId pd, std::uint64_t length, Backing backing = Backing::owned);
    void dereg_mr(MrId mr);
    const MemoryRegionInfo& mr_info(MrId mr) const;
    /// Empty span for Backing::none.
    std::span<std::byte> mr_bytes(MrId mr);

    CqId create_cq();
    void destroy_cq(CqId cq);

    /// QP in INIT state pinned to the route that owns `local_vp`.
    QpId create_qp(PdId pd, std::string_view local_vp, CqId send_cq, CqId recv_cq, QpAttrs attrs = {});
    /// INIT -> RTR -> RTS. `remote_qp` lives on the peer host and must own `remote_vp`,
    /// the other end of this QP's route.
    void connect_qp(QpId qp, std::string_view remote_vp, QpId remote_qp, const QpAttrs& remote_attrs);
    void destroy_qp(QpId qp);
    /// Injection cap for WRs that start after this call. 0 = line rate.
    void set_rate_limit(QpId qp, double rate);

    QpState qp_state(QpId qp) const;
    fabric::RouteIndex qp_route(QpId qp) const;
    const std::string& qp_local_vp(QpId qp) const;
    PdId qp_pd(QpId qp) const;
    /// Posted send WRs not yet completed.
    std::size_t send_outstanding(QpId qp) const;
    std::size_t recv_posted(QpId qp) const;

    void post_send(QpId qp, const WorkRequest& wr);
    void post_recv(QpId qp, const WorkRequest& wr);

    std::vector<Completion> poll_cq(CqId cq, std::size_t max);
    std::size_t cq_depth(CqId cq) const;

    /// One-shot: `callback` runs (as a simulator event) once the CQ holds at
    /// least one completion. Re-arming replaces a pending callback.
    void request_notify(CqId cq, std::function<void()> callback);
    void cancel_notify(CqId cq);
    /// Advances the simulation until the CQ is non-empty. Throws VerbsError
    /// if the network goes idle first.
    void wait_cq_event(CqId cq);

    std::size_t pd_count() const { return pds_.size(); }
    std::size_t mr_count() const { return mrs_.size(); }
    std::size_t cq_count() const { return cqs_.size(); }
    std::size_t qp_count() const { return qps_.size(); }

private:
    friend class Network;

    struct MemoryRegion {
        MemoryRegionInfo info;
        std::vector<std::byte> bytes;
    };

    enum class Stage { queued, transmitting, arrived };

    struct SendEntry {
        std::uint64_t seq = 0;
        WorkRequest wr;
        Stage stage = Stage::queued;
        WcStatus status = WcStatus::success;
    };

    struct QueuePair {
        QpId id;
        PdId pd;
        CqId send_cq;
        CqId recv_cq;
        std::string local_vp;
        std::string remote_vp;
        fabric::RouteIndex route = 0;
        QpState state = QpState::init;
        QpAttrs attrs;
        QpAttrs remote_attrs;
        std::optional<QpId> remote_qp;
        std::deque<SendEntry> send_queue;
        std::deque<WorkRequest> recv_queue;
        bool transmitting = false;
        std::uint64_t next_seq = 0;
    };

    struct CompletionQueue {
        CqId id;
        std::deque<Completion> entries;
        std::function<void()> notify;
    };

    QueuePair& qp(QpId id);
    const QueuePair& qp(QpId id) const;
    MemoryRegion& mr(MrId id);
    CompletionQueue& cq(CqId id);
    SendEntry* find_entry(QueuePair& q, std::uint64_t seq);

    void check_local(const QueuePair& q, const Sge& sge) const;
    bool in_bounds(const Sge& sge) const;
    void start_next(QpId id);
    void mark_arrived(QpId id, std::uint64_t seq, WcStatus status);
    void apply_in_order(QpId id);
    void apply(QueuePair& q, SendEntry& entry);
    void push_completion(CqId cq, Completion completion);

    Network& network_;
    Side side_;
    std::uint32_t next_handle_ = 1;
    std::map<PdId, bool> pds_;
    std::map<MrId, MemoryRegion> mrs_;
    std::map<CqId, CompletionQueue> cqs_;
    std::map<QpId, QueuePair> qps_;
};

/// The simulated world: the fabric plus the two endpoint hosts.
class Network {
public:
    explicit Network(fabric::TopologyConfig config);
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    fabric::Fabric& fabric() { return fabric_; }
    Host& host(Side side) { return side == Side::a ? *a_ : *b_; }
    double now() const { return fabric_.now(); }

    bool step() { return fabric_.step(); }
    void run_until_idle() { fabric_.run_until_idle(); }
    template <typename Pred>
    bool run_until(Pred&& done) {
        return fabric_.run_until(std::forward<Pred>(done));
    }

    const CopyStats& copy_stats() const { return copies_; }
    /// Bookkeeping entry point for any CPU copy made above the verbs layer.
    void middleware_copy(std::span<std::byte> dst, std::span<const std::byte> src);

    const std::vector<CompletionRecord>& completion_log() const { return log_; }
    void set_completion_logging(bool enabled) { logging_ = enabled; }

private:
    friend class Host;

    struct KeyOwner {
        Side side;
        MrId mr;
    };

    std::uint32_t allocate_key();
    void deliver(std::span<std::byte> dst, std::span<const std::byte> src, std::uint64_t length);

    fabric::Fabric fabric_;
    std::unique_ptr<Host> a_;
    std::unique_ptr<Host> b_;
    std::uint32_t next_key_ = 0x1000;
    std::map<std::uint32_t, KeyOwner> rkeys_;
    CopyStats copies_;
    bool logging_ = true;
    std::vector<CompletionRecord> log_;
};

}  // namespace mpr::verbs
