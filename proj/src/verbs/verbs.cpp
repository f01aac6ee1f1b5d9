#include "mpr/verbs/verbs.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cstring>

namespace mpr::verbs {

namespace {

// Backing::none regions have no bytes; their slices stay empty.
std::span<std::byte> slice(std::span<std::byte> bytes, std::uint64_t offset, std::uint64_t length) {
    return bytes.empty() ? bytes : bytes.subspan(offset, length);
}

}  // namespace

std::string_view to_string(Opcode op) {
    switch (op) {
        case Opcode::send: return "SEND";
        case Opcode::recv: return "RECV";
        case Opcode::write: return "WRITE";
        case Opcode::read: return "READ";
    }
    return "?";
}

std::string_view to_string(WcStatus status) {
    switch (status) {
        case WcStatus::success: return "SUCCESS";
        case WcStatus::retry_exceeded: return "RETRY_EXC_ERR";
        case WcStatus::rnr_retry_exceeded: return "RNR_RETRY_EXC_ERR";
        case WcStatus::local_access_error: return "LOC_PROT_ERR";
        case WcStatus::local_length_error: return "LOC_LEN_ERR";
        case WcStatus::remote_access_error: return "REM_ACCESS_ERR";
        case WcStatus::remote_op_error: return "REM_OP_ERR";
    }
    return "?";
}

// ---------------------------------------------------------------- Network

Network::Network(fabric::TopologyConfig config)
    : fabric_(std::move(config)),
      a_(std::make_unique<Host>(*this, Side::a)),
      b_(std::make_unique<Host>(*this, Side::b)) {}

std::uint32_t Network::allocate_key() {
    // Odd stride keeps keys visibly distinct from small handle values.
    std::uint32_t key = next_key_;
    next_key_ += 0x101;
    return key;
}

void Network::deliver(std::span<std::byte> dst, std::span<const std::byte> src, std::uint64_t length) {
    if (!dst.empty() && !src.empty() && length > 0) std::memcpy(dst.data(), src.data(), length);
    ++copies_.simulator_copies;
    copies_.simulator_bytes += length;
}

void Network::middleware_copy(std::span<std::byte> dst, std::span<const std::byte> src) {
    std::size_t n = std::min(dst.size(), src.size());
    if (n > 0) std::memcpy(dst.data(), src.data(), n);
    ++copies_.middleware_copies;
    copies_.middleware_bytes += n;
}

// ---------------------------------------------------------------- Host: objects

Host::Host(Network& network, Side side) : network_(network), side_(side) {}

PdId Host::alloc_pd() {
    PdId id{next_handle_++};
    pds_.emplace(id, true);
    return id;
}

void Host::dealloc_pd(PdId pd) {
    if (!pds_.count(pd)) throw VerbsError("dealloc_pd: unknown PD");
    for (const auto& [id, m] : mrs_)
        if (m.info.pd == pd) throw VerbsError("dealloc_pd: PD still has memory regions");
    for (const auto& [id, q] : qps_)
        if (q.pd == pd) throw VerbsError("dealloc_pd: PD still has queue pairs");
    pds_.erase(pd);
}

MrId Host::reg_mr(PdId pd, std::uint64_t length, Backing backing) {
    if (!pds_.count(pd)) throw VerbsError("reg_mr: unknown PD");
    if (length == 0) throw VerbsError("reg_mr: zero-length region");
    MemoryRegion region;
    region.info.id = MrId{next_handle_++};
    region.info.pd = pd;
    region.info.length = length;
    region.info.lkey = network_.allocate_key();
    region.info.rkey = network_.allocate_key();
    region.info.backing = backing;
    if (backing == Backing::owned) region.bytes.assign(length, std::byte{0});
    MrId id = region.info.id;
    network_.rkeys_.emplace(region.info.rkey, Network::KeyOwner{side_, id});
    mrs_.emplace(id, std::move(region));
    return id;
}

void Host::dereg_mr(MrId id) {
    auto it = mrs_.find(id);
    if (it == mrs_.end()) throw VerbsError("dereg_mr: unknown MR");
    network_.rkeys_.erase(it->second.info.rkey);
    mrs_.erase(it);
}

const MemoryRegionInfo& Host::mr_info(MrId id) const {
    auto it = mrs_.find(id);
    if (it == mrs_.end()) throw VerbsError("unknown MR");
    return it->second.info;
}

std::span<std::byte> Host::mr_bytes(MrId id) { return mr(id).bytes; }

Host::MemoryRegion& Host::mr(MrId id) {
    auto it = mrs_.find(id);
    if (it == mrs_.end()) throw VerbsError("unknown MR");
    return it->second;
}

CqId Host::create_cq() {
    CqId id{next_handle_++};
    cqs_.emplace(id, CompletionQueue{id, {}, {}});
    return id;
}

void Host::destroy_cq(CqId id) {
    if (!cqs_.count(id)) throw VerbsError("destroy_cq: unknown CQ");
    for (const auto& [qid, q] : qps_)
        if (q.send_cq == id || q.recv_cq == id) throw VerbsError("destroy_cq: CQ still attached to a QP");
    cqs_.erase(id);
}

Host::CompletionQueue& Host::cq(CqId id) {
    auto it = cqs_.find(id);
    if (it == cqs_.end()) throw VerbsError("unknown CQ");
    return it->second;
}

QpId Host::create_qp(PdId pd, std::string_view local_vp, CqId send_cq, CqId recv_cq, QpAttrs attrs) {
    if (!pds_.count(pd)) throw VerbsError("create_qp: unknown PD");
    if (!cqs_.count(send_cq) || !cqs_.count(recv_cq)) throw VerbsError("create_qp: unknown CQ");
    if (attrs.max_send_wr == 0 || attrs.max_recv_wr == 0) throw VerbsError("create_qp: zero queue depth");
    if (attrs.qp_type != "RC") throw VerbsError(fmt::format("create_qp: unsupported qp_type '{}'", attrs.qp_type));
    auto& fab = network_.fabric();
    auto route = fab.find_route(local_vp);
    if (!route) throw VerbsError(fmt::format("create_qp: no path owns vp '{}'", local_vp));
    const auto& r = fab.routes()[*route];
    const std::string& own = side_ == Side::a ? r.vp_id : r.peer_vp_id;
    if (own != local_vp) throw VerbsError(fmt::format("create_qp: vp '{}' belongs to the other host", local_vp));

    QueuePair q;
    q.id = QpId{next_handle_++};
    q.pd = pd;
    q.send_cq = send_cq;
    q.recv_cq = recv_cq;
    q.local_vp = std::string(local_vp);
    q.route = *route;
    q.attrs = std::move(attrs);
    QpId id = q.id;
    qps_.emplace(id, std::move(q));
    return id;
}

void Host::connect_qp(QpId id, std::string_view remote_vp, QpId remote_qp, const QpAttrs& remote_attrs) {
    QueuePair& q = qp(id);
    if (q.state != QpState::init) throw VerbsError("connect_qp: QP already connected");
    const auto& r = network_.fabric().routes()[q.route];
    const std::string& far = side_ == Side::a ? r.peer_vp_id : r.vp_id;
    if (far != remote_vp)
        throw VerbsError(fmt::format("connect_qp: '{}' is not the far end of '{}'", remote_vp, q.local_vp));
    Host& other = network_.host(peer(side_));
    auto it = other.qps_.find(remote_qp);
    if (it == other.qps_.end() || it->second.local_vp != remote_vp)
        throw VerbsError("connect_qp: remote QP does not own the remote vp");
    if (remote_attrs.qp_type != q.attrs.qp_type) throw VerbsError("connect_qp: qp_type mismatch");
    q.remote_vp = std::string(remote_vp);
    q.remote_qp = remote_qp;
    q.remote_attrs = remote_attrs;
    q.state = QpState::rtr;
    q.state = QpState::rts;
}

void Host::destroy_qp(QpId id) {
    if (!qps_.erase(id)) throw VerbsError("destroy_qp: unknown QP");
}

void Host::set_rate_limit(QpId id, double rate) {
    if (!(rate >= 0.0)) throw VerbsError("set_rate_limit: negative rate");
    qp(id).attrs.rate_limit = rate;
}

Host::QueuePair& Host::qp(QpId id) {
    auto it = qps_.find(id);
    if (it == qps_.end()) throw VerbsError("unknown QP");
    return it->second;
}

const Host::QueuePair& Host::qp(QpId id) const {
    auto it = qps_.find(id);
    if (it == qps_.end()) throw VerbsError("unknown QP");
    return it->second;
}

QpState Host::qp_state(QpId id) const { return qp(id).state; }
fabric::RouteIndex Host::qp_route(QpId id) const { return qp(id).route; }
const std::string& Host::qp_local_vp(QpId id) const { return qp(id).local_vp; }
PdId Host::qp_pd(QpId id) const { return qp(id).pd; }
std::size_t Host::send_outstanding(QpId id) const { return qp(id).send_queue.size(); }
std::size_t Host::recv_posted(QpId id) const { return qp(id).recv_queue.size(); }

// ---------------------------------------------------------------- Host: data path

void Host::check_local(const QueuePair& q, const Sge& sge) const {
    auto it = mrs_.find(sge.mr);
    if (it == mrs_.end()) throw VerbsError("post: unknown local MR");
    if (it->second.info.pd != q.pd) throw VerbsError("post: local MR is registered in a different PD");
}

bool Host::in_bounds(const Sge& sge) const {
    const auto& info = mrs_.at(sge.mr).info;
    return sge.offset <= info.length && sge.length <= info.length - sge.offset;
}

void Host::post_send(QpId id, const WorkRequest& wr) {
    QueuePair& q = qp(id);
    if (q.state != QpState::rts) throw VerbsError("post_send: QP is not in RTS");
    if (wr.opcode == Opcode::recv) throw VerbsError("post_send: RECV goes to post_recv");
    bool one_sided = wr.opcode == Opcode::write || wr.opcode == Opcode::read;
    if (one_sided != wr.remote.has_value())
        throw VerbsError("post_send: WRITE/READ need a remote address, SEND must not have one");
    if (wr.imm && wr.opcode != Opcode::send) throw VerbsError("post_send: immediate data is SEND-only");
    if (q.send_queue.size() >= q.attrs.max_send_wr) throw VerbsError("post_send: send queue full");
    check_local(q, wr.local);

    SendEntry entry;
    entry.seq = q.next_seq++;
    entry.wr = wr;
    q.send_queue.push_back(std::move(entry));
    if (!q.transmitting) start_next(id);
}

void Host::post_recv(QpId id, const WorkRequest& wr) {
    QueuePair& q = qp(id);
    if (q.state != QpState::rtr && q.state != QpState::rts) throw VerbsError("post_recv: QP is not ready to receive");
    if (wr.opcode != Opcode::recv) throw VerbsError("post_recv: opcode must be RECV");
    if (wr.remote) throw VerbsError("post_recv: RECV takes no remote address");
    if (q.recv_queue.size() >= q.attrs.max_recv_wr) throw VerbsError("post_recv: receive queue full");
    check_local(q, wr.local);
    if (!in_bounds(wr.local)) {
        push_completion(q.recv_cq, Completion{wr.wr_id, id, Opcode::recv, WcStatus::local_access_error, 0,
                                              std::nullopt, network_.now()});
        return;
    }
    q.recv_queue.push_back(wr);
}

Host::SendEntry* Host::find_entry(QueuePair& q, std::uint64_t seq) {
    for (auto& e : q.send_queue)
        if (e.seq == seq) return &e;
    return nullptr;
}

void Host::start_next(QpId id) {
    // RC semantics: one WR on the wire at a time, in posting order.
    auto it = qps_.find(id);
    if (it == qps_.end()) return;
    QueuePair& q = it->second;
    while (!q.transmitting) {
        auto next = std::find_if(q.send_queue.begin(), q.send_queue.end(),
                                 [](const SendEntry& e) { return e.stage == Stage::queued; });
        if (next == q.send_queue.end()) return;
        SendEntry& entry = *next;
        const WorkRequest& wr = entry.wr;
        std::uint64_t seq = entry.seq;

        if (!in_bounds(wr.local)) {
            entry.stage = Stage::arrived;
            entry.status = WcStatus::local_access_error;
            apply_in_order(id);
            continue;
        }
        if (wr.remote) {
            auto owner = network_.rkeys_.find(wr.remote->rkey);
            bool ok = owner != network_.rkeys_.end() && owner->second.side == peer(side_) && q.remote_qp;
            if (ok) {
                Host& other = network_.host(peer(side_));
                auto rq = other.qps_.find(*q.remote_qp);
                const auto& info = other.mrs_.at(owner->second.mr).info;
                ok = rq != other.qps_.end() && info.pd == rq->second.pd &&
                     wr.remote->offset <= info.length && wr.local.length <= info.length - wr.remote->offset;
            }
            if (!ok) {
                entry.stage = Stage::arrived;
                entry.status = WcStatus::remote_access_error;
                apply_in_order(id);
                continue;
            }
        }

        auto& fab = network_.fabric();
        fabric::RouteIndex route = q.route;
        if (wr.local.length == 0) {
            // Empty WR: no payload on the wire, only the path latency.
            entry.stage = Stage::transmitting;
            fab.clock().schedule_in(fab.route_delay(route), [this, id, seq] { mark_arrived(id, seq, WcStatus::success); });
            continue;
        }

        bool toward_peer = wr.opcode != Opcode::read;
        bool from_a = (side_ == Side::a) == toward_peer;
        auto direction = from_a ? fabric::Direction::a_to_b : fabric::Direction::b_to_a;
        double cap = fab.edge_rate(direction);
        if (q.attrs.rate_limit > 0.0) cap = std::min(cap, q.attrs.rate_limit);

        entry.stage = Stage::transmitting;
        q.transmitting = true;
        fabric::TransferHooks hooks;
        hooks.on_drained = [this, id] {
            auto qit = qps_.find(id);
            if (qit == qps_.end()) return;
            qit->second.transmitting = false;
            start_next(id);
        };
        hooks.on_delivered = [this, id, seq] { mark_arrived(id, seq, WcStatus::success); };
        hooks.on_dropped = [this, id, seq] {
            auto qit = qps_.find(id);
            if (qit == qps_.end()) return;
            qit->second.transmitting = false;
            mark_arrived(id, seq, WcStatus::retry_exceeded);
            start_next(id);
        };
        fab.open_transfer(route, direction, wr.local.length, cap, std::move(hooks));
    }
}

void Host::mark_arrived(QpId id, std::uint64_t seq, WcStatus status) {
    auto it = qps_.find(id);
    if (it == qps_.end()) return;
    SendEntry* entry = find_entry(it->second, seq);
    if (!entry) return;
    entry->stage = Stage::arrived;
    entry->status = status;
    apply_in_order(id);
}

void Host::apply_in_order(QpId id) {
    auto it = qps_.find(id);
    if (it == qps_.end()) return;
    QueuePair& q = it->second;
    while (!q.send_queue.empty() && q.send_queue.front().stage == Stage::arrived) {
        SendEntry entry = std::move(q.send_queue.front());
        q.send_queue.pop_front();
        apply(q, entry);
    }
}

void Host::apply(QueuePair& q, SendEntry& entry) {
    const WorkRequest& wr = entry.wr;
    WcStatus status = entry.status;
    std::uint64_t length = wr.local.length;

    if (status == WcStatus::success) {
        Host& other = network_.host(peer(side_));
        if (wr.opcode == Opcode::write || wr.opcode == Opcode::read) {
            auto owner = network_.rkeys_.find(wr.remote->rkey);
            if (owner == network_.rkeys_.end() || !other.mrs_.count(owner->second.mr)) {
                status = WcStatus::remote_access_error;  // deregistered while in flight
            } else {
                auto remote_range = slice(other.mr_bytes(owner->second.mr), wr.remote->offset, length);
                auto local_range = slice(mr_bytes(wr.local.mr), wr.local.offset, length);
                if (wr.opcode == Opcode::write) {
                    network_.deliver(remote_range, local_range, length);
                } else {
                    network_.deliver(local_range, remote_range, length);
                }
            }
        } else {  // SEND
            auto rq = q.remote_qp ? other.qps_.find(*q.remote_qp) : other.qps_.end();
            if (rq == other.qps_.end() || (rq->second.state != QpState::rtr && rq->second.state != QpState::rts)) {
                status = WcStatus::remote_op_error;
            } else if (rq->second.recv_queue.empty()) {
                status = WcStatus::rnr_retry_exceeded;
            } else {
                WorkRequest recv = rq->second.recv_queue.front();
                rq->second.recv_queue.pop_front();
                Completion rc{recv.wr_id, rq->second.id, Opcode::recv, WcStatus::success, length, wr.imm,
                              network_.now()};
                if (recv.local.length < length) {
                    rc.status = WcStatus::local_length_error;
                    rc.byte_len = 0;
                    status = WcStatus::remote_op_error;
                } else {
                    network_.deliver(slice(other.mr_bytes(recv.local.mr), recv.local.offset, length),
                                     slice(mr_bytes(wr.local.mr), wr.local.offset, length), length);
                }
                other.push_completion(rq->second.recv_cq, rc);
            }
        }
    }

    if (wr.signaled || status != WcStatus::success) {
        push_completion(q.send_cq, Completion{wr.wr_id, q.id, wr.opcode, status,
                                              status == WcStatus::success ? length : 0, std::nullopt,
                                              network_.now()});
    }
}

void Host::push_completion(CqId id, Completion completion) {
    auto it = cqs_.find(id);
    if (it == cqs_.end()) return;
    if (network_.logging_) network_.log_.push_back(CompletionRecord{side_, id, completion});
    it->second.entries.push_back(std::move(completion));
    if (it->second.notify) {
        auto callback = std::move(it->second.notify);
        it->second.notify = nullptr;
        network_.fabric().clock().schedule_in(0.0, std::move(callback));
    }
}

std::vector<Completion> Host::poll_cq(CqId id, std::size_t max) {
    CompletionQueue& q = cq(id);
    std::vector<Completion> out;
    while (!q.entries.empty() && out.size() < max) {
        out.push_back(std::move(q.entries.front()));
        q.entries.pop_front();
    }
    return out;
}

std::size_t Host::cq_depth(CqId id) const {
    auto it = cqs_.find(id);
    if (it == cqs_.end()) throw VerbsError("unknown CQ");
    return it->second.entries.size();
}

void Host::request_notify(CqId id, std::function<void()> callback) {
    CompletionQueue& q = cq(id);
    if (!q.entries.empty()) {
        q.notify = nullptr;
        network_.fabric().clock().schedule_in(0.0, std::move(callback));
        return;
    }
    q.notify = std::move(callback);
}

void Host::cancel_notify(CqId id) {
    auto it = cqs_.find(id);
    if (it != cqs_.end()) it->second.notify = nullptr;
}

void Host::wait_cq_event(CqId id) {
    CompletionQueue& q = cq(id);
    if (!network_.run_until([&] { return !q.entries.empty(); }))
        throw VerbsError("wait_cq_event: network idle and CQ still empty");
}

}  // namespace mpr::verbs
