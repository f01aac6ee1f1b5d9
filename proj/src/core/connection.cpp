#include "mpr/core/connection.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <set>

namespace mpr::core {

using verbs::Side;

namespace {

// Interval at which a closing side re-checks for in-flight WRs.
constexpr double kDrainPoll = 1e-6;

int slot(Side side) { return side == Side::a ? 0 : 1; }

void require_unique(const std::vector<std::string>& vps, const char* which) {
    std::set<std::string> seen;
    for (const auto& vp : vps)
        if (!seen.insert(vp).second) throw MpError(fmt::format("duplicate {} vp '{}'", which, vp));
}

}  // namespace

std::string_view to_string(MsgKind kind) {
    switch (kind) {
        case MsgKind::connect_req: return "CONNECT_REQ";
        case MsgKind::connect_ack: return "CONNECT_ACK";
        case MsgKind::disconnect_req: return "DISCONNECT_REQ";
        case MsgKind::disconnect_ack: return "DISCONNECT_ACK";
        case MsgKind::remote_mr_advert: return "REMOTE_MR_ADVERT";
    }
    return "?";
}

std::string_view to_string(ConnState state) {
    switch (state) {
        case ConnState::connecting: return "connecting";
        case ConnState::established: return "established";
        case ConnState::closing: return "closing";
        case ConnState::closed: return "closed";
    }
    return "?";
}

// ---------------------------------------------------------------- ControlChannel

void ControlChannel::attach(Side side, Handler handler) { handlers_[slot(side)] = std::move(handler); }

void ControlChannel::detach(Side side) { handlers_[slot(side)] = nullptr; }

void ControlChannel::send(Side from, ControlMessage message) {
    log_.push_back(message);
    Side to = verbs::peer(from);
    double delay = network_.fabric().config().control_delay;
    network_.fabric().clock().schedule_in(delay, [this, to, message = std::move(message)] {
        if (handlers_[slot(to)]) handlers_[slot(to)](message);
    });
}

// ---------------------------------------------------------------- Connection

Connection::Connection(MpContext& context, std::uint64_t id, bool initiator, ConnParams params)
    : context_(context), host_(context.host()), id_(id), initiator_(initiator), params_(std::move(params)) {}

std::size_t Connection::path_of(verbs::QpId qp) const {
    auto it = std::find(qps_.begin(), qps_.end(), qp);
    if (it == qps_.end()) throw MpError("QP does not belong to this connection");
    return static_cast<std::size_t>(it - qps_.begin());
}

void Connection::create_resources(const std::vector<std::string>& local_vps) {
    pd_ = host_.alloc_pd();
    cq_ = host_.create_cq();
    probe_mr_ = host_.reg_mr(pd_, params_.probe_size);
    verbs::QpAttrs attrs;
    attrs.max_send_wr = params_.max_send_wr;
    attrs.max_recv_wr = params_.max_recv_wr;
    attrs.qp_type = params_.qp_type;
    if (params_.rate_limit_total > 0.0) attrs.rate_limit = params_.rate_limit_total / local_vps.size();
    for (const auto& vp : local_vps) qps_.push_back(host_.create_qp(pd_, vp, cq_, cq_, attrs));
    local_vps_ = local_vps;
}

void Connection::release() {
    for (auto qp : qps_) host_.destroy_qp(qp);
    qps_.clear();
    if (cq_.value) host_.destroy_cq(cq_);
    for (auto mr : owned_mrs_) host_.dereg_mr(mr);
    owned_mrs_.clear();
    if (probe_mr_.value) host_.dereg_mr(probe_mr_);
    if (pd_.value) host_.dealloc_pd(pd_);
    cq_ = {};
    probe_mr_ = {};
    pd_ = {};
}

verbs::MrId Connection::reg_mr(std::uint64_t length, verbs::Backing backing) {
    if (!pd_.value) throw MpError("reg_mr: connection has no PD");
    auto mr = host_.reg_mr(pd_, length, backing);
    owned_mrs_.push_back(mr);
    return mr;
}

void Connection::require_established() const {
    if (state_ != ConnState::established)
        throw MpError(fmt::format("connection {} is {}, not established", id_, to_string(state_)));
}

void Connection::advertise_region(verbs::MrId mr) {
    require_established();
    const verbs::MemoryRegionInfo* info = nullptr;
    try {
        info = &host_.mr_info(mr);
    } catch (const verbs::VerbsError&) {
        throw MpError("advertise_region: MR is not registered");
    }
    if (info->pd != pd_) throw MpError("advertise_region: MR is registered in another PD");
    ControlMessage message;
    message.kind = MsgKind::remote_mr_advert;
    message.conn_id = id_;
    message.region = RemoteRegion{info->rkey, 0, info->length};
    context_.channel_.send(context_.side_, std::move(message));
}

void Connection::set_path_weights(const std::vector<double>& weights) {
    if (weights.size() != qps_.size()) throw MpError("set_path_weights: one weight per path");
    if (params_.rate_limit_total <= 0.0) return;
    double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(sum > 0.0)) throw MpError("set_path_weights: weights must sum to a positive value");
    for (std::size_t i = 0; i < qps_.size(); ++i) {
        double rate = params_.rate_limit_total * weights[i] / sum;
        // A zero share would mean "line rate" to the verbs layer.
        host_.set_rate_limit(qps_[i], std::max(rate, 1.0));
    }
}

std::size_t Connection::outstanding() const {
    std::size_t n = 0;
    for (auto qp : qps_) n += host_.send_outstanding(qp);
    return n;
}

void Connection::begin_disconnect() {
    require_established();
    state_ = ConnState::closing;
    try_send_disconnect();
}

void Connection::try_send_disconnect() {
    if (state_ != ConnState::closing || sent_disconnect_) return;
    if (outstanding() > 0) {
        network().fabric().clock().schedule_in(kDrainPoll, [ctx = &context_, id = id_] {
            if (Connection* self = ctx->find(id)) self->try_send_disconnect();
        });
        return;
    }
    sent_disconnect_ = true;
    ControlMessage message;
    message.kind = MsgKind::disconnect_req;
    message.conn_id = id_;
    context_.channel_.send(context_.side_, std::move(message));
}

void Connection::disconnect() {
    require_established();
    // Let in-flight WRs finish before the handshake starts.
    network().run_until([&] { return outstanding() == 0; });
    begin_disconnect();
    if (!network().run_until([&] { return state_ == ConnState::closed; }))
        throw MpError("disconnect: peer never acknowledged");
}

void Connection::try_ack_disconnect() {
    if (outstanding() > 0) {
        network().fabric().clock().schedule_in(kDrainPoll, [ctx = &context_, id = id_] {
            if (Connection* self = ctx->find(id)) self->try_ack_disconnect();
        });
        return;
    }
    ControlMessage message;
    message.kind = MsgKind::disconnect_ack;
    message.conn_id = id_;
    context_.channel_.send(context_.side_, std::move(message));
    // A side that asked too keeps waiting for its own ACK.
    if (state_ == ConnState::established) close();
}

void Connection::close() {
    if (state_ == ConnState::closed) return;
    for (auto& c : host_.poll_cq(cq_, std::size_t(-1))) drained_.push_back(std::move(c));
    for (auto qp : qps_) host_.destroy_qp(qp);
    qps_.clear();
    host_.cancel_notify(cq_);
    host_.destroy_cq(cq_);
    host_.dereg_mr(probe_mr_);
    probe_mr_ = {};
    cq_ = {};
    state_ = ConnState::closed;
}

void Connection::handle(const ControlMessage& message) {
    switch (message.kind) {
        case MsgKind::connect_ack: {
            if (state_ != ConnState::connecting || !initiator_) return;
            if (message.vps.empty() || message.vps != remote_vps_ || message.qps.size() != qps_.size() ||
                !message.region) {
                handshake_failed_ = true;
                return;
            }
            try {
                verbs::QpAttrs remote;
                remote.qp_type = message.attrs.qp_type;
                remote.max_send_wr = message.attrs.max_send_wr;
                remote.max_recv_wr = message.attrs.max_recv_wr;
                for (std::size_t i = 0; i < qps_.size(); ++i)
                    host_.connect_qp(qps_[i], remote_vps_[i], message.qps[i], remote);
            } catch (const verbs::VerbsError&) {
                handshake_failed_ = true;
                return;
            }
            peer_probe_ = *message.region;
            ack_received_ = true;
            state_ = ConnState::established;
            return;
        }
        case MsgKind::remote_mr_advert:
            if (message.region) remote_regions_.push_back(*message.region);
            return;
        case MsgKind::disconnect_req:
            if (state_ != ConnState::established && state_ != ConnState::closing) return;
            peer_closing_ = true;
            try_ack_disconnect();
            return;
        case MsgKind::disconnect_ack:
            if (state_ != ConnState::closing) return;
            disconnect_ack_received_ = true;
            close();
            return;
        case MsgKind::connect_req:
            return;
    }
}

// ---------------------------------------------------------------- MpContext

MpContext::MpContext(verbs::Network& network, ControlChannel& channel, Side side)
    : network_(network), channel_(channel), side_(side), host_(network.host(side)) {
    channel_.attach(side_, [this](const ControlMessage& m) { receive(m); });
}

MpContext::~MpContext() { channel_.detach(side_); }

void MpContext::listen(std::function<void(Connection&)> on_accept) {
    listening_ = true;
    on_accept_ = std::move(on_accept);
}

Connection* MpContext::find(std::uint64_t id) {
    for (auto& c : connections_)
        if (c->id() == id) return c.get();
    return nullptr;
}

void MpContext::receive(const ControlMessage& message) {
    if (message.kind == MsgKind::connect_req) {
        if (listening_) accept(message);
        return;
    }
    if (Connection* conn = find(message.conn_id)) conn->handle(message);
}

void MpContext::accept(const ControlMessage& request) {
    ConnParams params;
    params.qp_type = request.attrs.qp_type;
    params.max_send_wr = request.attrs.max_send_wr;
    params.max_recv_wr = request.attrs.max_recv_wr;
    if (request.region) params.probe_size = request.region->length;

    auto conn = std::unique_ptr<Connection>(new Connection(*this, request.conn_id, false, params));
    ControlMessage reply;
    reply.kind = MsgKind::connect_ack;
    reply.conn_id = request.conn_id;
    reply.attrs = request.attrs;
    try {
        if (request.vps.empty() || request.vps.size() != request.qps.size() || !request.region)
            throw MpError("malformed CONNECT_REQ");
        require_unique(request.vps, "local");
        conn->create_resources(request.vps);
        const auto& fab = network_.fabric();
        verbs::QpAttrs remote;
        remote.qp_type = request.attrs.qp_type;
        remote.max_send_wr = request.attrs.max_send_wr;
        remote.max_recv_wr = request.attrs.max_recv_wr;
        for (std::size_t i = 0; i < request.vps.size(); ++i) {
            const auto& route = fab.routes()[host_.qp_route(conn->qps_[i])];
            std::string far = side_ == Side::a ? route.peer_vp_id : route.vp_id;
            conn->remote_vps_.push_back(far);
            host_.connect_qp(conn->qps_[i], far, request.qps[i], remote);
        }
    } catch (const std::exception&) {
        conn->release();
        channel_.send(side_, std::move(reply));  // empty vp list: refused
        return;
    }
    conn->peer_probe_ = *request.region;
    conn->state_ = ConnState::established;
    reply.vps = request.vps;
    reply.qps = conn->qps_;
    const auto& probe = host_.mr_info(conn->probe_mr_);
    reply.region = RemoteRegion{probe.rkey, 0, probe.length};
    channel_.send(side_, std::move(reply));

    connections_.push_back(std::move(conn));
    last_accepted_ = connections_.back().get();
    if (on_accept_) on_accept_(*last_accepted_);
}

Connection& MpContext::connect(const std::vector<std::string>& local_vps, const std::vector<std::string>& remote_vps,
                               ConnParams params) {
    if (local_vps.empty()) throw MpError("connect: at least one path is required");
    if (local_vps.size() != remote_vps.size())
        throw MpError(fmt::format("connect: {} local vps but {} remote vps", local_vps.size(), remote_vps.size()));
    require_unique(local_vps, "local");
    require_unique(remote_vps, "remote");
    if (params.probe_size == 0) throw MpError("connect: probe_size must be positive");
    if (!(params.timeout > 0.0)) throw MpError("connect: timeout must be positive");
    const auto& fab = network_.fabric();
    for (std::size_t i = 0; i < local_vps.size(); ++i) {
        auto l = fab.find_route(local_vps[i]);
        auto r = fab.find_route(remote_vps[i]);
        if (!l || !r) throw MpError(fmt::format("connect: unknown vp in pair {}", i));
        if (*l != *r)
            throw MpError(fmt::format("connect: '{}' and '{}' are not ends of one path", local_vps[i], remote_vps[i]));
    }

    auto owned = std::unique_ptr<Connection>(new Connection(*this, channel_.next_conn_id(), true, params));
    Connection& conn = *owned;
    try {
        conn.create_resources(local_vps);
    } catch (const verbs::VerbsError& e) {
        conn.release();
        throw MpError(fmt::format("connect: {}", e.what()));
    }
    conn.remote_vps_ = remote_vps;
    connections_.push_back(std::move(owned));

    ControlMessage request;
    request.kind = MsgKind::connect_req;
    request.conn_id = conn.id();
    request.attrs = QpParams{params.qp_type, params.max_send_wr, params.max_recv_wr};
    request.vps = remote_vps;
    request.qps = conn.qps_;
    const auto& probe = host_.mr_info(conn.probe_mr_);
    request.region = RemoteRegion{probe.rkey, 0, probe.length};
    channel_.send(side_, std::move(request));

    auto& clock = network_.fabric().clock();
    double deadline = clock.now() + params.timeout;
    clock.schedule_at(deadline, [] {});
    network_.run_until([&] {
        return conn.ack_received_ || conn.handshake_failed_ || clock.now() >= deadline;
    });
    if (conn.ack_received_) return conn;

    bool refused = conn.handshake_failed_;
    std::uint64_t id = conn.id();
    conn.release();
    std::erase_if(connections_, [&](const auto& c) { return c.get() == &conn; });
    if (refused) throw MpError(fmt::format("connect: peer refused connection {}", id));
    throw MpError(fmt::format("connect: no answer within {} s", params.timeout));
}

}  // namespace mpr::core
