#pragma once

#include "mpr/verbs/verbs.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpr::core {

/// Connection setup/teardown or region lookup failure.
class MpError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ConnParams {
    std::uint32_t max_send_wr = 256;
    std::uint32_t max_recv_wr = 256;
    std::string qp_type = "RC";
    std::uint64_t probe_size = 512 * 1024;  // per-side probe sink
    double timeout = 1.0;                   // simulated seconds to wait for the peer
    double rate_limit_total = 0.0;          // bytes/s over all paths, 0 = unlimited
};

struct RemoteRegion {
    std::uint32_t rkey = 0;
    std::uint64_t base = 0;
    std::uint64_t length = 0;
    friend bool operator==(const RemoteRegion&, const RemoteRegion&) = default;
};

enum class MsgKind { connect_req, connect_ack, disconnect_req, disconnect_ack, remote_mr_advert };

std::string_view to_string(MsgKind kind);

struct QpParams {
    std::string qp_type = "RC";
    std::uint32_t max_send_wr = 256;
    std::uint32_t max_recv_wr = 256;
};

struct ControlMessage {
    MsgKind kind = MsgKind::connect_req;
    std::uint64_t conn_id = 0;
    QpParams attrs;
    /// REQ: the vps the initiator wants on the far side. ACK: echo, or empty on failure.
    std::vector<std::string> vps;
    std::vector<verbs::QpId> qps;
    std::optional<RemoteRegion> region;  // probe sink in REQ/ACK, the region in an advert
};

/// Reliable, ordered message pipe between the two hosts, outside the data
/// fabric. Messages arrive `control_delay` after they are sent.
class ControlChannel {
public:
    using Handler = std::function<void(const ControlMessage&)>;

    explicit ControlChannel(verbs::Network& network) : network_(network) {}

    void attach(verbs::Side side, Handler handler);
    void detach(verbs::Side side);
    /// Messages to an unattached side are lost.
    void send(verbs::Side from, ControlMessage message);

    std::uint64_t next_conn_id() { return next_conn_id_++; }
    const std::vector<ControlMessage>& log() const { return log_; }

private:
    verbs::Network& network_;
    Handler handlers_[2];
    std::uint64_t next_conn_id_ = 1;
    std::vector<ControlMessage> log_;
};

enum class ConnState { connecting, established, closing, closed };

std::string_view to_string(ConnState state);

class MpContext;

/// One logical multi-path connection: a PD, a shared CQ and one RC QP per
/// virtual path. Path i is QP i.
class Connection {
public:
    Connection(const Connection&) = delete;
    Connection& operator=(const Connection&) = delete;

    std::uint64_t id() const { return id_; }
    ConnState state() const { return state_; }
    bool initiator() const { return initiator_; }
    verbs::Host& host() { return host_; }
    verbs::Network& network() { return host_.network(); }
    const ConnParams& params() const { return params_; }

    verbs::PdId pd() const { return pd_; }
    verbs::CqId cq() const { return cq_; }
    std::size_t paths() const { return qps_.size(); }
    verbs::QpId qp(std::size_t path) const { return qps_.at(path); }
    const std::vector<verbs::QpId>& qps() const { return qps_; }
    const std::vector<std::string>& local_vps() const { return local_vps_; }
    const std::vector<std::string>& remote_vps() const { return remote_vps_; }
    /// Path whose QP is `qp`. Throws MpError for a foreign QP.
    std::size_t path_of(verbs::QpId qp) const;

    /// Registers memory in the connection's PD.
    verbs::MrId reg_mr(std::uint64_t length, verbs::Backing backing = verbs::Backing::owned);
    /// Sends (rkey, 0, length) of `mr` to the peer. Throws MpError if `mr`
    /// is not registered in this connection's PD.
    void advertise_region(verbs::MrId mr);
    const std::vector<RemoteRegion>& remote_regions() const { return remote_regions_; }

    verbs::MrId probe_mr() const { return probe_mr_; }
    const RemoteRegion& peer_probe() const { return peer_probe_; }

    /// Splits params().rate_limit_total over paths in proportion to `weights`.
    /// No-op when the connection is not rate limited.
    void set_path_weights(const std::vector<double>& weights);

    /// Send WRs posted on any path and not yet completed.
    std::size_t outstanding() const;

    /// Starts teardown without blocking: waits for local WRs to finish, then
    /// exchanges DISCONNECT_REQ/ACK. Throws MpError unless established.
    void begin_disconnect();
    /// begin_disconnect() and run the simulation until closed.
    void disconnect();
    /// Completions that were still in the CQ when the QPs were destroyed.
    const std::vector<verbs::Completion>& drained() const { return drained_; }

    /// Throws MpError unless established.
    void require_established() const;

private:
    friend class MpContext;

    Connection(MpContext& context, std::uint64_t id, bool initiator, ConnParams params);

    void create_resources(const std::vector<std::string>& local_vps);
    void release();
    void handle(const ControlMessage& message);
    void try_send_disconnect();
    void try_ack_disconnect();
    void close();

    MpContext& context_;
    verbs::Host& host_;
    std::uint64_t id_;
    bool initiator_;
    ConnParams params_;
    ConnState state_ = ConnState::connecting;

    verbs::PdId pd_;
    verbs::CqId cq_;
    verbs::MrId probe_mr_;
    std::vector<verbs::QpId> qps_;
    std::vector<std::string> local_vps_;
    std::vector<std::string> remote_vps_;
    std::vector<verbs::MrId> owned_mrs_;

    RemoteRegion peer_probe_;
    std::vector<RemoteRegion> remote_regions_;
    std::vector<verbs::Completion> drained_;

    bool ack_received_ = false;
    bool handshake_failed_ = false;
    bool peer_closing_ = false;
    bool sent_disconnect_ = false;
    bool disconnect_ack_received_ = false;
};

/// Per-host connection manager.
class MpContext {
public:
    MpContext(verbs::Network& network, ControlChannel& channel, verbs::Side side);
    ~MpContext();
    MpContext(const MpContext&) = delete;
    MpContext& operator=(const MpContext&) = delete;

    verbs::Host& host() { return host_; }
    verbs::Network& network() { return network_; }
    verbs::Side side() const { return side_; }

    /// Accept incoming connections. `on_accept` runs once each is established.
    void listen(std::function<void(Connection&)> on_accept = {});
    void stop_listening() { listening_ = false; }

    /// Builds the connection and runs the simulation until the peer answers
    /// or `params.timeout` of simulated time passes. All-or-nothing: on any
    /// failure every QP, CQ, MR and PD created here is released before MpError
    /// is thrown.
    Connection& connect(const std::vector<std::string>& local_vps, const std::vector<std::string>& remote_vps,
                        ConnParams params = {});

    const std::vector<std::unique_ptr<Connection>>& connections() const { return connections_; }
    /// Most recently accepted connection, if any.
    Connection* last_accepted() { return last_accepted_; }

private:
    friend class Connection;

    void receive(const ControlMessage& message);
    void accept(const ControlMessage& message);
    Connection* find(std::uint64_t id);

    verbs::Network& network_;
    ControlChannel& channel_;
    verbs::Side side_;
    verbs::Host& host_;
    bool listening_ = false;
    std::function<void(Connection&)> on_accept_;
    std::vector<std::unique_ptr<Connection>> connections_;
    Connection* last_accepted_ = nullptr;
};

}  // namespace mpr::core
