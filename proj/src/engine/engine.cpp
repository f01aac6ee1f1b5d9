#include "mpr/engine/engine.hpp"

#include <fmt/format.h>

#include <algorithm>

namespace mpr::engine {

std::string_view to_string(MpVerb verb) {
    switch (verb) {
        case MpVerb::write: return "MP_WRITE";
        case MpVerb::read: return "MP_READ";
        case MpVerb::send: return "MP_SEND";
    }
    return "?";
}

std::string_view to_string(SendClass c) { return c == SendClass::small ? "small" : "large"; }

SendClass classify_send(std::uint64_t length, std::uint64_t threshold) {
    if (threshold == 0) throw EngineError("classify_send: threshold must be positive");
    return length <= threshold ? SendClass::small : SendClass::large;
}

Engine::Engine(core::Connection& conn, EngineConfig config, std::unique_ptr<lb::AllocationPolicy> allocation,
               std::unique_ptr<lb::WindowPolicy> window)
    : conn_(conn),
      config_(config),
      mode_(config.mode.value_or(lb::connection_mode(conn))),
      allocation_(allocation ? std::move(allocation) : std::make_unique<lb::ProportionalAllocation>()),
      window_(window ? std::move(window) : std::make_unique<lb::BinaryLinearWindow>(config.window)),
      alive_(std::make_shared<bool>(true)) {
    conn_.require_established();
    if (config_.block == 0) throw EngineError("block size must be positive");
    for (std::size_t i = 0; i < conn_.paths(); ++i) windows_.push_back(window_->initial(i));
    data_in_flight_.assign(conn_.paths(), 0);
}

Engine::~Engine() {
    alive_.reset();
    if (armed_ && conn_.state() != core::ConnState::closed) conn_.host().cancel_notify(conn_.cq());
}

// ---------------------------------------------------------------- setup

const std::vector<lb::PathCapacity>& Engine::probe() {
    if (!ops_.empty()) throw EngineError("probe: MP_WRs in progress");
    probing_ = true;
    if (armed_) conn_.host().cancel_notify(conn_.cq());
    armed_ = false;
    try {
        monitor_.probe(conn_, config_.probe_size, mode_);
    } catch (...) {
        probing_ = false;
        throw;
    }
    probing_ = false;
    set_caps(monitor_.caps());
    return monitor_.capacities();
}

void Engine::set_caps(std::vector<double> caps) {
    if (caps.size() != conn_.paths()) throw EngineError("set_caps: one capacity per path");
    for (double c : caps)
        if (!(c > 0.0)) throw EngineError("set_caps: capacities must be positive");
    caps_ = std::move(caps);
    conn_.set_path_weights(caps_);
}

void Engine::use_staging(const core::RemoteRegion& region) {
    if (region.length == 0) throw EngineError("use_staging: empty region");
    peer_staging_ = region;
    send_cursor_ = 0;
}

void Engine::provide_staging(verbs::MrId mr) {
    conn_.advertise_region(mr);
    staging_mr_ = mr;
    staging_size_ = conn_.host().mr_info(mr).length;
    recv_cursor_ = 0;
}

std::uint64_t Engine::staging_slot(std::uint64_t length, std::uint64_t cursor, std::uint64_t size) const {
    if (length > size) throw EngineError(fmt::format("staging region of {} bytes cannot hold {}", size, length));
    return cursor + length <= size ? cursor : 0;
}

// ---------------------------------------------------------------- posting

void Engine::mp_post(const MpWorkRequest& wr) {
    conn_.require_established();
    if (wr.mp_wr_id == 0 || wr.mp_wr_id > kMaxMpId)
        throw EngineError(fmt::format("mp_wr_id {} outside 1..2^40-1", wr.mp_wr_id));
    if (ops_.count(wr.mp_wr_id)) throw EngineError(fmt::format("mp_wr_id {} already active", wr.mp_wr_id));
    if (wr.local.length == 0) throw EngineError("MP_WR length must be positive");
    const auto& info = conn_.host().mr_info(wr.local.mr);
    if (info.pd != conn_.pd()) throw EngineError("local MR is not in the connection's PD");
    if (wr.local.offset > info.length || wr.local.length > info.length - wr.local.offset)
        throw EngineError("local range outside the MR");
    if (caps_.empty()) throw EngineError("no capacity estimates: probe the paths first");

    Op op;
    op.wr = wr;
    if (wr.verb == MpVerb::send) {
        if (wr.remote) throw EngineError("MP_SEND takes no remote target");
        op.kind = classify_send(wr.local.length, config_.send_threshold) == SendClass::small ? Kind::small_send
                                                                                            : Kind::large_send;
        if (op.kind == Kind::large_send) {
            if (!peer_staging_) throw EngineError("large MP_SEND needs a staging region (use_staging)");
            staging_slot(wr.local.length, 0, peer_staging_->length);
        }
    } else {
        op.kind = wr.verb == MpVerb::write ? Kind::write : Kind::read;
        if (!wr.remote) throw EngineError("no remote region: MP_WRITE/MP_READ need a remote target");
        const auto& regions = conn_.remote_regions();
        bool advertised = std::any_of(regions.begin(), regions.end(),
                                      [&](const core::RemoteRegion& r) { return r == wr.remote->region; });
        if (!advertised) throw EngineError("no remote region: target was never advertised by the peer");
        const auto& r = wr.remote->region;
        if (wr.remote->offset > r.length || wr.local.length > r.length - wr.remote->offset)
            throw EngineError("remote range outside the advertised region");
        op.remote_rkey = r.rkey;
        op.remote_base = r.base + wr.remote->offset;
    }

    Kind kind = op.kind;
    auto [it, inserted] = ops_.emplace(wr.mp_wr_id, std::move(op));
    if (kind == Kind::small_send || kind == Kind::large_send) {
        send_queue_.push_back(wr.mp_wr_id);
        start_next_send();
    } else {
        start(it->second);
    }
    pump();
    arm();
}

void Engine::mp_post_recv(std::uint64_t mp_wr_id, std::optional<verbs::Sge> buffer) {
    conn_.require_established();
    if (mp_wr_id == 0 || mp_wr_id > kMaxMpId) throw EngineError("mp_post_recv: mp_wr_id outside 1..2^40-1");
    if (recvs_.count(mp_wr_id)) throw EngineError("mp_post_recv: mp_wr_id already posted");
    verbs::WorkRequest wr;
    wr.wr_id = encode_wr_id(mp_wr_id, 0);
    wr.opcode = verbs::Opcode::recv;
    wr.local = buffer.value_or(verbs::Sge{conn_.probe_mr(), 0, 0});
    conn_.host().post_recv(conn_.qp(0), wr);
    recvs_.emplace(mp_wr_id, RecvOp{buffer});
    recv_order_.push_back(mp_wr_id);
    arm();
}

void Engine::start_next_send() {
    if (active_send_ || send_queue_.empty()) return;
    std::uint64_t id = send_queue_.front();
    send_queue_.pop_front();
    active_send_ = id;
    Op& op = ops_.at(id);
    if (op.kind == Kind::large_send) {
        op.remote_rkey = peer_staging_->rkey;
        op.remote_base = peer_staging_->base + staging_slot(op.wr.local.length, send_cursor_, peer_staging_->length);
    }
    start(op);
}

void Engine::start(Op& op) {
    op.started = true;
    if (op.kind == Kind::small_send) {
        post_send_wr(op, op.wr.local.length, std::nullopt);
        return;
    }
    lb::PlanOptions options;
    options.mode = mode_;
    options.block = config_.block;
    options.max_chunk = config_.max_chunk;
    op.plan = lb::plan(op.wr.mp_wr_id, op.wr.local.offset, op.wr.local.length, caps_, windows_, options, *allocation_);
    op.scheduler = std::make_unique<lb::Scheduler>(op.plan, mode_, conn_.params().max_send_wr, config_.block,
                                                   config_.max_attempts);
    PlanRecord record;
    record.mp_wr_id = op.wr.mp_wr_id;
    for (const auto& e : op.plan.entries) record.path_bytes.push_back(e.length);
    record.planned_wrs = op.plan.chunk_count();
    stats_.plans.push_back(std::move(record));
}

void Engine::pump() {
    if (conn_.state() != core::ConnState::established) return;
    for (auto& [id, op] : ops_)
        if (op.started && !op.failed && op.scheduler) pump_op(op);
}

void Engine::pump_op(Op& op) {
    auto& host = conn_.host();
    const auto max_wr = conn_.params().max_send_wr;
    auto allow = [&](std::size_t path) {
        if (mode_ == lb::Mode::lossy) return data_in_flight_[path] == 0;
        return host.send_outstanding(conn_.qp(path)) < max_wr;
    };
    while (auto post = op.scheduler->next_post(windows_, allow)) post_chunk(op, *post);
}

void Engine::post_chunk(Op& op, const lb::Post& post) {
    if (op.next_chunk > kMaxChunkIndex) throw EngineError("MP_WR needs more than 2^24 WRs");
    std::uint32_t index = op.next_chunk++;
    verbs::WorkRequest wr;
    wr.wr_id = encode_wr_id(op.wr.mp_wr_id, index);
    wr.opcode = op.kind == Kind::read ? verbs::Opcode::read : verbs::Opcode::write;
    wr.local = verbs::Sge{op.wr.local.mr, post.chunk.offset, post.chunk.length};
    wr.remote = verbs::RemoteAddress{op.remote_rkey, op.remote_base + (post.chunk.offset - op.wr.local.offset)};
    conn_.host().post_send(conn_.qp(post.path), wr);
    op.outstanding.emplace(index, post);
    ++data_in_flight_[post.path];
    ++op.wr_count;
    ++stats_.data_wrs_posted;
    stats_.max_bytes_in_flight = std::max(stats_.max_bytes_in_flight, bytes_in_flight());
}

void Engine::post_send_wr(Op& op, std::uint64_t length, std::optional<std::uint64_t> imm) {
    if (op.next_chunk > kMaxChunkIndex) throw EngineError("MP_WR needs more than 2^24 WRs");
    verbs::WorkRequest wr;
    wr.wr_id = encode_wr_id(op.wr.mp_wr_id, op.next_chunk++);
    wr.opcode = verbs::Opcode::send;
    wr.local = verbs::Sge{op.wr.local.mr, op.wr.local.offset, length};
    wr.imm = imm;
    conn_.host().post_send(conn_.qp(0), wr);
    if (length > 0) {
        ++op.wr_count;
        ++stats_.data_wrs_posted;
    }
}

std::uint64_t Engine::bytes_in_flight() const {
    std::uint64_t total = 0;
    for (const auto& [id, op] : ops_)
        for (const auto& [index, post] : op.outstanding) total += post.chunk.length;
    return total;
}

// ---------------------------------------------------------------- completions

std::optional<MpCompletion> Engine::on_completion(const verbs::Completion& cqe, bool pump_after) {
    std::uint64_t id = decode_mp_id(cqe.wr_id);
    std::uint32_t index = decode_chunk(cqe.wr_id);
    if (id == lb::PathMonitor::kProbeMpId) return std::nullopt;
    if (cqe.opcode == verbs::Opcode::recv) return handle_recv(cqe);

    auto it = ops_.find(id);
    if (it == ops_.end()) throw EngineError(fmt::format("completion for unknown wr_id {:#x}", cqe.wr_id));
    Op& op = it->second;
    std::optional<MpCompletion> done;
    bool ok = cqe.status == verbs::WcStatus::success;

    auto chunk = op.outstanding.find(index);
    if (chunk == op.outstanding.end()) {
        // The SEND of a small send or the notification of a large one.
        if (cqe.opcode != verbs::Opcode::send) throw EngineError(fmt::format("unexpected CQE {:#x}", cqe.wr_id));
        if (ok) {
            if (op.kind == Kind::large_send) send_cursor_ = op.remote_base - peer_staging_->base + op.wr.local.length;
        } else if (op.kind == Kind::small_send && cqe.status == verbs::WcStatus::retry_exceeded &&
                   ++op.send_attempts < config_.max_attempts) {
            ++stats_.retries;
            post_send_wr(op, op.wr.local.length, std::nullopt);
            return std::nullopt;
        } else {
            op.failed = true;
        }
        MpCompletion c;
        c.mp_wr_id = id;
        c.verb = MpVerb::send;
        c.status = ok ? MpStatus::success : MpStatus::failed;
        c.byte_len = ok ? op.wr.local.length : 0;
        c.time = cqe.time;
        c.wr_count = op.wr_count;
        ops_.erase(it);
        active_send_.reset();
        start_next_send();
        done = c;
    } else {
        lb::Post post = chunk->second;
        op.outstanding.erase(chunk);
        --data_in_flight_[post.path];
        bool lossy = mode_ == lb::Mode::lossy;
        if (ok) {
            op.scheduler->on_success(post);
            ++stats_.data_wrs_ok;
            stats_.data_bytes_ok += post.chunk.length;
            stats_.max_ok_wr = std::max(stats_.max_ok_wr, post.chunk.length);
            if (lossy && post.chunk.length == windows_[post.path].current)
                windows_[post.path] = window_->update(windows_[post.path], lb::Outcome::success);
        } else if (cqe.status == verbs::WcStatus::retry_exceeded) {
            ++stats_.retries;
            if (lossy) windows_[post.path] = window_->update(windows_[post.path], lb::Outcome::retry_exceeded);
            if (!op.scheduler->on_failure(post)) op.failed = true;
        } else {
            op.scheduler->on_failure(post);
            op.failed = true;
        }
        done = finish_if_done(id);
    }
    if (pump_after) pump();
    return done;
}

std::optional<MpCompletion> Engine::finish_if_done(std::uint64_t id) {
    Op& op = ops_.at(id);
    if (!op.outstanding.empty()) return std::nullopt;
    if (!op.failed && !op.scheduler->finished()) return std::nullopt;

    if (!op.failed && op.kind == Kind::large_send) {
        // Every WRITE CQE is in: only now may the notification go out, since
        // RDMA orders nothing across QPs.
        if (!op.notified) {
            op.notified = true;
            ++stats_.notifications;
            post_send_wr(op, 0, op.wr.local.length);
        }
        return std::nullopt;
    }

    MpCompletion c;
    c.mp_wr_id = id;
    c.verb = op.wr.verb;
    c.status = op.failed ? MpStatus::failed : MpStatus::success;
    c.byte_len = op.failed ? op.scheduler->bytes_done() : op.wr.local.length;
    c.time = conn_.network().now();
    c.wr_count = op.wr_count;
    bool was_send = active_send_ && *active_send_ == id;
    ops_.erase(id);
    if (was_send) {
        active_send_.reset();
        start_next_send();
    }
    return c;
}

std::optional<MpCompletion> Engine::handle_recv(const verbs::Completion& cqe) {
    std::uint64_t id = decode_mp_id(cqe.wr_id);
    auto it = recvs_.find(id);
    if (it == recvs_.end()) throw EngineError(fmt::format("RECV completion for unknown wr_id {:#x}", cqe.wr_id));
    recvs_.erase(it);
    recv_order_.erase(std::find(recv_order_.begin(), recv_order_.end(), id));

    MpCompletion c;
    c.mp_wr_id = id;
    c.verb = MpVerb::send;
    c.receiver = true;
    c.time = cqe.time;
    c.status = cqe.status == verbs::WcStatus::success ? MpStatus::success : MpStatus::failed;
    if (c.status == MpStatus::success && cqe.imm) {
        if (!staging_mr_) {
            c.status = MpStatus::failed;
        } else {
            std::uint64_t at = staging_slot(*cqe.imm, recv_cursor_, staging_size_);
            recv_cursor_ = at + *cqe.imm;
            c.byte_len = *cqe.imm;
            c.staging_offset = at;
        }
    } else if (c.status == MpStatus::success) {
        c.byte_len = cqe.byte_len;
    }
    return c;
}

void Engine::progress() {
    if (probing_ || conn_.state() == core::ConnState::closed) return;
    auto& host = conn_.host();
    for (;;) {
        auto batch = host.poll_cq(conn_.cq(), 64);
        if (batch.empty()) break;
        for (const auto& cqe : batch)
            if (auto c = on_completion(cqe, false)) ready_.push_back(*c);
    }
    pump();
}

void Engine::arm() {
    if (!config_.auto_progress || armed_ || probing_ || conn_.state() != core::ConnState::established) return;
    armed_ = true;
    conn_.host().request_notify(conn_.cq(), [this, alive = std::weak_ptr<bool>(alive_)] {
        if (alive.expired()) return;
        armed_ = false;
        progress();
        arm();
    });
}

std::vector<MpCompletion> Engine::poll(std::size_t max) {
    std::vector<MpCompletion> out;
    while (!ready_.empty() && out.size() < max) {
        out.push_back(ready_.front());
        ready_.pop_front();
    }
    return out;
}

MpCompletion Engine::wait(std::uint64_t mp_wr_id) {
    auto find = [&] {
        return std::find_if(ready_.begin(), ready_.end(), [&](const MpCompletion& c) { return c.mp_wr_id == mp_wr_id; });
    };
    bool found = conn_.network().run_until([&] {
        if (!config_.auto_progress) progress();
        return find() != ready_.end();
    });
    if (!found) throw EngineError(fmt::format("wait: MP_WR {} never completed", mp_wr_id));
    auto it = find();
    MpCompletion c = *it;
    ready_.erase(it);
    return c;
}

const lb::SubFlowPlan* Engine::plan_of(std::uint64_t mp_wr_id) const {
    auto it = ops_.find(mp_wr_id);
    return it == ops_.end() || !it->second.scheduler ? nullptr : &it->second.plan;
}

}  // namespace mpr::engine
