#include "mpr/lb/path_lb.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mpr::lb {

std::string_view to_string(Mode mode) { return mode == Mode::lossless ? "lossless" : "lossy"; }

std::string_view to_string(Phase phase) {
    switch (phase) {
        case Phase::binary_growth: return "binary_growth";
        case Phase::linear_probe: return "linear_probe";
        case Phase::stable: return "stable";
    }
    return "?";
}

// ---------------------------------------------------------------- allocation

std::vector<std::uint64_t> allocate(std::uint64_t total, const std::vector<double>& caps) {
    if (caps.empty()) throw LbError("allocate: no paths");
    for (double c : caps)
        if (!(c > 0.0) || !std::isfinite(c)) throw LbError(fmt::format("allocate: invalid capacity {}", c));

    std::vector<std::uint64_t> data(caps.size(), 0);
    constexpr double kExactLimit = 9007199254740992.0;  // 2^53
    bool integral = std::all_of(caps.begin(), caps.end(), [](double c) { return c == std::floor(c) && c < kExactLimit; });
    if (integral) {
        unsigned __int128 sum = 0;
        for (double c : caps) sum += static_cast<std::uint64_t>(c);
        for (std::size_t i = 0; i < caps.size(); ++i)
            data[i] = static_cast<std::uint64_t>(static_cast<unsigned __int128>(total) * static_cast<std::uint64_t>(caps[i]) / sum);
    } else {
        long double sum = 0;
        for (double c : caps) sum += c;
        for (std::size_t i = 0; i < caps.size(); ++i) {
            long double share = std::floor(static_cast<long double>(total) * caps[i] / sum);
            data[i] = static_cast<std::uint64_t>(std::min<long double>(share, static_cast<long double>(total)));
        }
    }

    std::uint64_t assigned = 0;
    for (auto d : data) assigned += d;
    // Rounding can overshoot by a byte or two in the floating path.
    for (std::size_t i = data.size(); assigned > total && i-- > 0;) {
        std::uint64_t take = std::min(data[i], assigned - total);
        data[i] -= take;
        assigned -= take;
    }
    data[0] += total - assigned;
    return data;
}

// ---------------------------------------------------------------- chunk window

namespace {

std::uint64_t round_block(std::uint64_t bytes, std::uint64_t block) {
    return std::max(block, bytes / block * block);
}

}  // namespace

ChunkWindow initial_window(std::size_t path, const WindowConfig& config) {
    if (config.block == 0 || config.step_divisor == 0) throw LbError("window: block and step divisor must be positive");
    ChunkWindow w;
    w.path = path;
    w.current = round_block(config.initial, config.block);
    return w;
}

ChunkWindow window_update(const ChunkWindow& window, Outcome outcome, const WindowConfig& config) {
    ChunkWindow w = window;
    bool ok = outcome == Outcome::success;
    switch (w.phase) {
        case Phase::binary_growth:
            if (ok) {
                w.last_good = w.current;
                w.current = std::min(w.current * 2, std::max(config.max_chunk, w.current));
            } else if (w.last_good == 0) {
                w.current = config.block;
                w.phase = Phase::stable;
            } else {
                w.current = w.last_good;
                w.linear_step = round_block(w.last_good / config.step_divisor, config.block);
                w.phase = Phase::linear_probe;
            }
            break;
        case Phase::linear_probe:
            if (ok) {
                w.last_good = w.current;
                w.current += w.linear_step;
            } else {
                w.current = w.last_good;
                w.phase = Phase::stable;
            }
            break;
        case Phase::stable:
            if (!ok) {
                w.current = round_block(w.current / 2, config.block);
                w.last_good = w.current;
            }
            break;
    }
    return w;
}

// ---------------------------------------------------------------- plan

std::size_t SubFlowPlan::chunk_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.chunks.size();
    return n;
}

SubFlowPlan plan(std::uint64_t mp_wr_id, std::uint64_t offset, std::uint64_t length, const std::vector<double>& caps,
                 const std::vector<ChunkWindow>& windows, const PlanOptions& options,
                 const AllocationPolicy& allocation) {
    if (caps.empty()) throw LbError("plan: no capacity estimates (probe the paths first)");
    if (options.block == 0) throw LbError("plan: block size must be positive");
    if (options.mode == Mode::lossy && windows.size() != caps.size()) throw LbError("plan: one window per path");

    SubFlowPlan p;
    p.mp_wr_id = mp_wr_id;
    p.offset = offset;
    p.length = length;

    std::vector<std::uint64_t> split(caps.size(), 0);
    if (length < options.block) {
        split[0] = length;
    } else {
        split = allocation.allocate(length, caps);
        if (split.size() != caps.size() || std::accumulate(split.begin(), split.end(), std::uint64_t{0}) != length)
            throw LbError("plan: allocation policy does not partition the range");
    }

    std::uint64_t cursor = offset;
    for (std::size_t i = 0; i < caps.size(); ++i) {
        SubFlow s;
        s.path = i;
        s.offset = cursor;
        s.length = split[i];
        std::uint64_t size = s.length;
        if (options.mode == Mode::lossy)
            size = round_block(windows[i].current, options.block);
        else if (options.max_chunk > 0)
            size = round_block(options.max_chunk, options.block);
        for (std::uint64_t at = 0; at < s.length; at += size)
            s.chunks.push_back(Chunk{s.offset + at, std::min(size, s.length - at)});
        cursor += s.length;
        p.entries.push_back(std::move(s));
    }
    return p;
}

// ---------------------------------------------------------------- scheduling

Scheduler::Scheduler(const SubFlowPlan& plan, Mode mode, std::uint32_t max_in_flight, std::uint64_t block,
                     std::uint32_t max_attempts)
    : mode_(mode), max_in_flight_(max_in_flight), block_(block), max_attempts_(max_attempts) {
    if (max_in_flight == 0 || block == 0 || max_attempts == 0) throw LbError("scheduler: limits must be positive");
    paths_.resize(plan.entries.size());
    for (const auto& e : plan.entries) {
        PathQueue& q = paths_.at(e.path);
        if (e.length == 0) continue;
        if (mode == Mode::lossless) {
            for (const auto& c : e.chunks) q.pending.push_back(Pending{c, 0, true});
        } else {
            q.pending.push_back(Pending{Chunk{e.offset, e.length}, 0, false});
        }
    }
}

std::optional<Post> Scheduler::next_post(const std::vector<ChunkWindow>& windows,
                                         const std::function<bool(std::size_t)>& allow) {
    if (failed_) return std::nullopt;
    const std::size_t n = paths_.size();
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t p = (cursor_ + k) % n;
        PathQueue& q = paths_[p];
        if (q.pending.empty()) continue;
        bool eligible = mode_ == Mode::lossless ? q.in_flight < max_in_flight_ : q.in_flight == 0;
        if (!eligible || (allow && !allow(p))) continue;

        Pending& head = q.pending.front();
        Post post;
        post.path = p;
        post.attempt = head.attempts + 1;
        if (head.fixed) {
            post.chunk = head.range;
            q.pending.pop_front();
        } else {
            if (p >= windows.size()) throw LbError("next_post: missing window");
            std::uint64_t size = std::min(round_block(windows[p].current, block_), head.range.length);
            post.chunk = Chunk{head.range.offset, size};
            head.range.offset += size;
            head.range.length -= size;
            if (head.range.length == 0) q.pending.pop_front();
        }
        ++q.in_flight;
        cursor_ = (p + 1) % n;
        return post;
    }
    return std::nullopt;
}

void Scheduler::on_success(const Post& post) {
    PathQueue& q = paths_.at(post.path);
    if (q.in_flight == 0) throw LbError("scheduler: completion without a post");
    --q.in_flight;
    bytes_done_ += post.chunk.length;
}

bool Scheduler::on_failure(const Post& post) {
    PathQueue& q = paths_.at(post.path);
    if (q.in_flight == 0) throw LbError("scheduler: completion without a post");
    --q.in_flight;
    if (post.attempt >= max_attempts_) {
        failed_ = true;
        return false;
    }
    q.pending.push_front(Pending{post.chunk, post.attempt, mode_ == Mode::lossless});
    return true;
}

std::size_t Scheduler::in_flight_total() const {
    std::size_t n = 0;
    for (const auto& q : paths_) n += q.in_flight;
    return n;
}

bool Scheduler::exhausted() const {
    if (failed_) return true;
    return std::all_of(paths_.begin(), paths_.end(), [](const PathQueue& q) { return q.pending.empty(); });
}

bool Scheduler::finished() const { return exhausted() && in_flight_total() == 0; }

// ---------------------------------------------------------------- probing

Mode connection_mode(core::Connection& conn) {
    auto& fab = conn.network().fabric();
    for (auto qp : conn.qps())
        if (fab.lossy(conn.host().qp_route(qp))) return Mode::lossy;
    return Mode::lossless;
}

std::vector<double> PathMonitor::caps() const {
    std::vector<double> out;
    for (const auto& c : caps_) out.push_back(c.cap);
    return out;
}

const std::vector<PathCapacity>& PathMonitor::probe(core::Connection& conn, std::uint64_t probe_size, Mode mode) {
    conn.require_established();
    if (probe_size < kMinProbeSize)
        throw LbError(fmt::format("probe: size {} is below the {} byte minimum", probe_size, kMinProbeSize));
    auto& host = conn.host();
    if (probe_size > host.mr_info(conn.probe_mr()).length || probe_size > conn.peer_probe().length)
        throw LbError("probe: size exceeds a probe sink");
    if (conn.outstanding() > 0) throw LbError("probe: connection has WRs in flight");

    const std::size_t n = conn.paths();
    auto& net = conn.network();
    std::vector<double> posted_at(n, 0.0);
    std::vector<std::optional<double>> fct(n);
    std::size_t answered = 0;

    auto post = [&](std::size_t path) {
        verbs::WorkRequest wr;
        wr.wr_id = (kProbeMpId << 24) | path;
        wr.opcode = verbs::Opcode::write;
        wr.local = verbs::Sge{conn.probe_mr(), 0, probe_size};
        wr.remote = verbs::RemoteAddress{conn.peer_probe().rkey, 0};
        posted_at[path] = net.now();
        host.post_send(conn.qp(path), wr);
    };
    auto collect = [&](std::size_t until) {
        while (answered < until) {
            if (!net.run_until([&] { return host.cq_depth(conn.cq()) > 0; }))
                throw LbError("probe: fabric went idle before all probes completed");
            for (const auto& wc : host.poll_cq(conn.cq(), n)) {
                std::size_t path = wc.wr_id & 0xFFFFFF;
                if ((wc.wr_id >> 24) != kProbeMpId || path >= n || wc.qp != conn.qp(path))
                    throw LbError("probe: unexpected completion on the connection CQ");
                if (wc.status == verbs::WcStatus::success) fct[path] = wc.time - posted_at[path];
                ++answered;
            }
        }
    };

    if (mode == Mode::lossless) {
        for (std::size_t i = 0; i < n; ++i) post(i);
        collect(n);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            post(i);
            collect(i + 1);
        }
    }

    if (caps_.size() != n) {
        caps_.assign(n, PathCapacity{});
        for (std::size_t i = 0; i < n; ++i) caps_[i].path = i;
    }
    double floor_cap = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        caps_[i].failed = !fct[i] || !(*fct[i] > 0.0);
        if (caps_[i].failed) continue;
        caps_[i].samples.push_back(ProbeSample{probe_size, *fct[i]});
        caps_[i].cap = probe_size / *fct[i];
        floor_cap = floor_cap == 0.0 ? caps_[i].cap : std::min(floor_cap, caps_[i].cap);
    }
    for (auto& c : caps_)
        if (c.failed) c.cap = floor_cap > 0.0 ? floor_cap : 1.0;
    return caps_;
}

}  // namespace mpr::lb
