#pragma once

#include "mpr/fabric/event_clock.hpp"
#include "mpr/fabric/topology.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace mpr::fabric {

using TransferId = std::uint64_t;
using RouteIndex = std::size_t;

/// Host A sits behind edge_a, host B behind edge_b.
enum class Direction { a_to_b, b_to_a };

enum class TransferState { pending_admission, active, drained, done, dropped };
enum class BurstOutcome { admitted, dropped };

struct Link {
    std::string id;
    double rate = 0.0;
    double prop_delay = 0.0;
    double buffer = 0.0;
    LinkMode mode = LinkMode::lossless;
};

/// One virtual path: edge_a -> core_i -> edge_b. `vp_id` is the host-A vNIC
/// address, `peer_vp_id` the host-B one.
struct PathRoute {
    std::string vp_id;
    std::string peer_vp_id;
    std::vector<std::size_t> links;
};

struct TransferHooks {
    /// Last byte has left the sender and cleared the bottleneck.
    std::function<void()> on_drained;
    /// Last byte has arrived at the far host (drain time plus path delay).
    std::function<void()> on_delivered;
    /// Burst rejected by the lossy admission check; nothing was delivered.
    std::function<void()> on_dropped;
};

struct Transfer {
    TransferId id = 0;
    RouteIndex route = 0;
    Direction direction = Direction::a_to_b;
    std::uint64_t size = 0;
    double start_time = 0.0;
    double injection_rate_cap = 0.0;
    TransferState state = TransferState::active;
    double finish_time = 0.0;
    double remaining = 0.0;
    double rate = 0.0;
    TransferHooks hooks;
};

struct TransferResult {
    TransferId id = 0;
    bool dropped = false;
    double finish_time = 0.0;
};

/// Flow-level simulator of a two-ToR leaf-spine pair.
///
/// Active transfers share links by max-min fairness, each capped at its
/// injection rate, and links are full duplex: each direction has the whole
/// link rate. Rates are re-solved whenever the active set changes. On lossy
/// routes every burst passes an admission check at the instant it is opened
/// (all bursts opened at the same instant are checked as one batch).
class Fabric {
public:
    /// Validates and builds the fabric. Throws ConfigError.
    explicit Fabric(TopologyConfig config);

    Fabric(const Fabric&) = delete;
    Fabric& operator=(const Fabric&) = delete;

    const TopologyConfig& config() const { return config_; }
    const std::vector<Link>& links() const { return links_; }
    const std::vector<PathRoute>& routes() const { return routes_; }

    /// Route whose host-A or host-B vNIC address is `vp`.
    std::optional<RouteIndex> find_route(std::string_view vp) const;

    std::size_t bottleneck_link(RouteIndex route) const;
    double bottleneck_rate(RouteIndex route) const;
    double route_delay(RouteIndex route) const;
    bool lossy(RouteIndex route) const;
    /// Line rate of the sending host's NIC, i.e. its edge link.
    double edge_rate(Direction direction) const;

    EventClock& clock() { return clock_; }
    double now() const { return clock_.now(); }

    /// Starts moving `size` bytes along `route` at now(). Throws
    /// std::invalid_argument for an unknown route, zero size or a
    /// non-positive rate cap.
    TransferId open_transfer(RouteIndex route, Direction direction, std::uint64_t size,
                             double injection_rate_cap, TransferHooks hooks = {});

    /// Null once the transfer has finished or been dropped.
    const Transfer* transfer(TransferId id) const;
    std::size_t active_transfers() const;

    /// Current max-min allocation over active transfers.
    std::map<TransferId, double> solve_rates();

    /// Peak queue a burst builds at the route bottleneck when injected at
    /// `injection_rate`: burst * max(0, 1 - R_b / injection_rate). Dropped iff
    /// the peak queue exceeds the bottleneck buffer (the shared pool under
    /// BufferModel::shared). Throws std::logic_error on a lossless route.
    BurstOutcome admit_burst(RouteIndex route, double burst_size, double injection_rate) const;

    /// Processes the next instant with pending work. False when idle.
    bool step();

    /// Runs until nothing is pending. Returns every transfer that finished or
    /// was dropped during the call, in completion order.
    std::vector<TransferResult> run_until_idle();

    /// Steps until `done()` holds or the fabric is idle; returns done().
    template <typename Pred>
    bool run_until(Pred&& done) {
        while (!done()) {
            if (!step()) return done();
        }
        return true;
    }

    std::mt19937_64& rng() { return rng_; }

private:
    void settle();
    void admit_pending();
    void finish_drain(Transfer& transfer);
    std::size_t resource(std::size_t link, Direction direction) const {
        return link * 2 + (direction == Direction::a_to_b ? 0 : 1);
    }

    TopologyConfig config_;
    std::vector<Link> links_;
    std::vector<PathRoute> routes_;
    std::size_t edge_a_ = 0;
    std::size_t edge_b_ = 0;

    EventClock clock_;
    std::mt19937_64 rng_;
    TransferId next_id_ = 1;
    std::map<TransferId, Transfer> transfers_;
    std::vector<TransferId> pending_;
    bool rates_dirty_ = false;
    std::vector<TransferResult> results_;
};

}  // namespace mpr::fabric
