#include "mpr/fabric/fabric.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace mpr::fabric {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Relative slack for "this transfer drains at the chosen instant" and for
// saturation tests in the solver.
constexpr double kRelEps = 1e-12;

void validate_link(const LinkConfig& link) {
    if (!(link.rate > 0.0) || !std::isfinite(link.rate))
        throw ConfigError(fmt::format("link '{}' needs a positive rate", link.id));
    if (link.buffer < 0.0) throw ConfigError(fmt::format("link '{}' has a negative buffer", link.id));
    if (link.delay < 0.0) throw ConfigError(fmt::format("link '{}' has a negative delay", link.id));
}

Link to_link(const LinkConfig& config) {
    return Link{config.id, config.rate, config.delay, config.buffer, config.mode};
}

}  // namespace

Fabric::Fabric(TopologyConfig config) : config_(std::move(config)), rng_(config_.seed) {
    if (config_.cores.empty()) throw ConfigError("topology needs at least one core link");
    if (config_.jitter < 0.0) throw ConfigError("jitter must be non-negative");
    if (config_.control_delay < 0.0) throw ConfigError("control_delay must be non-negative");
    if (config_.buffer_model == BufferModel::shared && config_.shared_buffer < 0.0)
        throw ConfigError("shared_buffer must be non-negative");

    validate_link(config_.edge_a);
    validate_link(config_.edge_b);
    edge_a_ = links_.size();
    links_.push_back(to_link(config_.edge_a));
    edge_b_ = links_.size();
    links_.push_back(to_link(config_.edge_b));

    std::set<std::string> link_ids{config_.edge_a.id, config_.edge_b.id};
    std::set<std::string> vps;
    for (const auto& core : config_.cores) {
        validate_link(core);
        if (!link_ids.insert(core.id).second)
            throw ConfigError(fmt::format("duplicate link id '{}'", core.id));
        if (core.vp_a == core.vp_b || !vps.insert(core.vp_a).second || !vps.insert(core.vp_b).second)
            throw ConfigError(fmt::format("duplicate vp id on link '{}'", core.id));
        std::size_t index = links_.size();
        links_.push_back(to_link(core));
        routes_.push_back(PathRoute{core.vp_a, core.vp_b, {edge_a_, index, edge_b_}});
    }
}

std::optional<RouteIndex> Fabric::find_route(std::string_view vp) const {
    for (RouteIndex i = 0; i < routes_.size(); ++i) {
        if (routes_[i].vp_id == vp || routes_[i].peer_vp_id == vp) return i;
    }
    return std::nullopt;
}

std::size_t Fabric::bottleneck_link(RouteIndex route) const {
    const auto& hops = routes_.at(route).links;
    std::size_t best = hops.front();
    for (std::size_t link : hops) {
        if (links_[link].rate < links_[best].rate) best = link;
    }
    return best;
}

double Fabric::bottleneck_rate(RouteIndex route) const {
    return links_[bottleneck_link(route)].rate;
}

double Fabric::route_delay(RouteIndex route) const {
    double delay = 0.0;
    for (std::size_t link : routes_.at(route).links) delay += links_[link].prop_delay;
    return delay;
}

bool Fabric::lossy(RouteIndex route) const {
    return links_[bottleneck_link(route)].mode == LinkMode::lossy;
}

double Fabric::edge_rate(Direction direction) const {
    return links_[direction == Direction::a_to_b ? edge_a_ : edge_b_].rate;
}

TransferId Fabric::open_transfer(RouteIndex route, Direction direction, std::uint64_t size,
                                 double injection_rate_cap, TransferHooks hooks) {
    if (route >= routes_.size()) throw std::invalid_argument(fmt::format("unknown route {}", route));
    if (size == 0) throw std::invalid_argument("transfer size must be positive");
    if (!(injection_rate_cap > 0.0)) throw std::invalid_argument("injection rate cap must be positive");

    Transfer transfer;
    transfer.id = next_id_++;
    transfer.route = route;
    transfer.direction = direction;
    transfer.size = size;
    transfer.start_time = now();
    transfer.injection_rate_cap = injection_rate_cap;
    transfer.remaining = static_cast<double>(size);
    transfer.hooks = std::move(hooks);
    if (lossy(route)) {
        transfer.state = TransferState::pending_admission;
        pending_.push_back(transfer.id);
    } else {
        transfer.state = TransferState::active;
        rates_dirty_ = true;
    }
    TransferId id = transfer.id;
    transfers_.emplace(id, std::move(transfer));
    return id;
}

const Transfer* Fabric::transfer(TransferId id) const {
    auto it = transfers_.find(id);
    return it == transfers_.end() ? nullptr : &it->second;
}

std::size_t Fabric::active_transfers() const {
    return static_cast<std::size_t>(std::count_if(transfers_.begin(), transfers_.end(), [](const auto& kv) {
        return kv.second.state == TransferState::active;
    }));
}

std::map<TransferId, double> Fabric::solve_rates() {
    // Progressive filling: every unfrozen transfer sits at the same water
    // level; raise it until a resource saturates or a transfer hits its cap.
    std::vector<Transfer*> flows;
    for (auto& [id, t] : transfers_) {
        if (t.state == TransferState::active) flows.push_back(&t);
    }

    std::vector<double> capacity(links_.size() * 2);
    for (std::size_t l = 0; l < links_.size(); ++l) {
        capacity[resource(l, Direction::a_to_b)] = links_[l].rate;
        capacity[resource(l, Direction::b_to_a)] = links_[l].rate;
    }
    std::vector<double> residual = capacity;
    std::vector<std::size_t> users(capacity.size(), 0);
    std::vector<bool> frozen(flows.size(), false);
    auto uses = [&](const Transfer& t, auto&& fn) {
        for (std::size_t link : routes_[t.route].links) fn(resource(link, t.direction));
    };
    for (const Transfer* t : flows) uses(*t, [&](std::size_t r) { ++users[r]; });

    double level = 0.0;
    std::size_t unfrozen = flows.size();
    while (unfrozen > 0) {
        double delta = kInf;
        for (std::size_t r = 0; r < residual.size(); ++r) {
            if (users[r] > 0) delta = std::min(delta, residual[r] / static_cast<double>(users[r]));
        }
        for (std::size_t i = 0; i < flows.size(); ++i) {
            if (!frozen[i]) delta = std::min(delta, flows[i]->injection_rate_cap - level);
        }
        delta = std::max(delta, 0.0);
        level += delta;
        for (std::size_t r = 0; r < residual.size(); ++r) {
            residual[r] -= delta * static_cast<double>(users[r]);
        }

        std::vector<bool> saturated(residual.size(), false);
        for (std::size_t r = 0; r < residual.size(); ++r) {
            saturated[r] = users[r] > 0 && residual[r] <= kRelEps * capacity[r];
        }
        bool progress = false;
        for (std::size_t i = 0; i < flows.size(); ++i) {
            if (frozen[i]) continue;
            Transfer& t = *flows[i];
            bool stop = t.injection_rate_cap - level <= kRelEps * t.injection_rate_cap;
            uses(t, [&](std::size_t r) { stop = stop || saturated[r]; });
            if (stop) {
                frozen[i] = true;
                t.rate = level;
                uses(t, [&](std::size_t r) { --users[r]; });
                --unfrozen;
                progress = true;
            }
        }
        if (!progress) break;  // unreachable with finite caps; guards float corner cases
    }

    std::map<TransferId, double> rates;
    for (std::size_t i = 0; i < flows.size(); ++i) {
        if (!frozen[i]) flows[i]->rate = level;
        rates.emplace(flows[i]->id, flows[i]->rate);
    }
    rates_dirty_ = false;
    return rates;
}

BurstOutcome Fabric::admit_burst(RouteIndex route, double burst_size, double injection_rate) const {
    if (route >= routes_.size()) throw std::invalid_argument(fmt::format("unknown route {}", route));
    if (!lossy(route)) throw std::logic_error("admit_burst called on a lossless route");
    if (!(injection_rate > 0.0)) throw std::invalid_argument("injection rate must be positive");
    double bottleneck = bottleneck_rate(route);
    double queue = burst_size * std::max(0.0, 1.0 - bottleneck / injection_rate);
    double buffer = config_.buffer_model == BufferModel::shared ? config_.shared_buffer
                                                                : links_[bottleneck_link(route)].buffer;
    return queue > buffer ? BurstOutcome::dropped : BurstOutcome::admitted;
}

void Fabric::admit_pending() {
    std::vector<TransferId> batch;
    batch.swap(pending_);

    // A sending NIC splits its line rate over every burst it has in flight.
    std::size_t in_flight[2] = {0, 0};
    for (const auto& [id, t] : transfers_) {
        if (t.state == TransferState::active || t.state == TransferState::pending_admission)
            ++in_flight[t.direction == Direction::a_to_b ? 0 : 1];
    }

    std::vector<bool> drop(batch.size(), false);
    double shared_queue[2] = {0.0, 0.0};
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Transfer& t = transfers_.at(batch[i]);
        std::size_t dir = t.direction == Direction::a_to_b ? 0 : 1;
        double injection = std::min(edge_rate(t.direction) / static_cast<double>(in_flight[dir]),
                                    t.injection_rate_cap);
        if (config_.buffer_model == BufferModel::shared) {
            double bottleneck = bottleneck_rate(t.route);
            shared_queue[dir] += static_cast<double>(t.size) * std::max(0.0, 1.0 - bottleneck / injection);
        } else {
            drop[i] = admit_burst(t.route, static_cast<double>(t.size), injection) == BurstOutcome::dropped;
        }
    }
    if (config_.buffer_model == BufferModel::shared) {
        // Overflowing the pool hits every port that is bursting into it.
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Transfer& t = transfers_.at(batch[i]);
            drop[i] = shared_queue[t.direction == Direction::a_to_b ? 0 : 1] > config_.shared_buffer;
        }
    }

    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto it = transfers_.find(batch[i]);
        if (!drop[i]) {
            it->second.state = TransferState::active;
            rates_dirty_ = true;
            continue;
        }
        it->second.state = TransferState::dropped;
        results_.push_back(TransferResult{it->first, true, now()});
        auto on_dropped = std::move(it->second.hooks.on_dropped);
        transfers_.erase(it);
        if (on_dropped) on_dropped();
    }
}

void Fabric::settle() {
    while (!pending_.empty()) admit_pending();
    if (rates_dirty_) solve_rates();
}

void Fabric::finish_drain(Transfer& transfer) {
    transfer.state = TransferState::drained;
    transfer.remaining = 0.0;
    transfer.rate = 0.0;
    rates_dirty_ = true;

    double delay = route_delay(transfer.route);
    if (config_.jitter > 0.0) delay += std::uniform_real_distribution<double>(0.0, config_.jitter)(rng_);
    TransferId id = transfer.id;
    clock_.schedule_in(delay, [this, id] {
        auto it = transfers_.find(id);
        if (it == transfers_.end()) return;
        it->second.state = TransferState::done;
        it->second.finish_time = now();
        results_.push_back(TransferResult{id, false, now()});
        auto on_delivered = std::move(it->second.hooks.on_delivered);
        transfers_.erase(it);
        if (on_delivered) on_delivered();
    });
    if (transfer.hooks.on_drained) {
        auto on_drained = std::move(transfer.hooks.on_drained);
        on_drained();
    }
}

bool Fabric::step() {
    settle();

    double t_event = clock_.empty() ? kInf : clock_.next_time();
    double t_drain = kInf;
    for (const auto& [id, t] : transfers_) {
        if (t.state == TransferState::active && t.rate > 0.0)
            t_drain = std::min(t_drain, now() + t.remaining / t.rate);
    }
    double t_next = std::min(t_event, t_drain);
    if (t_next == kInf) return false;

    double start = now();
    double dt = std::max(0.0, t_next - start);
    double slack = kRelEps * std::max(1.0, t_next);
    std::vector<TransferId> drained;
    for (auto& [id, t] : transfers_) {
        if (t.state != TransferState::active || t.rate <= 0.0) continue;
        if (start + t.remaining / t.rate <= t_next + slack) {
            drained.push_back(id);
        } else {
            t.remaining = std::max(0.0, t.remaining - t.rate * dt);
        }
    }
    clock_.advance_to(t_next);
    for (TransferId id : drained) {
        auto it = transfers_.find(id);
        if (it != transfers_.end()) finish_drain(it->second);
    }
    clock_.run_due();
    return true;
}

std::vector<TransferResult> Fabric::run_until_idle() {
    std::size_t first = results_.size();
    while (step()) {
    }
    return {results_.begin() + static_cast<std::ptrdiff_t>(first), results_.end()};
}

}  // namespace mpr::fabric
