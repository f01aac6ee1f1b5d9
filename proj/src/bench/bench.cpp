#include "mpr/bench/bench.hpp"

#include "mpr/core/connection.hpp"
#include "mpr/verbs/verbs.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <memory>

namespace mpr::bench {

namespace {

using fabric::LinkMode;
using fabric::TopologyConfig;
using verbs::Side;

const std::vector<std::size_t> kDefaultPaths{1, 2, 4, 6, 8, 10};
const std::vector<std::size_t> kTrendPaths{1, 2, 4, 6, 8};
const std::vector<std::uint64_t> kSweepSizes{10'000'000, 100'000'000, 1'000'000'000, 100'000'000'000};
constexpr std::uint64_t kGB = 1'000'000'000;
constexpr std::uint64_t kTrendSize = 200'000'000;

std::vector<std::string> vps(const fabric::Fabric& fab, Side side, std::size_t first, std::size_t count) {
    std::vector<std::string> out;
    for (std::size_t i = first; i < first + count; ++i) {
        const auto& r = fab.routes()[i];
        out.push_back(side == Side::a ? r.vp_id : r.peer_vp_id);
    }
    return out;
}

// One simulated testbed: a network and both endpoints' contexts.
struct Bed {
    verbs::Network net;
    core::ControlChannel channel;
    core::MpContext a;
    core::MpContext b;

    explicit Bed(TopologyConfig config)
        : net(std::move(config)), channel(net), a(net, channel, Side::a), b(net, channel, Side::b) {
        b.listen();
    }

    std::pair<core::Connection*, core::Connection*> connect(std::size_t first, std::size_t count,
                                                            core::ConnParams params = {}) {
        auto& conn = a.connect(vps(net.fabric(), Side::a, first, count), vps(net.fabric(), Side::b, first, count),
                               params);
        return {&conn, b.last_accepted()};
    }
};

core::RemoteRegion advertise(Bed& bed, core::Connection& from, core::Connection& to, verbs::MrId mr) {
    std::size_t before = to.remote_regions().size();
    from.advertise_region(mr);
    bed.net.run_until([&] { return to.remote_regions().size() > before; });
    if (to.remote_regions().size() == before) throw BenchError("region advertisement never arrived");
    return to.remote_regions().back();
}

TopologyConfig prepared(const ExperimentSpec& spec) {
    TopologyConfig t = spec.topology;
    if (t.cores.empty()) t = spec.name == Experiment::chunk_trend ? reference_lossy_topology() : reference_topology();
    if (spec.mode)
        for (auto& core : t.cores) core.mode = *spec.mode;
    t.seed = spec.seed;
    return t;
}

void check_paths(const std::vector<std::size_t>& paths, const TopologyConfig& t) {
    if (paths.empty()) throw BenchError("no path counts given");
    for (auto n : paths) {
        if (n == 0) throw BenchError("path count must be at least 1");
        if (n > t.cores.size())
            throw BenchError(fmt::format("path count {} exceeds the topology's {} core links", n, t.cores.size()));
    }
}

bool any_lossy(const TopologyConfig& t) {
    return std::any_of(t.cores.begin(), t.cores.end(), [](const auto& c) { return c.mode == LinkMode::lossy; });
}

ResultRow row(Experiment e, std::size_t paths, std::uint64_t size, const TransferRun& run) {
    return ResultRow{std::string(to_string(e)), paths, size, run.fct, run.max_chunk, run.avg_chunk, run.wr_count};
}

}  // namespace

std::string_view to_string(Experiment e) {
    switch (e) {
    case Experiment::fct_vs_paths: return "fct_vs_paths";
    case Experiment::flow_size_sweep: return "flow_size_sweep";
    case Experiment::mice_elephant: return "mice_elephant";
    case Experiment::chunk_trend: return "chunk_trend";
    }
    return "?";
}

Experiment parse_experiment(std::string_view text) {
    for (auto e : {Experiment::fct_vs_paths, Experiment::flow_size_sweep, Experiment::mice_elephant,
                   Experiment::chunk_trend})
        if (text == to_string(e)) return e;
    throw BenchError(fmt::format("unknown experiment '{}'", text));
}

TopologyConfig reference_topology(std::size_t paths, LinkMode mode) {
    return TopologyConfig::reference(paths, 1e9, 10e9, mode);
}

TopologyConfig reference_lossy_topology(std::size_t paths) {
    auto t = TopologyConfig::reference(paths, 1e9, 10e9, LinkMode::lossy);
    t.buffer_model = fabric::BufferModel::shared;
    t.shared_buffer = 700'000;
    t.jitter = 2e-6;
    return t;
}

TransferRun run_transfer(const TopologyConfig& topology, std::size_t paths, std::uint64_t size,
                         const engine::EngineConfig& config) {
    if (size == 0) throw BenchError("flow size must be positive");
    Bed bed(topology);
    auto [tx_conn, rx_conn] = bed.connect(0, paths);
    engine::Engine tx(*tx_conn, config);
    tx.probe();

    auto src = tx_conn->reg_mr(size, verbs::Backing::none);
    auto dst = rx_conn->reg_mr(size, verbs::Backing::none);
    auto region = advertise(bed, *rx_conn, *tx_conn, dst);

    double start = bed.net.now();
    std::uint64_t copies_before = bed.net.copy_stats().middleware_copies;
    tx.mp_post(engine::MpWorkRequest{1, engine::MpVerb::write, verbs::Sge{src, 0, size},
                                     engine::RemoteTarget{region, 0}});
    auto done = tx.wait(1);
    if (done.status != engine::MpStatus::success) throw BenchError(fmt::format("transfer of {} bytes failed", size));

    TransferRun run;
    run.fct = done.time - start;
    run.max_chunk = tx.stats().max_ok_wr;
    run.avg_chunk = tx.stats().mean_ok_wr();
    run.wr_count = done.wr_count;
    run.planned_wrs = tx.stats().plans.back().planned_wrs;
    run.retries = tx.stats().retries;
    run.middleware_copies = bed.net.copy_stats().middleware_copies - copies_before;
    run.path_bytes = tx.stats().plans.back().path_bytes;
    return run;
}

std::vector<ResultRow> run_fct_vs_paths(const ExperimentSpec& spec) {
    auto t = prepared(spec);
    if (any_lossy(t)) throw BenchError("fct_vs_paths needs a lossless topology");
    auto paths = spec.paths.empty() ? kDefaultPaths : spec.paths;
    check_paths(paths, t);
    std::uint64_t size = spec.sizes.empty() ? kGB : spec.sizes.front();
    std::vector<ResultRow> rows;
    for (auto n : paths) rows.push_back(row(spec.name, n, size, run_transfer(t, n, size)));
    return rows;
}

std::vector<ResultRow> run_flow_size_sweep(const ExperimentSpec& spec) {
    auto t = prepared(spec);
    auto paths = spec.paths.empty() ? kDefaultPaths : spec.paths;
    check_paths(paths, t);
    auto sizes = spec.sizes.empty() ? kSweepSizes : spec.sizes;
    std::vector<ResultRow> rows;
    for (auto size : sizes)
        for (auto n : paths) rows.push_back(row(spec.name, n, size, run_transfer(t, n, size)));
    return rows;
}

std::vector<ResultRow> run_mice_elephant(const ExperimentSpec& spec) {
    auto t = prepared(spec);
    const auto& mice = spec.mice;
    if (mice.count == 0 || mice.size == 0 || mice.interval <= 0.0) throw BenchError("bad mice flow settings");
    std::size_t split = spec.paths.empty() ? mice.elephant_paths : spec.paths.front();
    check_paths({split}, t);
    std::uint64_t mice_size = spec.sizes.empty() ? mice.size : spec.sizes.front();

    // Elephant: a constant-rate source at one core link's capacity.
    const double elephant_rate = t.cores.front().rate;
    const double horizon = mice.interval * static_cast<double>(mice.count) + 1.0;
    auto elephant_size = static_cast<std::uint64_t>(elephant_rate * horizon);

    std::vector<ResultRow> rows;
    for (std::size_t scenario : {std::size_t{0}, std::size_t{1}, split}) {
        Bed bed(t);
        auto [mtx, mrx] = bed.connect(0, 1);
        engine::Engine mice_tx(*mtx);
        mice_tx.set_caps({1.0});
        auto msrc = mtx->reg_mr(mice_size, verbs::Backing::none);
        auto mregion = advertise(bed, *mrx, *mtx, mrx->reg_mr(mice_size, verbs::Backing::none));

        std::unique_ptr<engine::Engine> ele;
        if (scenario > 0) {
            core::ConnParams params;
            params.rate_limit_total = elephant_rate;
            auto [etx, erx] = bed.connect(0, scenario, params);
            ele = std::make_unique<engine::Engine>(*etx);
            ele->set_caps(std::vector<double>(scenario, 1.0));
            auto esrc = etx->reg_mr(elephant_size, verbs::Backing::none);
            auto eregion = advertise(bed, *erx, *etx, erx->reg_mr(elephant_size, verbs::Backing::none));
            ele->mp_post(engine::MpWorkRequest{1, engine::MpVerb::write, verbs::Sge{esrc, 0, elephant_size},
                                               engine::RemoteTarget{eregion, 0}});
        }

        double t0 = bed.net.now();
        std::vector<double> starts(mice.count);
        for (std::size_t i = 0; i < mice.count; ++i) {
            starts[i] = t0 + mice.interval * static_cast<double>(i) + mice.interval / 2;
            bed.net.fabric().clock().schedule_at(starts[i], [&mice_tx, msrc, mregion, mice_size, i] {
                mice_tx.mp_post(engine::MpWorkRequest{i + 1, engine::MpVerb::write, verbs::Sge{msrc, 0, mice_size},
                                                      engine::RemoteTarget{mregion, 0}});
            });
        }
        for (std::size_t i = 0; i < mice.count; ++i) {
            auto done = mice_tx.wait(i + 1);
            if (done.status != engine::MpStatus::success) throw BenchError("mice flow failed");
            rows.push_back(ResultRow{std::string(to_string(spec.name)), scenario, mice_size, done.time - starts[i],
                                     mice_size, static_cast<double>(mice_size), done.wr_count});
        }
        bed.net.run_until_idle();
    }
    return rows;
}

std::vector<ResultRow> run_chunk_trend(const ExperimentSpec& spec) {
    auto t = prepared(spec);
    if (!any_lossy(t)) throw BenchError("chunk_trend needs a lossy topology");
    auto paths = spec.paths.empty() ? kTrendPaths : spec.paths;
    check_paths(paths, t);
    std::uint64_t size = spec.sizes.empty() ? kTrendSize : spec.sizes.front();
    std::vector<ResultRow> rows;
    for (auto n : paths) rows.push_back(row(spec.name, n, size, run_transfer(t, n, size)));
    return rows;
}

std::vector<ResultRow> run(const ExperimentSpec& spec) {
    switch (spec.name) {
    case Experiment::fct_vs_paths: return run_fct_vs_paths(spec);
    case Experiment::flow_size_sweep: return run_flow_size_sweep(spec);
    case Experiment::mice_elephant: return run_mice_elephant(spec);
    case Experiment::chunk_trend: return run_chunk_trend(spec);
    }
    throw BenchError("unknown experiment");
}

std::string to_csv(const std::vector<ResultRow>& rows) {
    std::string out(kCsvHeader);
    out += '\n';
    for (const auto& r : rows)
        out += fmt::format("{},{},{},{:.9e},{},{:.1f},{}\n", r.experiment, r.paths, r.flow_size, r.fct_s,
                           r.max_chunk_bytes, r.avg_chunk_bytes, r.wr_count);
    return out;
}

}  // namespace mpr::bench
