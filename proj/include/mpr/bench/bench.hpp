#pragma once

#include "mpr/engine/engine.hpp"
#include "mpr/fabric/topology.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mpr::bench {

class BenchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Experiment { fct_vs_paths, flow_size_sweep, mice_elephant, chunk_trend };

std::string_view to_string(Experiment e);
Experiment parse_experiment(std::string_view text);

struct MiceConfig {
    std::uint64_t size = 256 * 1024;
    std::size_t count = 5;
    double interval = 2.0;  // seconds between mice starts
    std::size_t elephant_paths = 10;
};

struct ExperimentSpec {
    Experiment name = Experiment::fct_vs_paths;
    fabric::TopologyConfig topology;
    /// Empty: the experiment's default list.
    std::vector<std::uint64_t> sizes;
    std::vector<std::size_t> paths;
    /// Forces every core link to this mode.
    std::optional<fabric::LinkMode> mode;
    std::uint64_t seed = 1;
    MiceConfig mice;
};

/// One CSV line. For mice_elephant, `paths` is the number of paths the
/// elephant is split over (0: no elephant) and each row is one mice flow.
/// wr_count stands in for CPU cost: data WRs posted, retries included.
struct ResultRow {
    std::string experiment;
    std::size_t paths = 0;
    std::uint64_t flow_size = 0;
    double fct_s = 0.0;
    std::uint64_t max_chunk_bytes = 0;
    double avg_chunk_bytes = 0.0;
    std::uint64_t wr_count = 0;
};

/// Outcome of one MP_WRITE over a fresh fabric.
struct TransferRun {
    double fct = 0.0;
    std::uint64_t max_chunk = 0;
    double avg_chunk = 0.0;
    std::uint64_t wr_count = 0;
    std::uint64_t planned_wrs = 0;
    std::uint64_t retries = 0;
    std::uint64_t middleware_copies = 0;
    std::vector<std::uint64_t> path_bytes;
};

/// Builds the fabric, connects over the first `paths` core links, probes,
/// and times one MP_WRITE of `size` bytes between virtual MRs.
TransferRun run_transfer(const fabric::TopologyConfig& topology, std::size_t paths, std::uint64_t size,
                         const engine::EngineConfig& config = {});

/// Reference testbed: `paths` core links at 1 GB/s behind 10 GB/s edges.
fabric::TopologyConfig reference_topology(std::size_t paths = 10, fabric::LinkMode mode = fabric::LinkMode::lossless);
/// Lossy variant used by chunk_trend: one shared ToR buffer pool.
fabric::TopologyConfig reference_lossy_topology(std::size_t paths = 10);

std::vector<ResultRow> run_fct_vs_paths(const ExperimentSpec& spec);
std::vector<ResultRow> run_flow_size_sweep(const ExperimentSpec& spec);
std::vector<ResultRow> run_mice_elephant(const ExperimentSpec& spec);
std::vector<ResultRow> run_chunk_trend(const ExperimentSpec& spec);
std::vector<ResultRow> run(const ExperimentSpec& spec);

constexpr std::string_view kCsvHeader =
    "experiment,paths,flow_size,fct_s,max_chunk_bytes,avg_chunk_bytes,wr_count";

std::string to_csv(const std::vector<ResultRow>& rows);

}  // namespace mpr::bench
