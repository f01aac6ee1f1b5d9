// mpr-bench: runs one experiment and writes its CSV.
#include "mpr/bench/bench.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>

namespace {

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
    std::vector<T> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto comma = text.find(',', pos);
        if (comma == std::string::npos) comma = text.size();
        std::string_view item(text.data() + pos, comma - pos);
        T value{};
        auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
        if (item.empty() || ec != std::errc{} || end != item.data() + item.size())
            throw mpr::bench::BenchError(fmt::format("bad {} '{}'", what, item));
        out.push_back(value);
        pos = comma + 1;
    }
    return out;
}

void summarize(std::ostream& os, const mpr::bench::ExperimentSpec& spec, const std::vector<mpr::bench::ResultRow>& rows,
               double wall) {
    os << fmt::format("{}: {} rows in {:.2f} s wall\n", mpr::bench::to_string(spec.name), rows.size(), wall);
    for (const auto& r : rows)
        os << fmt::format("  paths={:<3} size={:<13} fct={:<12.6g} max_chunk={:<10} avg_chunk={:<12.1f} wrs={}\n",
                          r.paths, r.flow_size, r.fct_s, r.max_chunk_bytes, r.avg_chunk_bytes, r.wr_count);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-path RDMA simulator benchmarks"};
    app.require_subcommand(1);

    std::string topology, paths, sizes, mode, out;
    std::uint64_t seed = 1;
    for (auto name : {"fct_vs_paths", "flow_size_sweep", "mice_elephant", "chunk_trend"}) {
        auto* sub = app.add_subcommand(name, fmt::format("run the {} experiment", name));
        sub->add_option("--topology", topology, "topology INI file (default: built-in reference)");
        sub->add_option("--paths", paths, "comma-separated path counts");
        sub->add_option("--size", sizes, "flow size in bytes, comma-separated for a sweep");
        sub->add_option("--mode", mode, "lossless or lossy (overrides core links)");
        sub->add_option("--seed", seed, "simulation seed");
        sub->add_option("--out", out, "CSV output file (default: stdout)");
    }
    CLI11_PARSE(app, argc, argv);

    try {
        mpr::bench::ExperimentSpec spec;
        spec.name = mpr::bench::parse_experiment(app.get_subcommands().front()->get_name());
        if (!topology.empty()) spec.topology = mpr::fabric::TopologyConfig::load(topology);
        if (!paths.empty()) spec.paths = parse_list<std::size_t>(paths, "path count");
        if (!sizes.empty()) spec.sizes = parse_list<std::uint64_t>(sizes, "size");
        if (!mode.empty()) spec.mode = mpr::fabric::parse_link_mode(mode);
        spec.seed = seed;

        auto t0 = std::chrono::steady_clock::now();
        auto rows = mpr::bench::run(spec);
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        auto csv = mpr::bench::to_csv(rows);
        if (out.empty()) {
            std::cout << csv;
        } else {
            std::ofstream file(out, std::ios::binary);
            if (!file) throw mpr::bench::BenchError(fmt::format("cannot write '{}'", out));
            file << csv;
        }
        summarize(std::cerr, spec, rows, wall);
    } catch (const std::exception& e) {
        std::cerr << "mpr-bench: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
