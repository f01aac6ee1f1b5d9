#include "mpr/bench/bench.hpp"

#include <doctest.h>

#include <map>

using namespace mpr;
using namespace mpr::bench;
using fabric::LinkMode;

namespace {

ExperimentSpec spec_for(Experiment e) {
    ExperimentSpec s;
    s.name = e;
    return s;
}

double fct_of(const std::vector<ResultRow>& rows, std::size_t paths, std::uint64_t size) {
    for (const auto& r : rows)
        if (r.paths == paths && r.flow_size == size) return r.fct_s;
    FAIL("row missing");
    return 0;
}

}  // namespace

TEST_CASE("fct_vs_paths: 1 GB over 1, 2 and 10 paths") {
    auto rows = run(spec_for(Experiment::fct_vs_paths));
    REQUIRE(rows.size() == 6);
    CHECK(fct_of(rows, 1, 1'000'000'000) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(fct_of(rows, 2, 1'000'000'000) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(fct_of(rows, 10, 1'000'000'000) == doctest::Approx(0.1).epsilon(1e-6));
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].fct_s < rows[i - 1].fct_s);
}

TEST_CASE("fct never beats size over aggregate bottleneck rate") {
    auto s = spec_for(Experiment::flow_size_sweep);
    s.sizes = {1, 4095, 4096, 1'000'000, 10'000'000, 1'000'000'000};
    for (const auto& r : run(s)) {
        CHECK(r.fct_s > 0);
        double agg = std::min(1e9 * double(r.paths), 10e9);
        CHECK(r.fct_s >= double(r.flow_size) / agg * (1 - 1e-9));
    }
}

TEST_CASE("flow_size_sweep: ratio near n, and 1 below one block") {
    auto s = spec_for(Experiment::flow_size_sweep);
    s.sizes = {10'000'000, 1'000'000'000, 2000};
    s.paths = {1, 4, 10};
    auto rows = run(s);
    CHECK(fct_of(rows, 1, 10'000'000) / fct_of(rows, 4, 10'000'000) == doctest::Approx(4).epsilon(0.1));
    CHECK(fct_of(rows, 1, 1'000'000'000) / fct_of(rows, 10, 1'000'000'000) == doctest::Approx(10).epsilon(0.1));
    CHECK(fct_of(rows, 1, 2000) / fct_of(rows, 10, 2000) == doctest::Approx(1).epsilon(0.01));
    for (const auto& r : rows)
        if (r.flow_size == 2000) CHECK(r.wr_count == 1);
}

TEST_CASE("mice_elephant: half share unsplit, residual share split, baseline alone") {
    auto rows = run(spec_for(Experiment::mice_elephant));
    REQUIRE(rows.size() == 15);
    std::map<std::size_t, std::vector<double>> by;
    for (const auto& r : rows) by[r.paths].push_back(r.fct_s);
    double isolated = 262144 / 1e9;
    for (double f : by[0]) CHECK(f == doctest::Approx(isolated));
    for (double f : by[1]) CHECK(f == doctest::Approx(2 * isolated).epsilon(0.01));
    for (double f : by[10]) CHECK(f == doctest::Approx(isolated / 0.9).epsilon(0.01));
}

TEST_CASE("chunk_trend: rising max, average dips at two paths") {
    auto rows = run(spec_for(Experiment::chunk_trend));
    REQUIRE(rows.size() == 5);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].max_chunk_bytes > rows[i - 1].max_chunk_bytes);
    CHECK(rows[1].avg_chunk_bytes < rows[0].avg_chunk_bytes);
    for (const auto& r : rows) {
        CHECK(r.max_chunk_bytes % 4096 == 0);
        CHECK(r.avg_chunk_bytes <= double(r.max_chunk_bytes));
    }
}

TEST_CASE("chunk_trend: with injection at core rate nothing drops and chunks reach the sub-flow") {
    auto s = spec_for(Experiment::chunk_trend);
    s.paths = {10};
    s.sizes = {40'000'000};
    auto r = run(s).at(0);
    // Per path: 64K, 128K, 256K, 512K, 1M, then the 1,968,384 bytes left of 4 MB.
    CHECK(r.max_chunk_bytes > 1'900'000);  // probe jitter moves sub-flows by a few kB
    CHECK(r.wr_count == 60);
    auto tr = run_transfer(reference_lossy_topology(), 10, 40'000'000);
    CHECK(tr.retries == 0);
}

TEST_CASE("csv: header, column order, fixed formatting") {
    std::vector<ResultRow> rows{{"fct_vs_paths", 2, 1000, 0.5, 500, 500.0, 2}};
    CHECK(to_csv(rows) ==
          "experiment,paths,flow_size,fct_s,max_chunk_bytes,avg_chunk_bytes,wr_count\n"
          "fct_vs_paths,2,1000,5.000000000e-01,500,500.0,2\n");
}

TEST_CASE("same seed, same CSV; jitter seed changes lossy results") {
    auto s = spec_for(Experiment::chunk_trend);
    s.topology = reference_lossy_topology();
    s.topology.jitter = 5e-5;
    s.seed = 3;
    auto a = to_csv(run(s));
    CHECK(a == to_csv(run(s)));
    s.seed = 4;
    CHECK(a != to_csv(run(s)));
}

TEST_CASE("spec errors") {
    auto s = spec_for(Experiment::fct_vs_paths);
    s.mode = LinkMode::lossy;
    CHECK_THROWS_AS(run(s), BenchError);
    s = spec_for(Experiment::chunk_trend);
    s.mode = LinkMode::lossless;
    CHECK_THROWS_AS(run(s), BenchError);
    s = spec_for(Experiment::fct_vs_paths);
    s.paths = {11};
    CHECK_THROWS_AS(run(s), BenchError);
    s.paths = {0};
    CHECK_THROWS_AS(run(s), BenchError);
    s.paths = {};
    s.sizes = {0};
    CHECK_THROWS_AS(run(s), BenchError);
    CHECK_THROWS_AS(parse_experiment("fct"), BenchError);
    CHECK(parse_experiment("mice_elephant") == Experiment::mice_elephant);
}

TEST_CASE("shipped configs match the built-in reference topologies") {
    auto lossless = fabric::TopologyConfig::load(MPR_SOURCE_DIR "/configs/reference_lossless.ini");
    auto lossy = fabric::TopologyConfig::load(MPR_SOURCE_DIR "/configs/reference_lossy.ini");
    CHECK(lossless.to_text() == reference_topology().to_text());
    CHECK(lossy.to_text() == reference_lossy_topology().to_text());
}
