#include "mpr/simd/checksum.hpp"
#include "mpr/verbs/verbs.hpp"

#include <doctest.h>

#include <map>
#include <random>
#include <set>

using namespace mpr;
using namespace mpr::verbs;
using fabric::LinkMode;
using fabric::TopologyConfig;

namespace {

struct Pair {
    QpId a;
    QpId b;
};

struct Rig {
    Network net;
    Host& a;
    Host& b;
    PdId pd_a, pd_b;
    CqId cq_a, cq_b;

    explicit Rig(TopologyConfig config)
        : net(std::move(config)), a(net.host(Side::a)), b(net.host(Side::b)) {
        pd_a = a.alloc_pd();
        pd_b = b.alloc_pd();
        cq_a = a.create_cq();
        cq_b = b.create_cq();
    }

    Pair connect(std::size_t path, QpAttrs attrs = {}) {
        const auto& route = net.fabric().routes().at(path);
        QpId qa = a.create_qp(pd_a, route.vp_id, cq_a, cq_a, attrs);
        QpId qb = b.create_qp(pd_b, route.peer_vp_id, cq_b, cq_b, attrs);
        a.connect_qp(qa, route.peer_vp_id, qb, attrs);
        b.connect_qp(qb, route.vp_id, qa, attrs);
        return {qa, qb};
    }
};

TopologyConfig ref(std::size_t paths, LinkMode mode = LinkMode::lossless, double buffer = 1 << 20) {
    return TopologyConfig::reference(paths, 1e9, 10e9, mode, buffer);
}

void fill(std::span<std::byte> bytes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& b : bytes) b = static_cast<std::byte>(rng());
}

WorkRequest wr(std::uint64_t id, Opcode op, Sge local, std::optional<RemoteAddress> remote = std::nullopt,
               bool signaled = true, std::optional<std::uint64_t> imm = std::nullopt) {
    WorkRequest w;
    w.wr_id = id;
    w.opcode = op;
    w.local = local;
    w.remote = remote;
    w.signaled = signaled;
    w.imm = imm;
    return w;
}

WorkRequest write_wr(std::uint64_t id, MrId mr, std::uint64_t off, std::uint64_t len, std::uint32_t rkey,
                     std::uint64_t roff) {
    return wr(id, Opcode::write, Sge{mr, off, len}, RemoteAddress{rkey, roff}, true, std::nullopt);
}

}  // namespace

TEST_CASE("alloc_pd returns distinct ids") {
    Rig rig(ref(1));
    PdId x = rig.a.alloc_pd();
    PdId y = rig.a.alloc_pd();
    CHECK(x != y);
    CHECK(x != rig.pd_a);
}

TEST_CASE("PD isolation: local MR from another PD is rejected at post") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    PdId other = rig.a.alloc_pd();
    MrId foreign = rig.a.reg_mr(other, 4096);
    MrId dst = rig.b.reg_mr(rig.pd_b, 4096);
    CHECK_THROWS_AS(rig.a.post_send(p.a, write_wr(1, foreign, 0, 64, rig.b.mr_info(dst).rkey, 0)), VerbsError);
}

TEST_CASE("PD isolation: remote MR outside the peer QP's PD gives a remote access error") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 4096);
    fill(rig.a.mr_bytes(src), 1);
    PdId other = rig.b.alloc_pd();
    MrId dst = rig.b.reg_mr(other, 4096);
    rig.a.post_send(p.a, write_wr(7, src, 0, 4096, rig.b.mr_info(dst).rkey, 0));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::remote_access_error);
    for (auto b : rig.b.mr_bytes(dst)) REQUIRE(b == std::byte{0});
}

TEST_CASE("two QPs in one PD write into one MR") {
    Rig rig(ref(2));
    Pair p0 = rig.connect(0);
    Pair p1 = rig.connect(1);
    MrId src = rig.a.reg_mr(rig.pd_a, 8192);
    fill(rig.a.mr_bytes(src), 2);
    MrId dst = rig.b.reg_mr(rig.pd_b, 8192);
    auto rkey = rig.b.mr_info(dst).rkey;
    rig.a.post_send(p0.a, write_wr(1, src, 0, 4096, rkey, 0));
    rig.a.post_send(p1.a, write_wr(2, src, 4096, 4096, rkey, 4096));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 2);
    for (auto& c : wc) CHECK(c.status == WcStatus::success);
    CHECK(simd::checksum(rig.a.mr_bytes(src)) == simd::checksum(rig.b.mr_bytes(dst)));
}

TEST_CASE("reg_mr: length, zero fill, unique rkeys, zero length rejected") {
    Rig rig(ref(1));
    MrId m1 = rig.a.reg_mr(rig.pd_a, 1 << 20);
    MrId m2 = rig.a.reg_mr(rig.pd_a, 1 << 20);
    MrId m3 = rig.b.reg_mr(rig.pd_b, 64);
    CHECK(rig.a.mr_info(m1).length == (1u << 20));
    CHECK(rig.a.mr_bytes(m1).size() == (1u << 20));
    for (auto b : rig.a.mr_bytes(m1)) REQUIRE(b == std::byte{0});
    std::set<std::uint32_t> keys{rig.a.mr_info(m1).rkey, rig.a.mr_info(m2).rkey, rig.b.mr_info(m3).rkey};
    CHECK(keys.size() == 3);
    CHECK_THROWS_AS(rig.a.reg_mr(rig.pd_a, 0), VerbsError);

    MrId virt = rig.a.reg_mr(rig.pd_a, 100'000'000'000ull, Backing::none);
    CHECK(rig.a.mr_info(virt).length == 100'000'000'000ull);
    CHECK(rig.a.mr_bytes(virt).empty());
}

TEST_CASE("out-of-bounds WR completes with a local access error") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 4096);
    MrId dst = rig.b.reg_mr(rig.pd_b, 1 << 16);
    rig.a.post_send(p.a, write_wr(3, src, 4000, 200, rig.b.mr_info(dst).rkey, 0));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::local_access_error);
    CHECK(wc[0].wr_id == 3);

    rig.a.post_send(p.a, write_wr(4, src, 0, 4096, rig.b.mr_info(dst).rkey, (1 << 16) - 100));
    rig.net.run_until_idle();
    wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::remote_access_error);
}

TEST_CASE("create_qp: ten vNIC addresses pin ten distinct routes") {
    Rig rig(ref(10));
    std::set<fabric::RouteIndex> routes;
    for (std::size_t i = 0; i < 10; ++i) {
        Pair p = rig.connect(i);
        routes.insert(rig.a.qp_route(p.a));
        CHECK(rig.a.qp_route(p.a) == rig.b.qp_route(p.b));
        CHECK(rig.a.qp_state(p.a) == QpState::rts);
    }
    CHECK(routes.size() == 10);
}

TEST_CASE("create_qp/connect_qp errors") {
    Rig rig(ref(2));
    CHECK_THROWS_AS(rig.a.create_qp(rig.pd_a, "10.9.9.9", rig.cq_a, rig.cq_a), VerbsError);
    CHECK_THROWS_AS(rig.a.create_qp(rig.pd_a, "10.0.1.2", rig.cq_a, rig.cq_a), VerbsError);  // host B's address

    QpId qa = rig.a.create_qp(rig.pd_a, "10.0.1.1", rig.cq_a, rig.cq_a);
    QpId qb = rig.b.create_qp(rig.pd_b, "10.0.1.2", rig.cq_b, rig.cq_b);
    MrId src = rig.a.reg_mr(rig.pd_a, 64);
    CHECK(rig.a.qp_state(qa) == QpState::init);
    CHECK_THROWS_AS(rig.a.post_send(qa, wr(1, Opcode::send, Sge{src, 0, 8})), VerbsError);
    CHECK_THROWS_AS(rig.a.connect_qp(qa, "10.0.2.2", qb, {}), VerbsError);  // other route's far end
    rig.a.connect_qp(qa, "10.0.1.2", qb, {});
    CHECK_THROWS_AS(rig.a.connect_qp(qa, "10.0.1.2", qb, {}), VerbsError);  // double connect
}

TEST_CASE("mirrored QPs carry data both directions") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId ma = rig.a.reg_mr(rig.pd_a, 1024);
    MrId mb = rig.b.reg_mr(rig.pd_b, 1024);
    fill(rig.a.mr_bytes(ma).subspan(0, 512), 3);
    fill(rig.b.mr_bytes(mb).subspan(512, 512), 4);
    rig.a.post_send(p.a, write_wr(1, ma, 0, 512, rig.b.mr_info(mb).rkey, 0));
    rig.b.post_send(p.b, write_wr(2, mb, 512, 512, rig.a.mr_info(ma).rkey, 512));
    rig.net.run_until_idle();
    CHECK(simd::checksum(rig.a.mr_bytes(ma)) == simd::checksum(rig.b.mr_bytes(mb)));
}

TEST_CASE("WRITE 4 KiB: remote bytes match, receiver CQ stays silent") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 4096);
    MrId dst = rig.b.reg_mr(rig.pd_b, 4096);
    fill(rig.a.mr_bytes(src), 5);
    rig.a.post_send(p.a, write_wr(9, src, 0, 4096, rig.b.mr_info(dst).rkey, 0));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::success);
    CHECK(wc[0].byte_len == 4096);
    CHECK(wc[0].opcode == Opcode::write);
    CHECK(rig.b.cq_depth(rig.cq_b) == 0);
    CHECK(simd::checksum(rig.a.mr_bytes(src)) == simd::checksum(rig.b.mr_bytes(dst)));
    // Fluid FCT through a 1 GB/s core.
    CHECK(wc[0].time == doctest::Approx(4096 / 1e9));
}

TEST_CASE("READ pulls remote bytes and is silent on the target") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId local = rig.a.reg_mr(rig.pd_a, 2048);
    MrId remote = rig.b.reg_mr(rig.pd_b, 2048);
    fill(rig.b.mr_bytes(remote), 6);
    rig.a.post_send(p.a, wr(5, Opcode::read, Sge{local, 0, 2048}, RemoteAddress{rig.b.mr_info(remote).rkey, 0}));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::success);
    CHECK(rig.b.cq_depth(rig.cq_b) == 0);
    CHECK(simd::checksum(rig.a.mr_bytes(local)) == simd::checksum(rig.b.mr_bytes(remote)));
}

TEST_CASE("SEND without a posted RECV fails receiver-not-ready") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 256);
    rig.a.post_send(p.a, wr(1, Opcode::send, Sge{src, 0, 256}));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::rnr_retry_exceeded);
    CHECK(rig.b.cq_depth(rig.cq_b) == 0);
}

TEST_CASE("SEND/RECV: FIFO consumption, byte placement, immediate, empty WRs") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 1024);
    MrId dst = rig.b.reg_mr(rig.pd_b, 1024);
    fill(rig.a.mr_bytes(src), 7);
    rig.b.post_recv(p.b, wr(100, Opcode::recv, Sge{dst, 0, 512}));
    rig.b.post_recv(p.b, wr(101, Opcode::recv, Sge{dst, 512, 0}));
    rig.a.post_send(p.a, wr(1, Opcode::send, Sge{src, 0, 512}));
    rig.a.post_send(p.a, wr(2, Opcode::send, Sge{src, 0, 0}, std::nullopt, true, 4242));
    rig.net.run_until_idle();

    auto rx = rig.b.poll_cq(rig.cq_b, 8);
    REQUIRE(rx.size() == 2);
    CHECK(rx[0].wr_id == 100);
    CHECK(rx[0].byte_len == 512);
    CHECK(rx[1].wr_id == 101);
    CHECK(rx[1].byte_len == 0);
    CHECK(rx[1].imm == std::optional<std::uint64_t>(4242));
    CHECK(simd::checksum(rig.a.mr_bytes(src).subspan(0, 512)) == simd::checksum(rig.b.mr_bytes(dst).subspan(0, 512)));
    for (auto b : rig.b.mr_bytes(dst).subspan(512)) REQUIRE(b == std::byte{0});
    auto tx = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(tx.size() == 2);
    CHECK(tx[0].status == WcStatus::success);
    CHECK(tx[1].status == WcStatus::success);
}

TEST_CASE("SEND into an undersized RECV errors on both sides") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 1024);
    MrId dst = rig.b.reg_mr(rig.pd_b, 1024);
    fill(rig.a.mr_bytes(src), 8);
    rig.b.post_recv(p.b, wr(50, Opcode::recv, Sge{dst, 0, 100}));
    rig.a.post_send(p.a, wr(1, Opcode::send, Sge{src, 0, 1024}));
    rig.net.run_until_idle();
    auto rx = rig.b.poll_cq(rig.cq_b, 8);
    REQUIRE(rx.size() == 1);
    CHECK(rx[0].status == WcStatus::local_length_error);
    auto tx = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(tx.size() == 1);
    CHECK(tx[0].status == WcStatus::remote_op_error);
    for (auto b : rig.b.mr_bytes(dst)) REQUIRE(b == std::byte{0});
}

TEST_CASE("lossy burst over threshold: RETRY_EXC_ERR, remote memory untouched, QP usable") {
    // Injection 10 GB/s into a 1 GB/s core: peak queue is 0.9 * burst.
    Rig rig(ref(1, LinkMode::lossy, 10'000));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 65536);
    MrId dst = rig.b.reg_mr(rig.pd_b, 65536);
    fill(rig.a.mr_bytes(src), 9);
    auto before = simd::checksum(rig.b.mr_bytes(dst));
    rig.a.post_send(p.a, write_wr(1, src, 0, 65536, rig.b.mr_info(dst).rkey, 0));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::retry_exceeded);
    CHECK(simd::checksum(rig.b.mr_bytes(dst)) == before);
    CHECK(rig.a.qp_state(p.a) == QpState::rts);

    // 8 KiB: peak queue 7372.8 bytes fits.
    rig.a.post_send(p.a, write_wr(2, src, 0, 8192, rig.b.mr_info(dst).rkey, 0));
    rig.net.run_until_idle();
    wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::success);
}

TEST_CASE("lossless fabric never produces RETRY_EXC_ERR") {
    Rig rig(ref(1, LinkMode::lossless, 0));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 1 << 20);
    MrId dst = rig.b.reg_mr(rig.pd_b, 1 << 20);
    rig.a.post_send(p.a, write_wr(1, src, 0, 1 << 20, rig.b.mr_info(dst).rkey, 0));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 8);
    REQUIRE(wc.size() == 1);
    CHECK(wc[0].status == WcStatus::success);
}

TEST_CASE("poll_cq on an empty CQ returns nothing") {
    Rig rig(ref(1));
    CHECK(rig.a.poll_cq(rig.cq_a, 16).empty());
}

TEST_CASE("three WRs on two QPs sharing a CQ keep per-QP order") {
    Rig rig(ref(2));
    Pair p0 = rig.connect(0);
    Pair p1 = rig.connect(1);
    MrId src = rig.a.reg_mr(rig.pd_a, 1 << 16);
    MrId dst = rig.b.reg_mr(rig.pd_b, 1 << 16);
    auto rkey = rig.b.mr_info(dst).rkey;
    rig.a.post_send(p0.a, write_wr(1, src, 0, 30000, rkey, 0));
    rig.a.post_send(p1.a, write_wr(2, src, 0, 100, rkey, 40000));
    rig.a.post_send(p0.a, write_wr(3, src, 0, 10, rkey, 50000));
    rig.net.run_until_idle();
    auto wc = rig.a.poll_cq(rig.cq_a, 16);
    REQUIRE(wc.size() == 3);
    std::vector<std::uint64_t> q0;
    for (auto& c : wc)
        if (c.qp == p0.a) q0.push_back(c.wr_id);
    CHECK(q0 == std::vector<std::uint64_t>{1, 3});
    CHECK(wc[0].wr_id == 2);  // the short WR on the other path lands first
}

TEST_CASE("wait_cq_event resumes once after one WRITE completes") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 4096);
    MrId dst = rig.b.reg_mr(rig.pd_b, 4096);
    int fired = 0;
    rig.a.request_notify(rig.cq_a, [&] { ++fired; });
    rig.a.post_send(p.a, write_wr(1, src, 0, 4096, rig.b.mr_info(dst).rkey, 0));
    rig.a.wait_cq_event(rig.cq_a);
    CHECK(rig.a.cq_depth(rig.cq_a) == 1);
    rig.net.run_until_idle();
    CHECK(fired == 1);
    CHECK_THROWS_AS(rig.b.wait_cq_event(rig.cq_b), VerbsError);
}

TEST_CASE("unsignaled WRs produce no CQE on success") {
    Rig rig(ref(1));
    Pair p = rig.connect(0);
    MrId src = rig.a.reg_mr(rig.pd_a, 4096);
    MrId dst = rig.b.reg_mr(rig.pd_b, 4096);
    auto wr = write_wr(1, src, 0, 4096, rig.b.mr_info(dst).rkey, 0);
    wr.signaled = false;
    rig.a.post_send(p.a, wr);
    rig.net.run_until_idle();
    CHECK(rig.a.cq_depth(rig.cq_a) == 0);
}

TEST_CASE("send queue depth is bounded by max_send_wr") {
    Rig rig(ref(1));
    QpAttrs attrs;
    attrs.max_send_wr = 2;
    Pair p = rig.connect(0, attrs);
    MrId src = rig.a.reg_mr(rig.pd_a, 4096);
    MrId dst = rig.b.reg_mr(rig.pd_b, 4096);
    auto rkey = rig.b.mr_info(dst).rkey;
    rig.a.post_send(p.a, write_wr(1, src, 0, 64, rkey, 0));
    rig.a.post_send(p.a, write_wr(2, src, 0, 64, rkey, 0));
    CHECK_THROWS_AS(rig.a.post_send(p.a, write_wr(3, src, 0, 64, rkey, 0)), VerbsError);
    rig.net.run_until_idle();
    CHECK(rig.a.send_outstanding(p.a) == 0);
}

TEST_CASE("random traffic with delivery jitter: CQE accounting, order, byte fidelity, silence") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto config = ref(4);
        config.jitter = 1e-5;
        config.seed = seed;
        Rig rig(std::move(config));
        std::vector<Pair> pairs;
        for (std::size_t i = 0; i < 4; ++i) pairs.push_back(rig.connect(i));
        const std::uint64_t span = 1 << 16;
        MrId src = rig.a.reg_mr(rig.pd_a, span);
        MrId dst = rig.b.reg_mr(rig.pd_b, span);
        MrId rbuf = rig.b.reg_mr(rig.pd_b, span);
        fill(rig.a.mr_bytes(src), seed);
        auto rkey = rig.b.mr_info(dst).rkey;

        std::mt19937_64 rng(seed * 77);
        std::map<std::uint64_t, std::pair<std::uint64_t, std::uint64_t>> writes;  // wr_id -> (offset, length)
        std::map<QpId, std::vector<std::uint64_t>> posted;
        std::size_t signaled = 0, sends = 0;
        // Disjoint destination slots so byte checks are order independent.
        const std::uint64_t slot = span / 32;
        for (std::uint64_t i = 0; i < 32; ++i) {
            Pair& p = pairs[rng() % pairs.size()];
            std::uint64_t len = 1 + rng() % slot;
            std::uint64_t id = 1000 + i;
            if (rng() % 4 == 0) {
                rig.b.post_recv(p.b, wr(id, Opcode::recv, Sge{rbuf, i * slot, slot}));
                rig.a.post_send(p.a, wr(id, Opcode::send, Sge{src, i * slot, len}));
                ++sends;
            } else {
                rig.a.post_send(p.a, write_wr(id, src, i * slot, len, rkey, i * slot));
                writes[id] = {i * slot, len};
            }
            posted[p.a].push_back(id);
            ++signaled;
        }
        rig.net.run_until_idle();

        auto tx = rig.a.poll_cq(rig.cq_a, 1000);
        auto rx = rig.b.poll_cq(rig.cq_b, 1000);
        REQUIRE(tx.size() == signaled);
        REQUIRE(rx.size() == sends);  // WRITEs add nothing on the receiver
        std::map<QpId, std::vector<std::uint64_t>> seen;
        for (auto& c : tx) {
            REQUIRE(c.status == WcStatus::success);
            seen[c.qp].push_back(c.wr_id);
        }
        CHECK(seen == posted);
        for (auto& [id, range] : writes) {
            auto a = rig.a.mr_bytes(src).subspan(range.first, range.second);
            auto b = rig.b.mr_bytes(dst).subspan(range.first, range.second);
            REQUIRE(simd::checksum(a) == simd::checksum(b));
        }
        CHECK(rig.net.copy_stats().middleware_copies == 0);
        CHECK(rig.net.copy_stats().simulator_copies == signaled);
    }
}
