#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "ph/telemetry.hpp"

using namespace ph;
using namespace ph::telemetry;

namespace {

std::vector<std::uint8_t> from_hex(std::string hex) {
    std::erase(hex, ' ');
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i + 1 < hex.size(); i += 2) out.push_back(std::stoul(hex.substr(i, 2), nullptr, 16));
    return out;
}

// independent XDR writer for the oracle
struct Xdr {
    std::vector<std::uint8_t> b;
    void u32(std::uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) b.push_back((v >> s) & 0xff);
    }
    void str(const std::string& s) {
        u32(s.size());
        b.insert(b.end(), s.begin(), s.end());
        while (b.size() % 4) b.push_back(0);
    }
    void f64(double d) {
        std::uint64_t v;
        std::memcpy(&v, &d, 8);
        u32(v >> 32);
        u32(v & 0xffffffffu);
    }
};

MonDatagram dg(std::uint32_t seq, std::string node = "master") {
    MonDatagram d;
    d.cluster = "grid";
    d.node = std::move(node);
    d.seq = seq;
    d.params = {{"busy_workers", std::int32_t{168}}};
    return d;
}

}  // namespace

TEST_CASE("golden datagram") {
    const auto bytes = encode_datagram(dg(1));
    const auto golden = from_hex(
        "00000003 50483100 00000004 67726964 00000006 6d6173746572 0000 00000001 00000001 "
        "0000000c 627573795f776f726b657273 00000001 000000a8");
    CHECK(bytes == golden);
    CHECK(decode_datagram(golden) == dg(1));
}

TEST_CASE("all three value types against a hand-built buffer") {
    MonDatagram d;
    d.cluster = "c";
    d.node = "n1";
    d.seq = 0xdeadbeef;
    d.params = {{"a", std::int32_t{-2}}, {"r", 0.0}, {"x", 1.5}, {"s", std::string("héllo")}};
    Xdr x;
    x.str("PH1");
    x.str("c");
    x.str("n1");
    x.u32(0xdeadbeef);
    x.u32(4);
    x.str("a");
    x.u32(1);
    x.u32(0xfffffffe);
    x.str("r");
    x.u32(2);
    x.f64(0.0);
    x.str("x");
    x.u32(2);
    x.f64(1.5);
    x.str("s");
    x.u32(3);
    x.str("héllo");
    CHECK(encode_datagram(d) == x.b);
    CHECK(decode_datagram(x.b) == d);
    // REAL64 zero is eight zero bytes
    const auto& b = x.b;
    auto zero_at = std::search(b.begin(), b.end(), std::begin("\0\0\0\x01r"), std::begin("\0\0\0\x01r") + 5);
    REQUIRE(zero_at != b.end());
    for (int i = 0; i < 8; ++i) CHECK(*(zero_at + 12 + i) == 0);
}

TEST_CASE("encode rejects bad UTF-8 and oversize") {
    auto d = dg(1);
    d.node = std::string("\xc3\x28");
    CHECK_THROWS_AS(encode_datagram(d), Error);
    d = dg(1);
    d.params.push_back({"big", std::string(1400, 'x')});
    CHECK_THROWS_AS(encode_datagram(d), Error);
    d = dg(1);
    d.params.push_back({"fits", std::string(1400 - encode_datagram(dg(1)).size() - 4 - 4 - 4 - 4, 'x')});
    CHECK(encode_datagram(d).size() == kMaxDatagramBytes);
}

TEST_CASE("decode errors carry offsets") {
    const auto good = encode_datagram(dg(1));
    for (std::size_t cut = 0; cut < good.size(); ++cut) {
        std::vector<std::uint8_t> part(good.begin(), good.begin() + cut);
        CHECK_THROWS_AS(decode_datagram(part), DecodeError);
    }
    // truncated inside the value: offset names the value field
    std::vector<std::uint8_t> part(good.begin(), good.end() - 2);
    try {
        decode_datagram(part);
        FAIL("expected DecodeError");
    } catch (const DecodeError& e) {
        CHECK(e.offset() == good.size() - 4);
    }
    auto bad_pad = good;
    bad_pad[7] = 1;  // pad byte after "PH1"
    CHECK_THROWS_AS(decode_datagram(bad_pad), DecodeError);
    auto trailing = good;
    trailing.insert(trailing.end(), {0, 0, 0, 0});
    CHECK_THROWS_AS(decode_datagram(trailing), DecodeError);
    auto bad_type = good;
    bad_type[good.size() - 5] = 9;
    CHECK_THROWS_AS(decode_datagram(bad_type), DecodeError);
    auto bad_tag = good;
    bad_tag[6] = '2';
    CHECK_THROWS_AS(decode_datagram(bad_tag), DecodeError);
    auto huge_count = good;
    huge_count[32] = 0x7f;  // count field
    CHECK_THROWS_AS(decode_datagram(huge_count), DecodeError);
}

TEST_CASE("fuzz: decoder never crashes and accepted input round-trips") {
    std::mt19937_64 rng(42);
    const auto good = encode_datagram(dg(7));
    std::size_t accepted = 0;
    for (int i = 0; i < 100000; ++i) {
        std::vector<std::uint8_t> buf;
        if (i % 2 == 0) {
            buf.resize(rng() % 64);
            for (auto& c : buf) c = rng() & 0xff;
        } else {
            buf = good;
            const int flips = 1 + rng() % 3;
            for (int f = 0; f < flips; ++f) buf[rng() % buf.size()] = rng() & 0xff;
            if (rng() % 4 == 0) buf.resize(rng() % buf.size());
        }
        try {
            const auto d = decode_datagram(buf);
            ++accepted;
            CHECK(encode_datagram(d) == buf);
        } catch (const DecodeError&) {
        }
    }
    CHECK(accepted > 0);
}

TEST_CASE("sequence accounting") {
    SUBCASE("1,2,4 is one gap") {
        SeriesStore s;
        for (std::uint32_t q : {1u, 2u, 4u}) CHECK(s.ingest(dg(q), 0) == IngestResult::ACCEPTED);
        CHECK(s.total_gaps() == 1);
    }
    SUBCASE("1,2,2 is a duplicate, no gap") {
        SeriesStore s;
        CHECK(s.ingest(dg(1), 0) == IngestResult::ACCEPTED);
        CHECK(s.ingest(dg(2), 0) == IngestResult::ACCEPTED);
        CHECK(s.ingest(dg(2), 0) == IngestResult::DUPLICATE);
        CHECK(s.total_gaps() == 0);
        CHECK(s.sensors().begin()->second.duplicates == 1);
        CHECK(s.series().begin()->second.size() == 2);
    }
    SUBCASE("first datagram at 5 counts 4 gaps") {
        SeriesStore s;
        s.ingest(dg(5), 0);
        CHECK(s.total_gaps() == 4);
    }
    SUBCASE("lower seq is a restart") {
        SeriesStore s;
        s.ingest(dg(1), 0);
        s.ingest(dg(2), 0);
        CHECK(s.ingest(dg(1), 0) == IngestResult::RESET);
        s.ingest(dg(3), 0);
        CHECK(s.total_gaps() == 1);
        CHECK(s.sensors().begin()->second.resets == 1);
    }
    SUBCASE("sensors are independent") {
        SeriesStore s;
        s.ingest(dg(1, "a"), 0);
        s.ingest(dg(1, "b"), 0);
        s.ingest(dg(3, "a"), 0);
        s.ingest(dg(2, "b"), 0);
        CHECK(s.total_gaps() == 1);
    }
    SUBCASE("garbage is counted") {
        SeriesStore s;
        std::vector<std::uint8_t> junk{1, 2, 3};
        CHECK(s.ingest(junk, 0) == IngestResult::UNDECODABLE);
        CHECK(s.undecodable() == 1);
    }
}

TEST_CASE("25 drops out of 1000") {
    std::mt19937_64 rng(3);
    std::vector<std::uint32_t> seqs(999);
    std::iota(seqs.begin(), seqs.end(), 1u);  // 1000 kept below
    std::shuffle(seqs.begin(), seqs.end(), rng);
    std::set<std::uint32_t> dropped(seqs.begin(), seqs.begin() + 25);
    SeriesStore s;
    for (std::uint32_t q = 1; q <= 1000; ++q) {
        if (!dropped.count(q)) s.ingest(encode_datagram(dg(q)), q * 0.1);
    }
    CHECK(s.total_gaps() == 25);
    CHECK(s.sensors().begin()->second.received == 975);
}

TEST_CASE("master params") {
    MasterSnapshot snap;
    snap.pool_slots = 8;
    snap.pool_workers = 4;
    snap.busy = 5;
    const auto p = master_params(snap);
    auto find = [&](const std::string& n) {
        for (const auto& x : p)
            if (x.name == n) return x.value;
        FAIL("missing " << n);
        return ParamValue{};
    };
    CHECK(std::get<std::int32_t>(find("pool")) == 8);
    CHECK(std::get<std::int32_t>(find("pool_workers")) == 4);
    CHECK(std::get<std::int32_t>(find("busy")) == 5);
}

TEST_CASE("sensor to collector over loopback") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / ("ph_collector_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    CollectorConfig cfg;
    cfg.host = "127.0.0.1";
    cfg.port = 0;
    cfg.out_dir = dir.string();
    cfg.duration_s = 1.0;
    cfg.flush_interval_s = 0.2;
    Collector c(cfg);
    std::thread t([&] { c.run(); });
    UdpSensor sensor("127.0.0.1", c.port(), "grid", "master");
    for (int i = 0; i < 20; ++i) {
        if (i != 9) {
            sensor.emit({{"busy", std::int32_t{i}}});
        } else {
            sensor.emit({{"x", std::string("\xff")}});  // invalid UTF-8: not sent, seq still advances
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    t.join();
    CHECK(sensor.send_errors() == 1);
    CHECK(c.store().total_gaps() == 1);
    CHECK(fs::exists(dir / "stats.json"));
    const auto csv = dir / csv_file_name("grid", "master", "busy");
    REQUIRE(fs::exists(csv));
    std::ifstream in(csv);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 19 + 1);  // header
    fs::remove_all(dir);
}
