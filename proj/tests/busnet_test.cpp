#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "semdeg/busnet.hpp"
#include "semdeg/scenarios.hpp"
#include "test_support.hpp"

using namespace semdeg::busnet;
using semdeg::semstore::KnowledgeBase;
using semdeg::units::ConverterRegistry;

namespace {

KnowledgeBase plug_kb() {
    return KnowledgeBase::load(testsupport::fixture_dir() / "plug_and_sense" / "kb.txt");
}

ConverterRegistry plug_registry() {
    return ConverterRegistry::load(testsupport::fixture_dir() / "plug_and_sense" / "converters.txt");
}

}  // namespace

TEST_CASE("frame encoding matches hand-encoded reference bytes") {
    SECTION("read request") {
        // txn 0x0001, unit 1, address 0, quantity 2
        const std::vector<std::uint8_t> expected = {0x00, 0x01, 0x00, 0x00, 0x00, 0x06,
                                                    0x01, 0x03, 0x00, 0x00, 0x00, 0x02};
        CHECK(encode_frame(make_read_request(1, 1, 0, 2)) == expected);
    }
    SECTION("read response carrying float 25.0") {
        // 25.0f has bit pattern 0x41C80000
        const std::vector<std::uint8_t> expected = {0x00, 0x01, 0x00, 0x00, 0x00, 0x07, 0x01,
                                                    0x03, 0x04, 0x41, 0xC8, 0x00, 0x00};
        const auto regs = float_to_registers(25.0f);
        CHECK(encode_frame(make_read_response(1, 1, {regs[0], regs[1]})) == expected);
    }
    SECTION("exception response") {
        const std::vector<std::uint8_t> expected = {0x00, 0x01, 0x00, 0x00, 0x00, 0x03,
                                                    0x01, 0x83, 0x04};
        CHECK(encode_frame(make_exception(1, 1, kReadHoldingRegisters, kExcSlaveDeviceFailure)) ==
              expected);
    }
}

TEST_CASE("float words against an independent bit oracle") {
    // reference values computed from the binary32 layout by hand
    const std::map<float, std::uint32_t> oracle = {
        {25.0f, 0x41C80000u}, {1.0f, 0x3F800000u}, {-2.0f, 0xC0000000u}, {0.5f, 0x3F000000u},
        {0.0f, 0x00000000u}};
    for (const auto& [value, bits] : oracle) {
        const auto regs = float_to_registers(value);
        CHECK((static_cast<std::uint32_t>(regs[0]) << 16 | regs[1]) == bits);
        CHECK(registers_to_float(regs[0], regs[1]) == value);
    }
}

TEST_CASE("frame decode") {
    MbapFrame f = make_read_request(0x1234, 17, 100, 2);
    const auto bytes = encode_frame(f);

    SECTION("decode inverts encode") { CHECK(decode_frame(bytes) == f); }
    SECTION("short buffers are rejected") {
        for (std::size_t n = 0; n < 8; ++n)
            CHECK_THROWS_AS(decode_frame(std::span(bytes.data(), n)), ShortFrame);
    }
    SECTION("mutated length field never passes") {
        for (int delta : {-2, -1, 1, 2, 100}) {
            auto copy = bytes;
            copy[5] = static_cast<std::uint8_t>(copy[5] + delta);
            CHECK_THROWS_AS(decode_frame(copy), LengthMismatch);
        }
    }
    SECTION("trailing bytes are a length mismatch") {
        auto copy = bytes;
        copy.push_back(0xFF);
        CHECK_THROWS_AS(decode_frame(copy), LengthMismatch);
    }
    SECTION("unsupported functions decode but are flagged") {
        MbapFrame odd{1, 0, 1, 0x2B, {0x01}};
        MbapFrame back = decode_frame(encode_frame(odd));
        CHECK(back == odd);
        CHECK_FALSE(function_supported(back.function));
        CHECK(function_supported(kReadHoldingRegisters));
        CHECK(function_supported(kWriteMultipleRegisters));
        CHECK(function_supported(0x83));  // exception shape
        CHECK_THROWS_AS(parse_read_request(odd), UnsupportedFunction);
    }
}

TEST_CASE("decode survives random mutations and re-encodes identically") {
    auto rng = testsupport::rng(31);
    const std::vector<MbapFrame> seeds = {
        make_read_request(1, 1, 0, 2),
        make_read_response(7, 3, {0x41C8, 0x0000}),
        make_write_request(9, 2, 4, {1, 2, 3}),
        make_exception(2, 1, kReadHoldingRegisters, kExcSlaveDeviceFailure),
    };
    std::uniform_int_distribution<int> which(0, static_cast<int>(seeds.size()) - 1);
    std::uniform_int_distribution<int> byte_value(0, 255);
    for (int i = 0; i < 20000; ++i) {
        auto bytes = encode_frame(seeds[static_cast<std::size_t>(which(rng))]);
        std::uniform_int_distribution<int> pos(0, static_cast<int>(bytes.size()) - 1);
        const int mutations = 1 + (i % 3);
        for (int m = 0; m < mutations; ++m)
            bytes[static_cast<std::size_t>(pos(rng))] = static_cast<std::uint8_t>(byte_value(rng));
        try {
            MbapFrame f = decode_frame(bytes);
            CHECK(encode_frame(f) == bytes);
        } catch (const ShortFrame&) {
        } catch (const LengthMismatch&) {
        }
    }
}

TEST_CASE("pdu round trips") {
    SECTION("write request") {
        MbapFrame f = make_write_request(5, 9, 16, {0xAAAA, 0x5555});
        WriteRequest w = parse_write_request(f);
        CHECK(w.address == 16);
        CHECK(w.registers == std::vector<std::uint16_t>{0xAAAA, 0x5555});
    }
    SECTION("read response") {
        MbapFrame f = make_read_response(5, 9, {1, 2, 3});
        CHECK(parse_read_response(f) == std::vector<std::uint16_t>{1, 2, 3});
    }
    SECTION("inconsistent byte counts are rejected") {
        MbapFrame f = make_read_response(5, 9, {1, 2});
        f.payload[0] = 6;  // claims 3 registers
        f.payload.pop_back();
        CHECK_THROWS_AS(parse_read_response(decode_frame(encode_frame(f))), MalformedPdu);
    }
}

TEST_CASE("service message codec") {
    SECTION("plain fields") {
        ServiceMessage m;
        m.verb = kVerbQueryExpected;
        m.set("unit_id", "1");
        CHECK(encode_message(m) == "QUERY_EXPECTED unit_id=1");
        ServiceMessage back = decode_message(encode_message(m));
        CHECK(back.verb == m.verb);
        CHECK(back.get("unit_id") == "1");
    }
    SECTION("values with spaces, quotes and backslashes round trip") {
        ServiceMessage m;
        m.verb = kVerbErr;
        m.set("message", "no mapping for \"unit 9\" \\ try again");
        m.set("empty", "");
        ServiceMessage back = decode_message(encode_message(m));
        CHECK(back.need("message") == "no mapping for \"unit 9\" \\ try again");
        CHECK(back.need("empty").empty());
    }
    SECTION("duplicate keys are rejected") {
        CHECK_THROWS_AS(decode_message("OK a=1 a=2"), MessageError);
        ServiceMessage m;
        m.verb = "OK";
        m.set("a", "1");
        CHECK_THROWS_AS(m.set("a", "2"), MessageError);
    }
    SECTION("malformed lines are rejected") {
        CHECK_THROWS_AS(decode_message(""), MessageError);
        CHECK_THROWS_AS(decode_message("OK novalue"), MessageError);
        CHECK_THROWS_AS(decode_message("OK a=\"unterminated"), MessageError);
    }
}

TEST_CASE("acceptance decision") {
    KnowledgeBase kb = plug_kb();
    ConverterRegistry registry = plug_registry();
    const DeviceDescriptor expected{1, "temperature-sensor", "Celsius", 0};

    SECTION("Fahrenheit sensor at a Celsius slot is conditionally accepted with [f1 f2]") {
        SlaveState s = decide_acceptance(expected, {1, "temperature-sensor", "Fahrenheit", 0}, kb, registry);
        CHECK(s.lifecycle == Lifecycle::ConditionallyAccepted);
        REQUIRE(s.active_chain.has_value());
        CHECK(s.active_chain->step_ids() == std::vector<std::string>{"f1", "f2"});
    }
    SECTION("pressure sensor at a temperature slot is rejected") {
        SlaveState s = decide_acceptance(expected, {1, "pressure-sensor", "Bar", 0}, kb, registry);
        CHECK(s.lifecycle == Lifecycle::Rejected);
        CHECK_FALSE(s.active_chain.has_value());
    }
    SECTION("exact match is accepted with no chain") {
        SlaveState s = decide_acceptance(expected, {1, "temperature-sensor", "Celsius", 0}, kb, registry);
        CHECK(s.lifecycle == Lifecycle::Accepted);
        CHECK_FALSE(s.active_chain.has_value());
    }
    SECTION("a subtype of the expected device type passes") {
        SlaveState s =
            decide_acceptance(expected, {1, "outdoor-temperature-sensor", "Celsius", 0}, kb, registry);
        CHECK(s.lifecycle == Lifecycle::Accepted);
        SlaveState strict = decide_acceptance(expected, {1, "outdoor-temperature-sensor", "Celsius", 0},
                                              kb, registry, /*exact_type_match=*/true);
        CHECK(strict.lifecycle == Lifecycle::Rejected);
    }
    SECTION("missing mapping rejects with a reason") {
        SlaveState s = decide_acceptance(std::nullopt, {9, "temperature-sensor", "Celsius", 0}, kb, registry);
        CHECK(s.lifecycle == Lifecycle::Rejected);
        CHECK(s.reason.find("no mapping") != std::string::npos);
    }
    SECTION("matching type but unreachable unit rejects") {
        SlaveState s = decide_acceptance(DeviceDescriptor{1, "temperature-sensor", "Bar", 0},
                                         {1, "temperature-sensor", "Celsius", 0}, kb, registry);
        CHECK(s.lifecycle == Lifecycle::Rejected);
        CHECK(s.reason.find("no converter path") != std::string::npos);
    }
    SECTION("the decision is replayable") {
        const DeviceDescriptor actual{1, "temperature-sensor", "Fahrenheit", 0};
        SlaveState a = decide_acceptance(expected, actual, kb, registry);
        SlaveState b = decide_acceptance(expected, actual, kb, registry);
        CHECK(a.lifecycle == b.lifecycle);
        CHECK(a.reason == b.reason);
        CHECK(a.active_chain->step_ids() == b.active_chain->step_ids());
    }
}

TEST_CASE("service protocol handling without sockets") {
    KnowledgeBase kb = plug_kb();
    ConverterRegistry registry = plug_registry();
    I40Service service(kb, registry);

    SECTION("register then query") {
        ServiceMessage reg;
        reg.verb = kVerbRegisterMapping;
        reg.set("unit_id", "1");
        reg.set("device_type", "temperature-sensor");
        reg.set("unit_term", "Celsius");
        reg.set("register_base", "0");
        ServiceMessage ok = service.handle(reg);
        CHECK(ok.verb == kVerbOk);
        CHECK(ok.need("overwrote") == "0");
        ServiceMessage again = service.handle(reg);
        CHECK(again.need("overwrote") == "1");  // last write wins, flagged

        ServiceMessage query;
        query.verb = kVerbQueryExpected;
        query.set("unit_id", "1");
        ServiceMessage expected = service.handle(query);
        CHECK(expected.verb == kVerbExpected);
        CHECK(expected.need("device_type") == "temperature-sensor");

        query = ServiceMessage{};
        query.verb = kVerbQueryExpected;
        query.set("unit_id", "9");
        ServiceMessage err = service.handle(query);
        CHECK(err.verb == kVerbErr);
        CHECK(err.need("code") == "NoMappingRegistered");
    }
    SECTION("register with unknown terms fails") {
        ServiceMessage reg;
        reg.verb = kVerbRegisterMapping;
        reg.set("unit_id", "1");
        reg.set("device_type", "coffee-machine");
        reg.set("unit_term", "Celsius");
        reg.set("register_base", "0");
        CHECK(service.handle(reg).need("code") == "UnknownDeviceType");
        ServiceMessage reg2;
        reg2.verb = kVerbRegisterMapping;
        reg2.set("unit_id", "1");
        reg2.set("device_type", "temperature-sensor");
        reg2.set("unit_term", "Smoot");
        reg2.set("register_base", "0");
        CHECK(service.handle(reg2).need("code") == "UnknownUnitTerm");
    }
    SECTION("converter requests") {
        ServiceMessage req;
        req.verb = kVerbRequestConverter;
        req.set("source", "Fahrenheit");
        req.set("target", "Celsius");
        ServiceMessage chain_msg = service.handle(req);
        CHECK(chain_msg.verb == kVerbChain);
        auto chain = I40Service::chain_from_message(chain_msg);
        CHECK(chain.step_ids() == std::vector<std::string>{"f1", "f2"});
        CHECK(semdeg::units::nearly_equal(chain.composed.apply(77.0), 25.0, 1e-9, 1e-8));

        ServiceMessage same;
        same.verb = kVerbRequestConverter;
        same.set("source", "Celsius");
        same.set("target", "Celsius");
        CHECK(I40Service::chain_from_message(service.handle(same)).is_identity());

        ServiceMessage bad;
        bad.verb = kVerbRequestConverter;
        bad.set("source", "Fahrenheit");
        bad.set("target", "Bar");
        ServiceMessage err = service.handle(bad);
        CHECK(err.verb == kVerbErr);
        CHECK(err.need("code") == "NoConverterPath");
    }
}

TEST_CASE("plug-and-sense over loopback") {
    auto cfg = semdeg::scenarios::load_plug_config(testsupport::fixture_dir() / "plug_and_sense" /
                                                   "scenario.cfg");
    auto result = semdeg::scenarios::run_plug_and_sense(cfg);

    SECTION("lifecycles") {
        CHECK(result.states.at(1).lifecycle == Lifecycle::ConditionallyAccepted);
        REQUIRE(result.states.at(1).active_chain.has_value());
        CHECK(result.states.at(1).active_chain->step_ids() == std::vector<std::string>{"f1", "f2"});
        CHECK(result.states.at(2).lifecycle == Lifecycle::Rejected);
        CHECK(result.states.at(3).lifecycle == Lifecycle::Accepted);
    }
    SECTION("the networked decision equals the pure decision function") {
        KnowledgeBase kb = plug_kb();
        ConverterRegistry registry = plug_registry();
        for (const auto& spec : cfg.slaves) {
            std::optional<DeviceDescriptor> expected;
            for (const auto& m : cfg.mappings)
                if (m.unit_id == spec.actual.unit_id) expected = m;
            SlaveState pure = decide_acceptance(expected, spec.actual, kb, registry);
            const SlaveState& wire = result.states.at(spec.actual.unit_id);
            CHECK(pure.lifecycle == wire.lifecycle);
            if (pure.active_chain || wire.active_chain) {
                REQUIRE(pure.active_chain.has_value());
                REQUIRE(wire.active_chain.has_value());
                CHECK(pure.active_chain->step_ids() == wire.active_chain->step_ids());
            }
        }
    }
    SECTION("readings and rejection") {
        REQUIRE(result.readings.count(1) == 1);
        CHECK(result.readings.at(1).unit == "Celsius");
        CHECK(std::fabs(result.readings.at(1).magnitude - 25.0) <= 1e-6);
        REQUIRE(result.readings.count(3) == 1);
        CHECK(std::fabs(result.readings.at(3).magnitude - 33.3) <= 1e-5);  // float32 transport
        REQUIRE(result.rejection_frames.count(2) == 1);
        const auto& frame = result.rejection_frames.at(2);
        REQUIRE(frame.size() == 9);
        CHECK(frame[6] == 0x02);  // unit id
        CHECK(frame[7] == 0x83);
        CHECK(frame[8] == 0x04);
    }
    SECTION("trace shows the reasoning sequence in order") {
        const std::string trace = [&] {
            std::string out;
            for (const auto& line : result.trace) out += line + "\n";
            return out;
        }();
        const auto q = trace.find("QUERY_EXPECTED");
        const auto c = trace.find("ConditionallyAccepted [f1 f2]");
        const auto d = trace.find("deliver 25 Celsius");
        REQUIRE(q != std::string::npos);
        REQUIRE(c != std::string::npos);
        REQUIRE(d != std::string::npos);
        CHECK(q < c);
        CHECK(c < d);
    }
    SECTION("no data-bearing response while rejected or unvalidated") {
        for (const auto& line : result.trace)
            CHECK(line.find("slave 2: deliver") == std::string::npos);
    }
}

TEST_CASE("unvalidated slave never answers with data") {
    KnowledgeBase kb = plug_kb();
    SlaveDevice slave({1, "temperature-sensor", "Celsius", 0}, [] { return 20.0; }, &kb);
    CHECK(slave.state().lifecycle == Lifecycle::Unvalidated);
    MbapFrame reply = slave.handle_request(make_read_request(1, 1, 0, 2));
    CHECK(reply.is_exception());
    CHECK(reply.payload == std::vector<std::uint8_t>{kExcSlaveDeviceFailure});
}

TEST_CASE("gateway routes by unit id and flags unknown units") {
    KnowledgeBase kb = plug_kb();
    ConverterRegistry registry = plug_registry();
    TraceLog trace;
    I40Service service(kb, registry, &trace);
    const auto service_port = service.start();
    ServiceClient engineer(service_port);
    engineer.register_mapping({1, "temperature-sensor", "Celsius", 0});

    BusGateway gateway;
    const auto bus_port = gateway.start();
    auto slave = std::make_shared<SlaveDevice>(DeviceDescriptor{1, "temperature-sensor", "Celsius", 0},
                                               [] { return 21.5; }, &kb, &trace);
    slave->plug(service_port);
    gateway.attach(slave);

    MasterPlc master(bus_port, {{1, {1, "temperature-sensor", "Celsius", 0}}}, &trace);
    auto reading = master.read(1);
    CHECK(std::fabs(reading.magnitude - 21.5) <= 1e-6);

    // a unit nobody plugged
    MbapFrame reply = master.exchange(make_read_request(42, 77, 0, 2));
    CHECK(reply.is_exception());
    CHECK(reply.payload == std::vector<std::uint8_t>{kExcGatewayTargetFailed});

    // writes land in the slave's holding registers
    MbapFrame wreply = master.exchange(make_write_request(43, 1, 16, {0xBEEF}));
    CHECK_FALSE(wreply.is_exception());
    CHECK(slave->holding_register(16) == 0xBEEF);

    gateway.stop();
    service.stop();
}

TEST_CASE("plugging against a dead service is ServiceUnreachable") {
    KnowledgeBase kb = plug_kb();
    net::TcpListener probe = net::TcpListener::bind_loopback(0);
    const auto dead_port = probe.port();
    probe.close();  // nothing listens here now
    SlaveDevice slave({1, "temperature-sensor", "Celsius", 0}, [] { return 0.0; }, &kb);
    CHECK_THROWS_AS(slave.plug(dead_port), ServiceUnreachable);
}
