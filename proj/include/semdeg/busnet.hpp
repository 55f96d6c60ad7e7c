#pragma once

#include <atomic>
#include <bit>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "semdeg/errors.hpp"
#include "semdeg/net.hpp"
#include "semdeg/semstore.hpp"
#include "semdeg/text.hpp"
#include "semdeg/units.hpp"

namespace semdeg::busnet {

class ShortFrame : public Error {
public:
    using Error::Error;
};
class LengthMismatch : public Error {
public:
    using Error::Error;
};
class UnsupportedFunction : public Error {
public:
    using Error::Error;
};
class MalformedPdu : public Error {
public:
    using Error::Error;
};
class MessageError : public Error {
public:
    using Error::Error;
};
class UnknownDeviceType : public Error {
public:
    using Error::Error;
};
class UnknownUnitTerm : public Error {
public:
    using Error::Error;
};
class NoMappingRegistered : public Error {
public:
    using Error::Error;
};
class ServiceUnreachable : public Error {
public:
    using Error::Error;
};

/// Raised when a read is answered with a Modbus exception frame; keeps the
/// raw frame bytes for bit-exact assertions.
class SlaveRejected : public Error {
public:
    SlaveRejected(std::uint8_t code, std::vector<std::uint8_t> frame)
        : Error("slave answered exception code " + std::to_string(code)),
          code_(code),
          frame_(std::move(frame)) {}
    std::uint8_t code() const { return code_; }
    const std::vector<std::uint8_t>& frame() const { return frame_; }

private:
    std::uint8_t code_;
    std::vector<std::uint8_t> frame_;
};

using net::Timeout;

inline constexpr std::chrono::milliseconds kRequestTimeout{2000};

// ---------------------------------------------------------------------------
// Modbus TCP framing (function subset: 0x03, 0x10, exception responses)
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kReadHoldingRegisters = 0x03;
inline constexpr std::uint8_t kWriteMultipleRegisters = 0x10;

// Exception codes used on the data plane.
inline constexpr std::uint8_t kExcIllegalFunction = 0x01;
inline constexpr std::uint8_t kExcIllegalDataAddress = 0x02;
inline constexpr std::uint8_t kExcSlaveDeviceFailure = 0x04;  // rejection signalling
inline constexpr std::uint8_t kExcGatewayTargetFailed = 0x0B;

/// MBAP header plus PDU. protocol_id is kept verbatim so decode/encode round
/// the exact bytes; frames built by this library always carry 0.
struct MbapFrame {
    std::uint16_t transaction_id = 0;
    std::uint16_t protocol_id = 0;
    std::uint8_t unit_id = 0;
    std::uint8_t function = 0;
    std::vector<std::uint8_t> payload;

    bool operator==(const MbapFrame&) const = default;

    bool is_exception() const { return (function & 0x80) != 0; }
};

inline bool function_supported(std::uint8_t function) {
    if (function & 0x80) return true;  // exception response shape
    return function == kReadHoldingRegisters || function == kWriteMultipleRegisters;
}

inline std::vector<std::uint8_t> encode_frame(const MbapFrame& f) {
    const std::size_t length = 2 + f.payload.size();  // unit id + function + payload
    std::vector<std::uint8_t> out;
    out.reserve(6 + length);
    auto push16 = [&](std::uint16_t v) {
        out.push_back(static_cast<std::uint8_t>(v >> 8));
        out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    };
    push16(f.transaction_id);
    push16(f.protocol_id);
    push16(static_cast<std::uint16_t>(length));
    out.push_back(f.unit_id);
    out.push_back(f.function);
    out.insert(out.end(), f.payload.begin(), f.payload.end());
    return out;
}

/// Strict structural decode: the buffer must hold exactly one frame and the
/// length field must cover exactly the rest of it. Unsupported function
/// codes still decode; callers check function_supported or use the typed
/// parsers below.
inline MbapFrame decode_frame(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw ShortFrame("frame needs at least 8 bytes, got " + std::to_string(bytes.size()));
    auto read16 = [&](std::size_t at) {
        return static_cast<std::uint16_t>((bytes[at] << 8) | bytes[at + 1]);
    };
    const std::uint16_t length = read16(4);
    if (bytes.size() != 6u + length)
        throw LengthMismatch("length field says " + std::to_string(length) + " but " +
                             std::to_string(bytes.size() - 6) + " bytes follow the header");
    MbapFrame f;
    f.transaction_id = read16(0);
    f.protocol_id = read16(2);
    f.unit_id = bytes[6];
    f.function = bytes[7];
    f.payload.assign(bytes.begin() + 8, bytes.end());
    return f;
}

inline MbapFrame make_read_request(std::uint16_t txn, std::uint8_t unit, std::uint16_t address,
                                   std::uint16_t quantity) {
    MbapFrame f{txn, 0, unit, kReadHoldingRegisters, {}};
    f.payload = {static_cast<std::uint8_t>(address >> 8), static_cast<std::uint8_t>(address & 0xFF),
                 static_cast<std::uint8_t>(quantity >> 8), static_cast<std::uint8_t>(quantity & 0xFF)};
    return f;
}

struct ReadRequest {
    std::uint16_t address = 0;
    std::uint16_t quantity = 0;
};

inline ReadRequest parse_read_request(const MbapFrame& f) {
    if (f.function != kReadHoldingRegisters)
        throw UnsupportedFunction("not a read-holding-registers request: function " + std::to_string(f.function));
    if (f.payload.size() != 4) throw MalformedPdu("read request payload must be 4 bytes");
    return {static_cast<std::uint16_t>((f.payload[0] << 8) | f.payload[1]),
            static_cast<std::uint16_t>((f.payload[2] << 8) | f.payload[3])};
}

inline MbapFrame make_read_response(std::uint16_t txn, std::uint8_t unit,
                                    const std::vector<std::uint16_t>& registers) {
    MbapFrame f{txn, 0, unit, kReadHoldingRegisters, {}};
    f.payload.push_back(static_cast<std::uint8_t>(registers.size() * 2));
    for (std::uint16_t r : registers) {
        f.payload.push_back(static_cast<std::uint8_t>(r >> 8));
        f.payload.push_back(static_cast<std::uint8_t>(r & 0xFF));
    }
    return f;
}

inline std::vector<std::uint16_t> parse_read_response(const MbapFrame& f) {
    if (f.function != kReadHoldingRegisters)
        throw UnsupportedFunction("not a read-holding-registers response: function " + std::to_string(f.function));
    if (f.payload.empty() || f.payload.size() != 1u + f.payload[0] || f.payload[0] % 2 != 0)
        throw MalformedPdu("read response byte count inconsistent");
    std::vector<std::uint16_t> regs;
    for (std::size_t i = 1; i + 1 < f.payload.size(); i += 2)
        regs.push_back(static_cast<std::uint16_t>((f.payload[i] << 8) | f.payload[i + 1]));
    return regs;
}

inline MbapFrame make_write_request(std::uint16_t txn, std::uint8_t unit, std::uint16_t address,
                                    const std::vector<std::uint16_t>& registers) {
    MbapFrame f{txn, 0, unit, kWriteMultipleRegisters, {}};
    auto push16 = [&](std::uint16_t v) {
        f.payload.push_back(static_cast<std::uint8_t>(v >> 8));
        f.payload.push_back(static_cast<std::uint8_t>(v & 0xFF));
    };
    push16(address);
    push16(static_cast<std::uint16_t>(registers.size()));
    f.payload.push_back(static_cast<std::uint8_t>(registers.size() * 2));
    for (std::uint16_t r : registers) push16(r);
    return f;
}

struct WriteRequest {
    std::uint16_t address = 0;
    std::vector<std::uint16_t> registers;
};

inline WriteRequest parse_write_request(const MbapFrame& f) {
    if (f.function != kWriteMultipleRegisters)
        throw UnsupportedFunction("not a write-multiple-registers request: function " + std::to_string(f.function));
    if (f.payload.size() < 5) throw MalformedPdu("write request payload too short");
    WriteRequest w;
    w.address = static_cast<std::uint16_t>((f.payload[0] << 8) | f.payload[1]);
    const std::uint16_t quantity = static_cast<std::uint16_t>((f.payload[2] << 8) | f.payload[3]);
    const std::uint8_t byte_count = f.payload[4];
    if (byte_count != quantity * 2 || f.payload.size() != 5u + byte_count)
        throw MalformedPdu("write request byte count inconsistent");
    for (std::size_t i = 5; i + 1 < f.payload.size(); i += 2)
        w.registers.push_back(static_cast<std::uint16_t>((f.payload[i] << 8) | f.payload[i + 1]));
    return w;
}

inline MbapFrame make_write_response(std::uint16_t txn, std::uint8_t unit, std::uint16_t address,
                                     std::uint16_t quantity) {
    MbapFrame f{txn, 0, unit, kWriteMultipleRegisters, {}};
    f.payload = {static_cast<std::uint8_t>(address >> 8), static_cast<std::uint8_t>(address & 0xFF),
                 static_cast<std::uint8_t>(quantity >> 8), static_cast<std::uint8_t>(quantity & 0xFF)};
    return f;
}

inline MbapFrame make_exception(std::uint16_t txn, std::uint8_t unit, std::uint8_t function,
                                std::uint8_t code) {
    return {txn, 0, unit, static_cast<std::uint8_t>(function | 0x80), {code}};
}

/// Sensor readings travel as one IEEE-754 binary32 across two registers,
/// high word first.
inline std::array<std::uint16_t, 2> float_to_registers(float v) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    return {static_cast<std::uint16_t>(bits >> 16), static_cast<std::uint16_t>(bits & 0xFFFF)};
}

inline float registers_to_float(std::uint16_t hi, std::uint16_t lo) {
    return std::bit_cast<float>((static_cast<std::uint32_t>(hi) << 16) | lo);
}

// ---------------------------------------------------------------------------
// Service overlay protocol: one line per message, VERB key=value ...
// ---------------------------------------------------------------------------

inline constexpr const char* kVerbRegisterMapping = "REGISTER_MAPPING";
inline constexpr const char* kVerbQueryExpected = "QUERY_EXPECTED";
inline constexpr const char* kVerbRequestConverter = "REQUEST_CONVERTER";
inline constexpr const char* kVerbOk = "OK";
inline constexpr const char* kVerbExpected = "EXPECTED";
inline constexpr const char* kVerbChain = "CHAIN";
inline constexpr const char* kVerbErr = "ERR";

struct ServiceMessage {
    std::string verb;
    std::vector<std::pair<std::string, std::string>> fields;  // insertion-ordered, unique keys

    void set(const std::string& key, const std::string& value) {
        if (get(key)) throw MessageError("duplicate key '" + key + "'");
        fields.emplace_back(key, value);
    }

    std::optional<std::string> get(const std::string& key) const {
        for (const auto& [k, v] : fields)
            if (k == key) return v;
        return std::nullopt;
    }

    std::string need(const std::string& key) const {
        if (auto v = get(key)) return *v;
        throw MessageError(verb + " message is missing key '" + key + "'");
    }
};

namespace detail {

inline bool needs_quoting(std::string_view v) {
    return v.empty() || v.find_first_of(" \"\\") != std::string_view::npos;
}

inline std::string quote_value(std::string_view v) {
    if (v.find('\n') != std::string_view::npos)
        throw MessageError("message values cannot contain newlines");
    if (!needs_quoting(v)) return std::string(v);
    std::string out = "\"";
    for (char c : v) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

}  // namespace detail

inline std::string encode_message(const ServiceMessage& m) {
    std::string line = m.verb;
    for (const auto& [k, v] : m.fields) line += " " + k + "=" + detail::quote_value(v);
    return line;
}

inline ServiceMessage decode_message(std::string_view line) {
    ServiceMessage m;
    std::size_t pos = 0;
    auto skip_spaces = [&] { while (pos < line.size() && line[pos] == ' ') ++pos; };
    skip_spaces();
    std::size_t start = pos;
    while (pos < line.size() && line[pos] != ' ') ++pos;
    m.verb = std::string(line.substr(start, pos - start));
    if (m.verb.empty()) throw MessageError("empty message");
    while (true) {
        skip_spaces();
        if (pos >= line.size()) return m;
        start = pos;
        while (pos < line.size() && line[pos] != '=' && line[pos] != ' ') ++pos;
        if (pos >= line.size() || line[pos] != '=')
            throw MessageError("expected key=value near '" + std::string(line.substr(start)) + "'");
        std::string key(line.substr(start, pos - start));
        ++pos;  // '='
        std::string value;
        if (pos < line.size() && line[pos] == '"') {
            ++pos;
            bool closed = false;
            while (pos < line.size()) {
                char c = line[pos++];
                if (c == '\\') {
                    if (pos >= line.size()) throw MessageError("dangling escape");
                    value.push_back(line[pos++]);
                } else if (c == '"') {
                    closed = true;
                    break;
                } else {
                    value.push_back(c);
                }
            }
            if (!closed) throw MessageError("unterminated quoted value for '" + key + "'");
        } else {
            while (pos < line.size() && line[pos] != ' ') value.push_back(line[pos++]);
        }
        m.set(key, value);
    }
}

// ---------------------------------------------------------------------------
// Devices and acceptance
// ---------------------------------------------------------------------------

struct DeviceDescriptor {
    int unit_id = 0;  // 1..247
    std::string device_type;
    std::string native_unit;
    int register_base = 0;

    bool operator==(const DeviceDescriptor&) const = default;
};

enum class Lifecycle { Unvalidated, Accepted, ConditionallyAccepted, Rejected };

inline std::string to_string(Lifecycle l) {
    switch (l) {
        case Lifecycle::Unvalidated: return "Unvalidated";
        case Lifecycle::Accepted: return "Accepted";
        case Lifecycle::ConditionallyAccepted: return "ConditionallyAccepted";
        case Lifecycle::Rejected: return "Rejected";
    }
    return "?";
}

/// active_chain is present exactly in the ConditionallyAccepted state;
/// Accepted means the native unit already matches (identity conversion).
struct SlaveState {
    Lifecycle lifecycle = Lifecycle::Unvalidated;
    std::optional<units::ConverterChain> active_chain;
    std::string reason;

    std::string str() const {
        std::string s = to_string(lifecycle);
        if (active_chain) s += " " + active_chain->str();
        return s;
    }
};

/// The acceptance verdict as a pure function of the expected descriptor, the
/// actual device, taxonomy subtyping and converter-graph reachability.
/// Replaying the same inputs always yields the same state; the networked
/// plug sequence reproduces exactly this decision.
inline SlaveState decide_acceptance(const std::optional<DeviceDescriptor>& expected,
                                    const DeviceDescriptor& actual, const semstore::KnowledgeBase& kb,
                                    const units::ConverterRegistry& registry,
                                    bool exact_type_match = false) {
    if (!expected)
        return {Lifecycle::Rejected, std::nullopt,
                "no mapping registered for unit " + std::to_string(actual.unit_id)};
    const std::string actual_type = kb.canonical_or_self(actual.device_type);
    const std::string expected_type = kb.canonical_or_self(expected->device_type);
    bool type_ok = false;
    if (kb.has_term(actual_type) && kb.has_term(expected_type))
        type_ok = exact_type_match ? actual_type == expected_type
                                   : kb.is_subtype(actual_type, expected_type);
    if (!type_ok)
        return {Lifecycle::Rejected, std::nullopt,
                "device type " + actual.device_type + " does not satisfy expected " + expected->device_type};
    const std::string from = kb.canonical_or_self(actual.native_unit);
    const std::string to = kb.canonical_or_self(expected->native_unit);
    if (from == to) return {Lifecycle::Accepted, std::nullopt, "exact unit match"};
    try {
        units::ConverterChain chain = registry.find_chain(from, to);
        return {Lifecycle::ConditionallyAccepted, std::move(chain),
                "unit " + actual.native_unit + " convertible to " + expected->native_unit};
    } catch (const Error&) {
        return {Lifecycle::Rejected, std::nullopt,
                "no converter path from " + actual.native_unit + " to " + expected->native_unit};
    }
}

/// Ordered, thread-safe protocol trace shared by the harness actors.
class TraceLog {
public:
    void append(std::string line) {
        std::lock_guard lock(mutex_);
        lines_.push_back(std::move(line));
    }

    std::vector<std::string> snapshot() const {
        std::lock_guard lock(mutex_);
        return lines_;
    }

    std::string str() const {
        std::string out;
        for (const std::string& l : snapshot()) out += l + "\n";
        return out;
    }

    bool contains(std::string_view needle) const { return str().find(needle) != std::string::npos; }

private:
    mutable std::mutex mutex_;
    std::vector<std::string> lines_;
};

// ---------------------------------------------------------------------------
// I4.0 service
// ---------------------------------------------------------------------------

struct RegisterAck {
    bool overwrote = false;
};

/// Registry/reasoner holding the expected device mappings, the knowledge-base
/// snapshot and the converter graph, served over the line protocol. Each
/// accepted connection is handled sequentially on its own thread.
class I40Service {
public:
    I40Service(semstore::KnowledgeBase kb, units::ConverterRegistry registry, TraceLog* trace = nullptr)
        : kb_(std::move(kb)), registry_(std::move(registry)), trace_(trace) {}

    ~I40Service() { stop(); }

    std::uint16_t start(std::uint16_t port = 0) {
        listener_ = net::TcpListener::bind_loopback(port);
        running_ = true;
        accept_thread_ = std::thread([this] { accept_loop(); });
        return listener_.port();
    }

    void stop() {
        if (!running_.exchange(false)) return;
        listener_.shutdown();
        listener_.close();
        if (accept_thread_.joinable()) accept_thread_.join();
        std::lock_guard lock(threads_mutex_);
        for (std::thread& t : workers_)
            if (t.joinable()) t.join();
        workers_.clear();
    }

    std::uint16_t port() const { return listener_.port(); }

    /// The engineer's upload step. Overwriting an existing unit id is allowed
    /// and flagged in the ack.
    RegisterAck register_mapping(const DeviceDescriptor& d) {
        if (d.unit_id < 1 || d.unit_id > 247)
            throw Error("unit id must be in 1..247, got " + std::to_string(d.unit_id));
        if (!kb_.has_term(kb_.canonical_or_self(d.device_type)))
            throw UnknownDeviceType("unknown device type term: " + d.device_type);
        if (!kb_.has_term(kb_.canonical_or_self(d.native_unit)))
            throw UnknownUnitTerm("unknown unit term: " + d.native_unit);
        std::lock_guard lock(state_mutex_);
        const bool overwrote = expected_.count(d.unit_id) != 0;
        expected_[d.unit_id] = d;
        trace("service: REGISTER_MAPPING unit=" + std::to_string(d.unit_id) + " type=" + d.device_type +
              " expected_unit=" + d.native_unit + (overwrote ? " (overwrite)" : ""));
        return {overwrote};
    }

    std::optional<DeviceDescriptor> expected_for(int unit_id) const {
        std::lock_guard lock(state_mutex_);
        auto it = expected_.find(unit_id);
        if (it == expected_.end()) return std::nullopt;
        return it->second;
    }

    const semstore::KnowledgeBase& kb() const { return kb_; }
    const units::ConverterRegistry& registry() const { return registry_; }

    /// Builds the CHAIN reply: the chain as ontology triples plus the
    /// referenced converter definitions, so the receiver can rebuild and run
    /// the chain without further queries.
    ServiceMessage chain_message(const units::ConverterChain& chain) const {
        ServiceMessage m;
        m.verb = kVerbChain;
        auto triples = units::chain_to_triples(chain);
        m.set("steps", std::to_string(chain.steps.size()));
        m.set("triples", std::to_string(triples.size()));
        for (std::size_t i = 0; i < triples.size(); ++i)
            m.set("t" + std::to_string(i),
                  triples[i].subject + "\t" + triples[i].relation + "\t" + triples[i].object);
        for (std::size_t i = 0; i < chain.steps.size(); ++i) {
            const units::Converter& c = chain.steps[i];
            m.set("c" + std::to_string(i), c.id + "\t" + c.source + "\t" + c.target + "\t" +
                                               text::format_double(c.scale) + "\t" +
                                               text::format_double(c.offset));
        }
        return m;
    }

    static units::ConverterChain chain_from_message(const ServiceMessage& m) {
        const std::size_t n_triples = static_cast<std::size_t>(std::stoul(m.need("triples")));
        const std::size_t n_steps = static_cast<std::size_t>(std::stoul(m.need("steps")));
        std::vector<semstore::OntologyTriple> triples;
        for (std::size_t i = 0; i < n_triples; ++i) {
            auto f = text::split(m.need("t" + std::to_string(i)), '\t');
            if (f.size() != 3) throw MessageError("bad triple field in CHAIN message");
            triples.push_back({f[0], f[1], f[2]});
        }
        units::ConverterRegistry local;
        for (std::size_t i = 0; i < n_steps; ++i) {
            auto f = text::split(m.need("c" + std::to_string(i)), '\t');
            if (f.size() != 5) throw MessageError("bad converter field in CHAIN message");
            local.register_converter({f[0], f[1], f[2], std::stod(f[3]), std::stod(f[4])});
        }
        return units::triples_to_chain(triples, local);
    }

    /// Protocol-level request handling; exposed for deterministic
    /// single-threaded tests.
    ServiceMessage handle(const ServiceMessage& request) {
        try {
            if (request.verb == kVerbRegisterMapping) {
                DeviceDescriptor d;
                d.unit_id = std::stoi(request.need("unit_id"));
                d.device_type = request.need("device_type");
                d.native_unit = request.need("unit_term");
                d.register_base = std::stoi(request.need("register_base"));
                RegisterAck ack = register_mapping(d);
                ServiceMessage reply;
                reply.verb = kVerbOk;
                reply.set("overwrote", ack.overwrote ? "1" : "0");
                return reply;
            }
            if (request.verb == kVerbQueryExpected) {
                const int unit_id = std::stoi(request.need("unit_id"));
                trace("service: QUERY_EXPECTED unit=" + std::to_string(unit_id));
                auto expected = expected_for(unit_id);
                if (!expected)
                    return error_reply("NoMappingRegistered",
                                       "no mapping registered for unit " + std::to_string(unit_id));
                ServiceMessage reply;
                reply.verb = kVerbExpected;
                reply.set("unit_id", std::to_string(expected->unit_id));
                reply.set("device_type", expected->device_type);
                reply.set("unit_term", expected->native_unit);
                reply.set("register_base", std::to_string(expected->register_base));
                return reply;
            }
            if (request.verb == kVerbRequestConverter) {
                const std::string source = request.need("source");
                const std::string target = request.need("target");
                try {
                    units::ConverterChain chain = registry_.find_chain(kb_.canonical_or_self(source),
                                                                       kb_.canonical_or_self(target));
                    trace("service: REQUEST_CONVERTER " + source + "->" + target + " = " + chain.str());
                    return chain_message(chain);
                } catch (const units::NoConverterPath& e) {
                    trace("service: REQUEST_CONVERTER " + source + "->" + target + " = no path");
                    return error_reply("NoConverterPath", e.what());
                } catch (const units::UnknownUnit& e) {
                    return error_reply("UnknownUnit", e.what());
                }
            }
            return error_reply("UnknownVerb", "unsupported verb " + request.verb);
        } catch (const UnknownDeviceType& e) {
            return error_reply("UnknownDeviceType", e.what());
        } catch (const UnknownUnitTerm& e) {
            return error_reply("UnknownUnitTerm", e.what());
        } catch (const std::exception& e) {
            return error_reply("BadRequest", e.what());
        }
    }

private:
    static ServiceMessage error_reply(const std::string& code, const std::string& message) {
        ServiceMessage m;
        m.verb = kVerbErr;
        m.set("code", code);
        m.set("message", message);
        return m;
    }

    void accept_loop() {
        while (running_) {
            net::TcpStream conn = listener_.accept();
            if (!conn.valid()) return;
            conn.set_timeout(kRequestTimeout);
            std::lock_guard lock(threads_mutex_);
            workers_.emplace_back(
                [this](net::TcpStream c) {
                    std::string line;
                    try {
                        while (c.read_line(line)) {
                            ServiceMessage reply = handle(decode_message(line));
                            c.write_all(encode_message(reply) + "\n");
                        }
                    } catch (const std::exception&) {
                        // connection-level failures just end the session
                    }
                },
                std::move(conn));
        }
    }

    void trace(std::string line) {
        if (trace_) trace_->append(std::move(line));
    }

    semstore::KnowledgeBase kb_;
    units::ConverterRegistry registry_;
    TraceLog* trace_;
    mutable std::mutex state_mutex_;
    std::map<int, DeviceDescriptor> expected_;
    net::TcpListener listener_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};
    std::mutex threads_mutex_;
    std::vector<std::thread> workers_;
};

/// Thin protocol client used by slaves (and tests) to talk to the service.
class ServiceClient {
public:
    explicit ServiceClient(std::uint16_t port) : port_(port) {}

    RegisterAck register_mapping(const DeviceDescriptor& d) {
        ServiceMessage m;
        m.verb = kVerbRegisterMapping;
        m.set("unit_id", std::to_string(d.unit_id));
        m.set("device_type", d.device_type);
        m.set("unit_term", d.native_unit);
        m.set("register_base", std::to_string(d.register_base));
        ServiceMessage reply = roundtrip(m);
        if (reply.verb == kVerbErr) raise_error(reply);
        return {reply.need("overwrote") == "1"};
    }

    std::optional<DeviceDescriptor> query_expected(int unit_id) {
        ServiceMessage m;
        m.verb = kVerbQueryExpected;
        m.set("unit_id", std::to_string(unit_id));
        ServiceMessage reply = roundtrip(m);
        if (reply.verb == kVerbErr) {
            if (reply.need("code") == "NoMappingRegistered") return std::nullopt;
            raise_error(reply);
        }
        DeviceDescriptor d;
        d.unit_id = std::stoi(reply.need("unit_id"));
        d.device_type = reply.need("device_type");
        d.native_unit = reply.need("unit_term");
        d.register_base = std::stoi(reply.need("register_base"));
        return d;
    }

    units::ConverterChain request_converter(const std::string& source, const std::string& target) {
        ServiceMessage m;
        m.verb = kVerbRequestConverter;
        m.set("source", source);
        m.set("target", target);
        ServiceMessage reply = roundtrip(m);
        if (reply.verb == kVerbErr) raise_error(reply);
        return I40Service::chain_from_message(reply);
    }

private:
    [[noreturn]] static void raise_error(const ServiceMessage& reply) {
        const std::string code = reply.need("code");
        const std::string message = reply.need("message");
        if (code == "NoConverterPath") throw units::NoConverterPath(message);
        if (code == "UnknownUnit") throw units::UnknownUnit(message);
        if (code == "UnknownDeviceType") throw UnknownDeviceType(message);
        if (code == "UnknownUnitTerm") throw UnknownUnitTerm(message);
        if (code == "NoMappingRegistered") throw NoMappingRegistered(message);
        throw MessageError(code + ": " + message);
    }

    ServiceMessage roundtrip(const ServiceMessage& m) {
        net::TcpStream conn;
        try {
            conn = net::TcpStream::connect(port_, kRequestTimeout);
        } catch (const net::ConnectFailed& e) {
            throw ServiceUnreachable(e.what());
        }
        conn.write_all(encode_message(m) + "\n");
        std::string line;
        if (!conn.read_line(line)) throw ServiceUnreachable("service closed the connection");
        return decode_message(line);
    }

    std::uint16_t port_;
};

// ---------------------------------------------------------------------------
// Slave device and bus gateway
// ---------------------------------------------------------------------------

/// A smart device: knows what it actually is, validates itself against the
/// expected mapping when plugged and runs its converter chain on every read.
class SlaveDevice {
public:
    SlaveDevice(DeviceDescriptor actual, std::function<double()> sampler,
                const semstore::KnowledgeBase* kb, TraceLog* trace = nullptr)
        : actual_(std::move(actual)), sampler_(std::move(sampler)), kb_(kb), trace_(trace) {}

    const DeviceDescriptor& descriptor() const { return actual_; }
    const SlaveState& state() const { return state_; }

    /// The plug-in sequence: query the expected mapping, check the device
    /// type against it (a subtype of the expected type passes), then either
    /// accept, fetch a converter chain and conditionally accept, or reject.
    const SlaveState& plug(std::uint16_t service_port) {
        ServiceClient service(service_port);
        trace("slave " + std::to_string(actual_.unit_id) + ": QUERY_EXPECTED");
        std::optional<DeviceDescriptor> expected = service.query_expected(actual_.unit_id);
        if (!expected) {
            set_state({Lifecycle::Rejected, std::nullopt,
                       "no mapping registered for unit " + std::to_string(actual_.unit_id)});
            return state_;
        }
        expected_ = expected;
        const std::string actual_type = kb_->canonical_or_self(actual_.device_type);
        const std::string expected_type = kb_->canonical_or_self(expected->device_type);
        bool type_ok = kb_->has_term(actual_type) && kb_->has_term(expected_type) &&
                       kb_->is_subtype(actual_type, expected_type);
        if (!type_ok) {
            set_state({Lifecycle::Rejected, std::nullopt,
                       "device type " + actual_.device_type + " does not satisfy expected " +
                           expected->device_type});
            return state_;
        }
        if (kb_->canonical_or_self(actual_.native_unit) == kb_->canonical_or_self(expected->native_unit)) {
            set_state({Lifecycle::Accepted, std::nullopt, "exact unit match"});
            return state_;
        }
        try {
            units::ConverterChain chain =
                service.request_converter(actual_.native_unit, expected->native_unit);
            set_state({Lifecycle::ConditionallyAccepted, std::move(chain),
                       "unit " + actual_.native_unit + " convertible to " + expected->native_unit});
        } catch (const units::NoConverterPath&) {
            set_state({Lifecycle::Rejected, std::nullopt,
                       "no converter path from " + actual_.native_unit + " to " + expected->native_unit});
        } catch (const units::UnknownUnit&) {
            set_state({Lifecycle::Rejected, std::nullopt,
                       "no converter path from " + actual_.native_unit + " to " + expected->native_unit});
        }
        return state_;
    }

    /// Data plane. Reads outside the Accepted states are answered with
    /// exception code 0x04 and never carry data.
    MbapFrame handle_request(const MbapFrame& request) {
        if (request.function == kReadHoldingRegisters) {
            if (state_.lifecycle != Lifecycle::Accepted &&
                state_.lifecycle != Lifecycle::ConditionallyAccepted) {
                trace("slave " + std::to_string(actual_.unit_id) + ": read rejected (" +
                      to_string(state_.lifecycle) + ")");
                return make_exception(request.transaction_id, request.unit_id, request.function,
                                      kExcSlaveDeviceFailure);
            }
            ReadRequest r;
            try {
                r = parse_read_request(request);
            } catch (const Error&) {
                return make_exception(request.transaction_id, request.unit_id, request.function,
                                      kExcIllegalDataAddress);
            }
            const int base = expected_ ? expected_->register_base : actual_.register_base;
            if (r.address != base || r.quantity != 2)
                return make_exception(request.transaction_id, request.unit_id, request.function,
                                      kExcIllegalDataAddress);
            double value = sampler_();
            std::string unit = actual_.native_unit;
            if (state_.active_chain) {
                // Apply the converters one by one, the way they arrived.
                for (const units::Converter& c : state_.active_chain->steps)
                    value = c.affine().apply(value);
                unit = state_.active_chain->target;
            }
            const auto regs = float_to_registers(static_cast<float>(value));
            trace("slave " + std::to_string(actual_.unit_id) + ": deliver " +
                  text::format_double(static_cast<double>(static_cast<float>(value))) + " " + unit);
            return make_read_response(request.transaction_id, request.unit_id, {regs[0], regs[1]});
        }
        if (request.function == kWriteMultipleRegisters) {
            if (state_.lifecycle != Lifecycle::Accepted &&
                state_.lifecycle != Lifecycle::ConditionallyAccepted)
                return make_exception(request.transaction_id, request.unit_id, request.function,
                                      kExcSlaveDeviceFailure);
            WriteRequest w;
            try {
                w = parse_write_request(request);
            } catch (const Error&) {
                return make_exception(request.transaction_id, request.unit_id, request.function,
                                      kExcIllegalDataAddress);
            }
            for (std::size_t i = 0; i < w.registers.size(); ++i)
                holding_[w.address + i] = w.registers[i];
            return make_write_response(request.transaction_id, request.unit_id, w.address,
                                       static_cast<std::uint16_t>(w.registers.size()));
        }
        return make_exception(request.transaction_id, request.unit_id, request.function,
                              kExcIllegalFunction);
    }

    std::optional<std::uint16_t> holding_register(std::uint16_t address) const {
        auto it = holding_.find(address);
        if (it == holding_.end()) return std::nullopt;
        return it->second;
    }

private:
    void set_state(SlaveState s) {
        state_ = std::move(s);
        trace("slave " + std::to_string(actual_.unit_id) + ": " + state_.str());
    }

    void trace(std::string line) {
        if (trace_) trace_->append(std::move(line));
    }

    DeviceDescriptor actual_;
    std::function<double()> sampler_;
    const semstore::KnowledgeBase* kb_;
    TraceLog* trace_;
    SlaveState state_;
    std::optional<DeviceDescriptor> expected_;
    std::map<std::uint16_t, std::uint16_t> holding_;
};

/// One TCP endpoint for the whole bus; frames are routed to the attached
/// slave by unit id, the usual Modbus TCP gateway arrangement.
class BusGateway {
public:
    explicit BusGateway(TraceLog* trace = nullptr) : trace_(trace) {}
    ~BusGateway() { stop(); }

    std::uint16_t start(std::uint16_t port = 0) {
        listener_ = net::TcpListener::bind_loopback(port);
        running_ = true;
        accept_thread_ = std::thread([this] { accept_loop(); });
        return listener_.port();
    }

    void stop() {
        if (!running_.exchange(false)) return;
        listener_.shutdown();
        listener_.close();
        if (accept_thread_.joinable()) accept_thread_.join();
        std::lock_guard lock(threads_mutex_);
        for (std::thread& t : workers_)
            if (t.joinable()) t.join();
        workers_.clear();
    }

    std::uint16_t port() const { return listener_.port(); }

    void attach(std::shared_ptr<SlaveDevice> slave) {
        std::lock_guard lock(state_mutex_);
        slaves_[slave->descriptor().unit_id] = std::move(slave);
    }

    MbapFrame route(const MbapFrame& request) {
        std::shared_ptr<SlaveDevice> slave;
        {
            std::lock_guard lock(state_mutex_);
            auto it = slaves_.find(request.unit_id);
            if (it != slaves_.end()) slave = it->second;
        }
        if (!slave)
            return make_exception(request.transaction_id, request.unit_id, request.function,
                                  kExcGatewayTargetFailed);
        return slave->handle_request(request);
    }

private:
    void accept_loop() {
        while (running_) {
            net::TcpStream conn = listener_.accept();
            if (!conn.valid()) return;
            conn.set_timeout(kRequestTimeout);
            std::lock_guard lock(threads_mutex_);
            workers_.emplace_back(
                [this](net::TcpStream c) {
                    try {
                        while (true) {
                            std::uint8_t header[6];
                            if (!c.read_exact(header)) return;
                            const std::uint16_t length =
                                static_cast<std::uint16_t>((header[4] << 8) | header[5]);
                            std::vector<std::uint8_t> buf(header, header + 6);
                            buf.resize(6 + length);
                            if (length > 0 && !c.read_exact(std::span(buf).subspan(6))) return;
                            MbapFrame reply = route(decode_frame(buf));
                            c.write_all(encode_frame(reply));
                        }
                    } catch (const std::exception&) {
                        // drop the connection on malformed input or timeout
                    }
                },
                std::move(conn));
        }
    }

    TraceLog* trace_;
    net::TcpListener listener_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};
    std::mutex state_mutex_;
    std::map<int, std::shared_ptr<SlaveDevice>> slaves_;
    std::mutex threads_mutex_;
    std::vector<std::thread> workers_;
};

/// The PLC side: issues reads against the bus and interprets replies using
/// the engineer's expected mapping.
class MasterPlc {
public:
    MasterPlc(std::uint16_t bus_port, std::map<int, DeviceDescriptor> expected,
              TraceLog* trace = nullptr)
        : bus_port_(bus_port), expected_(std::move(expected)), trace_(trace) {}

    /// Reads one quantity from a slave. Exception frames surface as
    /// SlaveRejected with the raw frame bytes attached.
    units::Quantity read(int unit_id) {
        auto it = expected_.find(unit_id);
        if (it == expected_.end())
            throw Error("master has no mapping for unit " + std::to_string(unit_id));
        const DeviceDescriptor& d = it->second;
        MbapFrame request = make_read_request(next_txn(), static_cast<std::uint8_t>(unit_id),
                                              static_cast<std::uint16_t>(d.register_base), 2);
        MbapFrame reply = exchange(request);
        if (reply.is_exception()) {
            if (trace_)
                trace_->append("master: unit " + std::to_string(unit_id) + " rejected read (exception " +
                               std::to_string(reply.payload.empty() ? 0 : reply.payload[0]) + ")");
            throw SlaveRejected(reply.payload.empty() ? 0 : reply.payload[0], encode_frame(reply));
        }
        auto regs = parse_read_response(reply);
        if (regs.size() != 2) throw MalformedPdu("expected 2 registers");
        const float value = registers_to_float(regs[0], regs[1]);
        if (trace_)
            trace_->append("master: read unit " + std::to_string(unit_id) + " -> deliver " +
                           text::format_double(static_cast<double>(value)) + " " + d.native_unit);
        return {static_cast<double>(value), d.native_unit};
    }

    /// Raw exchange, also used to assert exact reply bytes in tests.
    MbapFrame exchange(const MbapFrame& request) {
        net::TcpStream conn = net::TcpStream::connect(bus_port_, kRequestTimeout);
        conn.write_all(encode_frame(request));
        std::uint8_t header[6];
        if (!conn.read_exact(header)) throw net::NetError("bus closed the connection");
        const std::uint16_t length = static_cast<std::uint16_t>((header[4] << 8) | header[5]);
        std::vector<std::uint8_t> buf(header, header + 6);
        buf.resize(6 + length);
        if (length > 0) conn.read_exact(std::span(buf).subspan(6));
        return decode_frame(buf);
    }

private:
    std::uint16_t next_txn() { return ++txn_; }

    std::uint16_t bus_port_;
    std::map<int, DeviceDescriptor> expected_;
    TraceLog* trace_;
    std::uint16_t txn_ = 0;
};

}  // namespace semdeg::busnet
