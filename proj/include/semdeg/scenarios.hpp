#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "semdeg/busnet.hpp"
#include "semdeg/confmap.hpp"
#include "semdeg/errors.hpp"
#include "semdeg/linectl.hpp"
#include "semdeg/text.hpp"

namespace semdeg::scenarios {

// ---------------------------------------------------------------------------
// plug-and-sense: service + bus gateway + smart slaves on loopback TCP
// ---------------------------------------------------------------------------

struct SlaveSpec {
    busnet::DeviceDescriptor actual;
    double sample = 0.0;
};

struct PlugScenarioConfig {
    std::filesystem::path kb_path;
    std::filesystem::path converters_path;
    std::uint16_t service_port = 0;  // 0 = ephemeral
    std::uint16_t bus_port = 0;
    std::vector<busnet::DeviceDescriptor> mappings;  // engineer's expected devices
    std::vector<SlaveSpec> slaves;
};

/// Section file: [service] key<TAB>value rows, [mapping] and [slaves] rows
/// (unit_id, device_type, unit_term, register_base[, sample]). Relative
/// paths resolve against the config file's directory.
inline PlugScenarioConfig load_plug_config(const std::filesystem::path& path) {
    PlugScenarioConfig cfg;
    const std::string source = path.string();
    const std::filesystem::path base = path.parent_path();
    std::string section;
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
        if (f.size() == 1 && f[0].size() >= 2 && f[0].front() == '[' && f[0].back() == ']') {
            section = f[0].substr(1, f[0].size() - 2);
            return;
        }
        if (section == "service") {
            if (f.size() != 2) throw ParseError(source, line, "expected key<TAB>value");
            if (f[0] == "kb") cfg.kb_path = base / f[1];
            else if (f[0] == "converters") cfg.converters_path = base / f[1];
            else if (f[0] == "port") cfg.service_port = static_cast<std::uint16_t>(text::parse_int(f[1], source, line));
            else if (f[0] == "bus_port") cfg.bus_port = static_cast<std::uint16_t>(text::parse_int(f[1], source, line));
            else throw ParseError(source, line, "unknown service key '" + f[0] + "'");
        } else if (section == "mapping") {
            if (f.size() != 4) throw ParseError(source, line, "expected unit_id type unit_term register_base");
            cfg.mappings.push_back({static_cast<int>(text::parse_int(f[0], source, line)), f[1], f[2],
                                    static_cast<int>(text::parse_int(f[3], source, line))});
        } else if (section == "slaves") {
            if (f.size() != 5)
                throw ParseError(source, line, "expected unit_id type native_unit register_base sample");
            SlaveSpec s;
            s.actual = {static_cast<int>(text::parse_int(f[0], source, line)), f[1], f[2],
                        static_cast<int>(text::parse_int(f[3], source, line))};
            s.sample = text::parse_double(f[4], source, line);
            cfg.slaves.push_back(std::move(s));
        } else {
            throw ParseError(source, line, "record outside any known section");
        }
    });
    if (cfg.kb_path.empty() || cfg.converters_path.empty())
        throw Error(source + ": [service] must name kb and converters files");
    return cfg;
}

struct PlugResult {
    std::vector<std::string> trace;
    std::map<int, busnet::SlaveState> states;
    std::map<int, units::Quantity> readings;                    // successful reads
    std::map<int, std::vector<std::uint8_t>> rejection_frames;  // raw exception frames
};

/// Boots the service and the bus, registers the engineer's mappings over the
/// wire, plugs each slave (the full query/validate/fetch-converter dialogue),
/// then lets the master read every unit once. Every protocol step is driven
/// sequentially, so the trace is deterministic.
inline PlugResult run_plug_and_sense(const PlugScenarioConfig& cfg) {
    using namespace busnet;
    PlugResult result;
    TraceLog trace;

    semstore::KnowledgeBase kb = semstore::KnowledgeBase::load(cfg.kb_path);
    units::ConverterRegistry registry = units::ConverterRegistry::load(cfg.converters_path);

    I40Service service(kb, registry, &trace);
    const std::uint16_t service_port = service.start(cfg.service_port);
    BusGateway gateway;
    const std::uint16_t bus_port = gateway.start(cfg.bus_port);

    ServiceClient engineer(service_port);
    std::map<int, DeviceDescriptor> master_map;
    for (const DeviceDescriptor& d : cfg.mappings) {
        engineer.register_mapping(d);
        master_map[d.unit_id] = d;
    }

    std::vector<std::shared_ptr<SlaveDevice>> slaves;
    for (const SlaveSpec& spec : cfg.slaves) {
        auto slave = std::make_shared<SlaveDevice>(
            spec.actual, [sample = spec.sample] { return sample; }, &kb, &trace);
        slave->plug(service_port);
        result.states[spec.actual.unit_id] = slave->state();
        gateway.attach(slave);
        slaves.push_back(std::move(slave));
    }

    MasterPlc master(bus_port, master_map, &trace);
    for (const SlaveSpec& spec : cfg.slaves) {
        try {
            result.readings[spec.actual.unit_id] = master.read(spec.actual.unit_id);
        } catch (const SlaveRejected& e) {
            result.rejection_frames[spec.actual.unit_id] = e.frame();
        }
    }

    gateway.stop();
    service.stop();
    result.trace = trace.snapshot();
    return result;
}

// ---------------------------------------------------------------------------
// packaging-line: production parameters -> machine configurations
// ---------------------------------------------------------------------------

struct PackagingFixture {
    semstore::KnowledgeBase kb;
    units::ConverterRegistry registry;
    confmap::ParameterSet product;
    std::vector<confmap::MachineProfile> machines;
};

inline PackagingFixture load_packaging_fixture(const std::filesystem::path& dir) {
    PackagingFixture fx;
    fx.kb = semstore::KnowledgeBase::load(dir / "kb.txt");
    fx.registry = units::ConverterRegistry::load(dir / "converters.txt");
    fx.product = confmap::load_parameters(dir / "product.params");
    fx.machines = confmap::load_profiles(dir / "machines.txt");
    return fx;
}

inline confmap::MappingReport run_packaging_line(const PackagingFixture& fx) {
    return confmap::derive_config(fx.product, fx.machines, fx.kb, fx.registry);
}

// ---------------------------------------------------------------------------
// interrupt: the carton-jam schedule on the packaging line
// ---------------------------------------------------------------------------

// Horizon covering the jam, the refill at tick 7 and a few steady-state
// ticks afterwards.
inline constexpr long long kInterruptHorizon = 12;

struct InterruptResult {
    std::string trace;  // tick/machine/state/buffer rows
    std::vector<linectl::LogEntry> events;
    linectl::LineModel line;
};

inline InterruptResult run_interrupt(const std::filesystem::path& dir) {
    linectl::LineModel line = linectl::LineModel::load(dir / "line.cfg");
    auto schedule = linectl::load_schedule(dir / "schedule.tsv");
    std::string trace = linectl::run_schedule(line, schedule, kInterruptHorizon);
    return {std::move(trace), line.event_log(), std::move(line)};
}

inline std::string render_events(const std::vector<linectl::LogEntry>& events) {
    std::string out;
    for (const linectl::LogEntry& e : events)
        out += std::to_string(e.tick) + "\t" + e.machine + "\t" + e.event + "\n";
    return out;
}

}  // namespace semdeg::scenarios
