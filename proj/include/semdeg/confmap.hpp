#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "semdeg/constraints.hpp"
#include "semdeg/errors.hpp"
#include "semdeg/semstore.hpp"
#include "semdeg/text.hpp"
#include "semdeg/units.hpp"

namespace semdeg::confmap {

using semstore::KnowledgeBase;
using units::ConverterRegistry;
using units::Quantity;

/// Product-level parameters keyed by dotted path.
using ParameterSet = std::map<std::string, Quantity>;

struct RequiredParameter {
    std::string local_name;
    std::string term;           // semantic term the machine attaches to it
    std::string expected_unit;  // empty means dimensionless
};

struct MachineProfile {
    std::string id;
    std::vector<RequiredParameter> required;
    std::map<std::string, std::string> derivations;  // local name -> expression text
};

enum class Provenance { Direct, Synonym, Derived };

inline std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::Direct: return "direct";
        case Provenance::Synonym: return "synonym";
        case Provenance::Derived: return "derived";
    }
    return "?";
}

struct ResolvedParameter {
    std::string machine;
    std::string local_name;
    Quantity value;  // already in the machine's expected unit
    Provenance provenance;
    std::string detail;  // source path or derivation expression
};

struct MissingParameter {
    std::string machine;
    std::string local_name;
    std::string reason;
};

/// resolved and missing partition the required parameters of all machines.
struct MappingReport {
    std::vector<ResolvedParameter> resolved;
    std::vector<MissingParameter> missing;
};

namespace detail {

inline std::string leaf_of(const std::string& path) {
    std::size_t pos = path.rfind('.');
    return pos == std::string::npos ? path : path.substr(pos + 1);
}

/// Converts into the machine's expected unit (spelled as the machine spells
/// it); throws NoConverterPath/UnknownUnit when unreachable.
inline Quantity into_unit(const Quantity& q, const std::string& expected_unit, const KnowledgeBase& kb,
                          const ConverterRegistry& registry) {
    const std::string from = kb.canonical_or_self(q.unit);
    const std::string to = kb.canonical_or_self(expected_unit);
    if (from == to) return {q.magnitude, expected_unit};
    units::ConverterChain chain = registry.find_chain(from, to);
    return {chain.composed.apply(q.magnitude), expected_unit};
}

}  // namespace detail

/// Maps product parameters onto each machine's required parameters.
/// Resolution order per parameter: direct leaf-name match, thesaurus
/// (canonical term) match, then the machine's derivation formula. Whatever
/// resolves is converted into the machine's expected unit; everything else
/// lands in `missing` with a machine-readable reason.
inline MappingReport derive_config(const ParameterSet& product,
                                   const std::vector<MachineProfile>& machines, const KnowledgeBase& kb,
                                   const ConverterRegistry& registry) {
    MappingReport report;
    constraints::Environment env;
    for (const auto& [path, q] : product) env.bindings[path] = q;

    for (const MachineProfile& machine : machines) {
        for (const RequiredParameter& param : machine.required) {
            std::optional<Quantity> value;
            Provenance provenance = Provenance::Direct;
            std::string detail;
            std::string failure;

            auto candidates_by = [&](auto&& match) {
                std::vector<std::string> paths;
                for (const auto& [path, _] : product)
                    if (match(detail::leaf_of(path))) paths.push_back(path);
                return paths;
            };

            // 1) direct: a product path whose leaf is the term verbatim
            std::vector<std::string> direct = candidates_by(
                [&](const std::string& leaf) { return leaf == param.term; });
            // 2) synonym: leaves matching after thesaurus canonicalization
            std::vector<std::string> canonical;
            if (direct.empty()) {
                const std::string want = kb.canonical_or_self(param.term);
                canonical = candidates_by(
                    [&](const std::string& leaf) { return kb.canonical_or_self(leaf) == want; });
            }
            const std::vector<std::string>& found = direct.empty() ? canonical : direct;
            if (found.size() > 1) {
                report.missing.push_back({machine.id, param.local_name,
                                          "ambiguous source paths: " + text::join(found, ", ")});
                continue;
            }
            if (found.size() == 1) {
                value = product.at(found[0]);
                provenance = direct.empty() ? Provenance::Synonym : Provenance::Direct;
                detail = found[0];
            } else if (auto it = machine.derivations.find(param.local_name);
                       it != machine.derivations.end()) {
                try {
                    constraints::Value v = constraints::evaluate(it->second, env, &registry, &kb);
                    if (const Quantity* q = std::get_if<Quantity>(&v)) {
                        value = *q;
                        provenance = Provenance::Derived;
                        detail = it->second;
                    } else {
                        failure = "derivation '" + it->second + "' yields a boolean";
                    }
                } catch (const Error& e) {
                    failure = e.what();
                }
            } else {
                failure = "no matching product parameter and no derivation";
            }

            if (!value) {
                report.missing.push_back({machine.id, param.local_name, failure});
                continue;
            }
            try {
                Quantity converted = detail::into_unit(*value, param.expected_unit, kb, registry);
                report.resolved.push_back({machine.id, param.local_name, converted, provenance, detail});
            } catch (const Error&) {
                report.missing.push_back(
                    {machine.id, param.local_name,
                     "no conversion from " + (value->unit.empty() ? "<dimensionless>" : value->unit) +
                         " to " + (param.expected_unit.empty() ? "<dimensionless>" : param.expected_unit)});
            }
        }
    }
    return report;
}

/// Deterministic human-readable rendering, stable enough for golden files.
inline std::string explain(const MappingReport& report) {
    std::string out;
    if (report.missing.empty()) out += "all parameters resolved\n";
    for (const ResolvedParameter& r : report.resolved)
        out += "RESOLVED\t" + r.machine + "." + r.local_name + " = " + r.value.str() + " (" +
               to_string(r.provenance) + ": " + r.detail + ")\n";
    for (const MissingParameter& m : report.missing)
        out += "MISSING\t" + m.machine + "." + m.local_name + ": " + m.reason + "\n";
    return out;
}

/// Strict tab-separated form of the same report, one record per line.
inline std::string to_records(const MappingReport& report) {
    std::string out;
    for (const ResolvedParameter& r : report.resolved)
        out += "RESOLVED\t" + r.machine + "\t" + r.local_name + "\t" + text::format_double(r.value.magnitude) +
               "\t" + (r.value.unit.empty() ? "-" : r.value.unit) + "\t" + to_string(r.provenance) + "\t" +
               r.detail + "\n";
    for (const MissingParameter& m : report.missing)
        out += "MISSING\t" + m.machine + "\t" + m.local_name + "\t" + m.reason + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Signal matching
// ---------------------------------------------------------------------------

struct SignalPort {
    std::string owner;
    std::string name;
    bool is_input = false;
    std::string term;  // semantic term of the signal
    std::string unit;  // empty for pure command/status signals

    std::string qualified() const { return owner + "." + name; }
    bool operator==(const SignalPort&) const = default;
};

struct Connection {
    SignalPort from;  // the out port
    SignalPort to;    // the in port
    std::optional<units::ConverterChain> chain;  // set when units differ
};

struct PortIssue {
    SignalPort port;
    std::string reason;
};

struct MatchReport {
    std::vector<Connection> connections;
    std::vector<PortIssue> ambiguous;
    std::vector<PortIssue> unmatched;
};

/// Wires function-block ports to device ports by canonicalized semantic term
/// with out->in direction pairing. Two or more candidates for one block port
/// is an ambiguity and connects nothing; unit differences get a converter
/// chain attached or the pair is reported unmatched.
inline MatchReport match_signals(const std::vector<SignalPort>& block_ports,
                                 const std::vector<SignalPort>& device_ports, const KnowledgeBase& kb,
                                 const ConverterRegistry& registry) {
    MatchReport report;
    std::vector<bool> consumed(device_ports.size(), false);
    for (const SignalPort& bp : block_ports) {
        const std::string want = kb.canonical_or_self(bp.term);
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < device_ports.size(); ++i) {
            const SignalPort& dp = device_ports[i];
            if (dp.is_input == bp.is_input) continue;  // need out -> in
            if (kb.canonical_or_self(dp.term) != want) continue;
            candidates.push_back(i);
        }
        if (candidates.empty()) {
            report.unmatched.push_back({bp, "no candidate device port for term " + bp.term});
            continue;
        }
        if (candidates.size() > 1) {
            std::vector<std::string> names;
            for (std::size_t i : candidates) names.push_back(device_ports[i].qualified());
            report.ambiguous.push_back({bp, "candidates: " + text::join(names, ", ")});
            continue;
        }
        const std::size_t pick = candidates.front();
        if (consumed[pick]) {
            report.unmatched.push_back(
                {bp, "device port " + device_ports[pick].qualified() + " already connected"});
            continue;
        }
        const SignalPort& dp = device_ports[pick];
        const SignalPort& out = bp.is_input ? dp : bp;
        const SignalPort& in = bp.is_input ? bp : dp;
        std::optional<units::ConverterChain> chain;
        if (kb.canonical_or_self(out.unit) != kb.canonical_or_self(in.unit)) {
            try {
                chain = registry.find_chain(kb.canonical_or_self(out.unit), kb.canonical_or_self(in.unit));
            } catch (const Error&) {
                report.unmatched.push_back(
                    {bp, "no conversion from " + out.unit + " to " + in.unit + " for " + dp.qualified()});
                continue;
            }
        }
        consumed[pick] = true;
        report.connections.push_back({out, in, std::move(chain)});
    }
    return report;
}

inline std::string explain(const MatchReport& report) {
    std::string out;
    for (const Connection& c : report.connections) {
        out += "CONNECT\t" + c.from.qualified() + " -> " + c.to.qualified();
        if (c.chain) out += " via " + c.chain->str();
        out += "\n";
    }
    for (const PortIssue& p : report.ambiguous)
        out += "AMBIGUOUS\t" + p.port.qualified() + ": " + p.reason + "\n";
    for (const PortIssue& p : report.unmatched)
        out += "UNMATCHED\t" + p.port.qualified() + ": " + p.reason + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// PARAM path magnitude unit records ('-' = dimensionless).
inline ParameterSet load_parameters(const std::filesystem::path& path) {
    ParameterSet set;
    const std::string source = path.string();
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
        if (f.size() != 4 || f[0] != "PARAM")
            throw ParseError(source, line, "expected PARAM path magnitude unit");
        if (set.count(f[1])) throw ParseError(source, line, "duplicate parameter path " + f[1]);
        set[f[1]] = {text::parse_double(f[2], source, line), f[3] == "-" ? "" : f[3]};
    });
    return set;
}

/// MACHINE id / REQUIRE machine local term unit / DERIVE machine local expr.
inline std::vector<MachineProfile> load_profiles(const std::filesystem::path& path) {
    std::vector<MachineProfile> machines;
    const std::string source = path.string();
    auto find = [&](const std::string& id, std::size_t line) -> MachineProfile& {
        for (MachineProfile& m : machines)
            if (m.id == id) return m;
        throw ParseError(source, line, "machine '" + id + "' not declared");
    };
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
        if (f[0] == "MACHINE") {
            if (f.size() != 2) throw ParseError(source, line, "expected MACHINE id");
            machines.push_back({f[1], {}, {}});
        } else if (f[0] == "REQUIRE") {
            if (f.size() != 5) throw ParseError(source, line, "expected REQUIRE machine local term unit");
            find(f[1], line).required.push_back({f[2], f[3], f[4] == "-" ? "" : f[4]});
        } else if (f[0] == "DERIVE") {
            if (f.size() != 4) throw ParseError(source, line, "expected DERIVE machine local expr");
            find(f[1], line).derivations[f[2]] = f[3];
        } else {
            throw ParseError(source, line, "unknown record kind '" + f[0] + "'");
        }
    });
    return machines;
}

/// PORT owner name in|out term unit records ('-' = no unit).
inline std::vector<SignalPort> load_ports(const std::filesystem::path& path) {
    std::vector<SignalPort> ports;
    const std::string source = path.string();
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
        if (f.size() != 6 || f[0] != "PORT")
            throw ParseError(source, line, "expected PORT owner name in|out term unit");
        if (f[3] != "in" && f[3] != "out")
            throw ParseError(source, line, "direction must be 'in' or 'out'");
        ports.push_back({f[1], f[2], f[3] == "in", f[4], f[5] == "-" ? "" : f[5]});
    });
    return ports;
}

}  // namespace semdeg::confmap
