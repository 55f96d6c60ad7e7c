#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "semdeg/errors.hpp"
#include "semdeg/semstore.hpp"
#include "semdeg/text.hpp"

namespace semdeg::units {

class DegenerateConverter : public Error {
public:
    using Error::Error;
};
class DuplicateConverter : public Error {
public:
    using Error::Error;
};
class UnknownConverter : public Error {
public:
    using Error::Error;
};
class UnknownUnit : public Error {
public:
    using Error::Error;
};
class NoConverterPath : public Error {
public:
    using Error::Error;
};
class UnitMismatch : public Error {
public:
    using Error::Error;
};
class MalformedChain : public Error {
public:
    using Error::Error;
};

/// Comparison tolerance used for magnitudes throughout: 1e-9 relative with a
/// 1e-12 absolute floor near zero.
inline bool nearly_equal(double a, double b, double rel = 1e-9, double abs = 1e-12) {
    double diff = std::fabs(a - b);
    return diff <= abs || diff <= rel * std::max(std::fabs(a), std::fabs(b));
}

/// A tagged magnitude. An empty unit means dimensionless.
struct Quantity {
    double magnitude = 0.0;
    std::string unit;

    std::string str() const {
        return text::format_double(magnitude) + (unit.empty() ? "" : " " + unit);
    }
};

/// y = scale * x + offset.
struct Affine {
    double scale = 1.0;
    double offset = 0.0;

    double apply(double x) const { return scale * x + offset; }

    /// Composition: first this map, then `next`.
    Affine then(const Affine& next) const {
        return {next.scale * scale, next.scale * offset + next.offset};
    }
};

struct Converter {
    std::string id;
    std::string source;
    std::string target;
    double scale = 1.0;
    double offset = 0.0;

    Affine affine() const { return {scale, offset}; }
    bool operator==(const Converter&) const = default;
};

/// An ordered converter sequence with its composed closed form. The empty
/// chain is the identity and applies to any unit.
struct ConverterChain {
    std::vector<Converter> steps;
    Affine composed;       // fold of the step maps
    std::string source;    // empty for the identity chain
    std::string target;

    bool is_identity() const { return steps.empty(); }

    std::vector<std::string> step_ids() const {
        std::vector<std::string> ids;
        for (const Converter& c : steps) ids.push_back(c.id);
        return ids;
    }

    std::string str() const { return "[" + text::join(step_ids(), " ") + "]"; }
};

inline ConverterChain make_chain(std::vector<Converter> steps) {
    if (steps.empty()) return {};
    ConverterChain chain;
    chain.source = steps.front().source;
    chain.target = steps.back().target;
    for (std::size_t i = 0; i + 1 < steps.size(); ++i)
        if (steps[i].target != steps[i + 1].source)
            throw MalformedChain("chain steps do not connect: " + steps[i].id + " -> " + steps[i + 1].id);
    for (const Converter& c : steps) chain.composed = chain.composed.then(c.affine());
    chain.steps = std::move(steps);
    return chain;
}

/// Directed graph of affine converters over unit terms. Chain discovery is a
/// breadth-first search; reachability over this graph is the reasoning step
/// that answers converter requests.
class ConverterRegistry {
public:
    void register_unit(const std::string& unit) { units_.insert(unit); }

    void register_converter(const Converter& c) {
        if (c.scale == 0.0) throw DegenerateConverter("converter " + c.id + " has scale 0");
        if (c.source == c.target)
            throw DegenerateConverter("converter " + c.id + " maps " + c.source + " to itself");
        if (by_id_.count(c.id)) throw DuplicateConverter("converter id already registered: " + c.id);
        by_id_.emplace(c.id, c);
        units_.insert(c.source);
        units_.insert(c.target);
        auto& ids = out_edges_[c.source];
        ids.insert(std::lower_bound(ids.begin(), ids.end(), c.id), c.id);
    }

    bool has_unit(const std::string& unit) const { return units_.count(unit) != 0; }

    const Converter& converter(const std::string& id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) throw UnknownConverter("unknown converter: " + id);
        return it->second;
    }

    std::vector<Converter> converters() const {
        std::vector<Converter> out;
        for (const auto& [_, c] : by_id_) out.push_back(c);
        return out;
    }

    std::vector<std::string> units() const { return {units_.begin(), units_.end()}; }

    /// Shortest chain by step count from source to target; ties are broken by
    /// the lexicographically smallest sequence of converter ids. Equal units
    /// yield the identity chain.
    ConverterChain find_chain(const std::string& source, const std::string& target) const {
        if (!has_unit(source)) throw UnknownUnit("unknown unit: " + source);
        if (!has_unit(target)) throw UnknownUnit("unknown unit: " + target);
        if (source == target) {
            ConverterChain identity;
            identity.source = identity.target = source;
            return identity;
        }
        // Distance-to-target over reversed edges, then a greedy forward walk:
        // at each node take the smallest converter id that stays on a
        // shortest path. That walk is the lexicographic minimum.
        std::map<std::string, std::vector<const Converter*>> in_edges;
        for (const auto& [_, c] : by_id_) in_edges[c.target].push_back(&c);
        std::map<std::string, int> dist;
        dist[target] = 0;
        std::deque<std::string> frontier{target};
        while (!frontier.empty()) {
            std::string node = frontier.front();
            frontier.pop_front();
            auto it = in_edges.find(node);
            if (it == in_edges.end()) continue;
            for (const Converter* c : it->second)
                if (!dist.count(c->source)) {
                    dist[c->source] = dist[node] + 1;
                    frontier.push_back(c->source);
                }
        }
        if (!dist.count(source))
            throw NoConverterPath("no converter path from " + source + " to " + target);
        std::vector<Converter> steps;
        std::string node = source;
        while (node != target) {
            const int remaining = dist.at(node);
            const Converter* pick = nullptr;
            auto it = out_edges_.find(node);
            if (it != out_edges_.end())
                for (const std::string& id : it->second) {  // ids kept sorted
                    const Converter& c = by_id_.at(id);
                    auto dt = dist.find(c.target);
                    if (dt != dist.end() && dt->second == remaining - 1) {
                        pick = &c;
                        break;
                    }
                }
            if (!pick) throw NoConverterPath("no converter path from " + source + " to " + target);
            steps.push_back(*pick);
            node = pick->target;
        }
        return make_chain(std::move(steps));
    }

    /// File format: CONV <tab> id <tab> source <tab> target <tab> scale <tab> offset.
    static ConverterRegistry load(const std::filesystem::path& path) {
        ConverterRegistry registry;
        const std::string source = path.string();
        text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
            if (f.size() != 6 || f[0] != "CONV")
                throw ParseError(source, line, "expected CONV id source target scale offset");
            Converter c{f[1], f[2], f[3], text::parse_double(f[4], source, line),
                        text::parse_double(f[5], source, line)};
            try {
                registry.register_converter(c);
            } catch (const Error& e) {
                throw ParseError(source, line, e.what());
            }
        });
        return registry;
    }

    std::string save() const {
        std::string out;
        for (const auto& [_, c] : by_id_)
            out += "CONV\t" + c.id + "\t" + c.source + "\t" + c.target + "\t" +
                   text::format_double(c.scale) + "\t" + text::format_double(c.offset) + "\n";
        return out;
    }

private:
    std::map<std::string, Converter> by_id_;
    std::map<std::string, std::vector<std::string>> out_edges_;  // source -> sorted converter ids
    std::set<std::string> units_;
};

/// Maps a quantity through the chain's composed affine form.
inline Quantity apply_chain(const ConverterChain& chain, const Quantity& q) {
    if (chain.is_identity()) return q;
    if (q.unit != chain.source)
        throw UnitMismatch("chain expects " + chain.source + ", got " + (q.unit.empty() ? "<dimensionless>" : q.unit));
    return {chain.composed.apply(q.magnitude), chain.target};
}

// Triple vocabulary for serialized chains (schema version 1, see README).
inline constexpr const char* kChainSubject = "chain";
inline constexpr const char* kStartsWith = "startsWith";
inline constexpr const char* kIsIdentity = "isIdentity";
inline constexpr const char* kConvertsFrom = "convertsFrom";
inline constexpr const char* kConvertsTo = "convertsTo";
inline constexpr const char* kPrecedes = "precedes";

/// Serializes a chain as ontology triples: a head marker, convertsFrom /
/// convertsTo per step and precedes links between adjacent steps. A receiver
/// that also knows the converter definitions can rebuild the chain with
/// triples_to_chain.
inline std::vector<semstore::OntologyTriple> chain_to_triples(const ConverterChain& chain) {
    std::vector<semstore::OntologyTriple> triples;
    if (chain.is_identity()) {
        triples.push_back({kChainSubject, kIsIdentity, kChainSubject});
        return triples;
    }
    triples.push_back({kChainSubject, kStartsWith, chain.steps.front().id});
    for (const Converter& c : chain.steps) {
        triples.push_back({c.id, kConvertsFrom, c.source});
        triples.push_back({c.id, kConvertsTo, c.target});
    }
    for (std::size_t i = 0; i + 1 < chain.steps.size(); ++i)
        triples.push_back({chain.steps[i].id, kPrecedes, chain.steps[i + 1].id});
    return triples;
}

/// Rebuilds a chain from its triple form, looking the referenced converters
/// up in the given registry.
inline ConverterChain triples_to_chain(const std::vector<semstore::OntologyTriple>& triples,
                                       const ConverterRegistry& registry) {
    std::string head;
    std::map<std::string, std::string> next;
    for (const semstore::OntologyTriple& t : triples) {
        if (t.relation == kIsIdentity) return {};
        if (t.relation == kStartsWith) {
            if (!head.empty()) throw MalformedChain("multiple chain head markers");
            head = t.object;
        } else if (t.relation == kPrecedes) {
            if (!next.emplace(t.subject, t.object).second)
                throw MalformedChain("converter " + t.subject + " precedes two steps");
        }
    }
    if (head.empty()) throw MalformedChain("no chain head marker");
    std::vector<Converter> steps;
    std::string id = head;
    while (true) {
        steps.push_back(registry.converter(id));
        auto it = next.find(id);
        if (it == next.end()) break;
        id = it->second;
        if (steps.size() > triples.size()) throw MalformedChain("cycle in precedes links");
    }
    if (steps.size() != next.size() + 1) throw MalformedChain("disconnected precedes links");
    return make_chain(std::move(steps));
}

}  // namespace semdeg::units
