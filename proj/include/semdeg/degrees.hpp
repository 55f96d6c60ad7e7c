#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "semdeg/errors.hpp"
#include "semdeg/text.hpp"

namespace semdeg::degrees {

class NotFound : public Error {
public:
    using Error::Error;
};

/// Structural axis: how information is exposed, from a bare file dump up to
/// a fully typed ontology. Totally ordered.
enum class Structural {
    Repository = 0,
    Terminology,
    Glossary,
    Thesaurus,
    Taxonomy,
    Ontology,
};

/// Behavioral axis: what kind of system knowledge is exposed, from raw values
/// up to an integrated simulation model. Treated as one total chain; see
/// README for the B2/B3 boundary discussion.
enum class Behavioral {
    Data = 0,
    Information,
    Constraints,
    FiniteAutomata,
    PetriNets,
    ProgrammingLanguage,
    IntegratedSimulationModel,
};

inline constexpr int kStructuralCount = 6;
inline constexpr int kBehavioralCount = 7;

inline std::string code(Structural s) { return "S" + std::to_string(static_cast<int>(s)); }
inline std::string code(Behavioral b) { return "B" + std::to_string(static_cast<int>(b)); }

inline std::string name(Structural s) {
    static const std::array<const char*, kStructuralCount> names = {
        "Repository", "Terminology", "Glossary", "Thesaurus", "Taxonomy", "Ontology"};
    return names[static_cast<std::size_t>(s)];
}

inline std::string name(Behavioral b) {
    static const std::array<const char*, kBehavioralCount> names = {
        "Data",      "Information",          "Constraints",
        "Finite automata", "Petri nets", "Programming language",
        "Integrated simulation model"};
    return names[static_cast<std::size_t>(b)];
}

inline std::string label(Structural s) { return code(s) + ": " + name(s); }
inline std::string label(Behavioral b) { return code(b) + ": " + name(b); }

inline std::optional<Structural> parse_structural(std::string_view tok) {
    if (tok.size() == 2 && (tok[0] == 'S' || tok[0] == 's') && tok[1] >= '0' && tok[1] <= '5')
        return static_cast<Structural>(tok[1] - '0');
    return std::nullopt;
}

inline std::optional<Behavioral> parse_behavioral(std::string_view tok) {
    if (tok.size() == 2 && (tok[0] == 'B' || tok[0] == 'b') && tok[1] >= '0' && tok[1] <= '6')
        return static_cast<Behavioral>(tok[1] - '0');
    return std::nullopt;
}

/// One point in the two-dimensional degree lattice. The lattice order is
/// componentwise and therefore only partial, so the comparison surface is the
/// free functions leq/join below rather than operator<.
struct DegreePair {
    Structural structural = Structural::Repository;
    Behavioral behavioral = Behavioral::Data;

    bool operator==(const DegreePair&) const = default;
};

inline DegreePair bottom() { return {Structural::Repository, Behavioral::Data}; }

/// Componentwise partial order: a <= b on both axes.
inline bool leq(DegreePair a, DegreePair b) {
    return a.structural <= b.structural && a.behavioral <= b.behavioral;
}

/// Least upper bound: componentwise maximum.
inline DegreePair join(DegreePair a, DegreePair b) {
    return {std::max(a.structural, b.structural), std::max(a.behavioral, b.behavioral)};
}

inline std::string label(DegreePair p) { return label(p.structural) + " / " + label(p.behavioral); }
inline std::string code(DegreePair p) { return code(p.structural) + "/" + code(p.behavioral); }

/// One row of the selection guideline: a yes/no question and the minimal
/// degree pair implied by a positive answer.
struct Rule {
    std::string id;
    std::string question;
    DegreePair minimum;
    std::string argument;
    std::string note;  // range annotation, e.g. R8 reaches up to B5
    std::optional<Behavioral> range_up_to;  // upper end of a ranged minimum
};

inline const std::array<Rule, 9>& rules() {
    using S = Structural;
    using B = Behavioral;
    static const std::array<Rule, 9> table = {{
        {"R0",
         "Is the scope of the system very limited? E.g. one vendor, only few entities, static setup",
         {S::Repository, B::Data},
         "Hard coding with less effort than modelling",
         ""},
        {"R1",
         "Have multiple parties the need to exchange standardized knowledge - which can be "
         "intuitively understood (such as units)?",
         {S::Terminology, B::Information},
         "Necessity of well defined terms.",
         ""},
        {"R2",
         "Have multiple parties the need to coordinate the use of terms?",
         {S::Glossary, B::Information},
         "Human readable description needed for a common understanding",
         ""},
        {"R3",
         "Is it necessary to integrate definition of terms of other parties?",
         {S::Thesaurus, B::Information},
         "Mapping of different definitions using a Thesaurus",
         ""},
        {"R4",
         "Should the system provide a basic type system and be extensible in terms of lately "
         "added types?",
         {S::Taxonomy, B::Information},
         "Parent-Child relations needed to classify types.",
         ""},
        {"R5",
         "Should the system be dynamic and extensible - e.g. allow for modelling of artificial "
         "elements during runtime?",
         {S::Ontology, B::Information},
         "Even the meaning of a relationship can be modelled",
         ""},
        {"R6",
         "Is it required to validate evolving configurations during runtime?",
         {S::Terminology, B::Constraints},
         "Modelling of requirements and a controlled vocabulary needed",
         ""},
        {"R7",
         "Shall reasoning be supported?",
         {S::Ontology, B::Constraints},
         "Necessity to describe complex and evaluable relationships",
         ""},
        {"R8",
         "Is it necessary to understand/modify the functionality (e.g. logic) of another system?",
         {S::Terminology, B::FiniteAutomata},
         "Machine interpretable description of logic required",
         "up to B5",
         B::ProgrammingLanguage},
    }};
    return table;
}

inline const Rule& rule(std::string_view id) {
    for (const Rule& r : rules())
        if (r.id == id) return r;
    throw NotFound("no such rule: " + std::string(id));
}

struct Advice {
    DegreePair result = bottom();
    std::vector<std::string> triggered;  // rule ids answered yes, in R0..R8 order
    std::vector<std::string> notes;
};

/// Joins the minima of all yes-answered rules. Ranged minima (R8) contribute
/// only their lower bound; the range shows up as a note. Rules absent from
/// the answer map count as "no" and are flagged in the notes.
inline Advice advise(const std::map<std::string, bool>& answers) {
    for (const auto& [id, _] : answers) rule(id);  // reject unknown rule ids
    Advice advice;
    for (const Rule& r : rules()) {
        auto it = answers.find(r.id);
        if (it == answers.end()) {
            advice.notes.push_back("no answer for " + r.id + "; treated as no");
            continue;
        }
        if (!it->second) continue;
        advice.result = join(advice.result, r.minimum);
        advice.triggered.push_back(r.id);
        if (!r.note.empty())
            advice.notes.push_back(r.id + ": minimum " + label(r.minimum.behavioral) + " (" + r.note + ")");
    }
    return advice;
}

/// One catalog row: an automation technology and the degree pair it exposes.
struct TechnologyEntry {
    std::string name;
    std::string variant;  // sub-row, e.g. the AutomationML parts
    DegreePair degrees;
    std::string note;
};

using Catalog = std::vector<TechnologyEntry>;

/// Loads the tab-separated catalog (name, variant, Sx, Bx, note). The file is
/// the single source of truth for the shipped technology table.
inline Catalog load_catalog(const std::filesystem::path& path) {
    Catalog catalog;
    const std::string source = path.string();
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& fields) {
        if (fields.size() < 4 || fields.size() > 5)
            throw ParseError(source, line, "expected 4 or 5 tab-separated fields");
        TechnologyEntry e;
        e.name = fields[0];
        e.variant = fields[1];
        auto s = parse_structural(fields[2]);
        auto b = parse_behavioral(fields[3]);
        if (!s) throw ParseError(source, line, "bad structural degree '" + fields[2] + "'");
        if (!b) throw ParseError(source, line, "bad behavioral degree '" + fields[3] + "'");
        e.degrees = {*s, *b};
        if (fields.size() == 5) e.note = fields[4];
        for (const TechnologyEntry& prev : catalog)
            if (prev.name == e.name && prev.variant == e.variant)
                throw ParseError(source, line, "duplicate entry " + e.name + "/" + e.variant);
        catalog.push_back(std::move(e));
    });
    return catalog;
}

/// Name matching is case-insensitive; the variant must match exactly.
inline const TechnologyEntry& lookup_technology(const Catalog& catalog, std::string_view tname,
                                                std::string_view variant = "") {
    const std::string lowered = text::to_lower(tname);
    for (const TechnologyEntry& e : catalog)
        if (text::to_lower(e.name) == lowered && e.variant == variant) return e;
    std::string msg = "no catalog entry for '" + std::string(tname) + "'";
    if (!variant.empty()) msg += " variant '" + std::string(variant) + "'";
    std::vector<std::string> variants;
    for (const TechnologyEntry& e : catalog)
        if (text::to_lower(e.name) == lowered) variants.push_back(e.variant);
    if (!variants.empty()) msg += " (known variants: " + text::join(variants, ", ") + ")";
    throw NotFound(msg);
}

/// Entries whose degrees dominate the requirement, sorted by (name, variant).
inline Catalog filter_technologies(const Catalog& catalog, DegreePair requirement) {
    Catalog out;
    for (const TechnologyEntry& e : catalog)
        if (leq(requirement, e.degrees)) out.push_back(e);
    std::sort(out.begin(), out.end(), [](const TechnologyEntry& a, const TechnologyEntry& b) {
        return std::tie(a.name, a.variant) < std::tie(b.name, b.variant);
    });
    return out;
}

}  // namespace semdeg::degrees
