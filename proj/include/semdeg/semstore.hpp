#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "semdeg/errors.hpp"
#include "semdeg/text.hpp"

namespace semdeg::semstore {

class DuplicateTerm : public Error {
public:
    using Error::Error;
};
class UnknownTerm : public Error {
public:
    using Error::Error;
};
class NoDescription : public Error {
public:
    using Error::Error;
};
class CycleDetected : public Error {
public:
    using Error::Error;
};

struct Term {
    std::string id;
    std::string label;

    bool operator==(const Term&) const = default;
};

struct OntologyTriple {
    std::string subject;
    std::string relation;
    std::string object;

    auto operator<=>(const OntologyTriple&) const = default;
};

/// Structural knowledge base covering the S1..S5 degrees: controlled terms,
/// glossary descriptions, synonym (thesaurus) links, an acyclic taxonomy and
/// typed triples. Value semantics: copying yields an independent snapshot.
///
/// Thread contract: many concurrent readers or a single writer; hand copies
/// to other threads instead of sharing a mutable instance.
class KnowledgeBase {
public:
    // --- terminology (S1) ---

    void define_term(const std::string& id, const std::string& label = "") {
        if (terms_.count(id)) throw DuplicateTerm("term already defined: " + id);
        terms_.emplace(id, label);
    }

    bool has_term(const std::string& id) const { return terms_.count(id) != 0; }

    const std::string& label(const std::string& id) const { return find_term(id)->second; }

    std::vector<Term> terms() const {
        std::vector<Term> out;
        for (const auto& [id, label] : terms_) out.push_back({id, label});
        return out;
    }

    // --- glossary (S2) ---

    void set_description(const std::string& id, const std::string& description) {
        find_term(id);
        glossary_[id] = description;
    }

    const std::string& describe(const std::string& id) const {
        find_term(id);
        auto it = glossary_.find(id);
        if (it == glossary_.end()) throw NoDescription("no description for term: " + id);
        return it->second;
    }

    // --- thesaurus (S3) ---

    /// Registers alias -> canonical. Links are flattened on insertion so that
    /// canonical targets are never aliases themselves and canonicalize() is a
    /// single map lookup.
    void add_synonym(const std::string& alias, const std::string& canonical) {
        find_term(alias);
        find_term(canonical);
        std::string target = canonical;
        if (auto it = synonyms_.find(target); it != synonyms_.end()) target = it->second;
        if (target == alias)
            throw CycleDetected("synonym link would make '" + alias + "' its own canonical term");
        synonyms_[alias] = target;
        for (auto& [a, c] : synonyms_)
            if (c == alias) c = target;
    }

    /// Canonical id for an alias; a non-alias maps to itself. Idempotent.
    std::string canonicalize(const std::string& id) const {
        find_term(id);
        auto it = synonyms_.find(id);
        return it == synonyms_.end() ? id : it->second;
    }

    /// Like canonicalize but tolerates ids outside the terminology; used for
    /// matching over externally supplied names.
    std::string canonical_or_self(const std::string& id) const {
        auto it = synonyms_.find(id);
        return it == synonyms_.end() ? id : it->second;
    }

    // --- taxonomy (S4) ---

    /// Adds child -> parent. Multiple parents are allowed (DAG); any edge
    /// that would close a cycle is rejected.
    void add_taxonomy_edge(const std::string& child, const std::string& parent) {
        find_term(child);
        find_term(parent);
        if (child == parent) throw CycleDetected("self edge on " + child);
        if (reaches(parent, child))
            throw CycleDetected("edge " + child + " -> " + parent + " would close a cycle");
        parents_[child].insert(parent);
    }

    /// Reflexive-transitive reachability over taxonomy edges.
    bool is_subtype(const std::string& child, const std::string& ancestor) const {
        find_term(child);
        find_term(ancestor);
        return child == ancestor || reaches(child, ancestor);
    }

    std::vector<std::pair<std::string, std::string>> taxonomy_edges() const {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& [child, ps] : parents_)
            for (const auto& p : ps) out.emplace_back(child, p);
        return out;
    }

    // --- ontology triples (S5) ---

    void add_triple(const std::string& subject, const std::string& relation, const std::string& object) {
        find_term(subject);
        find_term(relation);
        find_term(object);
        triples_.insert({subject, relation, object});
    }

    /// Pattern query; nullopt positions are wildcards. Results come back in
    /// (subject, relation, object) lexicographic order.
    std::vector<OntologyTriple> query_triples(const std::optional<std::string>& subject,
                                              const std::optional<std::string>& relation,
                                              const std::optional<std::string>& object) const {
        std::vector<OntologyTriple> out;
        for (const OntologyTriple& t : triples_) {
            if (subject && t.subject != *subject) continue;
            if (relation && t.relation != *relation) continue;
            if (object && t.object != *object) continue;
            out.push_back(t);
        }
        return out;
    }

    /// Transitive closure of one relation's edge set, reached over paths of
    /// at least one edge. (s,s) pairs appear only when s lies on a cycle.
    std::set<std::pair<std::string, std::string>> transitive_closure(const std::string& relation) const {
        find_term(relation);
        std::map<std::string, std::set<std::string>> succ;
        for (const OntologyTriple& t : triples_)
            if (t.relation == relation) succ[t.subject].insert(t.object);
        std::set<std::pair<std::string, std::string>> closure;
        for (const auto& [start, _] : succ) {
            std::set<std::string> seen;
            std::deque<std::string> frontier(succ.at(start).begin(), succ.at(start).end());
            while (!frontier.empty()) {
                std::string node = frontier.front();
                frontier.pop_front();
                if (!seen.insert(node).second) continue;
                closure.emplace(start, node);
                if (auto it = succ.find(node); it != succ.end())
                    for (const auto& next : it->second) frontier.push_back(next);
            }
        }
        return closure;
    }

    // --- integrity / persistence ---

    /// Full referential-integrity scan; throws on the first dangling id.
    void check_integrity() const {
        for (const auto& [id, _] : glossary_) find_term(id);
        for (const auto& [a, c] : synonyms_) {
            find_term(a);
            find_term(c);
            if (synonyms_.count(c))
                throw Error("synonym chain: canonical '" + c + "' is itself an alias");
        }
        for (const auto& [child, ps] : parents_) {
            find_term(child);
            for (const auto& p : ps) find_term(p);
            if (reaches(child, child)) throw Error("taxonomy cycle through " + child);
        }
        for (const OntologyTriple& t : triples_) {
            find_term(t.subject);
            find_term(t.relation);
            find_term(t.object);
        }
    }

    /// Record kinds: TERM, GLOS, SYN, TAX, TRIPLE; tab-separated, UTF-8.
    static KnowledgeBase load(const std::filesystem::path& path) {
        KnowledgeBase kb;
        const std::string source = path.string();
        text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
            try {
                kb.apply_record(f);
            } catch (const ParseError&) {
                throw;
            } catch (const Error& e) {
                throw ParseError(source, line, e.what());
            }
        });
        return kb;
    }

    std::string save() const {
        std::string out;
        for (const auto& [id, label] : terms_) out += "TERM\t" + id + "\t" + label + "\n";
        for (const auto& [id, gloss] : glossary_) out += "GLOS\t" + id + "\t" + gloss + "\n";
        for (const auto& [a, c] : synonyms_) out += "SYN\t" + a + "\t" + c + "\n";
        for (const auto& [child, parent] : taxonomy_edges()) out += "TAX\t" + child + "\t" + parent + "\n";
        for (const OntologyTriple& t : triples_)
            out += "TRIPLE\t" + t.subject + "\t" + t.relation + "\t" + t.object + "\n";
        return out;
    }

private:
    void apply_record(const std::vector<std::string>& f) {
        if (f.empty()) return;
        const std::string& kind = f[0];
        auto want = [&](std::size_t n) {
            if (f.size() != n + 1)
                throw Error(kind + " record needs " + std::to_string(n) + " fields, got " +
                            std::to_string(f.size() - 1));
        };
        if (kind == "TERM") {
            if (f.size() < 2 || f.size() > 3) throw Error("TERM record needs 1 or 2 fields");
            define_term(f[1], f.size() == 3 ? f[2] : "");
        } else if (kind == "GLOS") {
            want(2);
            set_description(f[1], f[2]);
        } else if (kind == "SYN") {
            want(2);
            add_synonym(f[1], f[2]);
        } else if (kind == "TAX") {
            want(2);
            add_taxonomy_edge(f[1], f[2]);
        } else if (kind == "TRIPLE") {
            want(3);
            add_triple(f[1], f[2], f[3]);
        } else {
            throw Error("unknown record kind '" + kind + "'");
        }
    }

    std::map<std::string, std::string>::const_iterator find_term(const std::string& id) const {
        auto it = terms_.find(id);
        if (it == terms_.end()) throw UnknownTerm("unknown term: " + id);
        return it;
    }

    /// True when `to` is reachable from `from` over at least one parent edge.
    bool reaches(const std::string& from, const std::string& to) const {
        std::set<std::string> seen;
        std::deque<std::string> frontier{from};
        while (!frontier.empty()) {
            std::string node = frontier.front();
            frontier.pop_front();
            auto it = parents_.find(node);
            if (it == parents_.end()) continue;
            for (const std::string& parent : it->second) {
                if (parent == to) return true;
                if (seen.insert(parent).second) frontier.push_back(parent);
            }
        }
        return false;
    }

    std::map<std::string, std::string> terms_;     // id -> display label
    std::map<std::string, std::string> glossary_;  // id -> description
    std::map<std::string, std::string> synonyms_;  // alias -> canonical
    std::map<std::string, std::set<std::string>> parents_;
    std::set<OntologyTriple> triples_;
};

}  // namespace semdeg::semstore
