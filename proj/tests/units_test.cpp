#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <vector>

#include "semdeg/semstore.hpp"
#include "semdeg/units.hpp"
#include "test_support.hpp"

using namespace semdeg::units;

namespace {

// The three temperature converters in affine form, derived from the scale
// definitions: K = (F - 32) * 5/9 + 273.15, C = K - 273.15, F = C * 9/5 + 32.
Converter f1() { return {"f1", "Fahrenheit", "Kelvin", 5.0 / 9.0, 273.15 - 32.0 * 5.0 / 9.0}; }
Converter f2() { return {"f2", "Kelvin", "Celsius", 1.0, -273.15}; }
Converter f3() { return {"f3", "Celsius", "Fahrenheit", 1.8, 32.0}; }

ConverterRegistry temperature_registry() {
    ConverterRegistry r;
    r.register_converter(f1());
    r.register_converter(f2());
    r.register_converter(f3());
    return r;
}

/// Brute-force shortest-path oracle: enumerates every id sequence up to the
/// given length and keeps the best (length, ids) key. Independent of the BFS
/// in the registry.
std::optional<std::vector<std::string>> brute_force_chain(const std::vector<Converter>& converters,
                                                          const std::string& source,
                                                          const std::string& target,
                                                          std::size_t max_len = 4) {
    if (source == target) return std::vector<std::string>{};
    std::optional<std::vector<std::string>> best;
    std::vector<const Converter*> stack;
    auto better = [&](const std::vector<std::string>& cand) {
        if (!best) return true;
        if (cand.size() != best->size()) return cand.size() < best->size();
        return cand < *best;
    };
    std::function<void(const std::string&)> walk = [&](const std::string& at) {
        if (at == target) {
            std::vector<std::string> ids;
            for (const Converter* c : stack) ids.push_back(c->id);
            if (better(ids)) best = ids;
            return;
        }
        if (stack.size() >= max_len) return;
        for (const Converter& c : converters) {
            if (c.source != at) continue;
            stack.push_back(&c);
            walk(c.target);
            stack.pop_back();
        }
    };
    walk(source);
    return best;
}

}  // namespace

TEST_CASE("registry registration rules") {
    ConverterRegistry r;
    r.register_converter(f1());
    CHECK(r.has_unit("Fahrenheit"));
    CHECK(r.has_unit("Kelvin"));
    CHECK_THROWS_AS(r.register_converter({"z", "A", "B", 0.0, 1.0}), DegenerateConverter);
    CHECK_THROWS_AS(r.register_converter({"z", "A", "A", 1.0, 0.0}), DegenerateConverter);
    CHECK_THROWS_AS(r.register_converter(f1()), DuplicateConverter);
    // duplicate (source, target) with a fresh id is fine
    r.register_converter({"f1b", "Fahrenheit", "Kelvin", 5.0 / 9.0, 255.372});
}

TEST_CASE("find_chain") {
    ConverterRegistry r = temperature_registry();

    SECTION("Fahrenheit to Celsius goes through f1 then f2") {
        ConverterChain chain = r.find_chain("Fahrenheit", "Celsius");
        CHECK(chain.step_ids() == std::vector<std::string>{"f1", "f2"});
        CHECK(chain.source == "Fahrenheit");
        CHECK(chain.target == "Celsius");
    }
    SECTION("identity chain") {
        ConverterChain chain = r.find_chain("Celsius", "Celsius");
        CHECK(chain.is_identity());
        CHECK(chain.composed.scale == 1.0);
        CHECK(chain.composed.offset == 0.0);
    }
    SECTION("Kelvin to Fahrenheit goes through f2 then f3") {
        ConverterChain chain = r.find_chain("Kelvin", "Fahrenheit");
        CHECK(chain.step_ids() == std::vector<std::string>{"f2", "f3"});
        // frozen endpoint check: 273.15 K = 32 F
        CHECK(nearly_equal(chain.composed.apply(273.15), 32.0));
    }
    SECTION("unreachable target") {
        r.register_unit("Kilogram");
        CHECK_THROWS_AS(r.find_chain("Fahrenheit", "Kilogram"), NoConverterPath);
        CHECK_THROWS_AS(r.find_chain("Fahrenheit", "Parsec"), UnknownUnit);
    }
    SECTION("tie break picks the lexicographically smallest id sequence") {
        ConverterRegistry tie;
        tie.register_converter({"b", "X", "Y", 2.0, 0.0});
        tie.register_converter({"a", "X", "Y", 3.0, 0.0});
        CHECK(tie.find_chain("X", "Y").step_ids() == std::vector<std::string>{"a"});
    }
}

TEST_CASE("apply_chain") {
    ConverterRegistry r = temperature_registry();

    SECTION("77 F becomes 25 C") {
        Quantity out = apply_chain(r.find_chain("Fahrenheit", "Celsius"), {77.0, "Fahrenheit"});
        CHECK(out.unit == "Celsius");
        CHECK(nearly_equal(out.magnitude, 25.0));
    }
    SECTION("identity keeps the value and unit") {
        Quantity out = apply_chain(r.find_chain("Celsius", "Celsius"), {33.3, "Celsius"});
        CHECK(out.magnitude == 33.3);
        CHECK(out.unit == "Celsius");
    }
    SECTION("273.15 K becomes 32 F") {
        Quantity out = apply_chain(r.find_chain("Kelvin", "Fahrenheit"), {273.15, "Kelvin"});
        CHECK(out.unit == "Fahrenheit");
        CHECK(nearly_equal(out.magnitude, 32.0));
    }
    SECTION("unit mismatch is rejected") {
        CHECK_THROWS_AS(apply_chain(r.find_chain("Fahrenheit", "Celsius"), {1.0, "Kelvin"}), UnitMismatch);
    }
}

TEST_CASE("composed form equals stepwise application") {
    ConverterRegistry r = temperature_registry();
    ConverterChain chain = r.find_chain("Fahrenheit", "Celsius");
    auto rng = testsupport::rng(3);
    std::uniform_real_distribution<double> mag(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double x = mag(rng);
        double stepwise = x;
        for (const Converter& c : chain.steps) stepwise = c.affine().apply(stepwise);
        CHECK(nearly_equal(chain.composed.apply(x), stepwise));
    }
}

TEST_CASE("round trip Fahrenheit -> Celsius -> Fahrenheit") {
    ConverterRegistry r = temperature_registry();
    ConverterChain there = r.find_chain("Fahrenheit", "Celsius");
    ConverterChain back = r.find_chain("Celsius", "Fahrenheit");
    auto rng = testsupport::rng(4);
    std::uniform_real_distribution<double> mag(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double x = mag(rng);
        Quantity out = apply_chain(back, apply_chain(there, {x, "Fahrenheit"}));
        CHECK(nearly_equal(out.magnitude, x));
    }
}

TEST_CASE("chain minimality matches brute-force enumeration") {
    auto rng = testsupport::rng(5);
    std::uniform_int_distribution<int> unit_count(2, 6);
    std::uniform_int_distribution<int> conv_count(1, 10);
    std::uniform_real_distribution<double> coef(0.5, 3.0);
    for (int round = 0; round < 500; ++round) {
        const int n = unit_count(rng);
        std::vector<std::string> units;
        for (int i = 0; i < n; ++i) units.push_back("u" + std::to_string(i));
        ConverterRegistry registry;
        for (const std::string& u : units) registry.register_unit(u);
        std::vector<Converter> converters;
        const int m = conv_count(rng);
        std::uniform_int_distribution<int> pick(0, n - 1);
        for (int k = 0; k < m; ++k) {
            int a = pick(rng), b = pick(rng);
            if (a == b) continue;
            Converter c{"c" + std::to_string(k), units[a], units[b], coef(rng), coef(rng)};
            converters.push_back(c);
            registry.register_converter(c);
        }
        for (const std::string& from : units)
            for (const std::string& to : units) {
                auto expected = brute_force_chain(converters, from, to);
                if (!expected) {
                    CHECK_THROWS_AS(registry.find_chain(from, to), NoConverterPath);
                } else {
                    CHECK(registry.find_chain(from, to).step_ids() == *expected);
                }
            }
    }
}

TEST_CASE("reachability agrees with the knowledge-base transitive closure") {
    // cross-module oracle: the converter graph viewed as convertsTo triples
    ConverterRegistry r = temperature_registry();
    semdeg::semstore::KnowledgeBase kb;
    kb.define_term("convertsTo");
    for (const std::string& u : r.units()) kb.define_term(u);
    for (const Converter& c : r.converters()) kb.add_triple(c.source, "convertsTo", c.target);
    auto closure = kb.transitive_closure("convertsTo");
    for (const std::string& a : r.units())
        for (const std::string& b : r.units()) {
            if (a == b) continue;
            bool reachable = true;
            try {
                r.find_chain(a, b);
            } catch (const NoConverterPath&) {
                reachable = false;
            }
            CHECK(reachable == (closure.count({a, b}) == 1));
        }
}

TEST_CASE("chain triple serialization") {
    ConverterRegistry r = temperature_registry();

    SECTION("two-step chain yields six triples") {
        ConverterChain chain = r.find_chain("Fahrenheit", "Celsius");
        auto triples = chain_to_triples(chain);
        REQUIRE(triples.size() == 6);
        CHECK(triples[0] == semdeg::semstore::OntologyTriple{"chain", "startsWith", "f1"});
        std::set<semdeg::semstore::OntologyTriple> got(triples.begin(), triples.end());
        CHECK(got.count({"f1", "convertsFrom", "Fahrenheit"}) == 1);
        CHECK(got.count({"f1", "convertsTo", "Kelvin"}) == 1);
        CHECK(got.count({"f2", "convertsFrom", "Kelvin"}) == 1);
        CHECK(got.count({"f2", "convertsTo", "Celsius"}) == 1);
        CHECK(got.count({"f1", "precedes", "f2"}) == 1);
    }
    SECTION("single-step chain has no precedes triple") {
        auto triples = chain_to_triples(r.find_chain("Kelvin", "Celsius"));
        REQUIRE(triples.size() == 3);
        for (const auto& t : triples) CHECK(t.relation != "precedes");
    }
    SECTION("identity chain is a single marker") {
        auto triples = chain_to_triples(r.find_chain("Celsius", "Celsius"));
        REQUIRE(triples.size() == 1);
        CHECK(triples[0].relation == "isIdentity");
    }
    SECTION("round trip through triples") {
        for (auto [from, to] : std::vector<std::pair<std::string, std::string>>{
                 {"Fahrenheit", "Celsius"}, {"Kelvin", "Fahrenheit"}, {"Celsius", "Celsius"},
                 {"Celsius", "Kelvin"}}) {
            ConverterChain chain = r.find_chain(from, to);
            ConverterChain rebuilt = triples_to_chain(chain_to_triples(chain), r);
            CHECK(rebuilt.step_ids() == chain.step_ids());
            CHECK(rebuilt.composed.scale == chain.composed.scale);
            CHECK(rebuilt.composed.offset == chain.composed.offset);
        }
    }
    SECTION("malformed triple sets are rejected") {
        CHECK_THROWS_AS(triples_to_chain({{"f1", "precedes", "f2"}}, r), MalformedChain);
        CHECK_THROWS_AS(triples_to_chain({{"chain", "startsWith", "f1"},
                                          {"chain", "startsWith", "f2"}},
                                         r),
                        MalformedChain);
    }
}

TEST_CASE("registry file round trip") {
    ConverterRegistry r = temperature_registry();
    const auto tmp = std::filesystem::temp_directory_path() / "semdeg_conv_roundtrip.txt";
    semdeg::text::write_file(tmp, r.save());
    ConverterRegistry loaded = ConverterRegistry::load(tmp);
    CHECK(loaded.save() == r.save());
    CHECK(nearly_equal(apply_chain(loaded.find_chain("Fahrenheit", "Celsius"), {77.0, "Fahrenheit"}).magnitude,
                       25.0));
    semdeg::text::write_file(tmp, "CONV\tx\tA\tB\t0\t1\n");
    CHECK_THROWS_AS(ConverterRegistry::load(tmp), semdeg::ParseError);
    std::filesystem::remove(tmp);
}
