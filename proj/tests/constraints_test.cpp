#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "semdeg/constraints.hpp"
#include "test_support.hpp"

using namespace semdeg::constraints;
using semdeg::units::Converter;
using semdeg::units::ConverterRegistry;
using semdeg::units::Quantity;
using semdeg::units::UnitMismatch;

namespace {

ConverterRegistry temperature_registry() {
    ConverterRegistry r;
    r.register_converter({"f1", "Fahrenheit", "Kelvin", 5.0 / 9.0, 273.15 - 32.0 * 5.0 / 9.0});
    r.register_converter({"f2", "Kelvin", "Celsius", 1.0, -273.15});
    r.register_converter({"f3", "Celsius", "Fahrenheit", 1.8, 32.0});
    return r;
}

bool eval_bool(const std::string& src, const Environment& env,
               const ConverterRegistry* reg = nullptr) {
    return std::get<bool>(evaluate(src, env, reg));
}

Quantity eval_quantity(const std::string& src, const Environment& env,
                       const ConverterRegistry* reg = nullptr) {
    return std::get<Quantity>(evaluate(src, env, reg));
}

/// Random AST generator for the print/parse and termination properties.
ExprPtr random_expr(std::mt19937_64& rng, int depth) {
    std::uniform_int_distribution<int> kind(0, depth <= 0 ? 2 : 4);
    switch (kind(rng)) {
        case 0: {
            std::uniform_real_distribution<double> mag(-100.0, 100.0);
            std::uniform_int_distribution<int> with_unit(0, 2);
            NumberLit lit{std::round(mag(rng) * 16.0) / 16.0, ""};
            if (lit.value < 0) lit.value = -lit.value;  // negatives come from unary minus
            if (with_unit(rng) == 0) lit.unit = "Celsius";
            return make_expr(lit);
        }
        case 1:
            return make_expr(BoolLit{std::uniform_int_distribution<int>(0, 1)(rng) == 1});
        case 2: {
            static const char* paths[] = {"a", "b.c", "Product.CommonParameter.Weight", "temp"};
            return make_expr(PathRef{paths[std::uniform_int_distribution<int>(0, 3)(rng)]});
        }
        case 3: {
            UnaryOp op = std::uniform_int_distribution<int>(0, 1)(rng) ? UnaryOp::Not : UnaryOp::Neg;
            return make_expr(Unary{op, random_expr(rng, depth - 1)});
        }
        default: {
            static const BinaryOp ops[] = {BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div,
                                           BinaryOp::Lt,  BinaryOp::Le,  BinaryOp::Eq,  BinaryOp::Ge,
                                           BinaryOp::Gt,  BinaryOp::Ne,  BinaryOp::And, BinaryOp::Or};
            BinaryOp op = ops[std::uniform_int_distribution<int>(0, 11)(rng)];
            return make_expr(Binary{op, random_expr(rng, depth - 1), random_expr(rng, depth - 1)});
        }
    }
}

}  // namespace

TEST_CASE("parsing shapes") {
    SECTION("comparison over two path references") {
        ExprPtr e = parse("ConNO > THREA");
        const auto& b = std::get<Binary>(e->node);
        CHECK(b.op == BinaryOp::Gt);
        CHECK(std::get<PathRef>(b.lhs->node).path == "ConNO");
        CHECK(std::get<PathRef>(b.rhs->node).path == "THREA");
    }
    SECTION("boolean literal") {
        CHECK(std::get<BoolLit>(parse("true")->node).value);
        CHECK_FALSE(std::get<BoolLit>(parse("false")->node).value);
    }
    SECTION("product of paths") {
        ExprPtr e = parse("Weight * NoOfParts");
        CHECK(std::get<Binary>(e->node).op == BinaryOp::Mul);
    }
    SECTION("dotted paths") {
        ExprPtr e = parse("Packaging.Load = Product.CommonParameter.Weight");
        const auto& b = std::get<Binary>(e->node);
        CHECK(b.op == BinaryOp::Eq);
        CHECK(std::get<PathRef>(b.lhs->node).path == "Packaging.Load");
        CHECK(std::get<PathRef>(b.rhs->node).path == "Product.CommonParameter.Weight");
    }
    SECTION("unit annotation on a literal") {
        ExprPtr e = parse("80 [Fahrenheit]");
        const auto& lit = std::get<NumberLit>(e->node);
        CHECK(lit.value == 80.0);
        CHECK(lit.unit == "Fahrenheit");
    }
    SECTION("precedence: not > mul > add > cmp > and > or") {
        // a or b and c  ==  a or (b and c)
        const auto& or_node = std::get<Binary>(parse("a or b and c")->node);
        CHECK(or_node.op == BinaryOp::Or);
        CHECK(std::get<Binary>(or_node.rhs->node).op == BinaryOp::And);
        // 1 + 2 * 3 < 10  ==  (1 + (2*3)) < 10
        const auto& cmp = std::get<Binary>(parse("1 + 2 * 3 < 10")->node);
        CHECK(cmp.op == BinaryOp::Lt);
        CHECK(std::get<Binary>(cmp.lhs->node).op == BinaryOp::Add);
        // not a and b  ==  (not a) and b
        const auto& andn = std::get<Binary>(parse("not a and b")->node);
        CHECK(andn.op == BinaryOp::And);
        CHECK(std::get<Unary>(andn.lhs->node).op == UnaryOp::Not);
    }
    SECTION("parentheses override") {
        const auto& mul = std::get<Binary>(parse("(1 + 2) * 3")->node);
        CHECK(mul.op == BinaryOp::Mul);
        CHECK(std::get<Binary>(mul.lhs->node).op == BinaryOp::Add);
    }
    SECTION("syntax errors carry a byte offset") {
        try {
            parse("a + + b");
            FAIL("expected SyntaxError");
        } catch (const SyntaxError& e) {
            CHECK(e.offset() == 4);
        }
        CHECK_THROWS_AS(parse(""), SyntaxError);
        CHECK_THROWS_AS(parse("(a"), SyntaxError);
        CHECK_THROWS_AS(parse("a b"), SyntaxError);
        CHECK_THROWS_AS(parse("3 [x"), SyntaxError);
    }
}

TEST_CASE("print/parse identity") {
    for (const char* src : {"ConNO > THREA", "a - b - c", "a - (b - c)", "not (a or b)",
                            "80 [Fahrenheit] + 1 [Fahrenheit]", "-x * 3", "a = b and c != d"}) {
        ExprPtr e = parse(src);
        CHECK(structurally_equal(parse(print_expr(e)), e));
    }
    auto rng = testsupport::rng(21);
    for (int i = 0; i < 500; ++i) {
        ExprPtr e = random_expr(rng, 10);
        ExprPtr reparsed = parse(print_expr(e));
        CHECK(structurally_equal(reparsed, e));
    }
}

TEST_CASE("evaluation basics") {
    Environment env;
    env.bind("ConNO", 0.4);
    env.bind("THREA", 0.3);
    CHECK(eval_bool("ConNO > THREA", env));
    CHECK_FALSE(eval_bool("ConNO < THREA", env));
    CHECK(eval_bool("true", env));

    Quantity q = eval_quantity("ConNO * 10 + 1", env);
    CHECK(semdeg::units::nearly_equal(q.magnitude, 5.0));
    CHECK(q.unit.empty());
}

TEST_CASE("unit-aware comparison converts right into left") {
    ConverterRegistry reg = temperature_registry();
    Environment env;
    env.bind("temp", 30.0, "Celsius");
    // 80 F = 26.67 C, so 30 C > 80 F
    CHECK(eval_bool("temp > 80 [Fahrenheit]", env, &reg));
    CHECK_FALSE(eval_bool("temp < 80 [Fahrenheit]", env, &reg));
    // equality with tolerance across units: 77 F = 25 C
    Environment env2;
    env2.bind("t", 25.0, "Celsius");
    CHECK(eval_bool("t = 77 [Fahrenheit]", env2, &reg));
}

TEST_CASE("mixed-unit comparison is order-consistent both ways") {
    ConverterRegistry reg = temperature_registry();
    auto rng = testsupport::rng(22);
    std::uniform_real_distribution<double> mag(-200.0, 200.0);
    for (int i = 0; i < 1000; ++i) {
        Environment env;
        env.bind("a", mag(rng), "Celsius");
        env.bind("b", mag(rng), "Fahrenheit");
        // a < b decided in Celsius vs b > a decided in Fahrenheit
        CHECK(eval_bool("a < b", env, &reg) == eval_bool("b > a", env, &reg));
        CHECK(eval_bool("a = b", env, &reg) == eval_bool("b = a", env, &reg));
    }
}

TEST_CASE("evaluation errors") {
    ConverterRegistry reg = temperature_registry();
    Environment env;
    env.bind("temp", 30.0, "Celsius");
    env.bind("flag", true);
    reg.register_unit("Kilogram");

    CHECK_THROWS_AS(evaluate("missing + 1", env, &reg), UnboundPath);
    CHECK_THROWS_AS(evaluate("temp + 5 [Kilogram]", env, &reg), UnitMismatch);
    CHECK_THROWS_AS(evaluate("temp > 5 [Kilogram]", env, &reg), UnitMismatch);
    CHECK_THROWS_AS(evaluate("temp + 5", env, &reg), UnitMismatch);  // no implicit conversion in +
    CHECK_THROWS_AS(evaluate("temp * temp", env, &reg), UnitMismatch);
    CHECK_THROWS_AS(evaluate("1 / temp", env, &reg), UnitMismatch);
    CHECK_THROWS_AS(evaluate("1 / 0", env, &reg), DivisionByZero);
    CHECK_THROWS_AS(evaluate("flag + 1", env, &reg), TypeError);
    CHECK_THROWS_AS(evaluate("temp and true", env, &reg), TypeError);
    CHECK_THROWS_AS(evaluate("not temp", env, &reg), TypeError);
    CHECK_THROWS_AS(evaluate("flag < true", env, &reg), TypeError);
    // comparing quantities without a registry only works for equal units
    Environment env2;
    env2.bind("x", 1.0, "Celsius");
    CHECK_THROWS_AS(evaluate("x > 1 [Fahrenheit]", env2), UnitMismatch);
    CHECK(eval_bool("x = 1 [Celsius]", env2));
}

TEST_CASE("multiplication and division by dimensionless values") {
    Environment env;
    env.bind("w", 0.05, "Kilogram");
    env.bind("n", 20.0);
    Quantity q = eval_quantity("w * n", env);
    CHECK(semdeg::units::nearly_equal(q.magnitude, 1.0));
    CHECK(q.unit == "Kilogram");
    Quantity half = eval_quantity("w / 2", env);
    CHECK(semdeg::units::nearly_equal(half.magnitude, 0.025));
    CHECK(half.unit == "Kilogram");
    Quantity swapped = eval_quantity("n * w", env);
    CHECK(swapped.unit == "Kilogram");
}

TEST_CASE("evaluation is total and visits each node at most once") {
    auto rng = testsupport::rng(23);
    ConverterRegistry reg = temperature_registry();
    Environment env;
    env.bind("a", 2.0);
    env.bind("b.c", 3.0, "Celsius");
    env.bind("Product.CommonParameter.Weight", 0.05, "Celsius");
    env.bind("temp", 12.0, "Celsius");
    int completed = 0;
    for (int i = 0; i < 2000; ++i) {
        ExprPtr e = random_expr(rng, 10);
        std::size_t visits = 0;
        try {
            evaluate(e, env, &reg, nullptr, &visits);
            ++completed;
        } catch (const semdeg::Error&) {
            // domain errors are fine; nontermination or crashes are not
        }
        CHECK(visits <= node_count(e));
    }
    CHECK(completed > 0);  // the generator produces at least some valid programs
}

TEST_CASE("validate_bindings") {
    ConverterRegistry reg = temperature_registry();
    reg.register_unit("Kilogram");

    SECTION("convertible binding passes") {
        Environment env;
        env.bind("sensor.temp", 77.0, "Fahrenheit");
        env.expected_units["sensor.temp"] = "Celsius";
        CHECK(validate_bindings(env, &reg).empty());
    }
    SECTION("exact match passes") {
        Environment env;
        env.bind("sensor.temp", 25.0, "Celsius");
        env.expected_units["sensor.temp"] = "Celsius";
        CHECK(validate_bindings(env, &reg).empty());
    }
    SECTION("inconvertible unit is a violation naming the reason") {
        Environment env;
        env.bind("sensor.temp", 25.0, "Kilogram");
        env.expected_units["sensor.temp"] = "Celsius";
        auto violations = validate_bindings(env, &reg);
        REQUIRE(violations.size() == 1);
        CHECK(violations[0].path == "sensor.temp");
        CHECK(violations[0].reason.find("no conversion path") != std::string::npos);
    }
    SECTION("unbound and non-quantity bindings are violations") {
        Environment env;
        env.expected_units["a"] = "Celsius";
        env.bind("b", true);
        env.expected_units["b"] = "Celsius";
        auto violations = validate_bindings(env, &reg);
        REQUIRE(violations.size() == 2);
        CHECK(violations[0].reason == "path not bound");
        CHECK(violations[1].reason == "bound value is not a quantity");
    }
}

TEST_CASE("environment file loading") {
    const auto tmp = std::filesystem::temp_directory_path() / "semdeg_env.txt";
    semdeg::text::write_file(tmp,
                             "BIND\tProduct.CommonParameter.Weight\t0.05\tKilogram\n"
                             "BIND\tProduct.CommonParameter.NoOfParts\t20\t-\n"
                             "EXPECT\tProduct.CommonParameter.Weight\tKilogram\n");
    Environment env = load_environment(tmp);
    REQUIRE(env.bindings.size() == 2);
    CHECK(std::get<Quantity>(env.bindings.at("Product.CommonParameter.Weight")).unit == "Kilogram");
    CHECK(std::get<Quantity>(env.bindings.at("Product.CommonParameter.NoOfParts")).unit.empty());
    CHECK(env.expected_units.at("Product.CommonParameter.Weight") == "Kilogram");
    semdeg::text::write_file(tmp, "BIND\tx\tnot-a-number\tKilogram\n");
    CHECK_THROWS_AS(load_environment(tmp), semdeg::ParseError);
    std::filesystem::remove(tmp);
}
