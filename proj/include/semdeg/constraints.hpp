#pragma once

#include <cctype>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "semdeg/errors.hpp"
#include "semdeg/semstore.hpp"
#include "semdeg/text.hpp"
#include "semdeg/units.hpp"

namespace semdeg::constraints {

class SyntaxError : public Error {
public:
    SyntaxError(std::size_t offset, const std::string& what)
        : Error("syntax error at offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

class UnboundPath : public Error {
public:
    explicit UnboundPath(const std::string& path) : Error("unbound path " + path), path_(path) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

class DivisionByZero : public Error {
public:
    using Error::Error;
};
class TypeError : public Error {
public:
    using Error::Error;
};

using units::Quantity;

// ---------------------------------------------------------------------------
// Abstract syntax
// ---------------------------------------------------------------------------

enum class BinaryOp { Add, Sub, Mul, Div, Lt, Le, Eq, Ge, Gt, Ne, And, Or };
enum class UnaryOp { Neg, Not };

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct NumberLit {
    double value;
    std::string unit;  // optional annotation, e.g. 80 [Fahrenheit]
};
struct BoolLit {
    bool value;
};
struct PathRef {
    std::string path;  // dot-separated identifiers
};
struct Unary {
    UnaryOp op;
    ExprPtr operand;
};
struct Binary {
    BinaryOp op;
    ExprPtr lhs;
    ExprPtr rhs;
};

struct Expr {
    std::variant<NumberLit, BoolLit, PathRef, Unary, Binary> node;
};

inline ExprPtr make_expr(std::variant<NumberLit, BoolLit, PathRef, Unary, Binary> node) {
    return std::make_shared<const Expr>(Expr{std::move(node)});
}

inline std::size_t node_count(const ExprPtr& e) {
    struct Counter {
        std::size_t operator()(const NumberLit&) const { return 1; }
        std::size_t operator()(const BoolLit&) const { return 1; }
        std::size_t operator()(const PathRef&) const { return 1; }
        std::size_t operator()(const Unary& u) const { return 1 + node_count(u.operand); }
        std::size_t operator()(const Binary& b) const { return 1 + node_count(b.lhs) + node_count(b.rhs); }
    };
    return std::visit(Counter{}, e->node);
}

inline bool structurally_equal(const ExprPtr& a, const ExprPtr& b) {
    if (a->node.index() != b->node.index()) return false;
    if (const auto* n = std::get_if<NumberLit>(&a->node)) {
        const auto& m = std::get<NumberLit>(b->node);
        return n->value == m.value && n->unit == m.unit;
    }
    if (const auto* n = std::get_if<BoolLit>(&a->node)) return n->value == std::get<BoolLit>(b->node).value;
    if (const auto* n = std::get_if<PathRef>(&a->node)) return n->path == std::get<PathRef>(b->node).path;
    if (const auto* n = std::get_if<Unary>(&a->node)) {
        const auto& m = std::get<Unary>(b->node);
        return n->op == m.op && structurally_equal(n->operand, m.operand);
    }
    const auto& n = std::get<Binary>(a->node);
    const auto& m = std::get<Binary>(b->node);
    return n.op == m.op && structurally_equal(n.lhs, m.lhs) && structurally_equal(n.rhs, m.rhs);
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace detail {

enum class TokKind { Number, Ident, Op, UnitAnnotation, End };

struct Token {
    TokKind kind;
    std::string textval;
    double numval = 0.0;
    std::size_t offset = 0;
};

inline bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
inline bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

class Lexer {
public:
    explicit Lexer(std::string_view src) : src_(src) { advance(); }

    const Token& peek() const { return current_; }

    Token take() {
        Token t = current_;
        advance();
        return t;
    }

private:
    void advance() {
        while (pos_ < src_.size() && (src_[pos_] == ' ' || src_[pos_] == '\t')) ++pos_;
        current_.offset = pos_;
        if (pos_ >= src_.size()) {
            current_ = {TokKind::End, "", 0.0, pos_};
            return;
        }
        char c = src_[pos_];
        if (std::isdigit(static_cast<unsigned char>(c)) ||
            (c == '.' && pos_ + 1 < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_ + 1])))) {
            lex_number();
            return;
        }
        if (ident_start(c)) {
            std::size_t start = pos_;
            while (pos_ < src_.size() && (ident_char(src_[pos_]) ||
                                          (src_[pos_] == '.' && pos_ + 1 < src_.size() && ident_start(src_[pos_ + 1]))))
                ++pos_;
            current_ = {TokKind::Ident, std::string(src_.substr(start, pos_ - start)), 0.0, start};
            return;
        }
        if (c == '[') {
            std::size_t start = pos_;
            std::size_t close = src_.find(']', pos_);
            if (close == std::string_view::npos) throw SyntaxError(start, "unterminated unit annotation");
            std::string unit(text::trim(src_.substr(pos_ + 1, close - pos_ - 1)));
            if (unit.empty()) throw SyntaxError(start, "empty unit annotation");
            pos_ = close + 1;
            current_ = {TokKind::UnitAnnotation, unit, 0.0, start};
            return;
        }
        static constexpr std::string_view two_char[] = {"<=", ">=", "!="};
        for (std::string_view op : two_char)
            if (src_.substr(pos_).substr(0, 2) == op) {
                current_ = {TokKind::Op, std::string(op), 0.0, pos_};
                pos_ += 2;
                return;
            }
        static constexpr std::string_view one_char = "+-*/<>=()";
        if (one_char.find(c) != std::string_view::npos) {
            current_ = {TokKind::Op, std::string(1, c), 0.0, pos_};
            ++pos_;
            return;
        }
        throw SyntaxError(pos_, std::string("unexpected character '") + c + "'");
    }

    void lex_number() {
        std::size_t start = pos_;
        while (pos_ < src_.size() && (std::isdigit(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '.'))
            ++pos_;
        if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
            std::size_t mark = pos_++;
            if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
            if (pos_ >= src_.size() || !std::isdigit(static_cast<unsigned char>(src_[pos_])))
                pos_ = mark;  // not an exponent after all
            else
                while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
        }
        std::string tok(src_.substr(start, pos_ - start));
        char* end = nullptr;
        double v = std::strtod(tok.c_str(), &end);
        if (end != tok.c_str() + tok.size()) throw SyntaxError(start, "bad number '" + tok + "'");
        current_ = {TokKind::Number, tok, v, start};
    }

    std::string_view src_;
    std::size_t pos_ = 0;
    Token current_;
};

class Parser {
public:
    explicit Parser(std::string_view src) : lex_(src) {}

    ExprPtr parse() {
        ExprPtr e = parse_or();
        const Token& t = lex_.peek();
        if (t.kind != TokKind::End) throw SyntaxError(t.offset, "unexpected trailing input");
        return e;
    }

private:
    bool eat_op(std::string_view op) {
        if (lex_.peek().kind == TokKind::Op && lex_.peek().textval == op) {
            lex_.take();
            return true;
        }
        return false;
    }

    bool eat_keyword(std::string_view kw) {
        if (lex_.peek().kind == TokKind::Ident && lex_.peek().textval == kw) {
            lex_.take();
            return true;
        }
        return false;
    }

    ExprPtr parse_or() {
        ExprPtr e = parse_and();
        while (eat_keyword("or")) e = make_expr(Binary{BinaryOp::Or, e, parse_and()});
        return e;
    }

    ExprPtr parse_and() {
        ExprPtr e = parse_cmp();
        while (eat_keyword("and")) e = make_expr(Binary{BinaryOp::And, e, parse_cmp()});
        return e;
    }

    ExprPtr parse_cmp() {
        ExprPtr e = parse_add();
        while (true) {
            BinaryOp op;
            if (eat_op("<=")) op = BinaryOp::Le;
            else if (eat_op(">=")) op = BinaryOp::Ge;
            else if (eat_op("!=")) op = BinaryOp::Ne;
            else if (eat_op("<")) op = BinaryOp::Lt;
            else if (eat_op(">")) op = BinaryOp::Gt;
            else if (eat_op("=")) op = BinaryOp::Eq;
            else return e;
            e = make_expr(Binary{op, e, parse_add()});
        }
    }

    ExprPtr parse_add() {
        ExprPtr e = parse_mul();
        while (true) {
            if (eat_op("+")) e = make_expr(Binary{BinaryOp::Add, e, parse_mul()});
            else if (eat_op("-")) e = make_expr(Binary{BinaryOp::Sub, e, parse_mul()});
            else return e;
        }
    }

    ExprPtr parse_mul() {
        ExprPtr e = parse_unary();
        while (true) {
            if (eat_op("*")) e = make_expr(Binary{BinaryOp::Mul, e, parse_unary()});
            else if (eat_op("/")) e = make_expr(Binary{BinaryOp::Div, e, parse_unary()});
            else return e;
        }
    }

    ExprPtr parse_unary() {
        if (eat_keyword("not")) return make_expr(Unary{UnaryOp::Not, parse_unary()});
        if (eat_op("-")) return make_expr(Unary{UnaryOp::Neg, parse_unary()});
        return parse_primary();
    }

    ExprPtr parse_primary() {
        const Token t = lex_.take();
        switch (t.kind) {
            case TokKind::Number: {
                NumberLit lit{t.numval, ""};
                if (lex_.peek().kind == TokKind::UnitAnnotation) lit.unit = lex_.take().textval;
                return make_expr(lit);
            }
            case TokKind::Ident:
                if (t.textval == "true") return make_expr(BoolLit{true});
                if (t.textval == "false") return make_expr(BoolLit{false});
                if (t.textval == "and" || t.textval == "or" || t.textval == "not")
                    throw SyntaxError(t.offset, "'" + t.textval + "' is a keyword");
                return make_expr(PathRef{t.textval});
            case TokKind::Op:
                if (t.textval == "(") {
                    ExprPtr e = parse_or();
                    if (!eat_op(")")) throw SyntaxError(lex_.peek().offset, "expected ')'");
                    return e;
                }
                throw SyntaxError(t.offset, "unexpected '" + t.textval + "'");
            case TokKind::UnitAnnotation:
                throw SyntaxError(t.offset, "unit annotation without a number literal");
            case TokKind::End:
                throw SyntaxError(t.offset, "unexpected end of input");
        }
        throw SyntaxError(t.offset, "unreachable");
    }

    Lexer lex_;
};

inline int precedence(BinaryOp op) {
    switch (op) {
        case BinaryOp::Or: return 1;
        case BinaryOp::And: return 2;
        case BinaryOp::Lt:
        case BinaryOp::Le:
        case BinaryOp::Eq:
        case BinaryOp::Ge:
        case BinaryOp::Gt:
        case BinaryOp::Ne: return 3;
        case BinaryOp::Add:
        case BinaryOp::Sub: return 4;
        case BinaryOp::Mul:
        case BinaryOp::Div: return 5;
    }
    return 0;
}

inline std::string op_text(BinaryOp op) {
    switch (op) {
        case BinaryOp::Add: return "+";
        case BinaryOp::Sub: return "-";
        case BinaryOp::Mul: return "*";
        case BinaryOp::Div: return "/";
        case BinaryOp::Lt: return "<";
        case BinaryOp::Le: return "<=";
        case BinaryOp::Eq: return "=";
        case BinaryOp::Ge: return ">=";
        case BinaryOp::Gt: return ">";
        case BinaryOp::Ne: return "!=";
        case BinaryOp::And: return "and";
        case BinaryOp::Or: return "or";
    }
    return "?";
}

constexpr int kUnaryPrec = 6;
constexpr int kPrimaryPrec = 7;

inline int precedence_of(const ExprPtr& e) {
    if (const auto* b = std::get_if<Binary>(&e->node)) return precedence(b->op);
    if (std::holds_alternative<Unary>(e->node)) return kUnaryPrec;
    return kPrimaryPrec;
}

inline std::string print_expr(const ExprPtr& e);

inline std::string print_child(const ExprPtr& child, int parent_prec, bool strict) {
    const int child_prec = precedence_of(child);
    const bool parens = strict ? child_prec <= parent_prec : child_prec < parent_prec;
    return parens ? "(" + print_expr(child) + ")" : print_expr(child);
}

inline std::string print_expr(const ExprPtr& e) {
    struct Printer {
        std::string operator()(const NumberLit& n) const {
            std::string s = text::format_double(n.value);
            if (!n.unit.empty()) s += " [" + n.unit + "]";
            return s;
        }
        std::string operator()(const BoolLit& b) const { return b.value ? "true" : "false"; }
        std::string operator()(const PathRef& p) const { return p.path; }
        std::string operator()(const Unary& u) const {
            std::string inner = print_child(u.operand, kUnaryPrec, false);
            return u.op == UnaryOp::Not ? "not " + inner : "-" + inner;
        }
        std::string operator()(const Binary& b) const {
            const int prec = precedence(b.op);
            return print_child(b.lhs, prec, false) + " " + op_text(b.op) + " " +
                   print_child(b.rhs, prec, true);
        }
    };
    return std::visit(Printer{}, e->node);
}

}  // namespace detail

/// Parses a predicate/arithmetic expression. Precedence, loosest first:
/// or, and, comparisons, + -, * /, unary (not, -), primaries.
inline ExprPtr parse(std::string_view source) { return detail::Parser(source).parse(); }

/// Canonical text form; parse(print_expr(e)) is structurally equal to e.
inline std::string print_expr(const ExprPtr& e) { return detail::print_expr(e); }

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

using Value = std::variant<bool, Quantity>;

struct Environment {
    std::map<std::string, Value> bindings;             // path -> value
    std::map<std::string, std::string> expected_units;  // path -> unit term

    void bind(const std::string& path, double magnitude, const std::string& unit = "") {
        bindings[path] = Quantity{magnitude, unit};
    }
    void bind(const std::string& path, bool value) { bindings[path] = value; }
};

/// Loads BIND path magnitude unit records ('-' as the unit means
/// dimensionless). EXPECT path unit records fill expected_units.
inline Environment load_environment(const std::filesystem::path& path) {
    Environment env;
    const std::string source = path.string();
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
        if (f[0] == "BIND") {
            if (f.size() != 4) throw ParseError(source, line, "expected BIND path magnitude unit");
            env.bind(f[1], text::parse_double(f[2], source, line), f[3] == "-" ? "" : f[3]);
        } else if (f[0] == "EXPECT") {
            if (f.size() != 3) throw ParseError(source, line, "expected EXPECT path unit");
            env.expected_units[f[1]] = f[2];
        } else {
            throw ParseError(source, line, "unknown record kind '" + f[0] + "'");
        }
    });
    return env;
}

namespace detail {

struct EvalContext {
    const Environment& env;
    const units::ConverterRegistry* registry;
    const semstore::KnowledgeBase* kb;
    std::size_t visits = 0;

    std::string canon(const std::string& unit) const {
        return kb ? kb->canonical_or_self(unit) : unit;
    }

    /// Converts q into `unit` (right-into-left for comparisons). Missing
    /// registry or unreachable target surfaces as UnitMismatch.
    Quantity convert(const Quantity& q, const std::string& unit) const {
        const std::string from = canon(q.unit);
        const std::string to = canon(unit);
        if (from == to) return {q.magnitude, unit};
        if (!registry)
            throw units::UnitMismatch("cannot compare " + display(q.unit) + " with " + display(unit) +
                                      ": no converter registry");
        try {
            units::ConverterChain chain = registry->find_chain(from, to);
            return {chain.composed.apply(q.magnitude), unit};
        } catch (const units::NoConverterPath&) {
            throw units::UnitMismatch("no conversion path from " + display(q.unit) + " to " + display(unit));
        } catch (const units::UnknownUnit&) {
            throw units::UnitMismatch("no conversion path from " + display(q.unit) + " to " + display(unit));
        }
    }

    static std::string display(const std::string& unit) {
        return unit.empty() ? "<dimensionless>" : unit;
    }
};

inline const Quantity& want_quantity(const Value& v, const char* where) {
    if (const Quantity* q = std::get_if<Quantity>(&v)) return *q;
    throw TypeError(std::string("boolean operand where a number is expected in ") + where);
}

inline bool want_bool(const Value& v, const char* where) {
    if (const bool* b = std::get_if<bool>(&v)) return *b;
    throw TypeError(std::string("numeric operand where a boolean is expected in ") + where);
}

inline Value eval_node(const ExprPtr& e, EvalContext& ctx);

inline Value eval_binary(const Binary& b, EvalContext& ctx) {
    const Value lhs = eval_node(b.lhs, ctx);
    const Value rhs = eval_node(b.rhs, ctx);
    switch (b.op) {
        case BinaryOp::And:
            return want_bool(lhs, "and") && want_bool(rhs, "and");
        case BinaryOp::Or:
            return want_bool(lhs, "or") || want_bool(rhs, "or");
        case BinaryOp::Add:
        case BinaryOp::Sub: {
            const Quantity& l = want_quantity(lhs, op_text(b.op).c_str());
            const Quantity& r = want_quantity(rhs, op_text(b.op).c_str());
            if (ctx.canon(l.unit) != ctx.canon(r.unit))
                throw units::UnitMismatch("cannot " + std::string(b.op == BinaryOp::Add ? "add" : "subtract") +
                                          " " + EvalContext::display(r.unit) + " to " +
                                          EvalContext::display(l.unit) + " without explicit conversion");
            double v = b.op == BinaryOp::Add ? l.magnitude + r.magnitude : l.magnitude - r.magnitude;
            return Quantity{v, l.unit};
        }
        case BinaryOp::Mul: {
            const Quantity& l = want_quantity(lhs, "*");
            const Quantity& r = want_quantity(rhs, "*");
            if (!l.unit.empty() && !r.unit.empty())
                throw units::UnitMismatch("product of two dimensioned quantities (" + l.unit + ", " + r.unit + ")");
            return Quantity{l.magnitude * r.magnitude, l.unit.empty() ? r.unit : l.unit};
        }
        case BinaryOp::Div: {
            const Quantity& l = want_quantity(lhs, "/");
            const Quantity& r = want_quantity(rhs, "/");
            if (!r.unit.empty())
                throw units::UnitMismatch("divisor must be dimensionless, got " + r.unit);
            if (r.magnitude == 0.0) throw DivisionByZero("division by zero");
            return Quantity{l.magnitude / r.magnitude, l.unit};
        }
        default: {
            // Comparisons. Booleans compare only with = and != against booleans.
            if (std::holds_alternative<bool>(lhs) || std::holds_alternative<bool>(rhs)) {
                if ((b.op == BinaryOp::Eq || b.op == BinaryOp::Ne) &&
                    std::holds_alternative<bool>(lhs) && std::holds_alternative<bool>(rhs)) {
                    bool eq = std::get<bool>(lhs) == std::get<bool>(rhs);
                    return b.op == BinaryOp::Eq ? eq : !eq;
                }
                throw TypeError("cannot order a boolean with " + op_text(b.op));
            }
            const Quantity& l = std::get<Quantity>(lhs);
            const Quantity r = ctx.convert(std::get<Quantity>(rhs), l.unit);
            const bool eq = units::nearly_equal(l.magnitude, r.magnitude);
            switch (b.op) {
                case BinaryOp::Lt: return l.magnitude < r.magnitude && !eq;
                case BinaryOp::Le: return l.magnitude < r.magnitude || eq;
                case BinaryOp::Gt: return l.magnitude > r.magnitude && !eq;
                case BinaryOp::Ge: return l.magnitude > r.magnitude || eq;
                case BinaryOp::Eq: return eq;
                case BinaryOp::Ne: return !eq;
                default: throw TypeError("unreachable");
            }
        }
    }
}

inline Value eval_node(const ExprPtr& e, EvalContext& ctx) {
    ++ctx.visits;  // one visit per AST node; bounds the finite-time guarantee
    struct Visitor {
        EvalContext& ctx;
        Value operator()(const NumberLit& n) const { return Quantity{n.value, n.unit}; }
        Value operator()(const BoolLit& b) const { return b.value; }
        Value operator()(const PathRef& p) const {
            auto it = ctx.env.bindings.find(p.path);
            if (it == ctx.env.bindings.end()) throw UnboundPath(p.path);
            return it->second;
        }
        Value operator()(const Unary& u) const {
            Value v = eval_node(u.operand, ctx);
            if (u.op == UnaryOp::Not) return !want_bool(v, "not");
            Quantity q = want_quantity(v, "unary -");
            return Quantity{-q.magnitude, q.unit};
        }
        Value operator()(const Binary& b) const { return eval_binary(b, ctx); }
    };
    return std::visit(Visitor{ctx}, e->node);
}

}  // namespace detail

/// Single bottom-up evaluation pass. `visits`, when given, receives the
/// number of AST nodes visited (always <= node_count(expr)).
inline Value evaluate(const ExprPtr& expr, const Environment& env,
                      const units::ConverterRegistry* registry = nullptr,
                      const semstore::KnowledgeBase* kb = nullptr, std::size_t* visits = nullptr) {
    detail::EvalContext ctx{env, registry, kb};
    Value v = detail::eval_node(expr, ctx);
    if (visits) *visits = ctx.visits;
    return v;
}

inline Value evaluate(std::string_view source, const Environment& env,
                      const units::ConverterRegistry* registry = nullptr,
                      const semstore::KnowledgeBase* kb = nullptr) {
    return evaluate(parse(source), env, registry, kb);
}

// ---------------------------------------------------------------------------
// Binding validation
// ---------------------------------------------------------------------------

struct Violation {
    std::string path;
    std::string expected_unit;
    std::string bound_unit;
    std::string reason;
};

/// Checks every expected-unit entry against the bound value: the bound unit
/// must equal the expectation or be convertible into it. Violations are data,
/// not errors.
inline std::vector<Violation> validate_bindings(const Environment& env,
                                                const units::ConverterRegistry* registry = nullptr,
                                                const semstore::KnowledgeBase* kb = nullptr) {
    std::vector<Violation> out;
    auto canon = [&](const std::string& u) { return kb ? kb->canonical_or_self(u) : u; };
    for (const auto& [path, expected] : env.expected_units) {
        auto it = env.bindings.find(path);
        if (it == env.bindings.end()) {
            out.push_back({path, expected, "", "path not bound"});
            continue;
        }
        const Quantity* q = std::get_if<Quantity>(&it->second);
        if (!q) {
            out.push_back({path, expected, "", "bound value is not a quantity"});
            continue;
        }
        if (canon(q->unit) == canon(expected)) continue;
        bool convertible = false;
        if (registry) {
            try {
                registry->find_chain(canon(q->unit), canon(expected));
                convertible = true;
            } catch (const Error&) {
            }
        }
        if (!convertible)
            out.push_back({path, expected, q->unit,
                           "no conversion path from " + detail::EvalContext::display(q->unit) + " to " + expected});
    }
    return out;
}

}  // namespace semdeg::constraints
