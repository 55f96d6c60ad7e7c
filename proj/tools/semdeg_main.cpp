// Command-line front end: the degree advisor, technology catalog queries,
// demonstrator classification and the three runnable scenarios.

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "semdeg/busnet.hpp"
#include "semdeg/confmap.hpp"
#include "semdeg/constraints.hpp"
#include "semdeg/degrees.hpp"
#include "semdeg/errors.hpp"
#include "semdeg/scenarios.hpp"
#include "semdeg/text.hpp"
#include "semdeg/units.hpp"

namespace fs = std::filesystem;
using namespace semdeg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;  // scenario/assertion failure
constexpr int kExitUsage = 2;    // usage or parse error

#ifndef SEMDEG_DEFAULT_ROOT
#define SEMDEG_DEFAULT_ROOT "."
#endif

struct Paths {
    fs::path root = SEMDEG_DEFAULT_ROOT;

    fs::path catalog() const { return root / "data" / "technologies.tsv"; }
    fs::path fixtures() const { return root / "fixtures"; }
};

struct UsageError : Error {
    using Error::Error;
};

// --- answers files -------------------------------------------------------

std::map<std::string, bool> parse_answer_lines(std::istream& in, const std::string& source) {
    std::map<std::string, bool> answers;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view v = text::trim(line);
        if (v.empty() || v.front() == '#') continue;
        auto fields = text::split(std::string(v), ' ');
        std::vector<std::string> tokens;
        for (auto& f : fields)
            if (!f.empty()) tokens.push_back(f);
        if (tokens.size() != 2)
            throw ParseError(source, line_no, "expected '<rule-id> yes|no'");
        const std::string answer = text::to_lower(tokens[1]);
        if (answer != "yes" && answer != "no")
            throw ParseError(source, line_no, "answer must be yes or no, got '" + tokens[1] + "'");
        degrees::rule(tokens[0]);  // validates the id
        if (answers.count(tokens[0]))
            throw ParseError(source, line_no, "duplicate answer for " + tokens[0]);
        answers[tokens[0]] = answer == "yes";
    }
    for (const degrees::Rule& r : degrees::rules())
        if (!answers.count(r.id)) throw UsageError("missing answer for " + r.id);
    return answers;
}

std::map<std::string, bool> prompt_answers() {
    std::map<std::string, bool> answers;
    for (const degrees::Rule& r : degrees::rules()) {
        while (true) {
            std::cout << r.id << ": " << r.question << " [yes/no] " << std::flush;
            std::string reply;
            if (!std::getline(std::cin, reply)) throw UsageError("no answer for " + r.id);
            const std::string a = text::to_lower(std::string(text::trim(reply)));
            if (a == "yes" || a == "y") {
                answers[r.id] = true;
                break;
            }
            if (a == "no" || a == "n") {
                answers[r.id] = false;
                break;
            }
            std::cout << "please answer yes or no\n";
        }
    }
    return answers;
}

void print_technologies(const degrees::Catalog& entries) {
    for (const degrees::TechnologyEntry& e : entries) {
        std::cout << "  " << e.name;
        if (!e.variant.empty()) std::cout << " (" << e.variant << ")";
        std::cout << "  " << degrees::label(e.degrees.structural) << " / "
                  << degrees::label(e.degrees.behavioral);
        if (!e.note.empty()) std::cout << "  [" << e.note << "]";
        std::cout << "\n";
    }
}

int cmd_advise(const Paths& paths, const std::optional<std::string>& answers_file, bool list_tech) {
    std::map<std::string, bool> answers;
    if (answers_file) {
        std::ifstream in(*answers_file);
        if (!in) throw UsageError("cannot open answers file " + *answers_file);
        answers = parse_answer_lines(in, *answers_file);
    } else if (::isatty(0)) {
        answers = prompt_answers();
    } else {
        answers = parse_answer_lines(std::cin, "<stdin>");
    }
    degrees::Advice advice = degrees::advise(answers);
    std::cout << "Result: " << degrees::label(advice.result) << "\n";
    std::cout << "Triggered rules:";
    if (advice.triggered.empty()) std::cout << " none";
    std::cout << "\n";
    for (const std::string& id : advice.triggered) {
        const degrees::Rule& r = degrees::rule(id);
        std::cout << "  " << id << "  " << r.question << "\n      -> " << degrees::label(r.minimum)
                  << " (" << r.argument << ")\n";
    }
    for (const std::string& note : advice.notes) std::cout << "note: " << note << "\n";
    if (list_tech) {
        degrees::Catalog catalog = degrees::load_catalog(paths.catalog());
        degrees::Catalog matching = degrees::filter_technologies(catalog, advice.result);
        std::cout << "Technologies at or above " << degrees::code(advice.result) << ":\n";
        print_technologies(matching);
    }
    return kExitOk;
}

int cmd_tech_lookup(const Paths& paths, const std::string& name, const std::string& variant) {
    degrees::Catalog catalog = degrees::load_catalog(paths.catalog());
    const degrees::TechnologyEntry& e = degrees::lookup_technology(catalog, name, variant);
    std::cout << e.name;
    if (!e.variant.empty()) std::cout << " (" << e.variant << ")";
    std::cout << "\n  " << degrees::label(e.degrees.structural) << "\n  "
              << degrees::label(e.degrees.behavioral) << "\n";
    if (!e.note.empty()) std::cout << "  note: " << e.note << "\n";
    return kExitOk;
}

int cmd_tech_filter(const Paths& paths, const std::string& s_code, const std::string& b_code) {
    auto s = degrees::parse_structural(s_code);
    auto b = degrees::parse_behavioral(b_code);
    if (!s) throw UsageError("bad structural degree '" + s_code + "' (expected S0..S5)");
    if (!b) throw UsageError("bad behavioral degree '" + b_code + "' (expected B0..B6)");
    degrees::Catalog catalog = degrees::load_catalog(paths.catalog());
    degrees::Catalog matching = degrees::filter_technologies(catalog, {*s, *b});
    std::cout << "Technologies at or above " << degrees::code(degrees::DegreePair{*s, *b}) << ":\n";
    print_technologies(matching);
    return kExitOk;
}

// --- classify ------------------------------------------------------------

struct FeatureFixture {
    std::string id;
    std::map<std::string, bool> answers;
    std::map<std::string, degrees::Behavioral> levels;  // ranged-rule qualifiers
};

std::vector<FeatureFixture> load_classify_fixture(const fs::path& path) {
    std::vector<FeatureFixture> features;
    const std::string source = path.string();
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
        if (f.size() < 2) throw ParseError(source, line, "expected id<TAB>answers[<TAB>description]");
        FeatureFixture feature;
        feature.id = f[0];
        for (const std::string& tok : text::split(f[1], ' ')) {
            if (tok.empty()) continue;
            auto eq = tok.find('=');
            if (eq == std::string::npos)
                throw ParseError(source, line, "expected Rn=yes|no tokens, got '" + tok + "'");
            const std::string id = tok.substr(0, eq);
            std::string answer = tok.substr(eq + 1);
            std::optional<degrees::Behavioral> level;
            if (auto colon = answer.find(':'); colon != std::string::npos) {
                level = degrees::parse_behavioral(answer.substr(colon + 1));
                if (!level)
                    throw ParseError(source, line, "bad level qualifier '" + answer + "'");
                answer = answer.substr(0, colon);
            }
            const degrees::Rule& rule = degrees::rule(id);
            if (answer != "yes" && answer != "no")
                throw ParseError(source, line, "answer must be yes or no, got '" + answer + "'");
            if (level) {
                if (!rule.range_up_to)
                    throw ParseError(source, line, id + " has no degree range, qualifier not allowed");
                if (*level < rule.minimum.behavioral || *rule.range_up_to < *level)
                    throw ParseError(source, line, "qualifier outside " + id + "'s range");
                feature.levels[id] = *level;
            }
            feature.answers[id] = answer == "yes";
        }
        features.push_back(std::move(feature));
    });
    return features;
}

int cmd_classify(const fs::path& fixture) {
    for (const FeatureFixture& feature : load_classify_fixture(fixture)) {
        degrees::Advice advice = degrees::advise(feature.answers);
        degrees::DegreePair result = advice.result;
        for (const auto& [id, level] : feature.levels)
            if (feature.answers.at(id))
                result = degrees::join(result, {degrees::Structural::Repository, level});
        std::cout << feature.id << "\t" << degrees::code(result.structural) << "\t"
                  << degrees::code(result.behavioral) << "\n";
    }
    return kExitOk;
}

// --- scenarios -----------------------------------------------------------

void write_out(const fs::path& dir, const std::string& name, const std::string& content) {
    fs::create_directories(dir);
    text::write_file(dir / name, content);
}

/// Line-by-line diff, enough to point at the first divergence.
std::string first_diff(const std::string& got, const std::string& want) {
    auto got_lines = text::split(got, '\n');
    auto want_lines = text::split(want, '\n');
    for (std::size_t i = 0; i < std::max(got_lines.size(), want_lines.size()); ++i) {
        const std::string g = i < got_lines.size() ? got_lines[i] : "<missing>";
        const std::string w = i < want_lines.size() ? want_lines[i] : "<missing>";
        if (g != w)
            return "line " + std::to_string(i + 1) + ":\n  expected: " + w + "\n  got:      " + g;
    }
    return "";
}

int cmd_scenario_plug(const Paths& paths, const fs::path& out_dir) {
    auto cfg = scenarios::load_plug_config(paths.fixtures() / "plug_and_sense" / "scenario.cfg");
    scenarios::PlugResult result = scenarios::run_plug_and_sense(cfg);

    std::string trace;
    for (const std::string& line : result.trace) trace += line + "\n";
    std::string summary;
    for (const auto& [unit, state] : result.states)
        summary += "unit " + std::to_string(unit) + ": " + state.str() + "\n";
    for (const auto& [unit, reading] : result.readings)
        summary += "unit " + std::to_string(unit) + " reading: " + reading.str() + "\n";
    write_out(out_dir, "trace.txt", trace);
    write_out(out_dir, "result.txt", summary);
    std::cout << trace;

    std::vector<std::string> failures;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    };
    expect(result.readings.count(1) && result.readings.at(1).unit == "Celsius" &&
               std::fabs(result.readings.at(1).magnitude - 25.0) <= 1e-6,
           "unit 1 must deliver 25 Celsius");
    expect(result.states.at(1).lifecycle == busnet::Lifecycle::ConditionallyAccepted,
           "unit 1 must be conditionally accepted");
    expect(result.states.at(2).lifecycle == busnet::Lifecycle::Rejected, "unit 2 must be rejected");
    expect(result.states.at(3).lifecycle == busnet::Lifecycle::Accepted, "unit 3 must be accepted");
    expect(result.rejection_frames.count(2) && result.rejection_frames.at(2).size() >= 2 &&
               result.rejection_frames.at(2)[result.rejection_frames.at(2).size() - 2] == 0x83 &&
               result.rejection_frames.at(2).back() == 0x04,
           "unit 2 must answer exception 0x83/0x04");
    expect(trace.find("ConditionallyAccepted [f1 f2]") != std::string::npos,
           "trace must show ConditionallyAccepted [f1 f2]");
    expect(trace.find("deliver 25 Celsius") != std::string::npos, "trace must show deliver 25 Celsius");
    if (!failures.empty()) {
        for (const std::string& f : failures) std::cerr << "FAILED: " << f << "\n";
        return kExitFailure;
    }
    std::cout << "plug-and-sense scenario passed\n";
    return kExitOk;
}

int cmd_scenario_packaging(const Paths& paths, const fs::path& out_dir) {
    const fs::path dir = paths.fixtures() / "packaging_line";
    auto fixture = scenarios::load_packaging_fixture(dir);
    confmap::MappingReport report = scenarios::run_packaging_line(fixture);
    const std::string rendered = confmap::explain(report);
    write_out(out_dir, "report.txt", rendered);
    write_out(out_dir, "report.tsv", confmap::to_records(report));
    std::cout << rendered;
    const std::string expected = text::read_file(dir / "expected_report.txt");
    const std::string diff = first_diff(rendered, expected);
    if (!diff.empty()) {
        std::cerr << "FAILED: report differs from " << (dir / "expected_report.txt").string() << "\n"
                  << diff << "\n";
        return kExitFailure;
    }
    std::cout << "packaging-line scenario passed\n";
    return kExitOk;
}

int cmd_scenario_interrupt(const Paths& paths, const fs::path& out_dir) {
    const fs::path dir = paths.fixtures() / "interrupt";
    scenarios::InterruptResult result = scenarios::run_interrupt(dir);
    write_out(out_dir, "trace.tsv", result.trace);
    write_out(out_dir, "events.tsv", scenarios::render_events(result.events));
    std::cout << result.trace;
    const std::string expected = text::read_file(dir / "expected_trace.tsv");
    const std::string diff = first_diff(result.trace, expected);
    if (!diff.empty()) {
        std::cerr << "FAILED: trace differs from " << (dir / "expected_trace.tsv").string() << "\n"
                  << diff << "\n";
        return kExitFailure;
    }
    std::cout << "interrupt scenario passed\n";
    return kExitOk;
}

int cmd_run_scenario(const Paths& paths, const std::string& name, const fs::path& out_dir) {
    if (name == "plug-and-sense") return cmd_scenario_plug(paths, out_dir / name);
    if (name == "packaging-line") return cmd_scenario_packaging(paths, out_dir / name);
    if (name == "interrupt") return cmd_scenario_interrupt(paths, out_dir / name);
    throw UsageError("unknown scenario '" + name + "' (expected plug-and-sense, packaging-line or interrupt)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semantic-degree toolkit"};
    app.require_subcommand(1);

    Paths paths;
    std::string root_override;
    app.add_option("--root", root_override, "repository root holding data/ and fixtures/");

    auto* advise = app.add_subcommand("advise", "run the degree questionnaire");
    std::string answers_file;
    bool no_tech = false;
    advise->add_option("--answers", answers_file, "file with 9 lines 'Rn yes|no'");
    advise->add_flag("--no-tech", no_tech, "skip the technology listing");

    auto* tech = app.add_subcommand("tech", "technology catalog queries");
    tech->require_subcommand(1);
    auto* lookup = tech->add_subcommand("lookup", "look one technology up");
    std::string lookup_name, lookup_variant;
    lookup->add_option("name", lookup_name, "technology name (case-insensitive)")->required();
    lookup->add_option("--variant", lookup_variant, "sub-row, e.g. CAEX");
    auto* filter = tech->add_subcommand("filter", "list technologies meeting a required degree");
    std::string filter_s, filter_b;
    filter->add_option("--structural", filter_s, "required structural degree S0..S5")->required();
    filter->add_option("--behavioral", filter_b, "required behavioral degree B0..B6")->required();

    auto* scenario = app.add_subcommand("run-scenario", "run a bundled scenario");
    std::string scenario_name;
    std::string out_dir = "scenario-out";
    scenario->add_option("name", scenario_name, "plug-and-sense | packaging-line | interrupt")->required();
    scenario->add_option("--out", out_dir, "output directory (default scenario-out)");

    auto* classify = app.add_subcommand("classify", "classify feature fixtures into degrees");
    std::string fixture_file;
    classify->add_option("fixture", fixture_file, "feature fixture file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    }
    if (!root_override.empty()) paths.root = root_override;

    try {
        if (*advise)
            return cmd_advise(paths, answers_file.empty() ? std::nullopt : std::optional(answers_file),
                              !no_tech);
        if (*lookup) return cmd_tech_lookup(paths, lookup_name, lookup_variant);
        if (*filter) return cmd_tech_filter(paths, filter_s, filter_b);
        if (*scenario) return cmd_run_scenario(paths, scenario_name, out_dir);
        if (*classify) return cmd_classify(fixture_file);
        std::cerr << "no subcommand\n";
        return kExitUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const degrees::NotFound& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitFailure;
    }
}
