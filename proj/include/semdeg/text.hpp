#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "semdeg/errors.hpp"

namespace semdeg::text {

inline std::vector<std::string> split(std::string_view s, char delim) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(delim, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            return out;
        }
        out.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out.append(sep);
        out.append(parts[i]);
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

/// Deterministic double rendering: up to 12 significant digits, no trailing
/// zeros, "25" rather than "25.0000". Used everywhere a magnitude lands in a
/// text file or a protocol line.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline double parse_double(std::string_view s, const std::string& source, std::size_t line) {
    std::string tmp(trim(s));
    char* end = nullptr;
    double v = std::strtod(tmp.c_str(), &end);
    if (tmp.empty() || end != tmp.c_str() + tmp.size())
        throw ParseError(source, line, "not a number: '" + tmp + "'");
    return v;
}

inline long long parse_int(std::string_view s, const std::string& source, std::size_t line) {
    std::string tmp(trim(s));
    char* end = nullptr;
    long long v = std::strtoll(tmp.c_str(), &end, 10);
    if (tmp.empty() || end != tmp.c_str() + tmp.size())
        throw ParseError(source, line, "not an integer: '" + tmp + "'");
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
}

/// Walks a line-oriented, tab-separated file. Blank lines and lines starting
/// with '#' are skipped; every other line is split on tabs and handed to the
/// callback together with its 1-based line number.
inline void for_each_record(const std::filesystem::path& path,
                            const std::function<void(std::size_t, const std::vector<std::string>&)>& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string_view v = line;
        if (trim(v).empty() || trim(v).front() == '#') continue;
        fn(line_no, split(line, '\t'));
    }
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
    return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

}  // namespace semdeg::text
