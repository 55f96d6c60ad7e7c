#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#ifndef SEMDEG_ROOT
#define SEMDEG_ROOT "."
#endif

namespace testsupport {

inline std::filesystem::path root() { return SEMDEG_ROOT; }
inline std::filesystem::path data_dir() { return root() / "data"; }
inline std::filesystem::path fixture_dir() { return root() / "fixtures"; }

/// Fixed-seed engine so failures replay exactly.
inline std::mt19937_64 rng(std::uint64_t seed = 0x5eed5eedULL) { return std::mt19937_64(seed); }

}  // namespace testsupport
