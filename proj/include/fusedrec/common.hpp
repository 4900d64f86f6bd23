#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace fusedrec {

using ItemIndex = std::uint32_t;
using UserIndex = std::uint32_t;

// All model math runs in 64-bit floats. Row-major so that a row is one item
// or one sequence position.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Structural problems in binary or directory formats.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Content that parses but violates an invariant (norms, uniqueness, dims).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Bad command-line usage; the CLI maps this to exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Seeded generator with platform-independent distributions. Every consumer of
// randomness goes through this so that runs are reproducible bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() {
    ++draws_;
    return engine_();
  }

  // Exactly one draw; multiply-shift mapping onto [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    const unsigned __int128 wide = static_cast<unsigned __int128>(next()) * n;
    return static_cast<std::uint64_t>(wide >> 64);
  }

  // 53-bit uniform in [0, 1).
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Box-Muller, two draws per call, no cached spare.
  double normal();

  std::uint64_t draws() const { return draws_; }

  std::string serialize() const;
  static Rng deserialize(const std::string& text);

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.engine_ == b.engine_ && a.draws_ == b.draws_;
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
};

// Stable 64-bit FNV-1a; used to derive independent sub-seeds from names.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t derive_seed(std::uint64_t seed, const std::string& label);

// Runs fn(i) for i in [0, n) on up to `workers` threads. Callers write
// results by index so the outcome never depends on the worker count.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace fusedrec
