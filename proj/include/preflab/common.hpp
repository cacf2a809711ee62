// Shared plumbing: error taxonomy, deterministic RNG, seed derivation,
// hashing, number formatting, small file/CSV helpers.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace preflab {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

// Caller broke a documented precondition (bad shape, bad config, bad file).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Computation produced NaN/inf or diverged; the run must abort.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic RNG. Wraps mt19937_64 but owns every bit-to-double
// conversion so streams never depend on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform in [0, n), rejection sampled so every value is equally likely.
  int uniform_int(int n);

  // Standard normal via Box-Muller, two u64 draws per call, no caching.
  double normal();

  double normal(double mean, double std) { return mean + std * normal(); }

 private:
  std::mt19937_64 gen_;
};

// Child seed for a named stage; collision-resistant in (stage, index).
uint64_t derive_seed(uint64_t master, const std::string& stage, uint64_t index);

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

// Shortest decimal string that round-trips the double exactly.
std::string fmt_double(double v);
double parse_double(const std::string& s);
long parse_long(const std::string& s);

void write_file(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);
void ensure_dir(const std::string& path);
bool file_exists(const std::string& path);

// Plain CSV: fields must not contain commas, quotes or newlines.
std::string csv_join(const std::vector<std::string>& fields);
std::vector<std::string> csv_split(const std::string& line);

void check_finite(const VectorXd& v, const std::string& what);
void check_finite(const MatrixXd& m, const std::string& what);
void check_finite(double v, const std::string& what);

}  // namespace preflab
