#include "preflab/common.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace preflab {

int Rng::uniform_int(int n) {
  if (n <= 0) throw ContractError("uniform_int: n must be positive, got " + std::to_string(n));
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x = gen_();
  while (x >= limit) x = gen_();
  return static_cast<int>(x % un);
}

double Rng::normal() {
  const double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

std::string sha256_raw(const void* data, size_t n) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, n) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw NumericError("sha256: digest computation failed");
  }
  EVP_MD_CTX_free(ctx);
  return std::string(reinterpret_cast<char*>(digest), len);
}

std::string to_hex(const std::string& raw) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(raw.size() * 2);
  for (unsigned char c : raw) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 0xf]);
  }
  return out;
}

void put_u64_le(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

uint64_t derive_seed(uint64_t master, const std::string& stage, uint64_t index) {
  std::string msg;
  msg.reserve(24 + stage.size());
  put_u64_le(msg, master);
  put_u64_le(msg, stage.size());
  msg += stage;
  put_u64_le(msg, index);
  const std::string digest = sha256_raw(msg.data(), msg.size());
  uint64_t seed = 0;
  for (int i = 0; i < 8; ++i)
    seed |= static_cast<uint64_t>(static_cast<unsigned char>(digest[i])) << (8 * i);
  return seed;
}

std::string sha256_hex(const void* data, size_t n) { return to_hex(sha256_raw(data, n)); }

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file_hex(const std::string& path) {
  return sha256_hex(read_file(path));
}

std::string fmt_double(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw NumericError("fmt_double: conversion failed");
  return std::string(buf, ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ContractError("parse_double: not a number: '" + s + "'");
  return v;
}

long parse_long(const std::string& s) {
  long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ContractError("parse_long: not an integer: '" + s + "'");
  return v;
}

void write_file(const std::string& path, const std::string& contents) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContractError("write_file: cannot open " + path);
  f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!f) throw ContractError("write_file: short write to " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ContractError("read_file: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void ensure_dir(const std::string& path) { std::filesystem::create_directories(path); }

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

std::string csv_join(const std::vector<std::string>& fields) {
  std::string out;
  for (size_t i = 0; i < fields.size(); ++i) {
    const std::string& f = fields[i];
    if (f.find_first_of(",\"\n\r") != std::string::npos)
      throw ContractError("csv_join: field contains a delimiter: '" + f + "'");
    if (i > 0) out.push_back(',');
    out += f;
  }
  return out;
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError(what + ": non-finite value " + std::to_string(v));
}

void check_finite(const VectorXd& v, const std::string& what) {
  if (!v.allFinite()) throw NumericError(what + ": non-finite entries");
}

void check_finite(const MatrixXd& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError(what + ": non-finite entries");
}

}  // namespace preflab
