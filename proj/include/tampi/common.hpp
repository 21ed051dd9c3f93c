#pragma once

// Shared plumbing: error types for contract violations, stable hashing,
// fixed-chunk parallel loops whose reductions do not depend on the worker
// count, and small filesystem/string helpers.

#include <atomic>
#include <chrono>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tampi {

inline constexpr const char* kVersion = "0.1.0";

/// Thrown when a caller violates a documented precondition.
class ContractError : public std::invalid_argument {
public:
  explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

inline std::string str_printf(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  va_list ap2;
  va_copy(ap2, ap);
  int n = std::vsnprintf(nullptr, 0, fmt, ap);
  va_end(ap);
  std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, ap2);
  va_end(ap2);
  return out;
}

/// Prints a double so that parsing it back recovers the exact bits.
inline std::string fmt_double(double v) { return str_printf("%.17g", v); }

inline double now_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, used for config-addressed run directories and file digests)
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hash_hex(uint64_t h) { return str_printf("%016llx", static_cast<unsigned long long>(h)); }

/// Short form used in directory names.
inline std::string hash_hex8(uint64_t h) { return str_printf("%08x", static_cast<unsigned>(h ^ (h >> 32))); }

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline uint64_t hash_file(const std::string& path) { return fnv1a64(read_file(path)); }

// ---------------------------------------------------------------------------
// Parallel loops
// ---------------------------------------------------------------------------

inline int max_threads() {
  if (const char* e = std::getenv("TAMPI_THREADS")) {
    int v = std::atoi(e);
    if (v > 0) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Number of work chunks every parallel loop is partitioned into. Reductions
/// sum per-chunk buffers in chunk order, so results are identical for any
/// thread count.
inline constexpr int kParallelChunks = 16;

/// Runs fn(chunk_index, begin, end) over [0, n) split into kParallelChunks
/// contiguous ranges. Falls back to serial execution for small n or when a
/// single thread is available. fn must only write to chunk-indexed state.
inline void parallel_chunks(size_t n, const std::function<void(int, size_t, size_t)>& fn,
                            size_t serial_threshold = 64) {
  if (n == 0) return;
  const int chunks = kParallelChunks;
  auto bound = [&](int c) { return n * static_cast<size_t>(c) / chunks; };
  int threads = max_threads();
  if (threads <= 1 || n < serial_threshold) {
    for (int c = 0; c < chunks; ++c) fn(c, bound(c), bound(c + 1));
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  int nthreads = std::min(threads, chunks);
  pool.reserve(static_cast<size_t>(nthreads));
  for (int t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (int c = next.fetch_add(1); c < chunks; c = next.fetch_add(1)) fn(c, bound(c), bound(c + 1));
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace tampi
