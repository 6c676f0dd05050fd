#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iomanip>
#include <locale>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace brainfold {

template <class Scalar>
using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VecT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatT<double>;
using Vec = VecT<double>;

/// Error carrying the pipeline stage that raised it. CLI maps these to
/// exit code 2 with a stage-tagged message.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& message)
      : std::runtime_error("[" + stage + "] " + message), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

[[noreturn]] inline void fail(const std::string& stage, const std::string& message) {
  throw PipelineError(stage, message);
}

inline void require(bool condition, const std::string& stage, const std::string& message) {
  if (!condition) fail(stage, message);
}

/// Fixed-point decimal rendering that ignores the global locale, so emitted
/// reports are byte-stable across environments.
inline std::string format_fixed(double value, int precision) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << std::fixed << std::setprecision(precision) << value;
  return out.str();
}

/// Runs fn(begin, end) over contiguous chunks of [0, n). The chunk boundaries
/// depend only on (n, threads), so results reduced in chunk order are
/// reproducible at any thread count; with threads <= 1 everything runs inline.
template <class Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  const std::size_t workers =
      std::min<std::size_t>(n, threads > 1 ? static_cast<std::size_t>(threads) : 1);
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t base = n / workers;
  const std::size_t extra = n % workers;
  std::size_t begin = 0;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t end = begin + base + (w < extra ? 1 : 0);
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    begin = end;
  }
  for (auto& t : pool) t.join();
}

}  // namespace brainfold
