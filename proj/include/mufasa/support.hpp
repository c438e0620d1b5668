#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mufasa {

// Dense matrix aliases. All core math runs in double precision; feature
// storage (and the on-disk feature format) is float32.
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
using Mat = MatX<double>;
using MatF = MatX<float>;
using MatI = MatX<int>;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

struct GridShape {
  int rows = 0;
  int cols = 0;
  int patches() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

// Error taxonomy. Each public operation documents which of these it throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
struct RangeError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct CorruptionError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct UnsupportedError : Error { using Error::Error; };
struct UndefinedInputError : Error { using Error::Error; };
struct CompatibilityError : Error { using Error::Error; };

// Deterministic PRNG. std::normal_distribution is implementation-defined, so
// gaussian draws use an explicit Box-Muller transform; results are identical
// across standard libraries for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next_u64() {
    // xorshift* variant; period 2^64-1, passes BigCrush for this use.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + int(next_u64() % std::uint64_t(hi - lo + 1));
  }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal truncated to two standard deviations, as used for positional
  // encodings and similar small-variance initializations.
  double truncated_gaussian(double stddev) {
    double g = gaussian();
    while (std::abs(g) > 2.0) g = gaussian();
    return g * stddev;
  }

  template <typename Fn>
  void shuffle(std::vector<int>& v, Fn&&) = delete;
  void shuffle(std::vector<int>& v) {
    for (int i = int(v.size()) - 1; i > 0; --i) {
      const int j = int(next_u64() % std::uint64_t(i + 1));
      std::swap(v[i], v[size_t(j)]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stateless stream derivation so that training phases, per-image noise and
// per-epoch shuffles never share or consume each other's random state.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0);

// Kahan-compensated accumulator; makes dataset means independent of the
// number of worker threads (values are produced per item, summed in index
// order).
class KahanSum {
 public:
  void add(double x) {
    const double y = x - c_;
    const double t = s_ + y;
    c_ = (t - s_) - y;
    s_ = t;
  }
  double value() const { return s_; }

 private:
  double s_ = 0.0;
  double c_ = 0.0;
};

// Runs fn(i) for i in [0, n). Worker count is min(n, hardware threads,
// MUFASA_NUM_THREADS). Work is split in contiguous index ranges; callers
// must make iterations independent.
void parallel_for(int n, const std::function<void(int)>& fn);
int max_threads();

// Git-style SHA-1 content hash ("blob <len>\0<content>"), hex encoded.
std::string git_blob_sha1(const std::string& content);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace mufasa
