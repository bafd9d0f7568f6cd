#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cbpt {

template <class Scalar>
using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VecT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatT<double>;
using Vec = VecT<double>;

// Bad shapes / bad settings supplied by the caller.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A documented precondition was violated.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Optimization diverged or produced non-finite values.
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Deterministic randomness. The engine is the standardized mt19937_64;
// distributions are hand-rolled so streams do not depend on the stdlib.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next() {
    // xorshift* keeps the whole stream in one 64-bit word.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  double uniform() {  // [0,1)
    return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) {  // [0,n)
    return static_cast<int>(next() % static_cast<std::uint64_t>(n));
  }

  double gaussian() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(t);
    have_cached_ = true;
    return r * std::cos(t);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Independent named stream from a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return splitmix64(base ^ fnv1a64(tag));
}

// ---------------------------------------------------------------------------
// Small dense helpers shared across modules.
// ---------------------------------------------------------------------------

// Ties resolve to the lowest index, everywhere.
template <class Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

template <class Derived>
VecT<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using S = typename Derived::Scalar;
  VecT<S> p = logits;
  const S m = p.maxCoeff();
  p = (p.array() - m).exp();
  p /= p.sum();
  return p;
}

// Cosine similarity of two unit-norm embeddings reduces to a dot product.
template <class DerivedA, class DerivedB>
double similarity(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  return a.dot(b);
}

// Euclidean projection onto the L2 ball of radius rho.
template <class Derived>
VecT<typename Derived::Scalar> project_l2(const Eigen::MatrixBase<Derived>& delta, double rho) {
  if (rho <= 0.0) throw ContractError("project_l2: rho must be positive");
  const double n = delta.norm();
  if (n <= rho) return delta;
  return delta * (rho / n);
}

template <class Derived>
MatT<typename Derived::Scalar> clamp01(const Eigen::MatrixBase<Derived>& x) {
  return x.array().min(1.0).max(0.0).matrix();
}

}  // namespace cbpt
