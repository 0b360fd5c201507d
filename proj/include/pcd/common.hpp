#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace pcd {

using Vec3 = std::array<float, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(const Vec3& a, float s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline float dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline float norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// Squared distance evaluated in double. Every nearest-neighbour path goes
// through this function so accelerated and brute-force searches agree bitwise.
inline double dist2(const Vec3& a, const Vec3& b) {
    const double dx = double(a[0]) - double(b[0]);
    const double dy = double(a[1]) - double(b[1]);
    const double dz = double(a[2]) - double(b[2]);
    return dx * dx + dy * dy + dz * dz;
}

// Error categories map onto the CLI exit codes (2 config, 3 data, 4 numeric).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// splitmix64 finaliser; used to derive per-sample and per-view seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Worker count: PCDK_THREADS if set, else hardware concurrency.
std::size_t worker_threads();

/// Runs body(i) for i in [0, n) on up to worker_threads() threads. Each index
/// runs exactly once; callers write results to per-index slots so reduction
/// order stays deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace pcd
