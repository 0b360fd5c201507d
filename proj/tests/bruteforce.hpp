#pragma once

// O(n^2) reference implementations of the point-set metrics. Test-only;
// shares nothing with the grid-accelerated code except pcd::dist2.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "pcd/common.hpp"

namespace pcd::testing {

struct BruteNN {
    std::size_t index;
    double d2;
};

inline BruteNN brute_nearest(const Vec3& q, std::span<const Vec3> target) {
    BruteNN best{0, std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = dist2(q, target[i]);
        if (d < best.d2) best = {i, d};
    }
    return best;
}

inline double brute_chamfer_l2(std::span<const Vec3> x, std::span<const Vec3> y) {
    double a = 0, b = 0;
    for (const auto& p : x) a += brute_nearest(p, y).d2;
    for (const auto& p : y) b += brute_nearest(p, x).d2;
    return a / double(x.size()) + b / double(y.size());
}

inline double brute_chamfer_l1(std::span<const Vec3> x, std::span<const Vec3> y) {
    double a = 0, b = 0;
    for (const auto& p : x) a += std::sqrt(brute_nearest(p, y).d2);
    for (const auto& p : y) b += std::sqrt(brute_nearest(p, x).d2);
    return 0.5 * (a / double(x.size()) + b / double(y.size()));
}

inline double brute_dcd(std::span<const Vec3> x, std::span<const Vec3> y, double alpha) {
    auto side = [alpha](std::span<const Vec3> a, std::span<const Vec3> b) {
        std::vector<BruteNN> nn;
        for (const auto& p : a) nn.push_back(brute_nearest(p, b));
        double acc = 0;
        for (const auto& m : nn) {
            const auto count = std::count_if(nn.begin(), nn.end(), [&](const BruteNN& o) { return o.index == m.index; });
            acc += 1.0 - std::exp(-alpha * m.d2) / double(count);
        }
        return acc / double(a.size());
    };
    return 0.5 * (side(x, y) + side(y, x));
}

inline double brute_fscore(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau) {
    auto frac = [tau](std::span<const Vec3> a, std::span<const Vec3> b) {
        double hit = 0;
        for (const auto& p : a) hit += std::sqrt(brute_nearest(p, b).d2) < tau;
        return hit / double(a.size());
    };
    const double p = frac(pred, gt), r = frac(gt, pred);
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

inline std::vector<Vec3> random_cloud(std::size_t n, std::mt19937_64& rng, float lo = -0.5f, float hi = 0.5f) {
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<Vec3> out(n);
    for (auto& p : out) p = {d(rng), d(rng), d(rng)};
    return out;
}

}  // namespace pcd::testing
