#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "pcd/common.hpp"

namespace pcd {

enum class CloudRole { partial, coarse, filtered, dense, ground_truth };

std::string_view role_name(CloudRole role);

struct PointCloud {
    std::vector<Vec3> points;
    CloudRole role = CloudRole::partial;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    const Vec3& operator[](std::size_t i) const { return points[i]; }
    operator std::span<const Vec3>() const { return points; }
};

/// Arithmetic mean, accumulated in double.
Vec3 centroid(std::span<const Vec3> points);

/// Index of the point closest to the centroid (lowest index on ties).
std::size_t nearest_to_centroid(std::span<const Vec3> points);

}  // namespace pcd
