#pragma once

#include <array>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "pcd/common.hpp"

namespace pcd {

struct Neighbor {
    std::size_t index = std::numeric_limits<std::size_t>::max();
    double dist2 = std::numeric_limits<double>::infinity();
};

/// Uniform grid over a fixed point set for exact nearest-neighbour queries.
///
/// Points are bucketed into cubic cells (CSR layout, ascending point index
/// inside each cell). A query scans Chebyshev rings of cells around its own
/// cell and stops once the best candidate is strictly closer than any point
/// that could live outside the scanned box, so results equal a brute-force
/// scan, including the lower-index tie rule.
class SpatialGrid {
public:
    /// `cell` <= 0 selects the cell size from the expected spacing of a
    /// surface sample: 2 * max_extent / sqrt(n).
    explicit SpatialGrid(std::span<const Vec3> points, double cell = 0.0);

    Neighbor nearest(const Vec3& q) const;
    /// k nearest, ordered by (distance, index). Requires k <= size().
    std::vector<std::size_t> knn(const Vec3& q, std::size_t k) const;
    /// All points with distance <= r, in ascending index order.
    std::vector<std::size_t> within(const Vec3& q, double r) const;

    std::size_t size() const { return points_.size(); }
    double cell_size() const { return cell_; }

private:
    using Cell = std::array<long, 3>;

    Cell cell_of(const Vec3& q) const;
    std::size_t flat(long x, long y, long z) const {
        return (std::size_t(z) * std::size_t(dims_[1]) + std::size_t(y)) * std::size_t(dims_[0]) + std::size_t(x);
    }
    template <typename Visit>
    void visit_ring(const Cell& c, long r, Visit&& visit) const;
    // Lower bound on the distance from q to any cell outside the ring-r box,
    // or +inf when that box already covers the grid.
    double outside_bound(const Vec3& q, const Cell& c, long r) const;

    std::span<const Vec3> points_;
    std::array<double, 3> origin_{};
    std::array<long, 3> dims_{1, 1, 1};
    double cell_ = 1.0;
    std::vector<std::size_t> cell_start_;
    std::vector<std::size_t> order_;
};

/// Nearest target for every query point (parallel over queries).
std::vector<Neighbor> nearest_neighbors(std::span<const Vec3> query, std::span<const Vec3> target);

}  // namespace pcd
