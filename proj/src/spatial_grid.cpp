#include "pcd/spatial_grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pcd {

namespace {
constexpr long kMaxDim = 512;
}

SpatialGrid::SpatialGrid(std::span<const Vec3> points, double cell) : points_(points) {
    const auto n = points.size();
    std::array<double, 3> lo{0, 0, 0}, hi{0, 0, 0};
    if (n > 0) {
        for (int a = 0; a < 3; ++a) lo[a] = hi[a] = points[0][a];
        for (const auto& p : points)
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], double(p[a]));
                hi[a] = std::max(hi[a], double(p[a]));
            }
    }
    double extent = 0.0;
    for (int a = 0; a < 3; ++a) extent = std::max(extent, hi[a] - lo[a]);
    if (cell <= 0.0) cell = n > 1 ? 2.0 * extent / std::sqrt(double(n)) : 1.0;
    if (cell <= 0.0 || !std::isfinite(cell)) cell = 1.0;
    // Keep the cell count proportional to n.
    for (;;) {
        std::size_t total = 1;
        for (int a = 0; a < 3; ++a) {
            dims_[a] = std::min(kMaxDim, long((hi[a] - lo[a]) / cell) + 1);
            total *= std::size_t(dims_[a]);
        }
        if (total <= 8 * n + 64) break;
        cell *= 1.5;
    }
    cell_ = cell;
    origin_ = lo;

    const std::size_t ncells = std::size_t(dims_[0] * dims_[1] * dims_[2]);
    std::vector<std::size_t> cell_id(n);
    cell_start_.assign(ncells + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = cell_of(points[i]);
        cell_id[i] = flat(c[0], c[1], c[2]);
        ++cell_start_[cell_id[i] + 1];
    }
    for (std::size_t c = 0; c < ncells; ++c) cell_start_[c + 1] += cell_start_[c];
    order_.resize(n);
    auto fill = cell_start_;
    for (std::size_t i = 0; i < n; ++i) order_[fill[cell_id[i]]++] = i;
}

SpatialGrid::Cell SpatialGrid::cell_of(const Vec3& q) const {
    Cell c{};
    for (int a = 0; a < 3; ++a) {
        const double f = std::floor((double(q[a]) - origin_[a]) / cell_);
        c[a] = std::clamp(long(std::clamp(f, -1.0, double(kMaxDim + 1))), 0L, dims_[a] - 1);
    }
    return c;
}

template <typename Visit>
void SpatialGrid::visit_ring(const Cell& c, long r, Visit&& visit) const {
    const long z0 = std::max(0L, c[2] - r), z1 = std::min(dims_[2] - 1, c[2] + r);
    const long y0 = std::max(0L, c[1] - r), y1 = std::min(dims_[1] - 1, c[1] + r);
    const long x0 = std::max(0L, c[0] - r), x1 = std::min(dims_[0] - 1, c[0] + r);
    for (long z = z0; z <= z1; ++z) {
        const bool zface = std::abs(z - c[2]) == r;
        for (long y = y0; y <= y1; ++y) {
            const bool yface = zface || std::abs(y - c[1]) == r;
            if (yface) {
                for (long x = x0; x <= x1; ++x) visit(flat(x, y, z));
            } else {
                if (c[0] - r >= 0) visit(flat(c[0] - r, y, z));
                if (r > 0 && c[0] + r < dims_[0]) visit(flat(c[0] + r, y, z));
            }
        }
    }
}

double SpatialGrid::outside_bound(const Vec3& q, const Cell& c, long r) const {
    double bound = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (c[a] - r > 0) bound = std::min(bound, double(q[a]) - (origin_[a] + double(c[a] - r) * cell_));
        if (c[a] + r < dims_[a] - 1) bound = std::min(bound, origin_[a] + double(c[a] + r + 1) * cell_ - double(q[a]));
    }
    // Guard against q sitting a rounding error outside its own cell.
    return std::isinf(bound) ? bound : std::max(0.0, bound - 1e-9 * cell_);
}

Neighbor SpatialGrid::nearest(const Vec3& q) const {
    Neighbor best;
    if (points_.empty()) return best;
    const auto c = cell_of(q);
    for (long r = 0;; ++r) {
        visit_ring(c, r, [&](std::size_t cell) {
            for (std::size_t k = cell_start_[cell]; k < cell_start_[cell + 1]; ++k) {
                const auto i = order_[k];
                const double d = dist2(q, points_[i]);
                if (d < best.dist2 || (d == best.dist2 && i < best.index)) best = {i, d};
            }
        });
        const double lb = outside_bound(q, c, r);
        if (std::isinf(lb)) break;
        if (best.index != Neighbor{}.index && best.dist2 < lb * lb) break;
    }
    return best;
}

std::vector<std::size_t> SpatialGrid::knn(const Vec3& q, std::size_t k) const {
    const auto n = points_.size();
    if (k > n) throw std::invalid_argument("knn: k exceeds target size");
    std::vector<std::pair<double, std::size_t>> best;
    if (k == 0) return {};
    if (2 * k >= n) {
        best.reserve(n);
        for (std::size_t i = 0; i < n; ++i) best.emplace_back(dist2(q, points_[i]), i);
        std::partial_sort(best.begin(), best.begin() + std::ptrdiff_t(k), best.end());
    } else {
        best.reserve(k + 1);
        const auto c = cell_of(q);
        for (long r = 0;; ++r) {
            visit_ring(c, r, [&](std::size_t cell) {
                for (std::size_t j = cell_start_[cell]; j < cell_start_[cell + 1]; ++j) {
                    const auto i = order_[j];
                    const std::pair<double, std::size_t> cand{dist2(q, points_[i]), i};
                    if (best.size() == k && !(cand < best.back())) continue;
                    best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
                    if (best.size() > k) best.pop_back();
                }
            });
            const double lb = outside_bound(q, c, r);
            if (std::isinf(lb)) break;
            if (best.size() == k && best.back().first < lb * lb) break;
        }
    }
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = best[i].second;
    return out;
}

std::vector<std::size_t> SpatialGrid::within(const Vec3& q, double r) const {
    std::vector<std::size_t> out;
    if (points_.empty()) return out;
    const double r2 = r * r;
    Cell lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
        const auto axis_cell = [&](double v) {
            const double f = std::floor((v - origin_[a]) / cell_);
            return std::clamp(long(std::clamp(f, -1.0, double(kMaxDim + 1))), 0L, dims_[a] - 1);
        };
        lo[a] = axis_cell(double(q[a]) - r);
        hi[a] = axis_cell(double(q[a]) + r);
    }
    for (long z = lo[2]; z <= hi[2]; ++z)
        for (long y = lo[1]; y <= hi[1]; ++y)
            for (long x = lo[0]; x <= hi[0]; ++x) {
                const auto cell = flat(x, y, z);
                for (std::size_t j = cell_start_[cell]; j < cell_start_[cell + 1]; ++j) {
                    const auto i = order_[j];
                    if (dist2(q, points_[i]) <= r2) out.push_back(i);
                }
            }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Neighbor> nearest_neighbors(std::span<const Vec3> query, std::span<const Vec3> target) {
    std::vector<Neighbor> out(query.size());
    if (target.empty()) return out;
    const SpatialGrid grid(target);
    constexpr std::size_t kChunk = 1024;
    const std::size_t chunks = (query.size() + kChunk - 1) / kChunk;
    parallel_for(chunks, [&](std::size_t c) {
        const auto end = std::min(query.size(), (c + 1) * kChunk);
        for (std::size_t i = c * kChunk; i < end; ++i) out[i] = grid.nearest(query[i]);
    });
    return out;
}

}  // namespace pcd
