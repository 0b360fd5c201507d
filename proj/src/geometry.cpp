#include "pcd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "pcd/spatial_grid.hpp"

namespace pcd {

std::string_view role_name(CloudRole role) {
    switch (role) {
        case CloudRole::partial: return "partial";
        case CloudRole::coarse: return "coarse";
        case CloudRole::filtered: return "filtered";
        case CloudRole::dense: return "dense";
        case CloudRole::ground_truth: return "ground_truth";
    }
    return "unknown";
}

Vec3 centroid(std::span<const Vec3> points) {
    if (points.empty()) throw std::invalid_argument("centroid: empty cloud");
    double s[3] = {0, 0, 0};
    for (const auto& p : points)
        for (int a = 0; a < 3; ++a) s[a] += p[a];
    const double n = double(points.size());
    return {float(s[0] / n), float(s[1] / n), float(s[2] / n)};
}

std::size_t nearest_to_centroid(std::span<const Vec3> points) {
    const auto c = centroid(points);
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
        const double d = dist2(points[i], c);
        if (d < bd) {
            bd = d;
            best = i;
        }
    }
    return best;
}

std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> cloud, std::size_t k, std::size_t start) {
    const auto n = cloud.size();
    if (k == 0 || k > n) {
        throw std::invalid_argument("farthest_point_sample: k=" + std::to_string(k) + " not in [1, " +
                                    std::to_string(n) + "]");
    }
    if (start >= n) throw std::invalid_argument("farthest_point_sample: start index out of range");
    std::vector<std::size_t> out;
    out.reserve(k);
    std::vector<double> mind(n, std::numeric_limits<double>::infinity());
    std::size_t cur = start;
    for (std::size_t s = 0; s < k; ++s) {
        out.push_back(cur);
        const Vec3 c = cloud[cur];
        std::size_t next = 0;
        double far = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = dist2(cloud[i], c);
            if (d < mind[i]) mind[i] = d;
            if (mind[i] > far) {
                far = mind[i];
                next = i;
            }
        }
        cur = next;
    }
    return out;
}

std::vector<Vec3> fps_points(std::span<const Vec3> cloud, std::size_t k) {
    const auto idx = farthest_point_sample(cloud, k, nearest_to_centroid(cloud));
    std::vector<Vec3> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(cloud[i]);
    return out;
}

PatchSet patchify(std::span<const Vec3> cloud, std::size_t k, double r) {
    if (!(r > 0.0)) throw std::invalid_argument("patchify: radius must be positive");
    PatchSet set;
    set.radius = r;
    set.seeds = farthest_point_sample(cloud, k, nearest_to_centroid(cloud));
    const SpatialGrid grid(cloud);
    set.patches.reserve(k);
    for (auto s : set.seeds) set.patches.push_back(grid.within(cloud[s], r));
    return set;
}

std::vector<std::vector<std::size_t>> knn(std::span<const Vec3> query, std::span<const Vec3> target, std::size_t k) {
    if (k > target.size()) throw std::invalid_argument("knn: k exceeds target size");
    const SpatialGrid grid(target);
    std::vector<std::vector<std::size_t>> out(query.size());
    for (std::size_t i = 0; i < query.size(); ++i) out[i] = grid.knn(query[i], k);
    return out;
}

namespace {

void require_nonempty(std::span<const Vec3> x, std::span<const Vec3> y, const char* op) {
    if (x.empty() || y.empty()) throw std::invalid_argument(std::string(op) + ": empty point cloud");
}

// Sum of f(d2) over nearest neighbours, accumulated in double in query order.
template <typename F>
double nn_sum(const std::vector<Neighbor>& nn, F f) {
    double acc = 0.0;
    for (const auto& m : nn) acc += f(m.dist2);
    return acc;
}

}  // namespace

double chamfer_l2(std::span<const Vec3> x, std::span<const Vec3> y) {
    require_nonempty(x, y, "chamfer_l2");
    const auto xy = nearest_neighbors(x, y);
    const auto yx = nearest_neighbors(y, x);
    const auto id = [](double d) { return d; };
    return nn_sum(xy, id) / double(x.size()) + nn_sum(yx, id) / double(y.size());
}

double chamfer_l1(std::span<const Vec3> x, std::span<const Vec3> y) {
    require_nonempty(x, y, "chamfer_l1");
    const auto xy = nearest_neighbors(x, y);
    const auto yx = nearest_neighbors(y, x);
    const auto root = [](double d) { return std::sqrt(d); };
    return 0.5 * (nn_sum(xy, root) / double(x.size()) + nn_sum(yx, root) / double(y.size()));
}

double hyper_cd(std::span<const Vec3> x, std::span<const Vec3> y) { return std::acosh(1.0 + chamfer_l2(x, y)); }

double density_aware_cd(std::span<const Vec3> x, std::span<const Vec3> y, double alpha) {
    require_nonempty(x, y, "density_aware_cd");
    if (!(alpha > 0.0)) throw std::invalid_argument("density_aware_cd: alpha must be positive");
    const auto one_side = [alpha](const std::vector<Neighbor>& nn, std::size_t target_size) {
        std::vector<std::size_t> hits(target_size, 0);
        for (const auto& m : nn) ++hits[m.index];
        double acc = 0.0;
        for (const auto& m : nn) acc += 1.0 - std::exp(-alpha * m.dist2) / double(hits[m.index]);
        return acc / double(nn.size());
    };
    return 0.5 * (one_side(nearest_neighbors(x, y), y.size()) + one_side(nearest_neighbors(y, x), x.size()));
}

FScore f_score(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau) {
    require_nonempty(pred, gt, "f_score");
    if (!(tau > 0.0)) throw std::invalid_argument("f_score: tau must be positive");
    const double t2 = tau * tau;
    const auto frac = [t2](const std::vector<Neighbor>& nn) {
        std::size_t hit = 0;
        for (const auto& m : nn) hit += m.dist2 < t2;
        return double(hit) / double(nn.size());
    };
    FScore s;
    s.precision = frac(nearest_neighbors(pred, gt));
    s.recall = frac(nearest_neighbors(gt, pred));
    s.f = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

}  // namespace pcd
