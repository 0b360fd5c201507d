#pragma once

// Point-set kernels: sampling, grouping and the evaluation metrics. All
// functions are pure; nearest-neighbour work goes through SpatialGrid and
// sums accumulate in double.

#include <cstddef>
#include <span>
#include <vector>

#include "pcd/point_cloud.hpp"

namespace pcd {

/// Greedy max-min selection of k indices starting at `start`. Each pick
/// maximises the distance to the already chosen set; ties go to the lower
/// index.
std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> cloud, std::size_t k, std::size_t start);

/// FPS started at nearest_to_centroid(cloud); returns the sampled points.
std::vector<Vec3> fps_points(std::span<const Vec3> cloud, std::size_t k);

struct PatchSet {
    std::vector<std::size_t> seeds;
    std::vector<std::vector<std::size_t>> patches;  // ascending indices, each contains its seed
    double radius = 0.0;
};

/// K seeds by FPS from the point nearest the centroid; patch i holds every
/// point within r of seed i.
PatchSet patchify(std::span<const Vec3> cloud, std::size_t k, double r);

/// Exact k nearest neighbours in `target` for each query point, ordered by
/// distance with lower-index tie-break.
std::vector<std::vector<std::size_t>> knn(std::span<const Vec3> query, std::span<const Vec3> target, std::size_t k);

/// (1/|X|) sum min ||x-y||^2 + (1/|Y|) sum min ||y-x||^2
double chamfer_l2(std::span<const Vec3> x, std::span<const Vec3> y);

/// Halved sum of the two mean (non-squared) nearest distances.
double chamfer_l1(std::span<const Vec3> x, std::span<const Vec3> y);

/// arcosh(1 + chamfer_l2)
double hyper_cd(std::span<const Vec3> x, std::span<const Vec3> y);

/// Density-aware Chamfer distance with exponential kernel temperature alpha,
/// bounded in [0, 1].
double density_aware_cd(std::span<const Vec3> x, std::span<const Vec3> y, double alpha = 1000.0);

struct FScore {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

/// Precision/recall of nearest distances strictly below tau.
FScore f_score(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau = 0.01);

}  // namespace pcd
