#pragma once

// Orthographic depth rendering and back-projection, the camera rig used for
// the auxiliary views, and the sinusoidal positional encoding.
//
// Camera convention: a pose (azimuth, elevation) in degrees places the camera
// on the unit sphere at (cos el sin az, sin el, cos el cos az) looking at the
// origin. right = normalize(forward x +y), up = right x forward. Azimuth 0,
// elevation 0 looks down -z from the +z axis.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pcd/point_cloud.hpp"

namespace pcd {

struct CameraPose {
    double azimuth = 0.0;    // degrees
    double elevation = 0.0;  // degrees, |elevation| < 90

    Vec3 position() const;  // unit vector from origin to camera
    Vec3 forward() const;   // unit view direction (towards the origin)
    Vec3 right() const;
    Vec3 up() const;

    /// Rows: right, up, forward.
    std::array<std::array<double, 3>, 3> matrix() const;
    /// Inverse of matrix(); azimuth comes back in [0, 360).
    static CameraPose from_matrix(const std::array<std::array<double, 3>, 3>& m);

    /// (cos az, sin az, cos el, sin el, forward xyz): the pose descriptor fed
    /// to the learned pose embedding.
    std::array<float, 7> features() const;

    bool operator==(const CameraPose&) const = default;
};

/// Image half-extent in model units. Shapes live in the unit cube centred at
/// the origin, whose projection under any rotation fits in [-s, s]^2; the
/// same bound is the depth range, so normalised depth is pose-independent.
inline constexpr double kViewHalfExtent = 0.86602540378443864676;  // sqrt(3)/2
/// Foreground depths are mapped into [0, 1 - kDepthMargin]; 1.0 is background.
inline constexpr double kDepthMargin = 1e-3;
inline constexpr float kBackground = 1.0f;

struct DepthView {
    int width = 0;
    int height = 0;
    std::vector<float> depth;  // row-major, row 0 at the top
    CameraPose pose;

    float at(int row, int col) const { return depth[std::size_t(row) * std::size_t(width) + std::size_t(col)]; }
    bool foreground(int row, int col) const { return at(row, col) < kBackground; }
    std::size_t foreground_count() const;
    /// Model-unit size of one pixel along the image width.
    double pixel_size() const { return 2.0 * kViewHalfExtent / double(width); }
};

struct ViewRig {
    std::vector<CameraPose> views;
    std::size_t size() const { return views.size(); }
};

/// Orthographic z-buffer render. Each point covers every pixel whose centre is
/// strictly closer than one pixel to its projection; the nearest depth wins.
DepthView render_depth(std::span<const Vec3> cloud, const CameraPose& pose, int width, int height);

/// Maps foreground pixels back to 3D (pixel centre + stored depth). More
/// pixels than n: FPS down to n. Fewer: all pixels plus pixels drawn with
/// replacement and jittered within their footprint, seeded by `seed`.
PointCloud back_project(const DepthView& view, std::size_t n, std::uint64_t seed = 0);

/// v in {2, 4, 6, 8}: azimuths evenly spaced from 0 degrees, fixed elevation.
ViewRig canonical_rig(std::size_t v, double elevation = 5.0);
/// Rig from explicit azimuths (degrees); rejects duplicates.
ViewRig rig_from_azimuths(std::span<const double> azimuths, double elevation = 5.0);

/// Pose of the single input scan: camera on +z.
inline CameraPose input_pose() { return {0.0, 0.0}; }

/// Per coordinate: d/6 sine bands then d/6 cosine bands at frequencies
/// 2^j * pi, j = 0 .. d/6 - 1. Layout [x-sin, x-cos, y-sin, y-cos, z-sin, z-cos].
std::vector<float> sinusoidal_encoding(const Vec3& p, std::size_t d);

/// 16-bit P5 graymap (depth = value / 65535) plus `<stem>.pose` beside it.
void write_depth_view(const std::filesystem::path& pgm, const DepthView& view);
DepthView read_depth_view(const std::filesystem::path& pgm);

}  // namespace pcd
