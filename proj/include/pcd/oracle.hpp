#pragma once

// Synthetic data: procedural shapes built from solid primitives, single-view
// partial scans, and posed depth stacks with controllable cross-view
// inconsistency. Everything is deterministic given the seeds.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcd/point_cloud.hpp"
#include "pcd/views.hpp"

namespace pcd {

enum class ShapeFamily { box_frame, chair_like, lamp_like, table_like, cylinder, composite };

std::string_view family_name(ShapeFamily f);
/// Throws ConfigError for unknown names.
ShapeFamily parse_family(std::string_view name);
std::span<const ShapeFamily> all_families();

struct ShapeSpec {
    ShapeFamily family = ShapeFamily::cylinder;
    std::uint64_t seed = 0;
    /// Overrides for the family's dimensions; anything missing is drawn from
    /// the seed. Unknown keys are rejected.
    std::map<std::string, double> params;
};

/// One solid building block. Boxes may be yawed about +y; cylinders and
/// frustums have their axis along +y. A frustum is an open shell (no caps,
/// no interior); the other kinds are closed solids.
struct Primitive {
    enum class Kind { box, cylinder, frustum, sphere };
    Kind kind = Kind::box;
    std::string part;       // e.g. "seat", "leg_2"
    Vec3 center{0, 0, 0};
    Vec3 half{0, 0, 0};     // box half extents
    double yaw = 0.0;       // box only, radians
    double radius = 0.0;    // cylinder / sphere; frustum bottom radius
    double radius_top = 0.0;  // frustum
    double half_height = 0.0; // cylinder / frustum

    double area() const;
    bool inside(const Vec3& p) const;  // strictly inside the solid
    /// Unsigned distance from p to this primitive's full surface.
    double surface_distance(const Vec3& p) const;
    Vec3 sample_surface(std::mt19937_64& rng) const;
    std::array<Vec3, 2> bounds() const;
};

struct SolidShape {
    ShapeSpec spec;                        // params fully resolved
    std::vector<Primitive> parts;
};

/// Resolves parameters, assembles the parts, yaws the assembly and fits it
/// into the unit cube (centred on its bounding box; scaled down only if it is
/// larger than the cube).
SolidShape build_shape(const ShapeSpec& spec);

/// n points area-uniformly distributed over the union surface: samples that
/// fall strictly inside another part are rejected.
PointCloud sample_shape(const SolidShape& shape, std::size_t n, std::uint64_t seed);
PointCloud synth_shape(const ShapeSpec& spec, std::size_t n);

struct InconsistencyProfile {
    double depth_noise_sigma = 0.0;      // Gaussian depth noise, model units
    double per_view_scale_jitter = 0.0;  // depth scale drawn from 1 +/- jitter per view
    int silhouette_erosion = 0;          // pixels
    double dropout_patch_rate = 0.0;     // probability per W/8 x H/8 cell
    double outlier_rate = 0.0;           // probability per foreground pixel

    /// Throws ConfigError when out of range.
    void validate() const;
    bool is_clean() const;
    bool operator==(const InconsistencyProfile&) const = default;
};

/// "clean", "mild" or "severe"; ConfigError otherwise.
InconsistencyProfile profile_preset(std::string_view name);

struct PartialScan {
    PointCloud cloud;
    DepthView input;
};

/// Renders from the fixed input viewpoint and back-projects to n points.
/// DataError if fewer than 16 foreground pixels.
PartialScan make_partial(std::span<const Vec3> gt, std::size_t n, int width = 224, std::uint64_t seed = 0);

/// Renders one view per rig pose and corrupts it: scale jitter, depth noise,
/// erosion, dropout cells, outliers, in that order.
std::vector<DepthView> dream_views(std::span<const Vec3> gt, const ViewRig& rig, const InconsistencyProfile& profile,
                                   std::uint64_t seed, int width = 224);

/// Applies the corruption pipeline to one rendered view in place.
void corrupt_view(DepthView& view, const InconsistencyProfile& profile, std::uint64_t seed);

struct Sample {
    std::string id;
    ShapeSpec spec;
    InconsistencyProfile profile;
    PointCloud partial;
    PointCloud gt;
    DepthView input;
    std::vector<DepthView> views;
};

struct SampleOptions {
    std::size_t n_partial = 2048;
    std::size_t n_gt = 16384;
    int width = 224;
    std::size_t views = 6;
    double elevation = 5.0;
    std::vector<double> azimuths;  // empty: evenly spaced
    InconsistencyProfile profile;
};

Sample make_sample(const std::string& id, const ShapeSpec& spec, const SampleOptions& opt);

/// Binary point file: "XYZB", u32 count, little-endian f32 triplets.
void write_xyzb(const std::filesystem::path& path, std::span<const Vec3> points);
std::vector<Vec3> read_xyzb(const std::filesystem::path& path);

/// Writes `<root>/sample_<id>/` and returns that directory.
std::filesystem::path export_sample(const std::filesystem::path& root, const Sample& s);
/// Loads a sample directory. Views are view_0, view_1, ... until one is
/// missing. Missing or malformed files raise DataError naming the file.
Sample load_sample(const std::filesystem::path& dir);

struct DatasetOptions {
    std::size_t train = 200;
    std::size_t val = 20;
    std::size_t test = 20;
    std::uint64_t seed = 1;
    std::vector<ShapeFamily> families;  // empty: all families
    SampleOptions sample;
};

/// Sample i of a split uses seed mix_seed(mix_seed(seed, split), i) and the
/// family families[i % |families|].
Sample make_dataset_sample(const DatasetOptions& opt, std::string_view split, std::size_t index);
/// Writes <root>/{train,val,test}/sample_<id>/ in parallel.
void generate_dataset(const std::filesystem::path& root, const DatasetOptions& opt);
/// All sample_* directories of a split, sorted by name.
std::vector<Sample> load_split(const std::filesystem::path& split_dir);

}  // namespace pcd
