#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "bruteforce.hpp"
#include "pcd/geometry.hpp"
#include "pcd/views.hpp"

using namespace pcd;
using pcd::testing::random_cloud;

namespace {

using Cloud = std::vector<Vec3>;

std::filesystem::path scratch_dir(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "pcdk_test_views" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Dense sample of a square of side `side` in the plane z = z0.
Cloud plane(float side, float z0, int per_axis) {
    Cloud c;
    for (int i = 0; i < per_axis; ++i)
        for (int j = 0; j < per_axis; ++j)
            c.push_back({side * (float(i) / float(per_axis - 1) - 0.5f), side * (float(j) / float(per_axis - 1) - 0.5f), z0});
    return c;
}

// Area-uniform sample of the surface of an axis-aligned box centred at the origin.
Cloud box_surface(const Vec3& half, std::size_t n, std::mt19937_64& rng) {
    const double areas[3] = {half[1] * half[2], half[0] * half[2], half[0] * half[1]};
    std::discrete_distribution<int> face({areas[0], areas[0], areas[1], areas[1], areas[2], areas[2]});
    std::uniform_real_distribution<float> u(-1.f, 1.f);
    Cloud c;
    while (c.size() < n) {
        const int f = face(rng), axis = f / 2;
        Vec3 p{u(rng) * half[0], u(rng) * half[1], u(rng) * half[2]};
        p[axis] = (f % 2 ? 1.f : -1.f) * half[axis];
        c.push_back(p);
    }
    return c;
}

}  // namespace

TEST_CASE("camera basis is orthonormal and round-trips through the matrix") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> az(0.0, 360.0), el(-85.0, 85.0);
    for (int t = 0; t < 200; ++t) {
        const CameraPose p{az(rng), el(rng)};
        const auto m = p.matrix();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double d = 0;
                for (int k = 0; k < 3; ++k) d += m[i][k] * m[j][k];
                CHECK(d == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
            }
        CHECK(norm(p.forward()) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(p.up()[1] >= 0.0f);  // up is +y projected
        const auto q = CameraPose::from_matrix(m);
        CHECK(std::abs(q.azimuth - p.azimuth) < 1e-6);
        CHECK(std::abs(q.elevation - p.elevation) < 1e-6);
    }
    const CameraPose front = input_pose();
    CHECK(front.position() == Vec3{0, 0, 1});
    CHECK(front.forward() == Vec3{0, 0, -1});
    CHECK(front.right() == Vec3{1, 0, 0});
    CHECK(front.up() == Vec3{0, 1, 0});
    CHECK_THROWS_AS(CameraPose(0, 90).matrix(), std::invalid_argument);
}

TEST_CASE("render examples") {
    SUBCASE("single point at origin lights exactly the centre pixel") {
        const auto v = render_depth(Cloud{{0, 0, 0}}, input_pose(), 65, 65);
        CHECK(v.foreground_count() == 1);
        CHECK(v.foreground(32, 32));
        CHECK(v.at(32, 32) == doctest::Approx(0.5 * (1 - kDepthMargin)));
    }
    SUBCASE("cube corners span the analytic projected extent") {
        Cloud corners;
        for (int i = 0; i < 8; ++i) corners.push_back({i & 1 ? 0.5f : -0.5f, i & 2 ? 0.5f : -0.5f, i & 4 ? 0.5f : -0.5f});
        for (const CameraPose pose : {CameraPose{0, 0}, CameraPose{30, 5}, CameraPose{200, -20}}) {
            const int W = 128;
            const auto v = render_depth(corners, pose, W, W);
            const double px = v.pixel_size();
            double umin = 1e9, umax = -1e9, vmin = 1e9, vmax = -1e9;
            const auto r = pose.right(), u = pose.up();
            for (const auto& c : corners) {
                umin = std::min(umin, double(dot(c, r)));
                umax = std::max(umax, double(dot(c, r)));
                vmin = std::min(vmin, double(dot(c, u)));
                vmax = std::max(vmax, double(dot(c, u)));
            }
            int cmin = W, cmax = -1, rmin = W, rmax = -1;
            for (int row = 0; row < W; ++row)
                for (int col = 0; col < W; ++col)
                    if (v.foreground(row, col)) {
                        cmin = std::min(cmin, col), cmax = std::max(cmax, col);
                        rmin = std::min(rmin, row), rmax = std::max(rmax, row);
                    }
            const double s = kViewHalfExtent;
            CHECK(std::abs((cmin + 0.5) * px - s - umin) <= px);
            CHECK(std::abs((cmax + 0.5) * px - s - umax) <= px);
            CHECK(std::abs(s - (rmin + 0.5) * px - vmax) <= px);
            CHECK(std::abs(s - (rmax + 0.5) * px - vmin) <= px);
        }
    }
    SUBCASE("opposite azimuths give mirrored masks") {
        std::mt19937_64 rng(2);
        const auto cloud = random_cloud(300, rng, -0.4f, 0.4f);
        // Exact only at zero elevation: elsewhere the two up vectors tilt in
        // opposite directions along z, which is not a reflection of the image.
        const auto a = render_depth(cloud, {0, 0}, 96, 80);
        const auto c = render_depth(cloud, {180, 0}, 96, 80);
        std::size_t mismatches = 0;
        for (int row = 0; row < 80; ++row)
            for (int col = 0; col < 96; ++col) mismatches += a.foreground(row, col) != c.foreground(row, 95 - col);
        CHECK(mismatches == 0);
    }
    CHECK_THROWS_AS(render_depth(Cloud{{0, 0, 0}}, input_pose(), 0, 10), std::invalid_argument);
    CHECK_THROWS_AS(render_depth(Cloud{}, input_pose(), 10, 10), std::invalid_argument);
}

TEST_CASE("depth is in range and the z-buffer keeps the nearest surface") {
    const Cloud two{{0, 0, 0.3f}, {0, 0, -0.3f}};
    const auto v = render_depth(two, input_pose(), 33, 33);
    const double s = kViewHalfExtent;
    CHECK(v.at(16, 16) == doctest::Approx((-0.3 + s) / (2 * s) * (1 - kDepthMargin)).epsilon(1e-6));
    std::mt19937_64 rng(3);
    const auto w = render_depth(random_cloud(500, rng), {123, 40}, 50, 50);
    for (float d : w.depth) CHECK((d >= 0.0f && (d <= 1.0f - kDepthMargin + 1e-7f || d == kBackground)));
}

TEST_CASE("back-projection examples") {
    SUBCASE("plane facing the camera round-trips within two pixels") {
        const auto cloud = plane(0.8f, 0.1f, 120);
        const auto v = render_depth(cloud, input_pose(), 224, 224);
        const auto back = back_project(v, 2048, 7);
        CHECK(back.size() == 2048);
        const double px = v.pixel_size();
        CHECK(chamfer_l2(back, cloud) < 4 * px * px);
    }
    SUBCASE("n equal to the foreground count inverts every visible pixel") {
        const Cloud pts{{0.1f, 0.2f, 0.05f}, {-0.3f, 0.0f, -0.2f}};
        const auto v = render_depth(pts, input_pose(), 101, 101);
        const auto back = back_project(v, v.foreground_count());
        REQUIRE(back.size() == v.foreground_count());
        const double px = v.pixel_size();
        for (const auto& p : back.points) {
            const auto nn = std::min(dist2(p, pts[0]), dist2(p, pts[1]));
            CHECK(std::sqrt(nn) < px * 1.01);
        }
    }
    SUBCASE("upsampling jitters inside pixel footprints") {
        const auto v = render_depth(Cloud{{0, 0, 0}}, input_pose(), 65, 65);
        const auto back = back_project(v, 100, 3);
        CHECK(back.size() == 100);
        const double half = v.pixel_size() / 2;
        for (const auto& p : back.points) {
            CHECK(std::abs(p[0]) <= half + 1e-6);
            CHECK(std::abs(p[1]) <= half + 1e-6);
            CHECK(std::abs(p[2]) < 1e-3);
        }
        CHECK(back_project(v, 100, 3).points == back.points);
    }
    DepthView empty{8, 8, std::vector<float>(64, kBackground), input_pose()};
    CHECK_THROWS_AS(back_project(empty, 10), std::invalid_argument);
}

TEST_CASE("render, back-project, render is nearly a fixed point") {
    std::mt19937_64 rng(4);
    const auto cloud = box_surface({0.3f, 0.2f, 0.25f}, 20000, rng);
    for (const CameraPose pose : {CameraPose{0, 0}, CameraPose{60, 5}, CameraPose{250, 30}}) {
        const auto first = render_depth(cloud, pose, 128, 128);
        const auto again = render_depth(back_project(first, first.foreground_count()), pose, 128, 128);
        std::size_t kept = 0;
        for (int row = 0; row < 128; ++row)
            for (int col = 0; col < 128; ++col) kept += first.foreground(row, col) && again.foreground(row, col);
        CHECK(double(kept) >= 0.95 * double(first.foreground_count()));
    }
}

TEST_CASE("six-view rig covers a noiseless shape") {
    std::mt19937_64 rng(5);
    const auto gt = box_surface({0.35f, 0.3f, 0.25f}, 16384, rng);
    const auto rig = canonical_rig(6);
    std::vector<Vec3> merged;
    double px = 0;
    for (const auto& pose : rig.views) {
        const auto v = render_depth(gt, pose, 224, 224);
        px = v.pixel_size();
        const auto back = back_project(v, v.foreground_count());
        merged.insert(merged.end(), back.points.begin(), back.points.end());
    }
    const double cd = chamfer_l2(merged, gt);
    MESSAGE("six-view chamfer_l2 = " << cd << ", bound = " << 4 * px * px);
    CHECK(cd < 4 * px * px);
}

TEST_CASE("canonical rig") {
    const auto six = canonical_rig(6);
    std::vector<double> az;
    for (const auto& p : six.views) {
        az.push_back(p.azimuth);
        CHECK(p.elevation == 5.0);
    }
    CHECK(az == std::vector<double>{0, 60, 120, 180, 240, 300});
    CHECK(canonical_rig(2).views == std::vector<CameraPose>{{0, 5}, {180, 5}});
    for (std::size_t v : {2u, 4u, 6u, 8u}) {
        const auto rig = canonical_rig(v);
        CHECK(rig.size() == v);
        std::set<std::pair<double, double>> distinct;
        for (const auto& p : rig.views) distinct.insert({p.azimuth, p.elevation});
        CHECK(distinct.size() == v);
    }
    for (std::size_t v : {0u, 1u, 3u, 5u, 7u, 9u}) CHECK_THROWS_AS(canonical_rig(v), std::invalid_argument);
    const double dup[] = {10, 370};
    CHECK_THROWS_AS(rig_from_azimuths(dup), std::invalid_argument);
}

TEST_CASE("sinusoidal encoding") {
    const auto zero = sinusoidal_encoding({0, 0, 0}, 24);
    REQUIRE(zero.size() == 24);
    for (int a = 0; a < 3; ++a)
        for (int j = 0; j < 4; ++j) {
            CHECK(zero[a * 8 + j] == 0.0f);
            CHECK(zero[a * 8 + 4 + j] == 1.0f);
        }
    std::mt19937_64 rng(6);
    for (const auto& p : random_cloud(100, rng, -1.f, 1.f)) {
        for (std::size_t d : {6u, 24u, 60u}) {
            const auto e = sinusoidal_encoding(p, d);
            double n2 = 0;
            for (float x : e) n2 += double(x) * x;
            CHECK(n2 == doctest::Approx(double(d) / 2).epsilon(1e-5));
        }
    }
    // The encoding is a concatenation of per-coordinate blocks with the same
    // map on each axis, so injectivity on the grid reduces to injectivity of
    // one block over the 1-D grid. Scan it exhaustively. The grid stops short
    // of +1 because every band is periodic: -1 and +1 encode identically.
    std::vector<std::vector<float>> codes;
    for (int i = 0; i < 200; ++i) {
        const auto e = sinusoidal_encoding({-1.0f + 0.01f * float(i), 0, 0}, 24);
        codes.emplace_back(e.begin(), e.begin() + 8);
    }
    double min_gap = 1e9;
    for (std::size_t i = 0; i < codes.size(); ++i)
        for (std::size_t j = i + 1; j < codes.size(); ++j) {
            double d = 0;
            for (std::size_t k = 0; k < 8; ++k) d += double(codes[i][k] - codes[j][k]) * (codes[i][k] - codes[j][k]);
            min_gap = std::min(min_gap, d);
        }
    CHECK(min_gap > 1e-6);
    CHECK_THROWS_AS(sinusoidal_encoding({0, 0, 0}, 0), std::invalid_argument);
    CHECK_THROWS_AS(sinusoidal_encoding({0, 0, 0}, 20), std::invalid_argument);
}

TEST_CASE("depth views round-trip through disk") {
    const auto dir = scratch_dir("roundtrip");
    std::mt19937_64 rng(9);
    const auto v = render_depth(random_cloud(400, rng), {240, 5}, 40, 30);
    write_depth_view(dir / "view_4.pgm", v);
    CHECK(std::filesystem::exists(dir / "view_4.pose"));
    const auto r = read_depth_view(dir / "view_4.pgm");
    CHECK(r.width == 40);
    CHECK(r.height == 30);
    CHECK(r.pose == v.pose);
    for (std::size_t i = 0; i < v.depth.size(); ++i) {
        CHECK(std::abs(r.depth[i] - v.depth[i]) <= 0.5f / 65535.0f + 1e-7f);
        CHECK((r.depth[i] == kBackground) == (v.depth[i] == kBackground));
    }

    std::filesystem::remove(dir / "view_4.pose");
    CHECK_THROWS_AS(read_depth_view(dir / "view_4.pgm"), DataError);
    {
        std::ofstream bad(dir / "bad.pgm", std::ios::binary);
        bad << "P5\n4 4\n65535\nxx";
    }
    CHECK_THROWS_AS(read_depth_view(dir / "bad.pgm"), DataError);
    CHECK_THROWS_AS(read_depth_view(dir / "missing.pgm"), DataError);
}

TEST_CASE("pose features") {
    const auto f = CameraPose{90, 0}.features();
    CHECK(f[0] == doctest::Approx(0.0).epsilon(1e-7));
    CHECK(f[1] == doctest::Approx(1.0));
    CHECK(f[2] == doctest::Approx(1.0));
    CHECK(f[3] == doctest::Approx(0.0));
    CHECK(f[4] == doctest::Approx(-1.0));
}
