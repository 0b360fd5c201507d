#include "pcd/views.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include "pcd/geometry.hpp"

namespace pcd {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

using D3 = std::array<double, 3>;

D3 position_d(const CameraPose& p) {
    const double az = p.azimuth * kDeg, el = p.elevation * kDeg;
    return {std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
}

// right = normalize(f x +y) = normalize(-f.z, 0, f.x); up = right x f.
std::array<D3, 3> basis(const CameraPose& p) {
    const D3 pos = position_d(p);
    const D3 f{-pos[0], -pos[1], -pos[2]};
    const double len = std::hypot(f[2], f[0]);
    if (!(len > 1e-12)) throw std::invalid_argument("CameraPose: elevation must be strictly inside (-90, 90)");
    const D3 r{-f[2] / len, 0.0, f[0] / len};
    const D3 u{r[1] * f[2] - r[2] * f[1], r[2] * f[0] - r[0] * f[2], r[0] * f[1] - r[1] * f[0]};
    return {r, u, f};
}

Vec3 to_vec(const D3& v) { return {float(v[0]), float(v[1]), float(v[2])}; }

double dotd(const D3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

}  // namespace

Vec3 CameraPose::position() const { return to_vec(position_d(*this)); }
Vec3 CameraPose::forward() const { return to_vec(basis(*this)[2]); }
Vec3 CameraPose::right() const { return to_vec(basis(*this)[0]); }
Vec3 CameraPose::up() const { return to_vec(basis(*this)[1]); }

std::array<std::array<double, 3>, 3> CameraPose::matrix() const { return basis(*this); }

CameraPose CameraPose::from_matrix(const std::array<std::array<double, 3>, 3>& m) {
    const D3& f = m[2];
    const double el = std::asin(std::clamp(-f[1], -1.0, 1.0)) / kDeg;
    double az = std::atan2(-f[0], -f[2]) / kDeg;
    if (az < 0.0) az += 360.0;
    if (az >= 360.0) az -= 360.0;
    return {az, el};
}

std::array<float, 7> CameraPose::features() const {
    const double az = azimuth * kDeg, el = elevation * kDeg;
    const auto f = basis(*this)[2];
    return {float(std::cos(az)), float(std::sin(az)), float(std::cos(el)), float(std::sin(el)),
            float(f[0]),         float(f[1]),         float(f[2])};
}

std::size_t DepthView::foreground_count() const {
    return std::size_t(std::count_if(depth.begin(), depth.end(), [](float d) { return d < kBackground; }));
}

DepthView render_depth(std::span<const Vec3> cloud, const CameraPose& pose, int width, int height) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("render_depth: zero-area image");
    if (cloud.empty()) throw std::invalid_argument("render_depth: empty cloud");
    const auto [r, u, f] = basis(pose);
    const double s = kViewHalfExtent;
    DepthView view{width, height, std::vector<float>(std::size_t(width) * std::size_t(height), kBackground), pose};
    const double sx = double(width) / (2.0 * s), sy = double(height) / (2.0 * s);
    const double scale = (1.0 - kDepthMargin) / (2.0 * s);
    for (const auto& p : cloud) {
        // Continuous pixel coordinates; pixel (row, col) has centre (col + 0.5, row + 0.5).
        const double x = (dotd(r, p) + s) * sx;
        const double y = (s - dotd(u, p)) * sy;
        const double z = std::clamp((dotd(f, p) + s) * scale, 0.0, 1.0 - kDepthMargin);
        const int c0 = int(std::floor(x - 1.5)), r0 = int(std::floor(y - 1.5));
        for (int row = std::max(r0, 0); row <= std::min(r0 + 3, height - 1); ++row) {
            for (int col = std::max(c0, 0); col <= std::min(c0 + 3, width - 1); ++col) {
                const double dx = col + 0.5 - x, dy = row + 0.5 - y;
                if (dx * dx + dy * dy >= 1.0) continue;
                float& slot = view.depth[std::size_t(row) * std::size_t(width) + std::size_t(col)];
                slot = std::min(slot, float(z));
            }
        }
    }
    return view;
}

PointCloud back_project(const DepthView& view, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("back_project: n must be positive");
    const auto [r, u, f] = basis(view.pose);
    const double s = kViewHalfExtent;
    const double px = 2.0 * s / double(view.width), py = 2.0 * s / double(view.height);
    const auto lift = [&](double col, double row, float d) {
        const double a = col * px - s, b = s - row * py;
        const double t = double(d) / (1.0 - kDepthMargin) * 2.0 * s - s;
        return Vec3{float(a * r[0] + b * u[0] + t * f[0]), float(a * r[1] + b * u[1] + t * f[1]),
                    float(a * r[2] + b * u[2] + t * f[2])};
    };

    std::vector<Vec3> pts;
    std::vector<std::array<int, 2>> pixels;
    for (int row = 0; row < view.height; ++row) {
        for (int col = 0; col < view.width; ++col) {
            if (!view.foreground(row, col)) continue;
            pts.push_back(lift(col + 0.5, row + 0.5, view.at(row, col)));
            pixels.push_back({row, col});
        }
    }
    if (pts.empty()) throw std::invalid_argument("back_project: view has no foreground pixels");

    PointCloud out;
    if (pts.size() >= n) {
        out.points = pts.size() == n ? std::move(pts) : fps_points(pts, n);
        return out;
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, pixels.size() - 1);
    std::uniform_real_distribution<double> jitter(0.0, 1.0);
    out.points = std::move(pts);
    while (out.points.size() < n) {
        const auto [row, col] = pixels[pick(rng)];
        out.points.push_back(lift(col + jitter(rng), row + jitter(rng), view.at(row, col)));
    }
    return out;
}

ViewRig canonical_rig(std::size_t v, double elevation) {
    if (v != 2 && v != 4 && v != 6 && v != 8)
        throw std::invalid_argument("canonical_rig: view count must be 2, 4, 6 or 8, got " + std::to_string(v));
    std::vector<double> az(v);
    for (std::size_t i = 0; i < v; ++i) az[i] = 360.0 * double(i) / double(v);
    return rig_from_azimuths(az, elevation);
}

ViewRig rig_from_azimuths(std::span<const double> azimuths, double elevation) {
    if (azimuths.empty()) throw std::invalid_argument("rig: no views");
    if (!(std::abs(elevation) < 90.0)) throw std::invalid_argument("rig: elevation must be inside (-90, 90)");
    ViewRig rig;
    for (double a : azimuths) {
        const double norm_az = std::fmod(std::fmod(a, 360.0) + 360.0, 360.0);
        for (const auto& p : rig.views)
            if (p.azimuth == norm_az) throw std::invalid_argument("rig: duplicate azimuth " + std::to_string(a));
        rig.views.push_back({norm_az, elevation});
    }
    return rig;
}

std::vector<float> sinusoidal_encoding(const Vec3& p, std::size_t d) {
    if (d == 0 || d % 6 != 0) throw std::invalid_argument("sinusoidal_encoding: width must be a positive multiple of 6");
    const std::size_t bands = d / 6;
    std::vector<float> out;
    out.reserve(d);
    for (int a = 0; a < 3; ++a) {
        for (std::size_t j = 0; j < bands; ++j) out.push_back(float(std::sin(std::ldexp(std::numbers::pi, int(j)) * p[a])));
        for (std::size_t j = 0; j < bands; ++j) out.push_back(float(std::cos(std::ldexp(std::numbers::pi, int(j)) * p[a])));
    }
    return out;
}

namespace {

std::filesystem::path pose_path(const std::filesystem::path& pgm) {
    auto p = pgm;
    return p.replace_extension(".pose");
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
    std::string tok;
    while (in >> tok) {
        if (tok[0] != '#') return tok;
        std::string rest;
        std::getline(in, rest);
    }
    throw DataError("depth image: truncated header");
}

}  // namespace

void write_depth_view(const std::filesystem::path& pgm, const DepthView& view) {
    {
        std::ofstream out(pgm, std::ios::binary);
        if (!out) throw DataError("cannot write " + pgm.string());
        out << "P5\n" << view.width << ' ' << view.height << "\n65535\n";
        std::vector<unsigned char> buf;
        buf.reserve(view.depth.size() * 2);
        for (float d : view.depth) {
            const auto v = std::uint16_t(std::lround(std::clamp(double(d), 0.0, 1.0) * 65535.0));
            buf.push_back(static_cast<unsigned char>(v >> 8));
            buf.push_back(static_cast<unsigned char>(v & 0xff));
        }
        out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
        if (!out) throw DataError("failed writing " + pgm.string());
    }
    std::ofstream pose(pose_path(pgm));
    if (!pose) throw DataError("cannot write " + pose_path(pgm).string());
    pose.precision(17);
    pose << "azimuth=" << view.pose.azimuth << "\nelevation=" << view.pose.elevation << "\nwidth=" << view.width
         << "\nheight=" << view.height << "\n";
}

DepthView read_depth_view(const std::filesystem::path& pgm) {
    std::ifstream in(pgm, std::ios::binary);
    if (!in) throw DataError("cannot open " + pgm.string());
    if (pgm_token(in) != "P5") throw DataError(pgm.string() + ": not a binary graymap (P5)");
    DepthView view;
    int maxval = 0;
    try {
        view.width = std::stoi(pgm_token(in));
        view.height = std::stoi(pgm_token(in));
        maxval = std::stoi(pgm_token(in));
    } catch (const std::logic_error&) {
        throw DataError(pgm.string() + ": malformed header");
    }
    if (view.width <= 0 || view.height <= 0 || maxval != 65535)
        throw DataError(pgm.string() + ": expected positive size and maxval 65535");
    in.get();  // single whitespace byte after maxval
    const std::size_t n = std::size_t(view.width) * std::size_t(view.height);
    std::vector<unsigned char> buf(n * 2);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (in.gcount() != std::streamsize(buf.size())) throw DataError(pgm.string() + ": truncated pixel data");
    view.depth.resize(n);
    for (std::size_t i = 0; i < n; ++i) view.depth[i] = float(double((buf[2 * i] << 8) | buf[2 * i + 1]) / 65535.0);

    std::ifstream pose(pose_path(pgm));
    if (!pose) throw DataError("missing pose sidecar " + pose_path(pgm).string());
    std::map<std::string, std::string> kv;
    std::string tok;
    while (pose >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw DataError(pose_path(pgm).string() + ": expected key=value, got " + tok);
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    try {
        view.pose.azimuth = std::stod(kv.at("azimuth"));
        view.pose.elevation = std::stod(kv.at("elevation"));
        if (std::stoi(kv.at("width")) != view.width || std::stoi(kv.at("height")) != view.height)
            throw DataError(pose_path(pgm).string() + ": size disagrees with image");
    } catch (const std::logic_error&) {
        throw DataError(pose_path(pgm).string() + ": missing or malformed field");
    }
    return view;
}

}  // namespace pcd
