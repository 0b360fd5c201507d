#include "pcd/oracle.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pcd/geometry.hpp"

namespace pcd {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kInsideMargin = 1e-7;

using D3 = std::array<double, 3>;

D3 d3(const Vec3& v) { return {v[0], v[1], v[2]}; }
Vec3 f3(const D3& v) { return {float(v[0]), float(v[1]), float(v[2])}; }

// Rotation about +y by yaw: x' = c x + s z, z' = -s x + c z.
D3 yaw_rotate(const D3& p, double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]};
}

}  // namespace

// ---------------------------------------------------------------- families

namespace {

constexpr std::array<std::pair<ShapeFamily, std::string_view>, 6> kFamilies{{
    {ShapeFamily::box_frame, "box_frame"},
    {ShapeFamily::chair_like, "chair_like"},
    {ShapeFamily::lamp_like, "lamp_like"},
    {ShapeFamily::table_like, "table_like"},
    {ShapeFamily::cylinder, "cylinder"},
    {ShapeFamily::composite, "composite"},
}};

constexpr std::array<ShapeFamily, 6> kFamilyList{ShapeFamily::box_frame, ShapeFamily::chair_like,
                                                 ShapeFamily::lamp_like, ShapeFamily::table_like,
                                                 ShapeFamily::cylinder,  ShapeFamily::composite};

}  // namespace

std::string_view family_name(ShapeFamily f) {
    for (const auto& [fam, name] : kFamilies)
        if (fam == f) return name;
    return "unknown";
}

ShapeFamily parse_family(std::string_view name) {
    for (const auto& [fam, n] : kFamilies)
        if (n == name) return fam;
    throw ConfigError("unknown shape family '" + std::string(name) + "'");
}

std::span<const ShapeFamily> all_families() { return kFamilyList; }

// -------------------------------------------------------------- primitives

double Primitive::area() const {
    switch (kind) {
        case Kind::box: return 8.0 * (double(half[0]) * half[1] + double(half[1]) * half[2] + double(half[0]) * half[2]);
        case Kind::cylinder: return 2.0 * kPi * radius * (2.0 * half_height) + 2.0 * kPi * radius * radius;
        case Kind::frustum: {
            const double slant = std::hypot(radius_top - radius, 2.0 * half_height);
            return kPi * (radius + radius_top) * slant;
        }
        case Kind::sphere: return 4.0 * kPi * radius * radius;
    }
    return 0.0;
}

bool Primitive::inside(const Vec3& p) const {
    const D3 q{double(p[0]) - center[0], double(p[1]) - center[1], double(p[2]) - center[2]};
    switch (kind) {
        case Kind::box: {
            const D3 l = yaw_rotate(q, -yaw);
            for (int a = 0; a < 3; ++a)
                if (!(std::abs(l[a]) < double(half[a]) - kInsideMargin)) return false;
            return true;
        }
        case Kind::cylinder:
            return std::hypot(q[0], q[2]) < radius - kInsideMargin && std::abs(q[1]) < half_height - kInsideMargin;
        case Kind::frustum: return false;
        case Kind::sphere: return std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]) < radius - kInsideMargin;
    }
    return false;
}

double Primitive::surface_distance(const Vec3& p) const {
    const D3 q{double(p[0]) - center[0], double(p[1]) - center[1], double(p[2]) - center[2]};
    // Unsigned distance to the boundary of an axis-aligned 2-D/3-D slab set
    // given per-axis signed excesses e_a = |x_a| - h_a.
    const auto boundary = [](std::span<const double> e) {
        double out2 = 0.0, inner = -std::numeric_limits<double>::infinity();
        bool outside = false;
        for (double v : e) {
            if (v > 0) {
                out2 += v * v;
                outside = true;
            }
            inner = std::max(inner, v);
        }
        return outside ? std::sqrt(out2) : -inner;
    };
    switch (kind) {
        case Kind::box: {
            const D3 l = yaw_rotate(q, -yaw);
            const double e[3] = {std::abs(l[0]) - half[0], std::abs(l[1]) - half[1], std::abs(l[2]) - half[2]};
            return boundary(e);
        }
        case Kind::cylinder: {
            const double e[2] = {std::hypot(q[0], q[2]) - radius, std::abs(q[1]) - half_height};
            return boundary(e);
        }
        case Kind::frustum: {
            // Distance in the meridian half-plane to the generating segment.
            const double rho = std::hypot(q[0], q[2]);
            const double ax = radius, ay = -half_height, bx = radius_top, by = half_height;
            const double vx = bx - ax, vy = by - ay;
            const double t = std::clamp(((rho - ax) * vx + (q[1] - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
            return std::hypot(rho - (ax + t * vx), q[1] - (ay + t * vy));
        }
        case Kind::sphere: return std::abs(std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]) - radius);
    }
    return 0.0;
}

Vec3 Primitive::sample_surface(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const D3 c = d3(center);
    switch (kind) {
        case Kind::box: {
            const double hx = half[0], hy = half[1], hz = half[2];
            const double a[3] = {hy * hz, hx * hz, hx * hy};  // face area per normal axis
            const double pick = u01(rng) * 2.0 * (a[0] + a[1] + a[2]);
            int axis = 0;
            double acc = 2.0 * a[0];
            if (pick >= acc) {
                axis = 1;
                acc += 2.0 * a[1];
                if (pick >= acc) axis = 2;
            }
            D3 l{(2.0 * u01(rng) - 1.0) * hx, (2.0 * u01(rng) - 1.0) * hy, (2.0 * u01(rng) - 1.0) * hz};
            l[axis] = (u01(rng) < 0.5 ? -1.0 : 1.0) * double(half[axis]);
            const D3 w = yaw_rotate(l, yaw);
            return f3({c[0] + w[0], c[1] + w[1], c[2] + w[2]});
        }
        case Kind::cylinder: {
            const double side = 2.0 * kPi * radius * 2.0 * half_height;
            const double cap = kPi * radius * radius;
            const double theta = 2.0 * kPi * u01(rng);
            if (u01(rng) * (side + 2.0 * cap) < side) {
                const double y = (2.0 * u01(rng) - 1.0) * half_height;
                return f3({c[0] + radius * std::cos(theta), c[1] + y, c[2] + radius * std::sin(theta)});
            }
            const double rho = radius * std::sqrt(u01(rng));
            const double y = u01(rng) < 0.5 ? -half_height : half_height;
            return f3({c[0] + rho * std::cos(theta), c[1] + y, c[2] + rho * std::sin(theta)});
        }
        case Kind::frustum: {
            // Height fraction s has density proportional to the radius at s.
            const double a = radius, b = radius_top, u = u01(rng);
            const double s = std::abs(b - a) < 1e-12 ? u : (-a + std::sqrt(a * a + (b - a) * u * (a + b))) / (b - a);
            const double rho = a + (b - a) * s;
            const double theta = 2.0 * kPi * u01(rng);
            return f3({c[0] + rho * std::cos(theta), c[1] - half_height + 2.0 * half_height * s,
                       c[2] + rho * std::sin(theta)});
        }
        case Kind::sphere: {
            std::normal_distribution<double> g;
            D3 v{g(rng), g(rng), g(rng)};
            double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            while (n < 1e-9) {
                v = {g(rng), g(rng), g(rng)};
                n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            }
            return f3({c[0] + radius * v[0] / n, c[1] + radius * v[1] / n, c[2] + radius * v[2] / n});
        }
    }
    return center;
}

std::array<Vec3, 2> Primitive::bounds() const {
    D3 lo{}, hi{};
    const D3 c = d3(center);
    if (kind == Kind::box) {
        lo = {1e30, 1e30, 1e30};
        hi = {-1e30, -1e30, -1e30};
        for (int i = 0; i < 8; ++i) {
            const D3 l{(i & 1 ? 1.0 : -1.0) * half[0], (i & 2 ? 1.0 : -1.0) * half[1], (i & 4 ? 1.0 : -1.0) * half[2]};
            const D3 w = yaw_rotate(l, yaw);
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], c[a] + w[a]);
                hi[a] = std::max(hi[a], c[a] + w[a]);
            }
        }
    } else {
        const double r = kind == Kind::frustum ? std::max(radius, radius_top) : radius;
        const double h = kind == Kind::sphere ? radius : half_height;
        lo = {c[0] - r, c[1] - h, c[2] - r};
        hi = {c[0] + r, c[1] + h, c[2] + r};
    }
    return {f3(lo), f3(hi)};
}

// ----------------------------------------------------------------- shapes

namespace {

// Draws each parameter from the seed in a fixed order, then applies any
// override, so an override never shifts the other draws.
class ParamDraw {
public:
    ParamDraw(const ShapeSpec& spec) : spec_(spec), rng_(mix_seed(spec.seed, 0x5eed)) {}

    double operator()(const std::string& key, double lo, double hi) {
        const double drawn = std::uniform_real_distribution<double>(lo, hi)(rng_);
        const auto it = spec_.params.find(key);
        const double v = it == spec_.params.end() ? drawn : it->second;
        if (!std::isfinite(v)) throw ConfigError("shape parameter '" + key + "' is not finite");
        resolved_[key] = v;
        return v;
    }
    double positive(const std::string& key, double lo, double hi) {
        const double v = (*this)(key, lo, hi);
        if (!(v > 0.0)) throw ConfigError("shape parameter '" + key + "' must be positive");
        return v;
    }
    std::mt19937_64& rng() { return rng_; }

    std::map<std::string, double> finish() const {
        for (const auto& [k, v] : spec_.params)
            if (!resolved_.count(k))
                throw ConfigError("unknown parameter '" + k + "' for family " + std::string(family_name(spec_.family)));
        return resolved_;
    }

private:
    const ShapeSpec& spec_;
    std::mt19937_64 rng_;
    std::map<std::string, double> resolved_;
};

Primitive box(std::string part, D3 c, D3 h) {
    Primitive p;
    p.kind = Primitive::Kind::box;
    p.part = std::move(part);
    p.center = f3(c);
    p.half = f3(h);
    return p;
}

Primitive cylinder(std::string part, D3 c, double r, double hh) {
    Primitive p;
    p.kind = Primitive::Kind::cylinder;
    p.part = std::move(part);
    p.center = f3(c);
    p.radius = r;
    p.half_height = hh;
    return p;
}

Primitive frustum(std::string part, D3 c, double rb, double rt, double hh) {
    Primitive p;
    p.kind = Primitive::Kind::frustum;
    p.part = std::move(part);
    p.center = f3(c);
    p.radius = rb;
    p.radius_top = rt;
    p.half_height = hh;
    return p;
}

Primitive sphere(std::string part, D3 c, double r) {
    Primitive p;
    p.kind = Primitive::Kind::sphere;
    p.part = std::move(part);
    p.center = f3(c);
    p.radius = r;
    return p;
}

// Vertical box spanning [y0, y1] with square cross-section t.
Primitive post(std::string part, double x, double z, double y0, double y1, double t) {
    return box(std::move(part), {x, 0.5 * (y0 + y1), z}, {0.5 * t, 0.5 * (y1 - y0), 0.5 * t});
}

// The input camera sits on +z, so parts at negative z are the ones a partial
// scan sees least; they get their own draws so views add information.
std::vector<Primitive> box_frame_parts(ParamDraw& P) {
    const double w = P.positive("width", 0.5, 0.9), h = P.positive("height", 0.4, 0.8),
                 d = P.positive("depth", 0.4, 0.8);
    const double t = P.positive("bar", 0.03, 0.07), tb = P.positive("back_bar", 0.03, 0.07);
    const double x = w / 2, y = h / 2, z = d / 2;
    std::vector<Primitive> parts;
    int i = 0;
    auto name = [&] { return "bar_" + std::to_string(i++); };
    for (double sy : {-1.0, 1.0})
        for (double sz : {-1.0, 1.0}) {
            const double tt = sz < 0 ? tb : t;
            parts.push_back(box(name(), {0, sy * y, sz * z}, {x + tt / 2, tt / 2, tt / 2}));
        }
    for (double sx : {-1.0, 1.0})
        for (double sz : {-1.0, 1.0}) {
            const double tt = sz < 0 ? tb : t;
            parts.push_back(box(name(), {sx * x, 0, sz * z}, {tt / 2, y, tt / 2}));
        }
    for (double sx : {-1.0, 1.0})
        for (double sy : {-1.0, 1.0}) parts.push_back(box(name(), {sx * x, sy * y, 0}, {t / 2, t / 2, z}));
    return parts;
}

std::vector<Primitive> chair_parts(ParamDraw& P) {
    const double w = P.positive("seat_width", 0.4, 0.6), d = P.positive("seat_depth", 0.35, 0.55);
    const double sh = P.positive("seat_height", 0.35, 0.5), st = P.positive("seat_thickness", 0.04, 0.07);
    const double lt = P.positive("leg", 0.03, 0.06), blt = P.positive("back_leg", 0.03, 0.06);
    const double bh = P.positive("back_height", 0.3, 0.5), bt = P.positive("back_thickness", 0.03, 0.06);
    const double seat_mid = sh - st / 2;
    std::vector<Primitive> parts;
    parts.push_back(box("seat", {0, seat_mid, 0}, {w / 2, st / 2, d / 2}));
    int i = 0;
    for (double sz : {1.0, -1.0})
        for (double sx : {-1.0, 1.0}) {
            const double t = sz > 0 ? lt : blt;
            parts.push_back(post("leg_" + std::to_string(i++), sx * (w / 2 - t / 2), sz * (d / 2 - t / 2), 0.0, seat_mid, t));
        }
    parts.push_back(box("back", {0, 0.5 * (seat_mid + sh + bh), -d / 2 + bt / 2}, {w / 2, 0.5 * (sh + bh - seat_mid), bt / 2}));
    return parts;
}

std::vector<Primitive> table_parts(ParamDraw& P) {
    const double w = P.positive("top_width", 0.6, 0.95), d = P.positive("top_depth", 0.4, 0.8);
    const double h = P.positive("height", 0.4, 0.7), tt = P.positive("top_thickness", 0.03, 0.06);
    const double lt = P.positive("leg", 0.03, 0.07), blt = P.positive("back_leg", 0.03, 0.07);
    const double inset = P("inset", 0.0, 0.08);
    const double stretcher = P("stretcher", 0.0, 1.0), sy = P("stretcher_height", 0.1, 0.3);
    const double top_mid = h - tt / 2;
    std::vector<Primitive> parts;
    parts.push_back(box("top", {0, top_mid, 0}, {w / 2, tt / 2, d / 2}));
    int i = 0;
    for (double sz : {1.0, -1.0})
        for (double sx : {-1.0, 1.0}) {
            const double t = sz > 0 ? lt : blt;
            parts.push_back(post("leg_" + std::to_string(i++), sx * (w / 2 - inset - t / 2), sz * (d / 2 - inset - t / 2),
                                 0.0, top_mid, t));
        }
    if (stretcher >= 0.5) {
        const double z = -(d / 2 - inset - blt / 2);
        parts.push_back(box("stretcher", {0, sy * h, z}, {w / 2 - inset - blt / 2, blt / 2, blt / 2}));
    }
    return parts;
}

std::vector<Primitive> lamp_parts(ParamDraw& P) {
    const double br = P.positive("base_radius", 0.12, 0.22), bh = P.positive("base_height", 0.02, 0.05);
    const double pr = P.positive("pole_radius", 0.015, 0.03), ph = P.positive("pole_height", 0.4, 0.6);
    const double rb = P.positive("shade_bottom", 0.15, 0.3), rt = P.positive("shade_top", 0.06, 0.15);
    const double sh = P.positive("shade_height", 0.15, 0.3), off = P("back_offset", 0.0, 0.12);
    std::vector<Primitive> parts;
    parts.push_back(cylinder("base", {0, bh / 2, 0}, br, bh / 2));
    parts.push_back(cylinder("pole", {0, bh / 2 + ph / 2, -off}, pr, ph / 2 + bh / 2));
    parts.push_back(frustum("shade", {0, bh + ph, -off}, rb, rt, sh / 2));
    return parts;
}

std::vector<Primitive> cylinder_parts(ParamDraw& P) {
    const double r = P.positive("radius", 0.15, 0.4), h = P.positive("height", 0.3, 0.9);
    return {cylinder("body", {0, 0, 0}, r, h / 2)};
}

std::vector<Primitive> composite_parts(ParamDraw& P) {
    const int count = int(std::lround(P("count", 2.5, 5.5)));
    if (count < 1 || count > 16) throw ConfigError("composite count must be in [1, 16]");
    auto& rng = P.rng();
    std::uniform_real_distribution<double> pos(-0.3, 0.3), size(0.08, 0.25), yaw(-kPi, kPi);
    std::uniform_int_distribution<int> kind(0, 2);
    std::vector<Primitive> parts;
    for (int i = 0; i < count; ++i) {
        const D3 c{pos(rng), pos(rng), pos(rng)};
        const std::string name = "part_" + std::to_string(i);
        switch (kind(rng)) {
            case 0: {
                auto b = box(name, c, {size(rng), size(rng), size(rng)});
                b.yaw = yaw(rng);
                parts.push_back(b);
                break;
            }
            case 1: parts.push_back(cylinder(name, c, size(rng), size(rng))); break;
            default: parts.push_back(sphere(name, c, size(rng))); break;
        }
    }
    return parts;
}

}  // namespace

SolidShape build_shape(const ShapeSpec& spec) {
    ParamDraw P(spec);
    std::vector<Primitive> parts;
    switch (spec.family) {
        case ShapeFamily::box_frame: parts = box_frame_parts(P); break;
        case ShapeFamily::chair_like: parts = chair_parts(P); break;
        case ShapeFamily::lamp_like: parts = lamp_parts(P); break;
        case ShapeFamily::table_like: parts = table_parts(P); break;
        case ShapeFamily::cylinder: parts = cylinder_parts(P); break;
        case ShapeFamily::composite: parts = composite_parts(P); break;
    }
    // Whole-assembly yaw (cylinders are symmetric, so only their centres move).
    const double yaw = spec.family == ShapeFamily::cylinder ? 0.0 : P("yaw_deg", -40.0, 40.0) * kPi / 180.0;
    for (auto& p : parts) {
        p.center = f3(yaw_rotate(d3(p.center), yaw));
        if (p.kind == Primitive::Kind::box) p.yaw += yaw;
    }

    D3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
    for (const auto& p : parts) {
        const auto b = p.bounds();
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], double(b[0][a]));
            hi[a] = std::max(hi[a], double(b[1][a]));
        }
    }
    const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    const double scale = extent > 1.0 ? 1.0 / extent : 1.0;
    const D3 mid{0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])};
    for (auto& p : parts) {
        p.center = f3({(p.center[0] - mid[0]) * scale, (p.center[1] - mid[1]) * scale, (p.center[2] - mid[2]) * scale});
        p.half = p.half * float(scale);
        p.radius *= scale;
        p.radius_top *= scale;
        p.half_height *= scale;
    }

    SolidShape shape;
    shape.spec = spec;
    shape.spec.params = P.finish();
    shape.parts = std::move(parts);
    return shape;
}

PointCloud sample_shape(const SolidShape& shape, std::size_t n, std::uint64_t seed) {
    if (shape.parts.empty()) throw std::invalid_argument("sample_shape: shape has no parts");
    std::vector<double> areas;
    for (const auto& p : shape.parts) areas.push_back(p.area());
    std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
    std::mt19937_64 rng(seed);
    PointCloud out;
    out.role = CloudRole::ground_truth;
    out.points.reserve(n);
    std::size_t attempts = 0;
    while (out.points.size() < n) {
        if (++attempts > 1000 * n + 1000) throw DataError("sample_shape: union surface too small to sample");
        const auto i = pick(rng);
        const Vec3 q = shape.parts[i].sample_surface(rng);
        bool hidden = false;
        for (std::size_t j = 0; j < shape.parts.size() && !hidden; ++j) hidden = j != i && shape.parts[j].inside(q);
        if (!hidden) out.points.push_back(q);
    }
    return out;
}

PointCloud synth_shape(const ShapeSpec& spec, std::size_t n) {
    return sample_shape(build_shape(spec), n, mix_seed(spec.seed, 1));
}

// --------------------------------------------------------- inconsistency

void InconsistencyProfile::validate() const {
    const auto unit = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("profile: ") + name + " must be in [0, 1]");
    };
    if (!(depth_noise_sigma >= 0.0) || !std::isfinite(depth_noise_sigma))
        throw ConfigError("profile: depth_noise_sigma must be >= 0");
    unit(per_view_scale_jitter, "per_view_scale_jitter");
    unit(dropout_patch_rate, "dropout_patch_rate");
    unit(outlier_rate, "outlier_rate");
    if (silhouette_erosion < 0) throw ConfigError("profile: silhouette_erosion must be >= 0");
}

bool InconsistencyProfile::is_clean() const { return *this == InconsistencyProfile{}; }

InconsistencyProfile profile_preset(std::string_view name) {
    if (name == "clean") return {};
    if (name == "mild") return {0.005, 0.03, 1, 0.05, 0.01};
    if (name == "severe") return {0.02, 0.1, 2, 0.15, 0.05};
    throw ConfigError("unknown profile preset '" + std::string(name) + "' (expected clean, mild or severe)");
}

void corrupt_view(DepthView& view, const InconsistencyProfile& profile, std::uint64_t seed) {
    profile.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double top = 1.0 - kDepthMargin;
    const auto clamp_depth = [top](double d) { return float(std::clamp(d, 0.0, top)); };
    auto& D = view.depth;
    const int W = view.width, H = view.height;

    if (profile.per_view_scale_jitter > 0.0) {
        // Depth relative to the plane through the origin is scaled by one factor per view.
        const double k = 1.0 + profile.per_view_scale_jitter * (2.0 * u01(rng) - 1.0);
        const double mid = 0.5 * top;
        for (auto& d : D)
            if (d < kBackground) d = clamp_depth(mid + (double(d) - mid) * k);
    }
    if (profile.depth_noise_sigma > 0.0) {
        std::normal_distribution<double> g(0.0, profile.depth_noise_sigma * top / (2.0 * kViewHalfExtent));
        for (auto& d : D)
            if (d < kBackground) d = clamp_depth(double(d) + g(rng));
    }
    for (int it = 0; it < profile.silhouette_erosion; ++it) {
        const auto before = D;
        const auto bg = [&](int r, int c) {
            return r < 0 || c < 0 || r >= H || c >= W || before[std::size_t(r) * W + std::size_t(c)] >= kBackground;
        };
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                if (!bg(r, c) && (bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1)))
                    D[std::size_t(r) * W + std::size_t(c)] = kBackground;
    }
    if (profile.dropout_patch_rate > 0.0) {
        const int cw = std::max(1, W / 8), ch = std::max(1, H / 8);
        for (int r0 = 0; r0 < H; r0 += ch)
            for (int c0 = 0; c0 < W; c0 += cw) {
                if (u01(rng) >= profile.dropout_patch_rate) continue;
                for (int r = r0; r < std::min(H, r0 + ch); ++r)
                    for (int c = c0; c < std::min(W, c0 + cw); ++c) D[std::size_t(r) * W + std::size_t(c)] = kBackground;
            }
    }
    if (profile.outlier_rate > 0.0) {
        for (auto& d : D)
            if (d < kBackground && u01(rng) < profile.outlier_rate) d = clamp_depth(u01(rng) * top);
    }
}

PartialScan make_partial(std::span<const Vec3> gt, std::size_t n, int width, std::uint64_t seed) {
    if (gt.empty()) throw std::invalid_argument("make_partial: empty ground truth");
    PartialScan scan;
    scan.input = render_depth(gt, input_pose(), width, width);
    if (scan.input.foreground_count() < 16)
        throw DataError("make_partial: degenerate silhouette (" + std::to_string(scan.input.foreground_count()) +
                        " foreground pixels)");
    scan.cloud = back_project(scan.input, n, seed);
    scan.cloud.role = CloudRole::partial;
    return scan;
}

std::vector<DepthView> dream_views(std::span<const Vec3> gt, const ViewRig& rig, const InconsistencyProfile& profile,
                                   std::uint64_t seed, int width) {
    if (rig.views.empty()) throw std::invalid_argument("dream_views: empty rig");
    profile.validate();
    std::vector<DepthView> out;
    for (std::size_t i = 0; i < rig.views.size(); ++i) {
        auto v = render_depth(gt, rig.views[i], width, width);
        if (!profile.is_clean()) corrupt_view(v, profile, mix_seed(seed, i));
        out.push_back(std::move(v));
    }
    return out;
}

Sample make_sample(const std::string& id, const ShapeSpec& spec, const SampleOptions& opt) {
    const auto shape = build_shape(spec);
    Sample s;
    s.id = id;
    s.spec = shape.spec;
    s.profile = opt.profile;
    s.gt = sample_shape(shape, opt.n_gt, mix_seed(spec.seed, 1));
    auto scan = make_partial(s.gt.points, opt.n_partial, opt.width, mix_seed(spec.seed, 2));
    s.partial = std::move(scan.cloud);
    s.input = std::move(scan.input);
    const auto rig = opt.azimuths.empty() ? canonical_rig(opt.views, opt.elevation)
                                          : rig_from_azimuths(opt.azimuths, opt.elevation);
    s.views = dream_views(s.gt.points, rig, opt.profile, mix_seed(spec.seed, 3), opt.width);
    return s;
}

// ------------------------------------------------------------------ disk I/O

void write_xyzb(const std::filesystem::path& path, std::span<const Vec3> points) {
    std::vector<unsigned char> buf;
    buf.reserve(8 + 12 * points.size());
    const auto put32 = [&buf](std::uint32_t v) {
        for (int b = 0; b < 4; ++b) buf.push_back(static_cast<unsigned char>(v >> (8 * b)));
    };
    for (char c : {'X', 'Y', 'Z', 'B'}) buf.push_back(static_cast<unsigned char>(c));
    put32(std::uint32_t(points.size()));
    for (const auto& p : points)
        for (float f : p) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put32(bits);
        }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

std::vector<Vec3> read_xyzb(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto get32 = [&buf](std::size_t off) {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= std::uint32_t(buf[off + std::size_t(b)]) << (8 * b);
        return v;
    };
    if (buf.size() < 8 || std::memcmp(buf.data(), "XYZB", 4) != 0) throw DataError(path.string() + ": not an XYZB file");
    const std::size_t n = get32(4);
    if (buf.size() != 8 + 12 * n)
        throw DataError(path.string() + ": expected " + std::to_string(n) + " points, file size disagrees");
    std::vector<Vec3> pts(n);
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) {
            const std::uint32_t bits = get32(8 + 12 * i + 4 * std::size_t(a));
            std::memcpy(&pts[i][std::size_t(a)], &bits, 4);
        }
    for (const auto& p : pts)
        for (float f : p)
            if (!std::isfinite(f)) throw DataError(path.string() + ": non-finite coordinate");
    return pts;
}

namespace {

nlohmann::json profile_json(const InconsistencyProfile& p) {
    return {{"depth_noise_sigma", p.depth_noise_sigma},
            {"per_view_scale_jitter", p.per_view_scale_jitter},
            {"silhouette_erosion", p.silhouette_erosion},
            {"dropout_patch_rate", p.dropout_patch_rate},
            {"outlier_rate", p.outlier_rate}};
}

InconsistencyProfile profile_from_json(const nlohmann::json& j) {
    InconsistencyProfile p;
    p.depth_noise_sigma = j.at("depth_noise_sigma").get<double>();
    p.per_view_scale_jitter = j.at("per_view_scale_jitter").get<double>();
    p.silhouette_erosion = j.at("silhouette_erosion").get<int>();
    p.dropout_patch_rate = j.at("dropout_patch_rate").get<double>();
    p.outlier_rate = j.at("outlier_rate").get<double>();
    return p;
}

}  // namespace

std::filesystem::path export_sample(const std::filesystem::path& root, const Sample& s) {
    const auto dir = root / ("sample_" + s.id);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    write_xyzb(dir / "partial.xyzb", s.partial.points);
    write_xyzb(dir / "gt.xyzb", s.gt.points);
    write_depth_view(dir / "input_depth.pgm", s.input);
    for (std::size_t i = 0; i < s.views.size(); ++i)
        write_depth_view(dir / ("view_" + std::to_string(i) + ".pgm"), s.views[i]);
    const nlohmann::json meta{{"id", s.id},
                              {"family", std::string(family_name(s.spec.family))},
                              {"seed", s.spec.seed},
                              {"params", s.spec.params},
                              {"profile", profile_json(s.profile)},
                              {"views", s.views.size()}};
    std::ofstream out(dir / "meta.json");
    if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
    out << meta.dump(2) << "\n";
    return dir;
}

Sample load_sample(const std::filesystem::path& dir) {
    const auto meta_path = dir / "meta.json";
    std::ifstream in(meta_path);
    if (!in) throw DataError("missing " + meta_path.string());
    Sample s;
    try {
        const auto meta = nlohmann::json::parse(in);
        s.id = meta.at("id").get<std::string>();
        s.spec.family = parse_family(meta.at("family").get<std::string>());
        s.spec.seed = meta.at("seed").get<std::uint64_t>();
        s.spec.params = meta.at("params").get<std::map<std::string, double>>();
        s.profile = profile_from_json(meta.at("profile"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(meta_path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw DataError(meta_path.string() + ": " + e.what());
    }
    s.partial.points = read_xyzb(dir / "partial.xyzb");
    s.partial.role = CloudRole::partial;
    s.gt.points = read_xyzb(dir / "gt.xyzb");
    s.gt.role = CloudRole::ground_truth;
    s.input = read_depth_view(dir / "input_depth.pgm");
    for (std::size_t i = 0;; ++i) {
        const auto p = dir / ("view_" + std::to_string(i) + ".pgm");
        if (!std::filesystem::exists(p)) break;
        s.views.push_back(read_depth_view(p));
    }
    if (s.partial.empty() || s.gt.empty()) throw DataError(dir.string() + ": empty point cloud");
    return s;
}

// ----------------------------------------------------------------- datasets

namespace {

std::uint64_t split_code(std::string_view split) {
    if (split == "train") return 0;
    if (split == "val") return 1;
    if (split == "test") return 2;
    throw ConfigError("unknown split '" + std::string(split) + "'");
}

std::string sample_id(std::size_t index) {
    std::ostringstream os;
    os << std::setw(5) << std::setfill('0') << index;
    return os.str();
}

}  // namespace

Sample make_dataset_sample(const DatasetOptions& opt, std::string_view split, std::size_t index) {
    const auto fams = opt.families.empty() ? std::vector<ShapeFamily>(kFamilyList.begin(), kFamilyList.end())
                                           : opt.families;
    ShapeSpec spec;
    spec.family = fams[index % fams.size()];
    spec.seed = mix_seed(mix_seed(opt.seed, split_code(split)), index);
    return make_sample(sample_id(index), spec, opt.sample);
}

void generate_dataset(const std::filesystem::path& root, const DatasetOptions& opt) {
    opt.sample.profile.validate();
    for (const auto& [split, count] : {std::pair<std::string, std::size_t>{"train", opt.train},
                                       {"val", opt.val},
                                       {"test", opt.test}}) {
        const auto dir = root / split;
        std::filesystem::create_directories(dir);
        parallel_for(count, [&](std::size_t i) { export_sample(dir, make_dataset_sample(opt, split, i)); });
    }
}

std::vector<Sample> load_split(const std::filesystem::path& split_dir) {
    if (!std::filesystem::is_directory(split_dir)) throw DataError("missing dataset split " + split_dir.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(split_dir))
        if (e.is_directory() && e.path().filename().string().rfind("sample_", 0) == 0) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<Sample> out(dirs.size());
    parallel_for(dirs.size(), [&](std::size_t i) { out[i] = load_sample(dirs[i]); });
    return out;
}

}  // namespace pcd
