#include "neisf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace neisf {

using json = nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kMaxSteps = 256;
constexpr double kHitEps = 1e-4;

double smooth_min(double a, double b, double k)
{
    const double h = std::clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0);
    return b + (a - b) * h - k * h * (1.0 - h);
}

bool needs_numeric_gradient(const SdfPrimitive& p)
{
    if (p.kind == SdfPrimitive::Kind::smooth_union)
        return true;
    return std::any_of(p.children.begin(), p.children.end(), needs_numeric_gradient);
}

// Analytic gradient (unnormalised) of a primitive without smooth blends.
Vec3 analytic_gradient(const SdfPrimitive& p, const Vec3& x)
{
    switch (p.kind) {
    case SdfPrimitive::Kind::sphere:
        return x - p.center;
    case SdfPrimitive::Kind::plane:
        return p.normal;
    case SdfPrimitive::Kind::box: {
        const Vec3 local = x - p.center;
        const Vec3 q = local.cwiseAbs() - p.half_extents;
        const Vec3 sign = local.unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
        if ((q.array() > 0.0).any())
            return sign.cwiseProduct(q.cwiseMax(0.0));
        Eigen::Index axis;
        q.maxCoeff(&axis);
        Vec3 g = Vec3::Zero();
        g[axis] = sign[axis];
        return g;
    }
    case SdfPrimitive::Kind::union_:
    case SdfPrimitive::Kind::smooth_union: {
        const auto it = std::min_element(p.children.begin(), p.children.end(),
                                         [&](const SdfPrimitive& a, const SdfPrimitive& b) {
                                             return a.distance(x) < b.distance(x);
                                         });
        return analytic_gradient(*it, x);
    }
    }
    return Vec3::Zero();
}

Vec3 numeric_gradient(const std::function<double(const Vec3&)>& f, const Vec3& x, double h)
{
    Vec3 g;
    for (int i = 0; i < 3; ++i) {
        Vec3 a = x;
        Vec3 b = x;
        a[i] += h;
        b[i] -= h;
        g[i] = (f(a) - f(b)) / (2.0 * h);
    }
    return g;
}

// Leaf whose material applies at x: the nearest leaf, walking down unions.
const SdfPrimitive* material_leaf(const SdfPrimitive& p, const Vec3& x,
                                  const Material** inherited)
{
    if (p.material)
        *inherited = &*p.material;
    if (p.children.empty())
        return &p;
    const auto it = std::min_element(p.children.begin(), p.children.end(),
                                     [&](const SdfPrimitive& a, const SdfPrimitive& b) {
                                         return a.distance(x) < b.distance(x);
                                     });
    return material_leaf(*it, x, inherited);
}

Eigen::Vector2d uv_coordinates(const SdfPrimitive& leaf, const Vec3& x)
{
    if (leaf.kind == SdfPrimitive::Kind::sphere) {
        const Vec3 d = (x - leaf.center).normalized();
        const double u = std::atan2(d.z(), d.x()) / (2.0 * kPi) + 0.5;
        const double v = std::acos(std::clamp(d.y(), -1.0, 1.0)) / kPi;
        return {u, v};
    }
    // Planar projection along the dominant axis of the local normal.
    Vec3 n = leaf.kind == SdfPrimitive::Kind::plane ? leaf.normal : analytic_gradient(leaf, x);
    Eigen::Index axis;
    n.cwiseAbs().maxCoeff(&axis);
    const Vec3 rel = x - leaf.center;
    const int a = (axis + 1) % 3;
    const int b = (axis + 2) % 3;
    return {rel[a], rel[b]};
}

Rgb texture_albedo(const Texture& tex, const Rgb& base, const Eigen::Vector2d& uv, bool planar)
{
    switch (tex.kind) {
    case Texture::Kind::none:
        return base;
    case Texture::Kind::checker: {
        const long cu = static_cast<long>(std::floor(uv.x() * tex.scale * (planar ? 1.0 : 2.0)));
        const long cv = static_cast<long>(std::floor(uv.y() * tex.scale));
        return ((cu + cv) & 1) ? tex.albedo2 : base;
    }
    case Texture::Kind::image: {
        double u = uv.x() - std::floor(uv.x());
        double v = uv.y() - std::floor(uv.y());
        const int i = std::min(tex.width - 1, static_cast<int>(u * tex.width));
        const int j = std::min(tex.height - 1, static_cast<int>(v * tex.height));
        return tex.pixels[static_cast<std::size_t>(j) * tex.width + i];
    }
    }
    return base;
}

Vec3 read_vec3(const json& j, const char* key, const Vec3& fallback)
{
    if (!j.contains(key))
        return fallback;
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != 3)
        throw SceneError(std::string("expected a 3-vector for '") + key + "'");
    return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

Rgb read_rgb(const json& j, const char* key, const Rgb& fallback)
{
    if (!j.contains(key))
        return fallback;
    const json& v = j.at(key);
    if (v.is_number())
        return Rgb::Constant(v.get<double>());
    const Vec3 c = read_vec3(j, key, Vec3::Zero());
    return c.array();
}

Material parse_material(const json& j)
{
    Material m;
    m.params.rho = read_rgb(j, "albedo", m.params.rho);
    m.params.roughness = j.value("roughness", m.params.roughness);
    m.params.ks = read_rgb(j, "ks", m.params.ks);
    m.params.eta = j.value("eta", m.params.eta);
    try {
        m.params.validate();
    } catch (const std::invalid_argument& e) {
        throw SceneError(e.what());
    }
    if (j.contains("texture")) {
        const json& t = j.at("texture");
        const std::string type = t.value("type", "checker");
        if (type == "checker") {
            m.texture.kind = Texture::Kind::checker;
            m.texture.albedo2 = read_rgb(t, "albedo2", Rgb::Constant(0.1));
            m.texture.scale = t.value("scale", 4.0);
        } else if (type == "image") {
            m.texture.kind = Texture::Kind::image;
            m.texture.width = t.at("width").get<int>();
            m.texture.height = t.at("height").get<int>();
            const json& data = t.at("data");
            if (m.texture.width <= 0 || m.texture.height <= 0 ||
                data.size() != static_cast<std::size_t>(m.texture.width) * m.texture.height)
                throw SceneError("image texture: data size does not match width * height");
            for (const json& px : data)
                m.texture.pixels.emplace_back(px[0].get<double>(), px[1].get<double>(),
                                              px[2].get<double>());
        } else {
            throw SceneError("unknown texture type '" + type + "'");
        }
    }
    return m;
}

SdfPrimitive parse_primitive(const json& j)
{
    SdfPrimitive p;
    const std::string type = j.at("type").get<std::string>();
    if (type == "sphere") {
        p.kind = SdfPrimitive::Kind::sphere;
        p.center = read_vec3(j, "center", p.center);
        p.radius = j.at("radius").get<double>();
        if (!(p.radius > 0))
            throw SceneError("sphere radius must be positive");
    } else if (type == "box") {
        p.kind = SdfPrimitive::Kind::box;
        p.center = read_vec3(j, "center", p.center);
        p.half_extents = read_vec3(j, "half_extents", p.half_extents);
    } else if (type == "plane") {
        p.kind = SdfPrimitive::Kind::plane;
        p.normal = read_vec3(j, "normal", p.normal).normalized();
        p.offset = j.value("offset", 0.0);
    } else if (type == "union" || type == "smooth_union") {
        p.kind = type == "union" ? SdfPrimitive::Kind::union_ : SdfPrimitive::Kind::smooth_union;
        p.blend_k = j.value("k", p.blend_k);
        for (const json& c : j.at("children"))
            p.children.push_back(parse_primitive(c));
        if (p.children.empty())
            throw SceneError(type + " needs at least one child");
    } else {
        throw SceneError("unknown primitive type '" + type + "'");
    }
    if (j.contains("material"))
        p.material = parse_material(j.at("material"));
    return p;
}

}  // namespace

double SdfPrimitive::distance(const Vec3& x) const
{
    switch (kind) {
    case Kind::sphere:
        return (x - center).norm() - radius;
    case Kind::plane:
        return normal.dot(x) - offset;
    case Kind::box: {
        const Vec3 q = (x - center).cwiseAbs() - half_extents;
        return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case Kind::union_: {
        double d = std::numeric_limits<double>::infinity();
        for (const SdfPrimitive& c : children)
            d = std::min(d, c.distance(x));
        return d;
    }
    case Kind::smooth_union: {
        double d = children.front().distance(x);
        for (std::size_t i = 1; i < children.size(); ++i)
            d = smooth_min(d, children[i].distance(x), blend_k);
        return d;
    }
    }
    return 0.0;
}

bool Environment::on_emitter(const Vec3& p) const
{
    return std::abs(p.x() - emitter_center.x()) <= emitter_half.x() &&
           std::abs(p.z() - emitter_center.y()) <= emitter_half.y();
}

void VolSdfParams::validate() const
{
    if (!(alpha > 0.0) || !(beta > 0.0))
        throw std::invalid_argument("VolSdfParams: alpha and beta must be positive");
}

SceneModel SceneModel::from_json_text(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SceneError(std::string("scene JSON: ") + e.what());
    }
    SceneModel s;
    try {
        for (const json& p : j.at("primitives"))
            s.primitives.push_back(parse_primitive(p));
        for (std::size_t i = 0; i < s.primitives.size(); ++i)
            if (!s.primitives[i].material)
                s.primitives[i].material = Material{};

        const json env = j.value("environment", json::object());
        Environment& e = s.environment;
        const std::string mode = env.value("mode", "sky");
        if (mode == "cornell") {
            e.mode = Environment::Mode::cornell;
        } else if (mode == "sky") {
            e.mode = Environment::Mode::sky;
        } else {
            throw SceneError("environment mode must be 'cornell' or 'sky'");
        }
        e.sky_radiance = read_rgb(env, "sky_radiance", e.sky_radiance);
        e.room_min = read_vec3(env, "room_min", e.room_min);
        e.room_max = read_vec3(env, "room_max", e.room_max);
        if (env.contains("walls")) {
            const json& w = env.at("walls");
            const char* names[6] = {"left", "right", "floor", "ceiling", "back", "front"};
            for (int i = 0; i < 6; ++i)
                e.wall_albedo[i] = read_rgb(w, names[i], e.wall_albedo[i]);
        }
        e.wall_roughness = env.value("wall_roughness", e.wall_roughness);
        if (env.contains("emitter")) {
            const json& em = env.at("emitter");
            if (em.contains("center"))
                e.emitter_center = {em.at("center")[0].get<double>(), em.at("center")[1].get<double>()};
            if (em.contains("half_size"))
                e.emitter_half = {em.at("half_size")[0].get<double>(), em.at("half_size")[1].get<double>()};
            e.emitter_radiance = read_rgb(em, "radiance", e.emitter_radiance);
        }
        if ((e.emitter_radiance < 0.0).any() || (e.sky_radiance < 0.0).any())
            throw SceneError("emitter radiance must be non-negative");
        for (const Rgb& a : e.wall_albedo)
            if ((a < 0.0).any() || (a > 1.0).any())
                throw SceneError("wall albedo outside [0, 1]");

        const json rig = j.value("camera_rig", json::object());
        CameraRig& r = s.rig;
        r.views = rig.value("views", r.views);
        r.test_views = rig.value("test_views", r.test_views);
        r.radius = rig.value("radius", r.radius);
        r.target = read_vec3(rig, "target", r.target);
        r.width = rig.value("width", r.width);
        r.height = rig.value("height", r.height);
        r.fov_deg = rig.value("fov_deg", r.fov_deg);
        if (rig.contains("elevations")) {
            r.elevation_min_deg = rig.at("elevations")[0].get<double>();
            r.elevation_max_deg = rig.at("elevations")[1].get<double>();
        }
        r.bound_radius = rig.value("bound_radius", r.bound_radius);
        if (r.views < 0 || r.test_views < 0 || r.width <= 0 || r.height <= 0 || !(r.radius > 0))
            throw SceneError("camera_rig: counts, sizes and radius must be positive");
    } catch (const json::exception& e) {
        throw SceneError(std::string("scene JSON: ") + e.what());
    }
    return s;
}

SceneModel SceneModel::load(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw SceneError("cannot open scene file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

double SceneModel::sdf(const Vec3& x) const
{
    double d = std::numeric_limits<double>::infinity();
    for (const SdfPrimitive& p : primitives)
        d = std::min(d, p.distance(x));
    return d;
}

int SceneModel::nearest_primitive(const Vec3& x) const
{
    int best = -1;
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < primitives.size(); ++i) {
        const double di = primitives[i].distance(x);
        if (di < d) {
            d = di;
            best = static_cast<int>(i);
        }
    }
    return best;
}

Vec3 SceneModel::sdf_normal(const Vec3& x) const
{
    const int i = nearest_primitive(x);
    if (i < 0)
        throw DegenerateGradient("scene has no primitives");
    const SdfPrimitive& p = primitives[i];
    const Vec3 g = needs_numeric_gradient(p)
                       ? numeric_gradient([&](const Vec3& y) { return p.distance(y); }, x, 1e-4)
                       : analytic_gradient(p, x);
    const double norm = g.norm();
    if (!(norm >= 1e-8))
        throw DegenerateGradient("SDF gradient vanishes");
    return g / norm;
}

PbrdfParams SceneModel::material_at(int primitive, const Vec3& x) const
{
    const Material* mat = nullptr;
    const SdfPrimitive* leaf = material_leaf(primitives.at(primitive), x, &mat);
    PbrdfParams out = mat->params;
    if (mat->texture.kind != Texture::Kind::none) {
        const bool planar = leaf->kind != SdfPrimitive::Kind::sphere;
        out.rho = texture_albedo(mat->texture, out.rho, uv_coordinates(*leaf, x), planar);
    }
    return out;
}

PbrdfParams SceneModel::wall_material(int wall, const Vec3&) const
{
    PbrdfParams p;
    p.rho = environment.wall_albedo[wall];
    p.roughness = environment.wall_roughness;
    return p;
}

std::optional<SurfaceHit> SceneModel::trace_objects(const Ray& ray, double t_min, double t_max) const
{
    if (primitives.empty())
        return std::nullopt;
    // Clip to the bounding sphere.
    const Vec3 oc = ray.origin - rig.target;
    const double b = oc.dot(ray.dir);
    const double c = oc.squaredNorm() - rig.bound_radius * rig.bound_radius;
    const double disc = b * b - c;
    if (disc < 0.0)
        return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = std::max(t_min, -b - sq);
    const double t_end = std::min(t_max, -b + sq);
    for (int step = 0; step < kMaxSteps && t <= t_end; ++step) {
        const Vec3 x = ray.origin + t * ray.dir;
        const double d = sdf(x);
        if (std::abs(d) < kHitEps) {
            SurfaceHit hit;
            hit.t = t;
            hit.x = x;
            hit.object = true;
            hit.primitive = nearest_primitive(x);
            try {
                hit.n = sdf_normal(x);
            } catch (const DegenerateGradient&) {
                return std::nullopt;
            }
            hit.material = material_at(hit.primitive, x);
            return hit;
        }
        t += std::abs(d);
    }
    return std::nullopt;
}

std::optional<SurfaceHit> SceneModel::trace_room(const Ray& ray) const
{
    if (environment.mode != Environment::Mode::cornell)
        return std::nullopt;
    const Environment& e = environment;
    double best = std::numeric_limits<double>::infinity();
    int wall = -1;
    for (int axis = 0; axis < 3; ++axis) {
        const double d = ray.dir[axis];
        if (d == 0.0)
            continue;
        const double bound = d > 0 ? e.room_max[axis] : e.room_min[axis];
        const double t = (bound - ray.origin[axis]) / d;
        if (t > 0.0 && t < best) {
            best = t;
            wall = 2 * axis + (d > 0 ? 1 : 0);
        }
    }
    if (wall < 0)
        return std::nullopt;
    SurfaceHit hit;
    hit.t = best;
    hit.x = ray.origin + best * ray.dir;
    hit.n = Vec3::Zero();
    hit.n[wall / 2] = (wall % 2) ? -1.0 : 1.0;
    hit.primitive = wall;
    hit.emitter = wall == 3 && e.on_emitter(hit.x);
    hit.material = wall_material(wall, hit.x);
    return hit;
}

std::optional<SurfaceHit> SceneModel::intersect(const Ray& ray) const
{
    std::optional<SurfaceHit> room = trace_room(ray);
    const double t_max = room ? room->t : 1e30;
    std::optional<SurfaceHit> obj = trace_objects(ray, 0.0, t_max);
    return obj ? obj : room;
}

Rgb SceneModel::sky(const Vec3&) const
{
    return environment.mode == Environment::Mode::sky ? environment.sky_radiance : Rgb::Zero();
}

double volsdf_density(double d, const VolSdfParams& p)
{
    const double s = -d;
    const double psi = s <= 0.0 ? 0.5 * std::exp(s / p.beta) : 1.0 - 0.5 * std::exp(-s / p.beta);
    return p.alpha * psi;
}

BlendResult blend_weights(const std::vector<double>& sigma, const std::vector<double>& delta)
{
    if (sigma.size() != delta.size())
        throw std::invalid_argument("blend_weights: size mismatch");
    BlendResult r;
    r.weights.resize(sigma.size());
    r.transmittance.resize(sigma.size() + 1);
    double acc = 0.0;
    r.transmittance[0] = 1.0;
    for (std::size_t k = 0; k < sigma.size(); ++k) {
        const double tau = sigma[k] * delta[k];
        r.weights[k] = r.transmittance[k] * -std::expm1(-tau);
        acc += tau;
        r.transmittance[k + 1] = std::exp(-acc);
    }
    return r;
}

}  // namespace neisf
