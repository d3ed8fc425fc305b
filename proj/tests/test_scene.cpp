#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "neisf/camera.hpp"
#include "neisf/scene.hpp"

using namespace neisf;

namespace {

SdfPrimitive sphere(const Vec3& c, double r)
{
    SdfPrimitive p;
    p.kind = SdfPrimitive::Kind::sphere;
    p.center = c;
    p.radius = r;
    p.material = Material{};
    return p;
}

SceneModel unit_sphere_scene()
{
    SceneModel s;
    s.primitives.push_back(sphere(Vec3::Zero(), 1.0));
    s.rig.bound_radius = 2.0;
    return s;
}

Vec3 random_point(std::mt19937_64& rng, double extent)
{
    std::uniform_real_distribution<double> u(-extent, extent);
    return {u(rng), u(rng), u(rng)};
}

}  // namespace

TEST_CASE("sdf_eval examples")
{
    const SceneModel s = unit_sphere_scene();
    CHECK(s.sdf(Vec3(2, 0, 0)) == doctest::Approx(1.0));
    CHECK(s.sdf(Vec3(0, 0, 0)) == doctest::Approx(-1.0));

    SdfPrimitive box;
    box.kind = SdfPrimitive::Kind::box;
    box.half_extents = Vec3(1, 2, 3);
    CHECK(box.distance(Vec3(2, 0, 0)) == doctest::Approx(1.0));
    CHECK(box.distance(Vec3(0, 0, 0)) == doctest::Approx(-1.0));
    CHECK(box.distance(Vec3(2, 3, 0)) == doctest::Approx(std::sqrt(2.0)));

    SdfPrimitive plane;
    plane.kind = SdfPrimitive::Kind::plane;
    plane.normal = Vec3::UnitZ();
    plane.offset = 0.5;
    CHECK(plane.distance(Vec3(3, -1, 2)) == doctest::Approx(1.5));
}

TEST_CASE("union matches a brute-force minimum")
{
    const SdfPrimitive a = sphere(Vec3(-0.5, 0, 0), 0.6);
    const SdfPrimitive b = sphere(Vec3(0.7, 0.2, 0), 0.4);
    SdfPrimitive u;
    u.kind = SdfPrimitive::Kind::union_;
    u.children = {a, b};
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const Vec3 x = random_point(rng, 2.0);
        const double da = (x - Vec3(-0.5, 0, 0)).norm() - 0.6;
        const double db = (x - Vec3(0.7, 0.2, 0)).norm() - 0.4;
        CHECK(u.distance(x) == doctest::Approx(std::min(da, db)).epsilon(1e-14));
    }
}

TEST_CASE("sdf_normal examples")
{
    const SceneModel s = unit_sphere_scene();
    CHECK((s.sdf_normal(Vec3(1, 0, 0)) - Vec3(1, 0, 0)).norm() < 1e-12);

    SceneModel p;
    SdfPrimitive plane;
    plane.kind = SdfPrimitive::Kind::plane;
    plane.normal = Vec3::UnitZ();
    plane.material = Material{};
    p.primitives.push_back(plane);
    CHECK((p.sdf_normal(Vec3(0.3, -2.0, 0.0)) - Vec3::UnitZ()).norm() < 1e-12);

    CHECK_THROWS_AS(s.sdf_normal(Vec3::Zero()), DegenerateGradient);
}

TEST_CASE("smooth-union normal: finite differences vs analytic blend gradient")
{
    const Vec3 ca(-0.4, 0, 0);
    const Vec3 cb(0.45, 0.1, 0);
    const double ra = 0.5;
    const double rb = 0.45;
    const double k = 0.3;
    SceneModel s;
    SdfPrimitive su;
    su.kind = SdfPrimitive::Kind::smooth_union;
    su.blend_k = k;
    su.children = {sphere(ca, ra), sphere(cb, rb)};
    su.material = Material{};
    s.primitives.push_back(su);

    std::mt19937_64 rng(4);
    int checked = 0;
    for (int i = 0; i < 200; ++i) {
        const Vec3 x = random_point(rng, 1.2);
        const double a = (x - ca).norm() - ra;
        const double b = (x - cb).norm() - rb;
        const double h = std::clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0);
        if (h <= 0.0 || h >= 1.0)
            continue;
        // Inside the blend band the polynomial smooth-min has gradient
        // h grad(a) + (1 - h) grad(b).
        const Vec3 g = h * (x - ca).normalized() + (1.0 - h) * (x - cb).normalized();
        const Vec3 n = s.sdf_normal(x);
        CHECK(1.0 - n.dot(g.normalized()) < 1e-4);
        ++checked;
    }
    CHECK(checked > 10);
}

TEST_CASE("property: primitive distances are 1-Lipschitz")
{
    SdfPrimitive box;
    box.kind = SdfPrimitive::Kind::box;
    box.center = Vec3(0.1, 0.2, -0.3);
    box.half_extents = Vec3(0.5, 0.3, 0.8);
    SdfPrimitive su;
    su.kind = SdfPrimitive::Kind::smooth_union;
    su.blend_k = 0.2;
    su.children = {sphere(Vec3(0.3, 0, 0), 0.5), box};
    SdfPrimitive plane;
    plane.kind = SdfPrimitive::Kind::plane;
    plane.normal = Vec3(1, 2, 3).normalized();
    const SdfPrimitive* prims[] = {&box, &su, &plane};
    std::mt19937_64 rng(5);
    for (const SdfPrimitive* p : prims)
        for (int i = 0; i < 2000; ++i) {
            const Vec3 x = random_point(rng, 2.0);
            const Vec3 y = random_point(rng, 2.0);
            CHECK(std::abs(p->distance(x) - p->distance(y)) <= (x - y).norm() * (1.0 + 1e-3));
        }
}

TEST_CASE("volsdf_density examples")
{
    const VolSdfParams p{1.0, 0.1};
    CHECK(volsdf_density(0.0, p) == doctest::Approx(0.5));
    CHECK(volsdf_density(0.0, VolSdfParams{3.0, 0.2}) == doctest::Approx(1.5));
    CHECK(volsdf_density(50.0, p) < 1e-100);
    CHECK(volsdf_density(-50.0, p) == doctest::Approx(1.0));
    CHECK(volsdf_density(-0.1, p) == doctest::Approx(1.0 - std::exp(-1.0) / 2.0).epsilon(1e-12));
    CHECK(volsdf_density(-0.1, p) == doctest::Approx(0.81606).epsilon(1e-5));
    CHECK_THROWS_AS(VolSdfParams({0.0, 0.1}).validate(), std::invalid_argument);
}

TEST_CASE("blend_weights examples and identities")
{
    BlendResult r = blend_weights({0, 0, 0}, {0.1, 0.1, 0.1});
    for (double w : r.weights)
        CHECK(w == 0.0);

    r = blend_weights({200, 5, 5}, {0.1, 0.1, 0.1});
    CHECK(r.weights[0] == doctest::Approx(1.0 - 2.06e-9).epsilon(1e-12));
    CHECK(r.weights[1] < 2e-9);
    CHECK(r.weights[2] < 2e-9);

    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 1 + static_cast<int>(u(rng) * 80);
        std::vector<double> sigma(n);
        std::vector<double> delta(n);
        double total = 0.0;
        for (int k = 0; k < n; ++k) {
            sigma[k] = u(rng) < 0.3 ? 0.0 : 30.0 * u(rng);
            delta[k] = 0.001 + 0.05 * u(rng);
            total += sigma[k] * delta[k];
        }
        r = blend_weights(sigma, delta);
        double sum = 0.0;
        for (int k = 0; k < n; ++k) {
            CHECK(r.weights[k] >= 0.0);
            CHECK(r.transmittance[k + 1] <= r.transmittance[k]);
            sum += r.weights[k];
        }
        CHECK(std::abs(sum + r.transmittance[n] - 1.0) < 1e-10);
        CHECK(std::abs(sum - (1.0 - std::exp(-total))) < 1e-12);
    }
}

TEST_CASE("ray_surface_hit examples")
{
    const SceneModel s = unit_sphere_scene();
    auto hit = s.trace_objects({Vec3(-3, 0, 0), Vec3(1, 0, 0)});
    REQUIRE(hit.has_value());
    CHECK((hit->x - Vec3(-1, 0, 0)).norm() < 2e-4);
    CHECK((hit->n - Vec3(-1, 0, 0)).norm() < 1e-3);
    CHECK(hit->object);

    CHECK_FALSE(s.trace_objects({Vec3(-3, 1.5, 0), Vec3(1, 0, 0)}).has_value());
    CHECK_FALSE(s.trace_objects({Vec3(-3, 0, 0), Vec3(-1, 0, 0)}).has_value());

    // Grazing ray: impact parameter 1 - delta. The analytic chord starts at
    // s = -sqrt(2 delta) before the tangency point; sphere tracing stops once
    // the distance drops below eps, i.e. no further than sqrt(2 (delta + eps)).
    const double delta = 2e-5;
    const double eps = 1e-4;
    hit = s.trace_objects({Vec3(-3, 1.0 - delta, 0), Vec3(1, 0, 0)});
    REQUIRE(hit.has_value());
    CHECK(std::abs(s.sdf(hit->x)) < 2 * eps);
    CHECK(std::abs(hit->x.x()) <= std::sqrt(2 * (delta + eps)) + 1e-9);
}

TEST_CASE("property: sphere-traced hits lie within 2 eps of the surface")
{
    SceneModel s = SceneModel::from_json_text(R"({
        "primitives": [
            {"type": "sphere", "center": [-0.5, 0, 0], "radius": 0.45},
            {"type": "smooth_union", "k": 0.15, "children": [
                {"type": "sphere", "center": [0.5, 0, 0], "radius": 0.4},
                {"type": "box", "center": [0.5, -0.4, 0], "half_extents": [0.3, 0.2, 0.3]}]}
        ],
        "camera_rig": {"bound_radius": 1.5}
    })");
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g(0.0, 1.0);
    int hits = 0;
    for (int i = 0; i < 2000; ++i) {
        const Vec3 o = Vec3(g(rng), g(rng), g(rng)).normalized() * 3.0;
        const Vec3 target = random_point(rng, 0.8);
        const auto hit = s.trace_objects({o, (target - o).normalized()});
        if (!hit)
            continue;
        ++hits;
        CHECK(std::abs(s.sdf(hit->x)) < 2e-4);
    }
    CHECK(hits > 500);
}

TEST_CASE("cornell room walls and emitter")
{
    SceneModel s = SceneModel::load(NEISF_SOURCE_DIR "/scenes/two_spheres_cornell.json");
    CHECK(s.environment.mode == Environment::Mode::cornell);
    auto hit = s.intersect({Vec3(0, 1.5, 0), Vec3(0, 1, 0)});
    REQUIRE(hit.has_value());
    CHECK(hit->emitter);
    CHECK(hit->x.y() == doctest::Approx(3.0));
    CHECK((hit->n - Vec3(0, -1, 0)).norm() < 1e-12);

    hit = s.intersect({Vec3(0, 1.5, 0), Vec3(1, 0, 0)});
    REQUIRE(hit.has_value());
    CHECK_FALSE(hit->object);
    CHECK_FALSE(hit->emitter);
    CHECK(hit->primitive == 1);
    CHECK((hit->material.rho - Rgb(0.05, 0.22, 0.05)).abs().maxCoeff() < 1e-12);

    hit = s.intersect({Vec3(-2, 0, 0), Vec3(1, 0, 0)});
    REQUIRE(hit.has_value());
    CHECK(hit->object);
    CHECK(hit->primitive == 0);
    CHECK(hit->x.x() == doctest::Approx(-0.5 - std::sqrt(0.45 * 0.45 - 0.05 * 0.05)).epsilon(1e-4));
}

TEST_CASE("scene JSON errors and textures")
{
    CHECK_THROWS_AS(SceneModel::from_json_text("{"), SceneError);
    CHECK_THROWS_AS(SceneModel::from_json_text(R"({"primitives": [{"type": "torus"}]})"), SceneError);
    CHECK_THROWS_AS(SceneModel::from_json_text(
                        R"({"primitives": [{"type": "sphere", "radius": 1, "material": {"albedo": 1.5}}]})"),
                    SceneError);
    CHECK_THROWS_AS(SceneModel::load("/nonexistent/scene.json"), SceneError);
    CHECK_THROWS_AS(SceneModel::from_json_text(
                        R"({"primitives": [], "environment": {"mode": "cornell", "emitter": {"radiance": -1}}})"),
                    SceneError);

    const SceneModel s = SceneModel::from_json_text(R"({
        "primitives": [{"type": "sphere", "radius": 1, "material": {
            "albedo": [0.8, 0.8, 0.8],
            "texture": {"type": "checker", "albedo2": [0.1, 0.1, 0.1], "scale": 4}}}]})");
    int light = 0;
    int dark = 0;
    for (int i = 0; i < 64; ++i) {
        const double phi = 2 * std::numbers::pi * (i + 0.5) / 64;
        const Rgb a = s.material_at(0, Vec3(std::cos(phi), 0.3, std::sin(phi)).normalized()).rho;
        (a[0] > 0.5 ? light : dark)++;
    }
    CHECK(light > 16);
    CHECK(dark > 16);
}

TEST_CASE("camera: look_at, rays, projection and Stokes frames")
{
    const Camera cam = Camera::look_at(Vec3(0, 0, 5), Vec3::Zero(), 64, 48, 60.0);
    const Ray centre = cam.ray(32.0, 24.0);
    CHECK((centre.dir - Vec3(0, 0, -1)).norm() < 1e-12);
    CHECK((cam.rotation().col(0) - Vec3(1, 0, 0)).norm() < 1e-12);  // right
    CHECK((cam.rotation().col(1) - Vec3(0, -1, 0)).norm() < 1e-12);  // down

    Eigen::Vector2d uv;
    REQUIRE(cam.project(Vec3(0.3, -0.2, 1.0), &uv));
    const Ray back = cam.ray(uv.x(), uv.y());
    const Vec3 expected = (Vec3(0.3, -0.2, 1.0) - cam.position()).normalized();
    CHECK((back.dir - expected).norm() < 1e-12);
    CHECK_FALSE(cam.project(Vec3(0, 0, 6), &uv));

    const Ray corner = cam.pixel_ray(0, 0);
    const ReferenceFrame f = cam.pixel_frame(corner.dir);
    CHECK(f.valid());
    CHECK((f.propagation + corner.dir).norm() < 1e-12);

    Camera rolled = cam;
    rolled.stokes_basis_roll = std::numbers::pi / 6;
    const ReferenceFrame g = rolled.pixel_frame(corner.dir);
    CHECK(relative_rotation_angle(f, g) == doctest::Approx(std::numbers::pi / 6));
}

TEST_CASE("rig views are deterministic and look at the target")
{
    CameraRig rig;
    rig.views = 12;
    rig.test_views = 3;
    const std::vector<View> a = rig_views(rig);
    const std::vector<View> b = rig_views(rig);
    REQUIRE(a.size() == 15);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].camera.cam_to_world == b[i].camera.cam_to_world);
        CHECK(a[i].test == (i >= 12));
        CHECK((a[i].camera.position() - rig.target).norm() == doctest::Approx(rig.radius));
        const Ray r = a[i].camera.ray(0.5 * rig.width, 0.5 * rig.height);
        CHECK((r.dir - (rig.target - r.origin).normalized()).norm() < 1e-12);
    }
}
