#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "doctest.h"
#include "neisf/tracer.hpp"

using namespace neisf;

namespace {

constexpr double kPi = std::numbers::pi;

SceneModel cornell()
{
    return SceneModel::load(NEISF_SOURCE_DIR "/scenes/two_spheres_cornell.json");
}

SceneModel small_cornell(int size)
{
    SceneModel s = cornell();
    s.rig.width = size;
    s.rig.height = size;
    return s;
}

double mean_s0(const PolarizedImage& img)
{
    double acc = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                acc += img.at(0, c, x, y);
    return acc / (3.0 * img.width * img.height);
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("camera ray hitting the emitter sees unpolarised emitter radiance")
{
    const SceneModel s = cornell();
    const Camera cam = Camera::look_at(Vec3(0, 1.0, 0), Vec3(0, 3.0, 0.001), 8, 8, 30.0);
    PathConfig cfg;
    cfg.samples_per_pixel = 4;
    const PathSample p = trace_camera_stokes(s, cam, 4, 4, 0, cfg);
    for (int c = 0; c < 3; ++c) {
        CHECK(p.total(0, c) == doctest::Approx(20.0));
        CHECK(p.total(1, c) == 0.0);
        CHECK(p.total(2, c) == 0.0);
    }
}

TEST_CASE("max_depth = 1 leaves everything but the emitter black")
{
    SceneModel s = small_cornell(16);
    PathConfig cfg;
    cfg.max_depth = 1;
    cfg.samples_per_pixel = 2;
    const std::vector<View> views = rig_views(s.rig);
    const RenderedView v = render_view(s, views[0].camera, 0, cfg);
    for (float f : v.stokes.planes)
        CHECK(f == 0.0f);
}

TEST_CASE("Brewster reflection off a smooth dielectric slab is fully polarised")
{
    SceneModel s = SceneModel::from_json_text(R"({
        "primitives": [{"type": "box", "center": [0, -0.05, 0], "half_extents": [2, 0.05, 2],
                        "material": {"albedo": 0.5, "roughness": 0.05}}],
        "environment": {"mode": "sky", "sky_radiance": 1.0},
        "camera_rig": {"bound_radius": 3.0}})");
    const double b = std::atan(1.5);
    const Vec3 eye = 3.0 * Vec3(std::sin(b), std::cos(b), 0.0);
    const Camera cam = Camera::look_at(eye, Vec3::Zero(), 9, 9, 5.0);
    PathConfig cfg;
    cfg.samples_per_pixel = 64;
    cfg.max_depth = 2;
    for (double r : {0.05, kMinRoughness}) {
        s.primitives[0].material->params.roughness = r;
        const PathSample p = trace_camera_stokes(s, cam, 4, 4, 0, cfg);
        const double d = dolp(Eigen::Vector3d(p.specular.col(1)));
        CAPTURE(r);
        CHECK(std::abs(d - 1.0) < 0.02);
        CHECK(p.diffuse(0, 1) > 0.0);
    }
}

TEST_CASE("trace_incident_rotated examples")
{
    PathConfig cfg;
    cfg.samples_per_pixel = 8;
    const SceneModel sky = SceneModel::load(NEISF_SOURCE_DIR "/scenes/sphere_sky.json");
    const Vec3 n = Vec3(0.3, 0.8, -0.2).normalized();
    const Vec3 x = 0.8 * n;
    const Vec3 wo = Vec3(0.0, 0.6, 0.8).normalized();
    for (const Vec3& wi : {n, Vec3(n + Vec3(0.4, 0, 0.2)).normalized()}) {
        const IncidentStokes in = trace_incident_rotated(sky, x, n, wi, wo, cfg, 1);
        for (int c = 0; c < 3; ++c) {
            CHECK(in.diffuse(0, c) == doctest::Approx(1.0));
            CHECK(in.specular(0, c) == doctest::Approx(1.0));
            CHECK(std::abs(in.diffuse(1, c)) < 1e-12);
            CHECK(std::abs(in.diffuse(2, c)) < 1e-12);
            CHECK(std::abs(in.specular(1, c)) < 1e-12);
            CHECK(std::abs(in.specular(2, c)) < 1e-12);
        }
    }

    // Straight up from the floor into the ceiling light.
    const SceneModel room = cornell();
    const IncidentStokes up = trace_incident_rotated(room, Vec3(0.9, -1.0, -0.9), Vec3::UnitY(),
                                                     Vec3::UnitY(), Vec3(0.6, 0.8, 0).normalized(), cfg, 2);
    for (int c = 0; c < 3; ++c) {
        CHECK(up.diffuse(0, c) == doctest::Approx(20.0));
        CHECK(up.diffuse(1, c) == 0.0);
        CHECK(up.specular(2, c) == 0.0);
    }
}

TEST_CASE("incident diffuse and specular outputs differ only by a frame rotation")
{
    // Light leaving a glossy wall toward the floor point is polarised; the two
    // outputs must agree in s0 and be related by the rotation between frames.
    const SceneModel room = cornell();
    PathConfig cfg;
    cfg.samples_per_pixel = 16;
    const Vec3 x(0.0, -1.0, 1.5);
    const Vec3 n = Vec3::UnitY();
    const Vec3 wi = Vec3(-std::sin(std::atan(1.5)), std::cos(std::atan(1.5)), 0.3).normalized();
    const Vec3 wo = Vec3(0.5, 0.6, -0.4).normalized();
    const IncidentStokes in = trace_incident_rotated(room, x, n, wi, wo, cfg, 3);
    const double phi = relative_rotation_angle(in.diffuse_frame, in.specular_frame);
    CHECK(std::abs(phi) > 1e-3);
    const Mat3 R = rotation_matrix(phi);
    for (int c = 0; c < 3; ++c) {
        CHECK(std::abs(in.diffuse(0, c) - in.specular(0, c)) < 1e-12);
        const Eigen::Vector3d expected = R * in.diffuse.col(c);
        CHECK((expected - in.specular.col(c)).cwiseAbs().maxCoeff() < 1e-9);
    }
    CHECK(in.diffuse.block<2, 3>(1, 0).cwiseAbs().maxCoeff() > 1e-4);
}

TEST_CASE("property: every traced sample is physical")
{
    const SceneModel s = small_cornell(8);
    const std::vector<View> views = rig_views(s.rig);
    PathConfig cfg;
    Sampler rng(99);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const Ray ray = views[1].camera.pixel_ray(x, y);
            const ReferenceFrame f = views[1].camera.pixel_frame(ray.dir);
            for (int k = 0; k < 16; ++k) {
                const PathSample p = trace_path(s, ray, f, cfg, rng);
                for (int c = 0; c < 3; ++c) {
                    CHECK(p.total(0, c) >= 0.0);
                    CHECK(dolp(Eigen::Vector3d(p.total.col(c))) <= 1.0 + 1e-6);
                }
            }
        }
}

TEST_CASE("property: unpolarised reduction matches the scalar tracer")
{
    const SceneModel s = small_cornell(12);
    const std::vector<View> views = rig_views(s.rig);
    PathConfig cfg;
    cfg.samples_per_pixel = 8;
    cfg.fresnel = FresnelMode::scalar;
    double diff = 0.0;
    double ref = 0.0;
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            const PathSample p = trace_camera_stokes(s, views[0].camera, x, y, 0, cfg);
            const Rgb q = trace_camera_scalar(s, views[0].camera, x, y, 0, cfg);
            for (int c = 0; c < 3; ++c) {
                CHECK(p.total(1, c) == 0.0);
                CHECK(p.total(2, c) == 0.0);
                diff += std::abs(p.total(0, c) - q[c]);
                ref += q[c];
            }
        }
    CHECK(diff / ref < 0.01);
}

TEST_CASE("property: rotating the sensor Stokes basis rotates (s1, s2)")
{
    const SceneModel s = small_cornell(6);
    const std::vector<View> views = rig_views(s.rig);
    PathConfig cfg;
    cfg.samples_per_pixel = 4;
    Camera rolled = views[2].camera;
    rolled.stokes_basis_roll = kPi / 6;
    const Mat3 R = rotation_matrix(kPi / 6);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
            const PathSample a = trace_camera_stokes(s, views[2].camera, x, y, 2, cfg);
            const PathSample b = trace_camera_stokes(s, rolled, x, y, 2, cfg);
            for (int c = 0; c < 3; ++c)
                CHECK(((R * a.total.col(c)) - b.total.col(c)).cwiseAbs().maxCoeff() < 1e-6);
        }
}

TEST_CASE("depth convergence in the Cornell scene")
{
    const SceneModel s = small_cornell(48);
    const std::vector<View> views = rig_views(s.rig);
    PathConfig cfg;
    cfg.samples_per_pixel = 128;
    cfg.max_depth = 4;
    const double m4 = mean_s0(render_view(s, views[0].camera, 0, cfg).stokes);
    cfg.max_depth = 8;
    const double m8 = mean_s0(render_view(s, views[0].camera, 0, cfg).stokes);
    CHECK(std::abs(m8 - m4) / m8 < 0.01);
}

TEST_CASE("render_dataset: file counts, determinism and threads")
{
    SceneModel s = small_cornell(6);
    s.rig.views = 12;
    s.rig.test_views = 0;
    const std::vector<View> views = rig_views(s.rig);
    PathConfig cfg;
    cfg.samples_per_pixel = 2;
    cfg.rng_seed = 17;
    cfg.threads = 1;
    const auto root = std::filesystem::temp_directory_path() / "neisf_test_tracer";
    std::filesystem::remove_all(root);
    const DatasetSummary a = render_dataset(s, views, cfg, root / "a");
    CHECK(a.views == 12);
    int pfm = 0;
    int pstk = 0;
    int masks = 0;
    for (const auto& e : std::filesystem::directory_iterator(root / "a")) {
        const std::string name = e.path().filename().string();
        pfm += e.path().extension() == ".pfm";
        pstk += e.path().extension() == ".pstk";
        masks += name.find("_mask.pfm") != std::string::npos;
    }
    CHECK(pstk == 12);
    CHECK(masks == 12);
    CHECK(pfm == 12 * (9 + 6));
    CHECK(std::filesystem::exists(root / "a" / "poses.json"));
    CHECK(std::filesystem::exists(root / "a" / "0003_s1_g.pfm"));

    cfg.threads = 3;
    render_dataset(s, views, cfg, root / "b");
    for (const std::string& f : a.files)
        CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));

    cfg.rng_seed = 18;
    render_dataset(s, views, cfg, root / "c");
    CHECK(slurp(root / "a" / "0000.pstk") != slurp(root / "c" / "0000.pstk"));
}

TEST_CASE("mask area of a centred sphere matches the projected disk")
{
    const SceneModel s = SceneModel::load(NEISF_SOURCE_DIR "/scenes/sphere_sky.json");
    const int size = 200;
    const double fov = 50.0;
    const double dist = 2.5;
    const Camera cam = Camera::look_at(Vec3(0, 0, dist), Vec3::Zero(), size, size, fov);
    PathConfig cfg;
    cfg.samples_per_pixel = 1;
    cfg.max_depth = 1;
    const RenderedView v = render_view(s, cam, 0, cfg);
    double count = 0.0;
    for (float m : v.mask.data)
        count += m;
    const double f = 0.5 * size / std::tan(0.5 * fov * kPi / 180.0);
    const double radius_px = f * std::tan(std::asin(0.8 / dist));
    const double area = kPi * radius_px * radius_px;
    CHECK(std::abs(count - area) / area < 0.01);
}
