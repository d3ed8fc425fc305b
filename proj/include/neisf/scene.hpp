#pragma once

// Ground-truth scenes: analytic SDF primitives with materials, an enclosing
// environment (closed Cornell-style room with a ceiling light, or a constant
// sky), and the VolSDF density / alpha-blending helpers shared with the
// learned side.

#include <optional>
#include <string>
#include <vector>

#include "neisf/pbrdf.hpp"
#include "neisf/polcore.hpp"

namespace neisf {

class DegenerateGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SceneError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Texture {
    enum class Kind { none, checker, image };
    Kind kind = Kind::none;
    Rgb albedo2 = Rgb::Zero();  ///< second checker colour
    double scale = 4.0;         ///< checker cells per unit of UV (or per metre for planar UVs)
    int width = 0;
    int height = 0;
    std::vector<Rgb> pixels;  ///< row-major, row 0 at v = 0
};

struct Material {
    PbrdfParams params;
    Texture texture;
};

struct SdfPrimitive {
    enum class Kind { sphere, box, plane, union_, smooth_union };
    Kind kind = Kind::sphere;
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
    Vec3 half_extents = Vec3::Ones();
    Vec3 normal = Vec3::UnitY();
    double offset = 0.0;  ///< plane: dot(normal, x) = offset
    double blend_k = 0.1;
    std::vector<SdfPrimitive> children;
    std::optional<Material> material;  ///< inherited by children without one

    double distance(const Vec3& x) const;
};

struct Environment {
    enum class Mode { cornell, sky };
    Mode mode = Mode::sky;
    Rgb sky_radiance = Rgb::Ones();

    // Room: axis-aligned box, walls face inward.
    Vec3 room_min = Vec3(-3, -1, -3);
    Vec3 room_max = Vec3(3, 3, 3);
    /// Order: -x, +x, -y (floor), +y (ceiling), -z, +z.
    std::array<Rgb, 6> wall_albedo{Rgb::Constant(0.3), Rgb::Constant(0.3), Rgb::Constant(0.3),
                                   Rgb::Constant(0.3), Rgb::Constant(0.3), Rgb::Constant(0.3)};
    double wall_roughness = 0.6;
    /// Emissive rectangle on the ceiling, centred at (x, z) with half sizes.
    Eigen::Vector2d emitter_center = Eigen::Vector2d::Zero();
    Eigen::Vector2d emitter_half = Eigen::Vector2d(0.75, 0.75);
    Rgb emitter_radiance = Rgb::Constant(10.0);

    double emitter_area() const { return 4.0 * emitter_half.x() * emitter_half.y(); }
    bool on_emitter(const Vec3& ceiling_point) const;
};

struct CameraRig {
    int views = 12;
    int test_views = 3;
    double radius = 2.5;
    Vec3 target = Vec3::Zero();
    int width = 64;
    int height = 64;
    double fov_deg = 40.0;
    double elevation_min_deg = 10.0;
    double elevation_max_deg = 50.0;
    /// Sphere around `target` that contains every object primitive.
    double bound_radius = 1.5;
};

struct Ray {
    Vec3 origin;
    Vec3 dir;
};

struct SurfaceHit {
    double t = 0.0;
    Vec3 x = Vec3::Zero();
    Vec3 n = Vec3::UnitZ();
    bool object = false;  ///< object primitive (true) or environment wall (false)
    int primitive = -1;   ///< top-level primitive index, or wall index for walls
    bool emitter = false;
    PbrdfParams material;
};

/// Laplace-CDF density parameters.
struct VolSdfParams {
    double alpha = 1.0;
    double beta = 0.1;

    void validate() const;
};

class SceneModel {
public:
    std::vector<SdfPrimitive> primitives;
    Environment environment;
    CameraRig rig;

    static SceneModel from_json_text(const std::string& text);
    static SceneModel load(const std::string& path);

    double sdf(const Vec3& x) const;
    /// Normalised gradient of the object SDF. Analytic for sphere, box,
    /// plane and hard unions; central differences (h = 1e-4) under smooth
    /// unions. Throws DegenerateGradient for gradient norms < 1e-8.
    Vec3 sdf_normal(const Vec3& x) const;

    /// Material at a surface point of a top-level primitive, textures applied.
    PbrdfParams material_at(int primitive, const Vec3& x) const;
    PbrdfParams wall_material(int wall, const Vec3& x) const;

    /// Sphere tracing against the object primitives (256 steps, eps 1e-4),
    /// restricted to the rig's bounding sphere and to t in [t_min, t_max].
    std::optional<SurfaceHit> trace_objects(const Ray& ray, double t_min = 0.0,
                                            double t_max = 1e30) const;
    /// Nearest wall of the room (inside-out box). Empty in sky mode.
    std::optional<SurfaceHit> trace_room(const Ray& ray) const;
    /// Closest of the two.
    std::optional<SurfaceHit> intersect(const Ray& ray) const;

    /// Radiance (unpolarised) seen by a ray that escapes or hits the emitter.
    Rgb sky(const Vec3& dir) const;

private:
    int nearest_primitive(const Vec3& x) const;
};

/// sigma = alpha * Psi_beta(-d), Psi the zero-mean Laplace CDF with scale beta.
double volsdf_density(double d, const VolSdfParams& p);

struct BlendResult {
    std::vector<double> weights;
    std::vector<double> transmittance;  ///< T^k, size N + 1 (last entry is residual)
};

/// w^k = T^k (1 - exp(-sigma^k delta^k)), T^k = exp(-sum_{j<k} sigma^j delta^j).
BlendResult blend_weights(const std::vector<double>& sigma, const std::vector<double>& delta);

}  // namespace neisf
