#pragma once

// Forward polarimetric path tracer. Each path carries a per-channel Mueller
// throughput from the current segment's frame to the sensor frame; every
// vertex contributes frame-rotated pBRDF Mueller matrices. Also provides an
// independent scalar (intensity-only) tracer, the incident-light oracle and
// dataset rendering.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "neisf/camera.hpp"
#include "neisf/image_io.hpp"
#include "neisf/pbrdf.hpp"
#include "neisf/scene.hpp"

namespace neisf {

struct PathConfig {
    int max_depth = 8;  ///< path segments; 1 = emission seen directly
    int samples_per_pixel = 16;
    std::uint64_t rng_seed = 0;
    int russian_roulette_start = 3;  ///< first vertex index (1-based) subject to roulette
    FresnelMode fresnel = FresnelMode::polarized;
    bool next_event = true;
    double firefly_clamp = 1e4;
    int threads = 0;  ///< 0 = hardware concurrency

    void validate() const;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : engine_(seed) {}
    /// Uniform in [0, 1) with 53 random bits.
    double next() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 engine_;
};

/// Stokes contributions of one camera-side path, in the starting frame.
struct PathSample {
    StokesRgb total = StokesRgb::Zero();
    StokesRgb diffuse = StokesRgb::Zero();   ///< through the diffuse lobe at the first vertex
    StokesRgb specular = StokesRgb::Zero();  ///< through the specular lobe at the first vertex
};

/// Light arriving against `ray.dir`, expressed in `frame` (propagation must
/// be -ray.dir). One path sample.
PathSample trace_path(const SceneModel& scene, const Ray& ray, const ReferenceFrame& frame,
                      const PathConfig& cfg, Sampler& sampler);

/// Mean over cfg.samples_per_pixel paths for one camera pixel; uses the
/// per-pixel stream (seed, view, pixel).
PathSample trace_camera_stokes(const SceneModel& scene, const Camera& cam, int px, int py,
                               int view, const PathConfig& cfg);

/// Intensity-only path tracer with the same sampling decisions as the
/// polarimetric one under FresnelMode::scalar.
Rgb trace_path_scalar(const SceneModel& scene, const Ray& ray, const PathConfig& cfg,
                      Sampler& sampler);
Rgb trace_camera_scalar(const SceneModel& scene, const Camera& cam, int px, int py, int view,
                        const PathConfig& cfg);

/// Incident light at surface point x from direction wi, already rotated into
/// the diffuse frame (plane of n and wi) and the specular frame (plane of h
/// and wi, h the halfway vector of wi and wo).
struct IncidentStokes {
    StokesRgb diffuse = StokesRgb::Zero();
    StokesRgb specular = StokesRgb::Zero();
    ReferenceFrame diffuse_frame;
    ReferenceFrame specular_frame;
};

IncidentStokes trace_incident_rotated(const SceneModel& scene, const Vec3& x, const Vec3& n,
                                      const Vec3& wi, const Vec3& wo, const PathConfig& cfg,
                                      std::uint64_t stream);

struct RenderedView {
    PolarizedImage stokes;
    Image mask;      ///< 1 where the primary ray hits an object primitive
    Image normal;    ///< world-space object normal
    Image albedo;
    Image roughness;
    Image diffuse;   ///< s0 through the diffuse lobe at the first vertex
    Image specular;  ///< s0 through the specular lobe at the first vertex
};

RenderedView render_view(const SceneModel& scene, const Camera& cam, int view, const PathConfig& cfg);

struct DatasetSummary {
    int views = 0;
    std::vector<std::string> files;
};

/// Writes every view of the rig: 9 PFM planes, a PSTK container, mask and
/// AOV PFMs per view, plus poses.json. Deterministic given cfg.rng_seed.
DatasetSummary render_dataset(const SceneModel& scene, const std::vector<View>& views,
                              const PathConfig& cfg, const std::filesystem::path& out_dir);

/// Runs body(row) for rows [0, rows) on `threads` workers (0 = hardware).
void parallel_rows(int rows, int threads, const std::function<void(int)>& body);

}  // namespace neisf
