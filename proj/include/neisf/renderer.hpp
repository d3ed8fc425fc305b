#pragma once

// Differentiable last-bounce polarimetric renderer. Incident Stokes vectors
// from the fields are integrated over a fixed Fibonacci hemisphere with the
// pBRDF Mueller matrices; diffuse output is rotated into the camera frame
// once after the sum, specular output per quadrature direction.

#include <vector>

#include "neisf/camera.hpp"
#include "neisf/fields.hpp"
#include "neisf/image_io.hpp"
#include "neisf/pbrdf.hpp"

namespace neisf {

struct QuadratureSet {
    std::vector<Vec3> directions;
    double weight = 0.0;  ///< solid angle per direction, 2 pi / n
};

/// Fibonacci lattice on the +z hemisphere (uniform in cos theta, golden-angle
/// azimuth), n x 3.
ad::Array fibonacci_local(int n);
/// The lattice rotated onto `normal` by the minimal rotation.
QuadratureSet fibonacci_hemisphere(int n, const Vec3& normal);
/// Minimal rotation taking +z to `normal`.
Mat3 rotation_from_z(const Vec3& normal);

/// Stokes rows x 3 channels per component, in the camera frame.
struct StokesVar {
    ad::Var s0;
    ad::Var s1;
    ad::Var s2;
};

/// Per-ray shading inputs; `dirs` holds `per_ray` consecutive quadrature
/// directions for each ray.
struct ShadeInputs {
    ad::V3 normal;       ///< R rows, unit length
    ad::Var albedo;      ///< R x 3
    ad::Var roughness;   ///< R x 1
    ad::Array wo;        ///< R x 3, towards the camera
    ad::Array camera_x;  ///< R x 3, x-axis of the pixel frame (propagation wo)
    ad::Array dirs;      ///< R*per_ray x 3
    int per_ray = 0;
    double weight = 0.0;
    double eta = 1.5;
};

/// (2pi/|S|) R_cam_dif . sum M_dif . s_r_dif. The third incident component is
/// multiplied by the (structurally zero) third column of M_dif.
StokesVar shade_diffuse(ad::Tape& tape, const ShadeInputs& in, const IncidentVar& incident,
                        FresnelMode mode = FresnelMode::polarized);

/// sum R_cam_spec(h) . M_spec . s_r_spec. Rays whose wo faces away from the
/// normal give zero and are flagged in `backfacing` when provided.
StokesVar shade_specular(ad::Tape& tape, const ShadeInputs& in, const IncidentVar& incident,
                         FresnelMode mode = FresnelMode::polarized,
                         std::vector<char>* backfacing = nullptr);

struct RenderOptions {
    int quadrature = 128;
    bool polarized = true;  ///< false: no-pol ablation (f_i only, scalar Fresnel)
    bool geometry_grad = false;
    bool material_grad = false;
    bool incident_grad = false;
    bool eikonal = false;
    SamplingConfig sampling;
};

struct PixelShading {
    StokesVar total;
    StokesVar diffuse;
    StokesVar specular;
    Aggregate aggregate;
    std::vector<char> valid;  ///< false for empty rays and degenerate normals
    ad::Array valid_mask;     ///< R x 1, 1.0 where valid
};

/// Quantities the renderer treats as constants (quadrature orientation and
/// the incident-field query point). Recording and replaying them lets finite
/// differences see exactly the function the tape differentiates.
struct DetachedState {
    ad::Array quad_normals;  ///< R x 3
    ad::Array x_surf;        ///< R x 3
};

/// Full last-bounce render of a batch of camera rays. Invalid rays output
/// [0, 0, 0]. With `options.polarized` false this is the no-pol ablation
/// renderer and s1 = s2 = 0.
PixelShading shade_pixels(ad::Tape& tape, const FieldBundle& bundle, const ad::Array& origins,
                          const ad::Array& dirs, const ad::Array& camera_x,
                          const RenderOptions& options, std::mt19937_64* jitter = nullptr);

/// Same on precomputed samples. `replay` overrides the detached quantities,
/// `record` receives the ones used.
PixelShading shade_samples(ad::Tape& tape, const FieldBundle& bundle, const RaySamples& samples,
                           const ad::Array& camera_x, const RenderOptions& options,
                           const DetachedState* replay = nullptr, DetachedState* record = nullptr);

/// Single-ray wrappers (no gradients).
FramedStokes shade_pixel(const FieldBundle& bundle, const Ray& ray, const ReferenceFrame& frame,
                         const RenderOptions& options = {});
Rgb shade_pixel_nopol(const FieldBundle& bundle, const Ray& ray, const RenderOptions& options = {});

struct FieldRender {
    PolarizedImage stokes;
    Image opacity;
    Image normal;
    Image albedo;
    Image roughness;
    Image diffuse;   ///< s0 of the diffuse part
    Image specular;  ///< s0 of the specular part
};

/// Renders a whole view from the fields, in chunks of rays on `threads`
/// workers. `mask` (optional, 1 channel) restricts shading to its nonzero
/// pixels.
FieldRender render_fields(const FieldBundle& bundle, const Camera& camera,
                          const RenderOptions& options, const Image* mask = nullptr,
                          int threads = 0);

}  // namespace neisf
