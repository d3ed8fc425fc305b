#pragma once

// Polarimetric BRDF of opaque dielectrics: a diffuse lobe built from
// Fresnel transmission / depolarisation / Fresnel transmission, and a GGX
// microfacet specular lobe carrying the Fresnel reflection matrix.

#include "neisf/pbrdf_terms.hpp"
#include "neisf/polcore.hpp"

namespace neisf {

struct PbrdfParams {
    Rgb rho = Rgb::Constant(0.5);
    double roughness = 0.5;
    Rgb ks = Rgb::Ones();
    double eta = 1.5;

    /// Throws std::invalid_argument on out-of-range values.
    void validate() const;
};

struct ShadingGeometry {
    Vec3 n;
    Vec3 wi;  ///< towards the light, away from the surface
    Vec3 wo;  ///< towards the viewer, away from the surface
    Vec3 h;

    static ShadingGeometry make(const Vec3& n, const Vec3& wi, const Vec3& wo);
    double cos_i() const { return n.dot(wi); }
    double cos_o() const { return n.dot(wo); }
};

enum class TransmitDirection { into, out_of };

/// How Fresnel terms enter the Mueller matrices. `scalar` keeps only their
/// unpolarised (s0 -> s0) part times the identity; used by the no-pol
/// ablation and by the path tracer's unpolarised reduction.
enum class FresnelMode { polarized, scalar };

MuellerMatrix fresnel_reflect_mueller(double cos_theta, double eta, const ReferenceFrame& frame_in,
                                      const ReferenceFrame& frame_out,
                                      FresnelMode mode = FresnelMode::polarized);

/// For `out_of`, cos_theta is the internal angle and the relative index is
/// 1 / eta. Beyond the critical angle the matrix is zero and `*tir` is set.
MuellerMatrix fresnel_transmit_mueller(double cos_theta, double eta, TransmitDirection direction,
                                       const ReferenceFrame& frame_in,
                                       const ReferenceFrame& frame_out, bool* tir = nullptr,
                                       FresnelMode mode = FresnelMode::polarized);

/// GGX D with alpha = roughness^2; zero for n_dot_h <= 0.
double ggx_d(double n_dot_h, double roughness);

/// Separable Smith G1(wi) * G1(wo).
double smith_g(const ShadingGeometry& geom, double roughness);

/// Input frame: incident light (propagation -wi), x = s-direction of the
/// (n, wi) plane. Output frame: propagation wo, x = s-direction of (n, wo).
ReferenceFrame diffuse_frame_in(const ShadingGeometry& geom);
ReferenceFrame diffuse_frame_out(const ShadingGeometry& geom);
/// Same, with the halfway vector as the plane normal.
ReferenceFrame specular_frame_in(const ShadingGeometry& geom);
ReferenceFrame specular_frame_out(const ShadingGeometry& geom);

/// (rho / pi) cos(theta_i) F^T_o . diag(1, 0, 0) . F^T_i per channel.
MuellerMatrix diffuse_mueller(const PbrdfParams& params, const ShadingGeometry& geom,
                              FresnelMode mode = FresnelMode::polarized);

/// k_s D G / (4 cos(theta_o)) F^R(cos theta_d), theta_d the angle between wi
/// and h. Zero when n.h <= 0.
MuellerMatrix specular_mueller(const PbrdfParams& params, const ShadingGeometry& geom,
                               FresnelMode mode = FresnelMode::polarized);

Vec3 reflect(const Vec3& v, const Vec3& n);
/// Refraction of a travelling direction `d` through a surface with normal
/// `n` (n facing the incoming side) for relative index eta; false on TIR.
bool refract(const Vec3& d, const Vec3& n, double eta, Vec3* out);

}  // namespace neisf
