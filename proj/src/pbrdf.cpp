#include "neisf/pbrdf.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace neisf {

namespace {

Mat3 block_matrix(const FresnelBlock<double>& f, FresnelMode mode)
{
    Mat3 m = Mat3::Zero();
    if (mode == FresnelMode::scalar) {
        m.diagonal().setConstant(f.a);
        return m;
    }
    m << f.a, f.b, 0.0,
         f.b, f.a, 0.0,
         0.0, 0.0, f.c;
    return m;
}

}  // namespace

void PbrdfParams::validate() const
{
    if ((rho < 0.0).any() || (rho > 1.0).any())
        throw std::invalid_argument("PbrdfParams: albedo outside [0, 1]");
    if (!(roughness >= kMinRoughness && roughness <= 1.0))
        throw std::invalid_argument("PbrdfParams: roughness outside [0.01, 1]");
    if (!(eta > 1.0))
        throw std::invalid_argument("PbrdfParams: refractive index must exceed 1");
}

ShadingGeometry ShadingGeometry::make(const Vec3& n, const Vec3& wi, const Vec3& wo)
{
    ShadingGeometry g{n, wi, wo, (wi + wo).normalized()};
    return g;
}

Vec3 reflect(const Vec3& v, const Vec3& n) { return 2.0 * v.dot(n) * n - v; }

bool refract(const Vec3& d, const Vec3& n, double eta, Vec3* out)
{
    const double cos_i = -d.dot(n);
    const double sin2_t = (1.0 - cos_i * cos_i) / (eta * eta);
    if (sin2_t > 1.0)
        return false;
    const double cos_t = std::sqrt(1.0 - sin2_t);
    *out = (d / eta + (cos_i / eta - cos_t) * n).normalized();
    return true;
}

MuellerMatrix fresnel_reflect_mueller(double cos_theta, double eta, const ReferenceFrame& frame_in,
                                      const ReferenceFrame& frame_out, FresnelMode mode)
{
    const double c = std::clamp(cos_theta, kMinCosine, 1.0);
    return MuellerMatrix::uniform(block_matrix(fresnel_reflection_block(c, eta), mode), frame_in,
                                  frame_out);
}

MuellerMatrix fresnel_transmit_mueller(double cos_theta, double eta, TransmitDirection direction,
                                       const ReferenceFrame& frame_in,
                                       const ReferenceFrame& frame_out, bool* tir,
                                       FresnelMode mode)
{
    const double c = std::clamp(cos_theta, kMinCosine, 1.0);
    const double rel = direction == TransmitDirection::into ? eta : 1.0 / eta;
    if (tir)
        *tir = false;
    if ((1.0 - c * c) / (rel * rel) > 1.0) {
        if (tir)
            *tir = true;
        return MuellerMatrix::zero(frame_in, frame_out);
    }
    return MuellerMatrix::uniform(block_matrix(fresnel_transmission_block(c, rel), mode),
                                  frame_in, frame_out);
}

double ggx_d(double n_dot_h, double roughness)
{
    if (n_dot_h <= 0.0)
        return 0.0;
    return ggx_distribution(n_dot_h, std::max(roughness, kMinRoughness));
}

double smith_g(const ShadingGeometry& geom, double roughness)
{
    const double r = std::max(roughness, kMinRoughness);
    const double ci = std::max(geom.cos_i(), kMinCosine);
    const double co = std::max(geom.cos_o(), kMinCosine);
    return smith_g1(ci, r) * smith_g1(co, r);
}

ReferenceFrame diffuse_frame_in(const ShadingGeometry& g)
{
    return interaction_frame(g.n, g.wi, -g.wi);
}

ReferenceFrame diffuse_frame_out(const ShadingGeometry& g)
{
    return interaction_frame(g.n, g.wo, g.wo);
}

ReferenceFrame specular_frame_in(const ShadingGeometry& g)
{
    return interaction_frame(g.h, g.wi, -g.wi);
}

ReferenceFrame specular_frame_out(const ShadingGeometry& g)
{
    return interaction_frame(g.h, g.wo, g.wo);
}

MuellerMatrix diffuse_mueller(const PbrdfParams& params, const ShadingGeometry& geom,
                              FresnelMode mode)
{
    const ReferenceFrame in = diffuse_frame_in(geom);
    const ReferenceFrame out = diffuse_frame_out(geom);
    const double cos_i = std::clamp(geom.cos_i(), kMinCosine, 1.0);

    // Refracted directions inside the material, for the intermediate frames.
    Vec3 t_in, t_out;
    refract(-geom.wi, geom.n, params.eta, &t_in);
    refract(-geom.wo, geom.n, params.eta, &t_out);
    const Vec3 exit_dir = -t_out;
    const ReferenceFrame inside_in = interaction_frame(geom.n, geom.wi, t_in);
    const ReferenceFrame inside_out = interaction_frame(geom.n, geom.wo, exit_dir);

    const MuellerMatrix Fi =
        fresnel_transmit_mueller(cos_i, params.eta, TransmitDirection::into, in, inside_in, nullptr, mode);
    Mat3 depol = Mat3::Zero();
    depol(0, 0) = 1.0;
    const MuellerMatrix D = MuellerMatrix::uniform(depol, inside_in, inside_out);
    const MuellerMatrix Fo = fresnel_transmit_mueller(geom.n.dot(exit_dir), params.eta,
                                                      TransmitDirection::out_of, inside_out, out,
                                                      nullptr, mode);

    MuellerMatrix M = mueller_compose(Fo, mueller_compose(D, Fi));
    M.scale_channels(params.rho * (cos_i / std::numbers::pi));
    return M;
}

MuellerMatrix specular_mueller(const PbrdfParams& params, const ShadingGeometry& geom,
                               FresnelMode mode)
{
    const ReferenceFrame in = specular_frame_in(geom);
    const ReferenceFrame out = specular_frame_out(geom);
    const double n_dot_h = geom.n.dot(geom.h);
    if (n_dot_h <= 0.0)
        return MuellerMatrix::zero(in, out);
    const double D = ggx_d(n_dot_h, params.roughness);
    const double G = smith_g(geom, params.roughness);
    const double cos_o = std::max(geom.cos_o(), kMinCosine);
    const double cos_d = geom.wi.dot(geom.h);
    MuellerMatrix M = fresnel_reflect_mueller(cos_d, params.eta, in, out, mode);
    M *= D * G / (4.0 * cos_o);
    M.scale_channels(params.ks);
    return M;
}

}  // namespace neisf
