#pragma once

// Scalar building blocks of the polarimetric BRDF, written once and
// instantiated for plain doubles (path tracer) and for ad::Var columns
// (differentiable renderer).

#include <cmath>
#include <numbers>

#include "neisf/ad.hpp"

namespace neisf {

inline constexpr double kMinRoughness = 0.01;
inline constexpr double kMinCosine = 1e-4;

/// Mueller block [[a, b, 0], [b, a, 0], [0, 0, c]] in the s/p basis
/// (x-axis = s direction).
template <class T>
struct FresnelBlock {
    T a;
    T b;
    T c;
};

/// Reflection amplitudes for relative index eta = n_t / n_i at cos_i.
/// c = r_s * r_p in the right-handed reflected basis, i.e. sqrt(Rs Rp) cos(delta).
template <class T>
FresnelBlock<T> fresnel_reflection_block(const T& cos_i, double eta)
{
    using std::sqrt;
    const T sin2_t = (1.0 - cos_i * cos_i) * (1.0 / (eta * eta));
    const T cos_t = sqrt(clamp_min(1.0 - sin2_t, 0.0));
    const T rs = (cos_i - eta * cos_t) / (cos_i + eta * cos_t);
    const T rp = (eta * cos_i - cos_t) / (eta * cos_i + cos_t);
    const T Rs = rs * rs;
    const T Rp = rp * rp;
    return {(Rs + Rp) * 0.5, (Rs - Rp) * 0.5, rs * rp};
}

/// Transmission block with the radiometric factor folded in, so a = the
/// unpolarised Fresnel transmittance and (Ts, Tp) = (1 - Rs, 1 - Rp).
template <class T>
FresnelBlock<T> fresnel_transmission_block(const T& cos_i, double eta)
{
    using std::sqrt;
    const T sin2_t = (1.0 - cos_i * cos_i) * (1.0 / (eta * eta));
    const T cos_t = sqrt(clamp_min(1.0 - sin2_t, 0.0));
    const T rs = (cos_i - eta * cos_t) / (cos_i + eta * cos_t);
    const T rp = (eta * cos_i - cos_t) / (eta * cos_i + cos_t);
    const T Ts = 1.0 - rs * rs;
    const T Tp = 1.0 - rp * rp;
    return {(Ts + Tp) * 0.5, (Ts - Tp) * 0.5, sqrt(clamp_min(Ts * Tp, 0.0))};
}

/// GGX normal distribution with alpha = roughness^2 (no back-facing test).
template <class T>
T ggx_distribution(const T& n_dot_h, const T& roughness)
{
    const T alpha = roughness * roughness;
    const T a2 = alpha * alpha;
    const T denom = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    return a2 / (std::numbers::pi * denom * denom);
}

/// Smith masking for one direction, GGX Lambda, cos_theta measured to the
/// macro normal.
template <class T>
T smith_g1(const T& cos_theta, const T& roughness)
{
    using std::sqrt;
    const T alpha = roughness * roughness;
    const T a2 = alpha * alpha;
    const T c2 = cos_theta * cos_theta;
    return 2.0 * cos_theta / (cos_theta + sqrt(a2 + (1.0 - a2) * c2));
}

}  // namespace neisf
