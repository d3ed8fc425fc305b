#pragma once

// Linear Stokes / Mueller algebra with explicit reference frames.
//
// Conventions used throughout the project:
//  * A Stokes vector is [s0, s1, s2]; s1 is 0deg-over-90deg and s2 is
//    45deg-over-135deg, both measured in the frame's (x, y) basis.
//  * A frame is right-handed: y = propagation x x_axis.
//  * A rotation by +phi turns x_axis toward y_axis when looking along the
//    propagation direction. The matching Stokes rotator is
//        [[1, 0, 0], [0, cos2phi, sin2phi], [0, -sin2phi, cos2phi]].

#include <array>
#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace neisf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rgb = Eigen::Array3d;

class FrameMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class PropagationMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ReferenceFrame {
    Vec3 propagation = Vec3::UnitZ();
    Vec3 x_axis = Vec3::UnitX();

    Vec3 y_axis() const { return propagation.cross(x_axis); }
    bool valid(double tol = 1e-9) const;

    /// Builds a frame and throws std::invalid_argument if it is not orthonormal.
    static ReferenceFrame make(const Vec3& propagation, const Vec3& x_axis);
};

/// Deterministic frame for a bare propagation direction (used for path
/// segments whose basis nobody else constrains).
ReferenceFrame canonical_frame(const Vec3& propagation);

/// Frame whose x-axis is the normal of the plane spanned by `plane_normal`
/// and `direction` (the s-polarisation direction of an interaction). Falls
/// back to canonical_frame(propagation).x_axis when the plane is degenerate
/// (|plane_normal x direction| < 1e-8).
ReferenceFrame interaction_frame(const Vec3& plane_normal, const Vec3& direction,
                                 const Vec3& propagation);

bool frames_match(const ReferenceFrame& a, const ReferenceFrame& b, double tol = 1e-9);

/// Stokes vectors for three colour channels; row = component, column = channel.
using StokesRgb = Mat3;

struct FramedStokes {
    StokesRgb s = StokesRgb::Zero();
    ReferenceFrame frame;

    static FramedStokes unpolarized(const Rgb& intensity, const ReferenceFrame& frame);
    Eigen::Vector3d channel(int c) const { return s.col(c); }
};

struct MuellerMatrix {
    std::array<Mat3, 3> m{Mat3::Zero(), Mat3::Zero(), Mat3::Zero()};
    ReferenceFrame frame_in;
    ReferenceFrame frame_out;

    static MuellerMatrix zero(const ReferenceFrame& in, const ReferenceFrame& out);
    static MuellerMatrix uniform(const Mat3& m, const ReferenceFrame& in,
                                 const ReferenceFrame& out);

    MuellerMatrix& operator*=(double k);
    MuellerMatrix& scale_channels(const Rgb& k);
    /// Sum of two matrices that act between the same pair of frames.
    MuellerMatrix& operator+=(const MuellerMatrix& other);
};

/// The raw 3x3 rotator for angle phi.
Mat3 rotation_matrix(double phi);

/// R(phi) acting on Stokes vectors expressed in `frame_in`; frame_out is
/// frame_in rotated by phi about its propagation axis.
MuellerMatrix rotator(double phi, const ReferenceFrame& frame_in);

/// Signed angle phi such that rotator(phi, from).frame_out == to.
/// Throws PropagationMismatch unless dot(from.prop, to.prop) > 1 - 1e-6.
double relative_rotation_angle(const ReferenceFrame& from, const ReferenceFrame& to);

/// Rotator taking Stokes vectors from `from` to `to`, with frame_out set to
/// `to` exactly.
MuellerMatrix rotate_between(const ReferenceFrame& from, const ReferenceFrame& to);

/// Throws FrameMismatch unless s.frame matches M.frame_in.
FramedStokes mueller_apply(const MuellerMatrix& M, const FramedStokes& s);

/// outer * inner; throws FrameMismatch unless inner.frame_out matches outer.frame_in.
MuellerMatrix mueller_compose(const MuellerMatrix& outer, const MuellerMatrix& inner);

FramedStokes rotate_stokes(const FramedStokes& s, const ReferenceFrame& to);

struct DolpResult {
    Rgb value = Rgb::Zero();
    std::array<bool, 3> zero_intensity{false, false, false};
};

struct AolpResult {
    Rgb angle = Rgb::Zero();
    std::array<bool, 3> undefined{false, false, false};
};

/// sqrt(s1^2 + s2^2) / s0 clamped to [0, 1 + 1e-6]; zero with a flag when s0 <= 0.
double dolp(const Eigen::Vector3d& s, bool* zero_intensity = nullptr);
DolpResult dolp(const FramedStokes& s);

/// 0.5 * atan2(s2, s1) in (-pi/2, pi/2]; zero with a flag when s1 = s2 = 0.
double aolp(const Eigen::Vector3d& s, bool* undefined = nullptr);
AolpResult aolp(const FramedStokes& s);

}  // namespace neisf
