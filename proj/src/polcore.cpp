#include "neisf/polcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace neisf {

namespace {

constexpr double kFrameTol = 1e-9;
constexpr double kDegenerateCross = 1e-8;

void require_match(const ReferenceFrame& expected, const ReferenceFrame& got,
                   const char* what)
{
    if (!frames_match(expected, got))
        throw FrameMismatch(std::string(what) + ": Stokes/Mueller reference frames differ");
}

}  // namespace

bool ReferenceFrame::valid(double tol) const
{
    return std::abs(propagation.norm() - 1.0) <= tol && std::abs(x_axis.norm() - 1.0) <= tol &&
           std::abs(propagation.dot(x_axis)) <= tol;
}

ReferenceFrame ReferenceFrame::make(const Vec3& propagation, const Vec3& x_axis)
{
    ReferenceFrame f{propagation, x_axis};
    if (!f.valid(kFrameTol))
        throw std::invalid_argument("ReferenceFrame: axes are not orthonormal");
    return f;
}

ReferenceFrame canonical_frame(const Vec3& propagation)
{
    const Vec3 helper = std::abs(propagation.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    Vec3 x = helper - helper.dot(propagation) * propagation;
    return {propagation, x.normalized()};
}

ReferenceFrame interaction_frame(const Vec3& plane_normal, const Vec3& direction,
                                 const Vec3& propagation)
{
    Vec3 s = plane_normal.cross(direction);
    const double len = s.norm();
    if (len < kDegenerateCross)
        return canonical_frame(propagation);
    return {propagation, s / len};
}

bool frames_match(const ReferenceFrame& a, const ReferenceFrame& b, double tol)
{
    if (&a == &b)
        return true;
    return (a.propagation - b.propagation).norm() < tol && (a.x_axis - b.x_axis).norm() < tol;
}

FramedStokes FramedStokes::unpolarized(const Rgb& intensity, const ReferenceFrame& frame)
{
    FramedStokes out;
    out.s.row(0) = intensity.matrix().transpose();
    out.frame = frame;
    return out;
}

MuellerMatrix MuellerMatrix::zero(const ReferenceFrame& in, const ReferenceFrame& out)
{
    MuellerMatrix M;
    M.frame_in = in;
    M.frame_out = out;
    return M;
}

MuellerMatrix MuellerMatrix::uniform(const Mat3& m, const ReferenceFrame& in,
                                     const ReferenceFrame& out)
{
    MuellerMatrix M{{m, m, m}, in, out};
    return M;
}

MuellerMatrix& MuellerMatrix::operator*=(double k)
{
    for (auto& c : m)
        c *= k;
    return *this;
}

MuellerMatrix& MuellerMatrix::scale_channels(const Rgb& k)
{
    for (int c = 0; c < 3; ++c)
        m[c] *= k[c];
    return *this;
}

MuellerMatrix& MuellerMatrix::operator+=(const MuellerMatrix& other)
{
    require_match(frame_in, other.frame_in, "MuellerMatrix::operator+= (input)");
    require_match(frame_out, other.frame_out, "MuellerMatrix::operator+= (output)");
    for (int c = 0; c < 3; ++c)
        m[c] += other.m[c];
    return *this;
}

Mat3 rotation_matrix(double phi)
{
    const double c = std::cos(2.0 * phi);
    const double s = std::sin(2.0 * phi);
    Mat3 R;
    R << 1.0, 0.0, 0.0,
         0.0, c, s,
         0.0, -s, c;
    return R;
}

MuellerMatrix rotator(double phi, const ReferenceFrame& frame_in)
{
    const Vec3 x = std::cos(phi) * frame_in.x_axis + std::sin(phi) * frame_in.y_axis();
    ReferenceFrame out{frame_in.propagation, x.normalized()};
    return MuellerMatrix::uniform(rotation_matrix(phi), frame_in, out);
}

double relative_rotation_angle(const ReferenceFrame& from, const ReferenceFrame& to)
{
    if (from.propagation.dot(to.propagation) <= 1.0 - 1e-6)
        throw PropagationMismatch("relative_rotation_angle: frames do not share a propagation axis");
    return std::atan2(to.x_axis.dot(from.y_axis()), to.x_axis.dot(from.x_axis));
}

MuellerMatrix rotate_between(const ReferenceFrame& from, const ReferenceFrame& to)
{
    MuellerMatrix R = rotator(relative_rotation_angle(from, to), from);
    R.frame_out = to;
    return R;
}

FramedStokes mueller_apply(const MuellerMatrix& M, const FramedStokes& s)
{
    require_match(M.frame_in, s.frame, "mueller_apply");
    FramedStokes out;
    for (int c = 0; c < 3; ++c)
        out.s.col(c) = M.m[c] * s.s.col(c);
    out.frame = M.frame_out;
    return out;
}

MuellerMatrix mueller_compose(const MuellerMatrix& outer, const MuellerMatrix& inner)
{
    require_match(outer.frame_in, inner.frame_out, "mueller_compose");
    MuellerMatrix out;
    for (int c = 0; c < 3; ++c)
        out.m[c] = outer.m[c] * inner.m[c];
    out.frame_in = inner.frame_in;
    out.frame_out = outer.frame_out;
    return out;
}

FramedStokes rotate_stokes(const FramedStokes& s, const ReferenceFrame& to)
{
    return mueller_apply(rotate_between(s.frame, to), s);
}

double dolp(const Eigen::Vector3d& s, bool* zero_intensity)
{
    if (zero_intensity)
        *zero_intensity = false;
    if (!(s[0] > 0.0)) {
        if (zero_intensity)
            *zero_intensity = true;
        return 0.0;
    }
    const double p = std::hypot(s[1], s[2]) / s[0];
    return std::clamp(p, 0.0, 1.0 + 1e-6);
}

DolpResult dolp(const FramedStokes& s)
{
    DolpResult r;
    for (int c = 0; c < 3; ++c) {
        bool flag = false;
        r.value[c] = dolp(Eigen::Vector3d(s.s.col(c)), &flag);
        r.zero_intensity[c] = flag;
    }
    return r;
}

double aolp(const Eigen::Vector3d& s, bool* undefined)
{
    if (undefined)
        *undefined = false;
    if (s[1] == 0.0 && s[2] == 0.0) {
        if (undefined)
            *undefined = true;
        return 0.0;
    }
    double a = 0.5 * std::atan2(s[2], s[1]);
    if (a <= -0.5 * std::numbers::pi)
        a += std::numbers::pi;
    return a;
}

AolpResult aolp(const FramedStokes& s)
{
    AolpResult r;
    for (int c = 0; c < 3; ++c) {
        bool flag = false;
        r.angle[c] = aolp(Eigen::Vector3d(s.s.col(c)), &flag);
        r.undefined[c] = flag;
    }
    return r;
}

}  // namespace neisf
