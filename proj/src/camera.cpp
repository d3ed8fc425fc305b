#include "neisf/camera.hpp"

#include <cmath>
#include <numbers>

namespace neisf {

Camera Camera::look_at(const Vec3& eye, const Vec3& target, int width, int height,
                       double fov_deg, const Vec3& up)
{
    Camera c;
    c.width = width;
    c.height = height;
    const double f = 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
    c.K << f, 0, 0.5 * width,
           0, f, 0.5 * height,
           0, 0, 1;
    const Vec3 z = (target - eye).normalized();
    Vec3 x = z.cross(up);
    if (x.norm() < 1e-9)
        x = z.cross(Vec3::UnitX());
    x.normalize();
    const Vec3 y = z.cross(x);
    c.cam_to_world.setIdentity();
    c.cam_to_world.block<3, 1>(0, 0) = x;
    c.cam_to_world.block<3, 1>(0, 1) = y;
    c.cam_to_world.block<3, 1>(0, 2) = z;
    c.cam_to_world.block<3, 1>(0, 3) = eye;
    return c;
}

Ray Camera::ray(double u, double v) const
{
    const Vec3 local((u - K(0, 2)) / K(0, 0), (v - K(1, 2)) / K(1, 1), 1.0);
    return {position(), (rotation() * local).normalized()};
}

Ray Camera::pixel_ray(int px, int py) const { return ray(px + 0.5, py + 0.5); }

ReferenceFrame Camera::pixel_frame(const Vec3& dir) const
{
    const Vec3 prop = -dir;
    const Vec3 right = rotation().col(0);
    Vec3 x = right - right.dot(prop) * prop;
    if (x.norm() < 1e-8)
        return canonical_frame(prop);
    ReferenceFrame f{prop, x.normalized()};
    if (stokes_basis_roll != 0.0)
        f = rotator(stokes_basis_roll, f).frame_out;
    return f;
}

bool Camera::project(const Vec3& x, Eigen::Vector2d* uv) const
{
    const Vec3 local = rotation().transpose() * (x - position());
    if (local.z() <= 0.0)
        return false;
    *uv = {K(0, 0) * local.x() / local.z() + K(0, 2), K(1, 1) * local.y() / local.z() + K(1, 2)};
    return true;
}

std::vector<View> rig_views(const CameraRig& rig)
{
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    const double deg = std::numbers::pi / 180.0;
    std::vector<View> views;
    auto place = [&](int i, int n, double az_offset, bool test) {
        const double t = n > 1 ? (i + 0.5) / n : 0.5;
        const double elev = (rig.elevation_min_deg + t * (rig.elevation_max_deg - rig.elevation_min_deg)) * deg;
        const double az = i * golden + az_offset;
        const Vec3 dir(std::cos(elev) * std::sin(az), std::sin(elev), std::cos(elev) * std::cos(az));
        View v;
        v.index = static_cast<int>(views.size());
        v.test = test;
        v.camera = Camera::look_at(rig.target + rig.radius * dir, rig.target, rig.width, rig.height,
                                   rig.fov_deg);
        views.push_back(v);
    };
    for (int i = 0; i < rig.views; ++i)
        place(i, rig.views, 0.0, false);
    for (int i = 0; i < rig.test_views; ++i)
        place(i, rig.test_views, 0.5 * golden + 1.0, true);
    return views;
}

}  // namespace neisf
