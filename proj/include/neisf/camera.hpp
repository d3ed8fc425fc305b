#pragma once

// Pinhole cameras in the OpenCV convention (x right, y down, z forward) and
// the per-pixel Stokes reference frame used by every image in the project.

#include <vector>

#include <Eigen/Core>

#include "neisf/polcore.hpp"
#include "neisf/scene.hpp"

namespace neisf {

struct Camera {
    int width = 64;
    int height = 64;
    Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
    Eigen::Matrix4d cam_to_world = Eigen::Matrix4d::Identity();
    /// Extra rotation of every pixel's Stokes basis about the viewing ray.
    double stokes_basis_roll = 0.0;

    static Camera look_at(const Vec3& eye, const Vec3& target, int width, int height,
                          double fov_deg, const Vec3& up = Vec3::UnitY());

    Vec3 position() const { return cam_to_world.block<3, 1>(0, 3); }
    Eigen::Matrix3d rotation() const { return cam_to_world.block<3, 3>(0, 0); }

    /// Ray through the centre of pixel (px, py), py counted from the top row.
    Ray pixel_ray(int px, int py) const;
    Ray ray(double u, double v) const;

    /// Frame of light arriving along -dir: x = camera right projected onto the
    /// transverse plane, then rolled by stokes_basis_roll.
    ReferenceFrame pixel_frame(const Vec3& dir) const;

    /// Pixel coordinates (continuous, top-left origin) of a world point;
    /// false if it lies behind the camera.
    bool project(const Vec3& x, Eigen::Vector2d* uv) const;
};

struct View {
    int index = 0;
    bool test = false;
    Camera camera;
};

/// Deterministic poses on a spherical band around the rig target: train
/// views first, then test views interleaved between them in azimuth.
std::vector<View> rig_views(const CameraRig& rig);

}  // namespace neisf
