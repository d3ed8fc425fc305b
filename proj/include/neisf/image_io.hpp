#pragma once

// Float image containers and their on-disk formats:
//  * PFM (little-endian, rows stored bottom to top), 1 or 3 channels.
//  * PSTK: nine float32 planes (s0, s1, s2 for r, g, b) behind a 64-byte header.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace neisf {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Interleaved, row-major, top row first.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c) : width(w), height(h), channels(c), data(std::size_t(w) * h * c, 0.0f) {}

    float& at(int x, int y, int c = 0) { return data[(std::size_t(y) * width + x) * channels + c]; }
    float at(int x, int y, int c = 0) const { return data[(std::size_t(y) * width + x) * channels + c]; }
};

/// Planes in the order s0_r, s0_g, s0_b, s1_r, ..., s2_b; each plane is
/// row-major with the top row first.
struct PolarizedImage {
    static constexpr int kPlanes = 9;
    int width = 0;
    int height = 0;
    std::vector<float> planes;

    PolarizedImage() = default;
    PolarizedImage(int w, int h) : width(w), height(h), planes(std::size_t(w) * h * kPlanes, 0.0f) {}

    float& at(int component, int channel, int x, int y)
    {
        return planes[plane_offset(component * 3 + channel) + std::size_t(y) * width + x];
    }
    float at(int component, int channel, int x, int y) const
    {
        return planes[plane_offset(component * 3 + channel) + std::size_t(y) * width + x];
    }
    std::size_t plane_offset(int plane) const { return std::size_t(plane) * width * height; }

    /// One Stokes component as a 3-channel image.
    Image component(int c) const;
};

void write_pfm(const std::string& path, const Image& img);
Image read_pfm(const std::string& path);

inline constexpr char kPstkMagic[4] = {'P', 'S', 'T', 'K'};
inline constexpr std::uint32_t kPstkVersion = 1;

void write_pstk(const std::string& path, const PolarizedImage& img);
PolarizedImage read_pstk(const std::string& path);

/// Four linear-polariser intensity images at 0, 45, 90 and 135 degrees.
struct AngleImages {
    std::array<Image, 4> intensity;
};

/// s0 = (I0 + I45 + I90 + I135) / 2, s1 = I0 - I90, s2 = I45 - I135.
PolarizedImage stokes_from_angles(const AngleImages& a);
/// I_theta = (s0 + s1 cos 2theta + s2 sin 2theta) / 2.
AngleImages angles_from_stokes(const PolarizedImage& s);

}  // namespace neisf
