#include "neisf/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace neisf {

namespace {

static_assert(std::endian::native == std::endian::little,
              "float files are written by memcpy and assume a little-endian host");

std::ofstream open_out(const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw ImageIoError("cannot open " + path + " for writing");
    return out;
}

std::ifstream open_in(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ImageIoError("cannot open " + path);
    return in;
}

void put_u32(char* dst, std::uint32_t v) { std::memcpy(dst, &v, 4); }

std::uint32_t get_u32(const char* src)
{
    std::uint32_t v;
    std::memcpy(&v, src, 4);
    return v;
}

const char kLayoutTag[] = "s0r s0g s0b s1r s1g s1b s2r s2g s2b";

}  // namespace

Image PolarizedImage::component(int c) const
{
    Image img(width, height, 3);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int ch = 0; ch < 3; ++ch)
                img.at(x, y, ch) = at(c, ch, x, y);
    return img;
}

void write_pfm(const std::string& path, const Image& img)
{
    if (img.channels != 1 && img.channels != 3)
        throw ImageIoError("PFM supports 1 or 3 channels: " + path);
    std::ofstream out = open_out(path);
    out << (img.channels == 3 ? "PF" : "Pf") << '\n' << img.width << ' ' << img.height << "\n-1.0\n";
    const std::size_t row = std::size_t(img.width) * img.channels;
    for (int y = img.height - 1; y >= 0; --y)
        out.write(reinterpret_cast<const char*>(img.data.data() + y * row), row * sizeof(float));
    if (!out)
        throw ImageIoError("write failed: " + path);
}

Image read_pfm(const std::string& path)
{
    std::ifstream in = open_in(path);
    std::string magic;
    int w = 0;
    int h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    in.get();
    if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0)
        throw ImageIoError("malformed PFM header: " + path);
    if (scale > 0.0)
        throw ImageIoError("big-endian PFM not supported: " + path);
    Image img(w, h, magic == "PF" ? 3 : 1);
    const std::size_t row = std::size_t(w) * img.channels;
    for (int y = h - 1; y >= 0; --y)
        in.read(reinterpret_cast<char*>(img.data.data() + y * row), row * sizeof(float));
    if (!in)
        throw ImageIoError("truncated PFM: " + path);
    return img;
}

void write_pstk(const std::string& path, const PolarizedImage& img)
{
    char header[64] = {};
    std::memcpy(header, kPstkMagic, 4);
    put_u32(header + 4, kPstkVersion);
    put_u32(header + 8, static_cast<std::uint32_t>(img.width));
    put_u32(header + 12, static_cast<std::uint32_t>(img.height));
    put_u32(header + 16, PolarizedImage::kPlanes);
    std::memcpy(header + 24, kLayoutTag, sizeof(kLayoutTag) - 1);
    std::ofstream out = open_out(path);
    out.write(header, sizeof(header));
    out.write(reinterpret_cast<const char*>(img.planes.data()), img.planes.size() * sizeof(float));
    if (!out)
        throw ImageIoError("write failed: " + path);
}

PolarizedImage read_pstk(const std::string& path)
{
    std::ifstream in = open_in(path);
    char header[64];
    in.read(header, sizeof(header));
    if (!in || std::memcmp(header, kPstkMagic, 4) != 0)
        throw ImageIoError("not a PSTK file: " + path);
    if (get_u32(header + 4) != kPstkVersion)
        throw ImageIoError("unsupported PSTK version in " + path);
    const std::uint32_t w = get_u32(header + 8);
    const std::uint32_t h = get_u32(header + 12);
    if (get_u32(header + 16) != PolarizedImage::kPlanes || w == 0 || h == 0 || w > 1u << 16 ||
        h > 1u << 16)
        throw ImageIoError("malformed PSTK header: " + path);
    PolarizedImage img(static_cast<int>(w), static_cast<int>(h));
    in.read(reinterpret_cast<char*>(img.planes.data()), img.planes.size() * sizeof(float));
    if (!in)
        throw ImageIoError("truncated PSTK: " + path);
    return img;
}

PolarizedImage stokes_from_angles(const AngleImages& a)
{
    const Image& i0 = a.intensity[0];
    for (const Image& im : a.intensity)
        if (im.width != i0.width || im.height != i0.height || im.channels != i0.channels)
            throw ImageIoError("angle images differ in size");
    PolarizedImage s(i0.width, i0.height);
    const int channels = std::min(i0.channels, 3);
    for (int y = 0; y < i0.height; ++y)
        for (int x = 0; x < i0.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src = std::min(c, channels - 1);
                const float v0 = a.intensity[0].at(x, y, src);
                const float v45 = a.intensity[1].at(x, y, src);
                const float v90 = a.intensity[2].at(x, y, src);
                const float v135 = a.intensity[3].at(x, y, src);
                s.at(0, c, x, y) = 0.5f * (v0 + v45 + v90 + v135);
                s.at(1, c, x, y) = v0 - v90;
                s.at(2, c, x, y) = v45 - v135;
            }
    return s;
}

AngleImages angles_from_stokes(const PolarizedImage& s)
{
    AngleImages a;
    const double angles[4] = {0.0, 0.25, 0.5, 0.75};  // in units of pi
    for (int k = 0; k < 4; ++k) {
        Image img(s.width, s.height, 3);
        const double c2 = std::cos(2.0 * M_PI * angles[k]);
        const double s2 = std::sin(2.0 * M_PI * angles[k]);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(x, y, c) = static_cast<float>(
                        0.5 * (s.at(0, c, x, y) + c2 * s.at(1, c, x, y) + s2 * s.at(2, c, x, y)));
        a.intensity[k] = std::move(img);
    }
    return a;
}

}  // namespace neisf
