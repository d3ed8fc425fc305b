#include "neisf/renderer.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "neisf/pbrdf_terms.hpp"
#include "neisf/tracer.hpp"

namespace neisf {

using ad::Array;
using ad::Tape;
using ad::V3;
using ad::Var;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kChunk = 256;

Var clamp_cos(const Var& c) { return ad::clamp_max(ad::clamp_min(c, kMinCosine), 1.0); }

Array cross_rows(const Array& a, const Array& b)
{
    Array out(a.rows(), 3);
    out.col(0) = a.col(1) * b.col(2) - a.col(2) * b.col(1);
    out.col(1) = a.col(2) * b.col(0) - a.col(0) * b.col(2);
    out.col(2) = a.col(0) * b.col(1) - a.col(1) * b.col(0);
    return out;
}

Array normalize_rows(const Array& a)
{
    Array out = a;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double len = a.row(i).matrix().norm();
        out.row(i) = len > 1e-12 ? Array(a.row(i) / len) : Array::Zero(1, 3);
    }
    return out;
}

Array repeat_array_rows(const Array& a, Eigen::Index k)
{
    Array out(a.rows() * k, a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        out.middleRows(i * k, k) = a.row(i).replicate(k, 1);
    return out;
}

}  // namespace

// ---------------------------------------------------------------- quadrature

Array fibonacci_local(int n)
{
    if (n < 1)
        throw std::invalid_argument("fibonacci_hemisphere: need at least one direction");
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    Array d(n, 3);
    for (int i = 0; i < n; ++i) {
        const double z = 1.0 - (i + 0.5) / n;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * i;
        d(i, 0) = r * std::cos(phi);
        d(i, 1) = r * std::sin(phi);
        d(i, 2) = z;
    }
    return d;
}

Mat3 rotation_from_z(const Vec3& normal)
{
    const Vec3 n = normal.normalized();
    const double c = n.z();
    if (c < -1.0 + 1e-12)
        return Vec3(1.0, -1.0, -1.0).asDiagonal();
    const Vec3 v = Vec3::UnitZ().cross(n);
    Mat3 vx;
    vx << 0.0, -v.z(), v.y(),
          v.z(), 0.0, -v.x(),
          -v.y(), v.x(), 0.0;
    return Mat3::Identity() + vx + vx * vx / (1.0 + c);
}

QuadratureSet fibonacci_hemisphere(int n, const Vec3& normal)
{
    const Array local = fibonacci_local(n);
    const Mat3 R = rotation_from_z(normal);
    QuadratureSet q;
    q.weight = 2.0 * kPi / n;
    q.directions.reserve(n);
    for (int i = 0; i < n; ++i)
        q.directions.push_back(R * local.row(i).transpose().matrix());
    return q;
}

// ------------------------------------------------------------------- shading

StokesVar shade_diffuse(Tape& tape, const ShadeInputs& in, const IncidentVar& incident,
                        FresnelMode mode)
{
    const int J = in.per_ray;
    const V3 n = in.normal;
    const V3 nr = ad::repeat_rows(n, J);
    const V3 wi = ad::v3_constant(tape, in.dirs);
    const V3 wo = ad::v3_constant(tape, in.wo);

    const Var cos_i = clamp_cos(ad::dot(nr, wi));
    const Var cos_o = clamp_cos(ad::dot(n, wo));
    const FresnelBlock<Var> Ti = fresnel_transmission_block(cos_i, in.eta);
    const FresnelBlock<Var> To = fresnel_transmission_block(cos_o, in.eta);

    // Row 0 of F_i is [a, b, 0], so the incident s2 never reaches the
    // depolariser; scalar mode keeps only a.
    Var inner = Ti.a * incident.s0;
    if (mode == FresnelMode::polarized)
        inner = inner + Ti.b * incident.dif_s1;
    const Var depolarized =
        ad::sum_groups(inner * cos_i, J) * in.albedo * (in.weight / kPi);

    StokesVar out;
    out.s0 = To.a * depolarized;
    if (mode == FresnelMode::scalar) {
        out.s1 = tape.constant(Array::Zero(out.s0.rows(), 3));
        out.s2 = out.s1;
        return out;
    }
    const Var local_s1 = To.b * depolarized;

    // Rotate from the (n, wo) frame into the camera frame, once per ray.
    const V3 x_d = ad::normalize(ad::cross(n, wo));
    const V3 y_d = ad::cross(wo, x_d);
    const V3 cam_x = ad::v3_constant(tape, in.camera_x);
    const Var c = ad::dot(cam_x, x_d);
    const Var s = ad::dot(cam_x, y_d);
    const Var cos2 = c * c - s * s;
    const Var sin2 = 2.0 * c * s;
    out.s1 = cos2 * local_s1;
    out.s2 = -(sin2 * local_s1);
    return out;
}

StokesVar shade_specular(Tape& tape, const ShadeInputs& in, const IncidentVar& incident,
                         FresnelMode mode, std::vector<char>* backfacing)
{
    const int J = in.per_ray;
    const Eigen::Index R = in.wo.rows();
    const Array wo_rep = repeat_array_rows(in.wo, J);
    const Array h = normalize_rows(in.dirs + wo_rep);

    const V3 n = in.normal;
    const V3 nr = ad::repeat_rows(n, J);
    const V3 wi = ad::v3_constant(tape, in.dirs);
    const V3 wo = ad::v3_constant(tape, in.wo);
    const V3 hv = ad::v3_constant(tape, h);
    const Var rough = ad::repeat_rows(in.roughness, J);

    const Var n_dot_h = ad::dot(nr, hv);
    const ad::Mask front = n_dot_h.value() > 0.0;
    const Var D = ad::select(front, ggx_distribution(ad::clamp_min(n_dot_h, 0.0), rough),
                             tape.constant(Array::Zero(n_dot_h.rows(), 1)));
    const Var cos_o = ad::clamp_min(ad::dot(n, wo), kMinCosine);
    const Var G = smith_g1(clamp_cos(ad::dot(nr, wi)), rough) *
                  smith_g1(ad::repeat_rows(ad::clamp_max(cos_o, 1.0), J), rough);
    const Var k = D * G / ad::repeat_rows(4.0 * cos_o, J) * in.weight;

    // Fresnel reflection at the microfacet; constant given the directions.
    Array fa(h.rows(), 1), fb(h.rows(), 1), fc(h.rows(), 1);
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        const double cd =
            std::clamp((in.dirs.row(i) * h.row(i)).sum(), kMinCosine, 1.0);
        const FresnelBlock<double> f = fresnel_reflection_block(cd, in.eta);
        fa(i, 0) = f.a;
        fb(i, 0) = mode == FresnelMode::polarized ? f.b : 0.0;
        fc(i, 0) = mode == FresnelMode::polarized ? f.c : f.a;
    }
    const Var a = tape.constant(fa);
    const Var b = tape.constant(fb);
    const Var c = tape.constant(fc);

    const Var loc0 = k * (a * incident.s0 + b * incident.spec_s1);
    const Var loc1 = k * (b * incident.s0 + a * incident.spec_s1);
    const Var loc2 = k * (c * incident.spec_s2);

    // Per-direction rotation from the (h, wo) frame into the camera frame.
    const Array x_s = normalize_rows(cross_rows(h, wo_rep));
    const Array y_s = cross_rows(wo_rep, x_s);
    const Array cam = repeat_array_rows(in.camera_x, J);
    const Array cc = (cam * x_s).rowwise().sum();
    const Array ss = (cam * y_s).rowwise().sum();
    const Var cos2 = tape.constant(cc * cc - ss * ss);
    const Var sin2 = tape.constant(2.0 * cc * ss);

    Array facing(R, 1);
    for (Eigen::Index r = 0; r < R; ++r) {
        const bool back = ad::dot(n, wo).value()(r, 0) <= 0.0;
        facing(r, 0) = back ? 0.0 : 1.0;
        if (backfacing) {
            backfacing->resize(R, 0);
            (*backfacing)[r] = back ? 1 : 0;
        }
    }
    const Var keep = tape.constant(facing);
    StokesVar out;
    out.s0 = ad::sum_groups(loc0, J) * keep;
    out.s1 = ad::sum_groups(cos2 * loc1 + sin2 * loc2, J) * keep;
    out.s2 = ad::sum_groups(cos2 * loc2 - sin2 * loc1, J) * keep;
    return out;
}

// ----------------------------------------------------------- pixel pipeline

PixelShading shade_pixels(Tape& tape, const FieldBundle& bundle, const Array& origins,
                          const Array& dirs, const Array& camera_x, const RenderOptions& opt,
                          std::mt19937_64* jitter)
{
    const RaySamples samples = sample_rays(bundle, origins, dirs, opt.sampling, jitter);
    return shade_samples(tape, bundle, samples, camera_x, opt);
}

PixelShading shade_samples(Tape& tape, const FieldBundle& bundle, const RaySamples& samples,
                           const Array& camera_x, const RenderOptions& opt,
                           const DetachedState* replay, DetachedState* record)
{
    const Eigen::Index R = samples.rays;
    const Array& dirs = samples.dirs;
    const int J = opt.quadrature;
    PixelShading out;
    AggregateOptions ao;
    ao.geometry_grad = opt.geometry_grad;
    ao.material = true;
    ao.material_grad = opt.material_grad;
    ao.eikonal = opt.eikonal;
    out.aggregate = volume_aggregate(tape, bundle, samples, ao);
    const Aggregate& agg = out.aggregate;

    out.valid.assign(R, 0);
    out.valid_mask = Array::Zero(R, 1);
    const Array nval = replay ? replay->quad_normals : ad::v3_value(agg.normal);
    const Array x_surf = replay ? replay->x_surf : agg.x_surf;
    if (record) {
        record->quad_normals = nval;
        record->x_surf = x_surf;
    }
    const Array local = fibonacci_local(J);
    Array quad(R * J, 3);
    for (Eigen::Index r = 0; r < R; ++r) {
        const bool ok = !agg.empty[r] && agg.normal_length(r, 0) >= 1e-6;
        out.valid[r] = ok ? 1 : 0;
        out.valid_mask(r, 0) = ok ? 1.0 : 0.0;
        const Mat3 rot = ok ? rotation_from_z(nval.row(r).transpose().matrix()) : Mat3::Identity();
        quad.middleRows(r * J, J) = (local.matrix() * rot.transpose()).array();
    }

    const IncidentVar incident =
        field_incident(tape, bundle, repeat_array_rows(x_surf, J), quad, opt.incident_grad,
                       opt.polarized);
    ShadeInputs si;
    si.normal = agg.normal;
    si.albedo = agg.albedo;
    si.roughness = agg.roughness;
    si.wo = -dirs;
    si.camera_x = camera_x;
    si.dirs = quad;
    si.per_ray = J;
    si.weight = 2.0 * kPi / J;
    const FresnelMode mode = opt.polarized ? FresnelMode::polarized : FresnelMode::scalar;
    const StokesVar dif = shade_diffuse(tape, si, incident, mode);
    const StokesVar spec = shade_specular(tape, si, incident, mode);

    const Var keep = tape.constant(out.valid_mask);
    out.diffuse = {dif.s0 * keep, dif.s1 * keep, dif.s2 * keep};
    out.specular = {spec.s0 * keep, spec.s1 * keep, spec.s2 * keep};
    out.total = {out.diffuse.s0 + out.specular.s0, out.diffuse.s1 + out.specular.s1,
                 out.diffuse.s2 + out.specular.s2};
    return out;
}

namespace {

PixelShading shade_one(Tape& tape, const FieldBundle& bundle, const Ray& ray,
                       const Vec3& camera_x, const RenderOptions& options)
{
    Array o(1, 3), d(1, 3), cx(1, 3);
    o.row(0) = ray.origin.transpose().array();
    d.row(0) = ray.dir.normalized().transpose().array();
    cx.row(0) = camera_x.transpose().array();
    RenderOptions opt = options;
    opt.geometry_grad = opt.material_grad = opt.incident_grad = opt.eikonal = false;
    return shade_pixels(tape, bundle, o, d, cx, opt);
}

}  // namespace

FramedStokes shade_pixel(const FieldBundle& bundle, const Ray& ray, const ReferenceFrame& frame,
                         const RenderOptions& options)
{
    if (frame.propagation.dot(-ray.dir.normalized()) < 1.0 - 1e-9)
        throw FrameMismatch("shade_pixel: frame must propagate along -ray.dir");
    Tape tape;
    const PixelShading p = shade_one(tape, bundle, ray, frame.x_axis, options);
    FramedStokes s;
    s.frame = frame;
    s.s.row(0) = p.total.s0.value().row(0).matrix();
    s.s.row(1) = p.total.s1.value().row(0).matrix();
    s.s.row(2) = p.total.s2.value().row(0).matrix();
    return s;
}

Rgb shade_pixel_nopol(const FieldBundle& bundle, const Ray& ray, const RenderOptions& options)
{
    RenderOptions opt = options;
    opt.polarized = false;
    Tape tape;
    const PixelShading p = shade_one(tape, bundle, ray, canonical_frame(-ray.dir.normalized()).x_axis, opt);
    return p.total.s0.value().row(0).transpose();
}

FieldRender render_fields(const FieldBundle& bundle, const Camera& camera,
                          const RenderOptions& options, const Image* mask, int threads)
{
    const int W = camera.width;
    const int H = camera.height;
    std::vector<int> pixels;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (!mask || mask->at(x, y, 0) > 0.0f)
                pixels.push_back(y * W + x);

    FieldRender out;
    out.stokes = PolarizedImage(W, H);
    out.opacity = Image(W, H, 1);
    out.normal = Image(W, H, 3);
    out.albedo = Image(W, H, 3);
    out.roughness = Image(W, H, 1);
    out.diffuse = Image(W, H, 3);
    out.specular = Image(W, H, 3);

    RenderOptions opt = options;
    opt.geometry_grad = opt.material_grad = opt.incident_grad = opt.eikonal = false;
    const int chunks = static_cast<int>((pixels.size() + kChunk - 1) / kChunk);
    parallel_rows(chunks, threads, [&](int chunk) {
        const std::size_t first = static_cast<std::size_t>(chunk) * kChunk;
        const std::size_t count = std::min<std::size_t>(kChunk, pixels.size() - first);
        Array o(count, 3), d(count, 3), cx(count, 3);
        for (std::size_t i = 0; i < count; ++i) {
            const int p = pixels[first + i];
            const Ray ray = camera.pixel_ray(p % W, p / W);
            o.row(i) = ray.origin.transpose().array();
            d.row(i) = ray.dir.transpose().array();
            cx.row(i) = camera.pixel_frame(ray.dir).x_axis.transpose().array();
        }
        Tape tape;
        const PixelShading s = shade_pixels(tape, bundle, o, d, cx, opt);
        const Array n = ad::v3_value(s.aggregate.normal);
        for (std::size_t i = 0; i < count; ++i) {
            const int p = pixels[first + i];
            const int x = p % W;
            const int y = p / W;
            for (int c = 0; c < 3; ++c) {
                out.stokes.at(0, c, x, y) = static_cast<float>(s.total.s0.value()(i, c));
                out.stokes.at(1, c, x, y) = static_cast<float>(s.total.s1.value()(i, c));
                out.stokes.at(2, c, x, y) = static_cast<float>(s.total.s2.value()(i, c));
                out.diffuse.at(x, y, c) = static_cast<float>(s.diffuse.s0.value()(i, c));
                out.specular.at(x, y, c) = static_cast<float>(s.specular.s0.value()(i, c));
                out.normal.at(x, y, c) = static_cast<float>(s.valid[i] ? n(i, c) : 0.0);
                out.albedo.at(x, y, c) =
                    static_cast<float>(s.valid[i] ? s.aggregate.albedo.value()(i, c) : 0.0);
            }
            out.opacity.at(x, y, 0) = static_cast<float>(s.aggregate.opacity.value()(i, 0));
            out.roughness.at(x, y, 0) =
                static_cast<float>(s.valid[i] ? s.aggregate.roughness.value()(i, 0) : 0.0);
        }
    });
    return out;
}

}  // namespace neisf
