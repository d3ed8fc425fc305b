#include "neisf/tracer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace neisf {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kRayOffset = 1e-3;
const Rgb kLuminance(0.2126, 0.7152, 0.0722);

struct Basis {
    Vec3 t, b, n;
    Vec3 to_world(const Vec3& v) const { return v.x() * t + v.y() * b + v.z() * n; }
    Vec3 to_local(const Vec3& v) const { return {v.dot(t), v.dot(b), v.dot(n)}; }
};

// Orthonormal basis around n (Duff et al. branchless construction).
Basis make_basis(const Vec3& n)
{
    const double sign = std::copysign(1.0, n.z());
    const double a = -1.0 / (sign + n.z());
    const double b = n.x() * n.y() * a;
    return {Vec3(1.0 + sign * n.x() * n.x() * a, sign * b, -sign * n.x()),
            Vec3(b, sign + n.y() * n.y() * a, -n.y()), n};
}

Vec3 sample_cosine(const Basis& basis, double u1, double u2)
{
    const double r = std::sqrt(u1);
    const double phi = 2.0 * kPi * u2;
    return basis.to_world(Vec3(r * std::cos(phi), r * std::sin(phi), std::sqrt(std::max(0.0, 1.0 - u1))));
}

// Visible-normal sampling of isotropic GGX; wo in the local frame.
Vec3 sample_vndf(const Vec3& wo, double alpha, double u1, double u2)
{
    const Vec3 vh = Vec3(alpha * wo.x(), alpha * wo.y(), wo.z()).normalized();
    const double lensq = vh.x() * vh.x() + vh.y() * vh.y();
    const Vec3 t1 = lensq > 0.0 ? Vec3(-vh.y(), vh.x(), 0.0) / std::sqrt(lensq) : Vec3(1, 0, 0);
    const Vec3 t2 = vh.cross(t1);
    const double r = std::sqrt(u1);
    const double phi = 2.0 * kPi * u2;
    const double p1 = r * std::cos(phi);
    const double s = 0.5 * (1.0 + vh.z());
    const double p2 = (1.0 - s) * std::sqrt(std::max(0.0, 1.0 - p1 * p1)) + s * r * std::sin(phi);
    const Vec3 nh = p1 * t1 + p2 * t2 + std::sqrt(std::max(0.0, 1.0 - p1 * p1 - p2 * p2)) * vh;
    return Vec3(alpha * nh.x(), alpha * nh.y(), std::max(1e-9, nh.z())).normalized();
}

double luminance(const Rgb& c) { return (c * kLuminance).sum(); }

// Probability of picking the specular lobe: Fresnel-weighted specular vs
// transmitted albedo, clamped so both lobes stay reachable.
double specular_probability(const PbrdfParams& m, double cos_o)
{
    const double F = fresnel_reflection_block(std::clamp(cos_o, kMinCosine, 1.0), m.eta).a;
    const double spec = F * luminance(m.ks);
    const double dif = (1.0 - F) * luminance(m.rho);
    const double p = spec + dif > 0.0 ? spec / (spec + dif) : 0.5;
    return std::clamp(p, 0.1, 0.9);
}

double smith_g1_exact(double cos_theta, double alpha)
{
    const double c2 = cos_theta * cos_theta;
    return 2.0 * cos_theta / (cos_theta + std::sqrt(alpha * alpha + (1.0 - alpha * alpha) * c2));
}

// Solid-angle density of the cosine / VNDF mixture.
double mixture_pdf(const PbrdfParams& m, const Vec3& n, const Vec3& wi, const Vec3& wo, double ps)
{
    const double cos_i = n.dot(wi);
    const double cos_o = n.dot(wo);
    if (cos_i <= 0.0 || cos_o <= 0.0)
        return 0.0;
    double pdf = (1.0 - ps) * cos_i / kPi;
    const Vec3 h = (wi + wo).normalized();
    const double nh = n.dot(h);
    if (nh > 0.0) {
        const double r = std::max(m.roughness, kMinRoughness);
        const double alpha = r * r;
        pdf += ps * smith_g1_exact(cos_o, alpha) * ggx_d(nh, r) / (4.0 * cos_o);
    }
    return pdf;
}

struct Lobes {
    MuellerMatrix diffuse;
    MuellerMatrix specular;
};

// pBRDF lobes as maps from canonical_frame(-wi) to the segment frame `seg`.
Lobes vertex_lobes(const PbrdfParams& m, const Vec3& n, const Vec3& wi, const Vec3& wo,
                   const ReferenceFrame& seg, FresnelMode mode)
{
    const ReferenceFrame incoming = canonical_frame(-wi);
    const ShadingGeometry g = ShadingGeometry::make(n, wi, wo);
    const MuellerMatrix Md = diffuse_mueller(m, g, mode);
    const MuellerMatrix Ms = specular_mueller(m, g, mode);
    Lobes out;
    out.diffuse = mueller_compose(rotate_between(Md.frame_out, seg),
                                  mueller_compose(Md, rotate_between(incoming, Md.frame_in)));
    out.specular = mueller_compose(rotate_between(Ms.frame_out, seg),
                                   mueller_compose(Ms, rotate_between(incoming, Ms.frame_in)));
    return out;
}

MuellerMatrix scaled(MuellerMatrix M, double k)
{
    M *= k;
    return M;
}

// Adds T * [L, 0, 0] (unpolarised radiance) into `acc`, scaled by w.
void add_unpolarized(StokesRgb& acc, const MuellerMatrix& T, const Rgb& L, double w)
{
    for (int c = 0; c < 3; ++c)
        acc.col(c) += T.m[c].col(0) * (L[c] * w);
}

double throughput_luminance(const MuellerMatrix& T)
{
    Rgb t;
    for (int c = 0; c < 3; ++c)
        t[c] = std::max(0.0, T.m[c](0, 0));
    return luminance(t);
}

struct EmitterSample {
    Vec3 wi;
    double dist = 0.0;
    double pdf = 0.0;  ///< solid angle
    bool valid = false;
};

EmitterSample sample_emitter(const SceneModel& scene, const Vec3& x, const Vec3& n, double u1, double u2)
{
    const Environment& e = scene.environment;
    const Vec3 y(e.emitter_center.x() + (2.0 * u1 - 1.0) * e.emitter_half.x(), e.room_max.y(),
                 e.emitter_center.y() + (2.0 * u2 - 1.0) * e.emitter_half.y());
    EmitterSample s;
    const Vec3 d = y - x;
    s.dist = d.norm();
    s.wi = d / s.dist;
    const double cos_l = s.wi.y();
    if (cos_l <= 1e-6 || n.dot(s.wi) <= 0.0)
        return s;
    s.pdf = s.dist * s.dist / (cos_l * e.emitter_area());
    const Ray shadow{x + kRayOffset * n, s.wi};
    s.valid = !scene.trace_objects(shadow, 0.0, s.dist - 2.0 * kRayOffset).has_value();
    return s;
}

double emitter_pdf(const SceneModel& scene, const Vec3& from, const SurfaceHit& hit)
{
    const Vec3 d = hit.x - from;
    const double dist2 = d.squaredNorm();
    const double cos_l = d.normalized().y();
    if (cos_l <= 1e-6)
        return 0.0;
    return dist2 / (cos_l * scene.environment.emitter_area());
}

void clamp_fireflies(PathSample& s, double limit)
{
    for (int c = 0; c < 3; ++c) {
        const double s0 = s.total(0, c);
        if (s0 > limit) {
            const double k = limit / s0;
            s.total.col(c) *= k;
            s.diffuse.col(c) *= k;
            s.specular.col(c) *= k;
        }
    }
}

// Unpolarised Fresnel reflectance for a dielectric of relative index eta,
// written out directly for the scalar tracer.
double fresnel_unpolarized(double cos_i, double eta)
{
    cos_i = std::clamp(cos_i, kMinCosine, 1.0);
    const double sin_t2 = (1.0 - cos_i * cos_i) / (eta * eta);
    if (sin_t2 >= 1.0)
        return 1.0;
    const double cos_t = std::sqrt(1.0 - sin_t2);
    const double rs = (cos_i - eta * cos_t) / (cos_i + eta * cos_t);
    const double rp = (eta * cos_i - cos_t) / (eta * cos_i + cos_t);
    return 0.5 * (rs * rs + rp * rp);
}

// s0 -> s0 response of the two lobes (including the cos_i factor of the
// lobe definitions), for the scalar tracer.
Rgb scalar_lobes(const PbrdfParams& m, const Vec3& n, const Vec3& wi, const Vec3& wo)
{
    const double cos_i = n.dot(wi);
    const double cos_o = n.dot(wo);
    if (cos_i <= 0.0 || cos_o <= 0.0)
        return Rgb::Zero();
    const double ti = 1.0 - fresnel_unpolarized(cos_i, m.eta);
    const double to = 1.0 - fresnel_unpolarized(cos_o, m.eta);
    Rgb out = m.rho / kPi * std::max(cos_i, kMinCosine) * ti * to;
    const Vec3 h = (wi + wo).normalized();
    const double nh = n.dot(h);
    if (nh > 0.0) {
        const double r = std::max(m.roughness, kMinRoughness);
        const double a2 = std::pow(r, 4);
        const double den = nh * nh * (a2 - 1.0) + 1.0;
        const double D = a2 / (kPi * den * den);
        const double G = smith_g1_exact(std::max(cos_i, kMinCosine), r * r) *
                         smith_g1_exact(std::max(cos_o, kMinCosine), r * r);
        const double F = fresnel_unpolarized(wi.dot(h), m.eta);
        out += m.ks * (D * G / (4.0 * std::max(cos_o, kMinCosine)) * F);
    }
    return out;
}

// Direction sampling shared by both tracers; always consumes three numbers.
Vec3 sample_direction(const PbrdfParams& m, const Vec3& n, const Vec3& wo, double ps, Sampler& rng)
{
    const double lobe = rng.next();
    const double u1 = rng.next();
    const double u2 = rng.next();
    const Basis basis = make_basis(n);
    if (lobe >= ps)
        return sample_cosine(basis, u1, u2);
    const double r = std::max(m.roughness, kMinRoughness);
    const Vec3 h = basis.to_world(sample_vndf(basis.to_local(wo), r * r, u1, u2));
    return reflect(wo, h);
}

}  // namespace

void PathConfig::validate() const
{
    if (max_depth < 1)
        throw std::invalid_argument("PathConfig: max_depth must be >= 1");
    if (samples_per_pixel < 1)
        throw std::invalid_argument("PathConfig: samples_per_pixel must be >= 1");
}

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c)
{
    return splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b) ^ c);
}

PathSample trace_path(const SceneModel& scene, const Ray& ray, const ReferenceFrame& frame,
                      const PathConfig& cfg, Sampler& rng)
{
    PathSample out;
    StokesRgb direct = StokesRgb::Zero();
    MuellerMatrix T = MuellerMatrix::uniform(Mat3::Identity(), frame, frame);
    MuellerMatrix Td = MuellerMatrix::zero(frame, frame);
    const bool room = scene.environment.mode == Environment::Mode::cornell;
    const bool nee = cfg.next_event && room;

    Ray r = ray;
    double prev_pdf = 0.0;
    Vec3 prev_x = Vec3::Zero();
    for (int segment = 1;; ++segment) {
        const std::optional<SurfaceHit> hit = scene.intersect(r);
        if (!hit || hit->emitter) {
            Rgb L;
            double w = 1.0;
            if (!hit) {
                L = scene.sky(r.dir);
            } else {
                L = scene.environment.emitter_radiance;
                if (segment > 1 && nee) {
                    const double pl = emitter_pdf(scene, prev_x, *hit);
                    w = prev_pdf / (prev_pdf + pl);
                }
            }
            if (segment == 1) {
                add_unpolarized(direct, T, L, w);
            } else {
                add_unpolarized(out.total, T, L, w);
                add_unpolarized(out.diffuse, Td, L, w);
            }
            break;
        }
        if (segment >= cfg.max_depth)
            break;

        const int vertex = segment;
        const Vec3 x = hit->x;
        const Vec3 n = hit->n;
        const Vec3 wo = -r.dir;
        if (n.dot(wo) <= 0.0)
            break;
        const PbrdfParams& m = hit->material;
        const ReferenceFrame seg = T.frame_in;
        const double ps = specular_probability(m, n.dot(wo));

        if (nee) {
            const double u1 = rng.next();
            const double u2 = rng.next();
            const EmitterSample es = sample_emitter(scene, x, n, u1, u2);
            if (es.valid) {
                const Lobes lobes = vertex_lobes(m, n, es.wi, wo, seg, cfg.fresnel);
                const double pb = mixture_pdf(m, n, es.wi, wo, ps);
                const double w = es.pdf / (es.pdf + pb) / es.pdf;
                const Rgb& L = scene.environment.emitter_radiance;
                MuellerMatrix V = lobes.diffuse;
                V += lobes.specular;
                add_unpolarized(out.total, mueller_compose(T, V), L, w);
                if (vertex == 1)
                    add_unpolarized(out.diffuse, mueller_compose(T, lobes.diffuse), L, w);
                else
                    add_unpolarized(out.diffuse, mueller_compose(Td, V), L, w);
            }
        }

        const Vec3 wi = sample_direction(m, n, wo, ps, rng);
        if (n.dot(wi) <= 0.0)
            break;
        const double pdf = mixture_pdf(m, n, wi, wo, ps);
        if (!(pdf > 0.0))
            break;
        const Lobes lobes = vertex_lobes(m, n, wi, wo, seg, cfg.fresnel);
        MuellerMatrix V = lobes.diffuse;
        V += lobes.specular;
        if (vertex == 1)
            Td = mueller_compose(T, scaled(lobes.diffuse, 1.0 / pdf));
        else
            Td = mueller_compose(Td, scaled(V, 1.0 / pdf));
        T = mueller_compose(T, scaled(V, 1.0 / pdf));

        if (vertex >= cfg.russian_roulette_start) {
            const double q = std::clamp(throughput_luminance(T), 0.1, 0.95);
            if (rng.next() >= q)
                break;
            T *= 1.0 / q;
            Td *= 1.0 / q;
        }
        prev_pdf = pdf;
        prev_x = x;
        r = Ray{x + kRayOffset * n, wi};
    }
    out.specular = out.total - out.diffuse;
    out.total += direct;
    clamp_fireflies(out, cfg.firefly_clamp);
    return out;
}

Rgb trace_path_scalar(const SceneModel& scene, const Ray& ray, const PathConfig& cfg, Sampler& rng)
{
    Rgb total = Rgb::Zero();
    Rgb beta = Rgb::Ones();
    const bool room = scene.environment.mode == Environment::Mode::cornell;
    const bool nee = cfg.next_event && room;
    Ray r = ray;
    double prev_pdf = 0.0;
    Vec3 prev_x = Vec3::Zero();
    for (int segment = 1;; ++segment) {
        const std::optional<SurfaceHit> hit = scene.intersect(r);
        if (!hit) {
            total += beta * scene.sky(r.dir);
            break;
        }
        if (hit->emitter) {
            double w = 1.0;
            if (segment > 1 && nee)
                w = prev_pdf / (prev_pdf + emitter_pdf(scene, prev_x, *hit));
            total += beta * scene.environment.emitter_radiance * w;
            break;
        }
        if (segment >= cfg.max_depth)
            break;
        const int vertex = segment;
        const Vec3 x = hit->x;
        const Vec3 n = hit->n;
        const Vec3 wo = -r.dir;
        if (n.dot(wo) <= 0.0)
            break;
        const PbrdfParams& m = hit->material;
        const double ps = specular_probability(m, n.dot(wo));
        if (nee) {
            const double u1 = rng.next();
            const double u2 = rng.next();
            const EmitterSample es = sample_emitter(scene, x, n, u1, u2);
            if (es.valid) {
                const double pb = mixture_pdf(m, n, es.wi, wo, ps);
                total += beta * scalar_lobes(m, n, es.wi, wo) * scene.environment.emitter_radiance /
                         (es.pdf + pb);
            }
        }
        const Vec3 wi = sample_direction(m, n, wo, ps, rng);
        if (n.dot(wi) <= 0.0)
            break;
        const double pdf = mixture_pdf(m, n, wi, wo, ps);
        if (!(pdf > 0.0))
            break;
        beta *= scalar_lobes(m, n, wi, wo) / pdf;
        if (vertex >= cfg.russian_roulette_start) {
            const double q = std::clamp(luminance(beta.max(0.0)), 0.1, 0.95);
            if (rng.next() >= q)
                break;
            beta /= q;
        }
        prev_pdf = pdf;
        prev_x = x;
        r = Ray{x + kRayOffset * n, wi};
    }
    for (int c = 0; c < 3; ++c)
        total[c] = std::min(total[c], cfg.firefly_clamp);
    return total;
}

PathSample trace_camera_stokes(const SceneModel& scene, const Camera& cam, int px, int py, int view,
                               const PathConfig& cfg)
{
    const Ray ray = cam.pixel_ray(px, py);
    const ReferenceFrame frame = cam.pixel_frame(ray.dir);
    Sampler rng(stream_seed(cfg.rng_seed, static_cast<std::uint64_t>(view),
                            static_cast<std::uint64_t>(py) * cam.width + px));
    PathSample acc;
    for (int s = 0; s < cfg.samples_per_pixel; ++s) {
        const PathSample p = trace_path(scene, ray, frame, cfg, rng);
        acc.total += p.total;
        acc.diffuse += p.diffuse;
        acc.specular += p.specular;
    }
    const double inv = 1.0 / cfg.samples_per_pixel;
    acc.total *= inv;
    acc.diffuse *= inv;
    acc.specular *= inv;
    return acc;
}

Rgb trace_camera_scalar(const SceneModel& scene, const Camera& cam, int px, int py, int view,
                        const PathConfig& cfg)
{
    const Ray ray = cam.pixel_ray(px, py);
    Sampler rng(stream_seed(cfg.rng_seed, static_cast<std::uint64_t>(view),
                            static_cast<std::uint64_t>(py) * cam.width + px));
    Rgb acc = Rgb::Zero();
    for (int s = 0; s < cfg.samples_per_pixel; ++s)
        acc += trace_path_scalar(scene, ray, cfg, rng);
    return acc / cfg.samples_per_pixel;
}

IncidentStokes trace_incident_rotated(const SceneModel& scene, const Vec3& x, const Vec3& n,
                                      const Vec3& wi, const Vec3& wo, const PathConfig& cfg,
                                      std::uint64_t stream)
{
    if (n.dot(wi) <= 0.0)
        throw std::invalid_argument("trace_incident_rotated: wi below the surface");
    const ReferenceFrame frame = canonical_frame(-wi);
    const Ray ray{x + kRayOffset * n, wi};
    Sampler rng(stream_seed(cfg.rng_seed, 0x1ac1d3e7ULL, stream));
    FramedStokes L;
    L.frame = frame;
    for (int s = 0; s < cfg.samples_per_pixel; ++s)
        L.s += trace_path(scene, ray, frame, cfg, rng).total;
    L.s /= cfg.samples_per_pixel;

    const ShadingGeometry g = ShadingGeometry::make(n, wi, wo);
    IncidentStokes out;
    out.diffuse_frame = diffuse_frame_in(g);
    out.specular_frame = specular_frame_in(g);
    out.diffuse = rotate_stokes(L, out.diffuse_frame).s;
    out.specular = rotate_stokes(L, out.specular_frame).s;
    return out;
}

void parallel_rows(int rows, int threads, const std::function<void(int)>& body)
{
    int n = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    n = std::clamp(n, 1, std::max(1, rows));
    if (n == 1) {
        for (int r = 0; r < rows; ++r)
            body(r);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_lock;
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t)
        pool.emplace_back([&] {
            for (int r = next++; r < rows; r = next++) {
                try {
                    body(r);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_lock);
                    if (!error)
                        error = std::current_exception();
                }
            }
        });
    for (std::thread& t : pool)
        t.join();
    if (error)
        std::rethrow_exception(error);
}

RenderedView render_view(const SceneModel& scene, const Camera& cam, int view, const PathConfig& cfg)
{
    cfg.validate();
    const int w = cam.width;
    const int h = cam.height;
    RenderedView v;
    v.stokes = PolarizedImage(w, h);
    v.mask = Image(w, h, 1);
    v.normal = Image(w, h, 3);
    v.albedo = Image(w, h, 3);
    v.roughness = Image(w, h, 1);
    v.diffuse = Image(w, h, 3);
    v.specular = Image(w, h, 3);
    parallel_rows(h, cfg.threads, [&](int y) {
        for (int x = 0; x < w; ++x) {
            const Ray ray = cam.pixel_ray(x, y);
            const std::optional<SurfaceHit> hit = scene.intersect(ray);
            if (hit && hit->object) {
                v.mask.at(x, y) = 1.0f;
                v.roughness.at(x, y) = static_cast<float>(hit->material.roughness);
                for (int c = 0; c < 3; ++c) {
                    v.normal.at(x, y, c) = static_cast<float>(hit->n[c]);
                    v.albedo.at(x, y, c) = static_cast<float>(hit->material.rho[c]);
                }
            }
            const PathSample s = trace_camera_stokes(scene, cam, x, y, view, cfg);
            for (int c = 0; c < 3; ++c) {
                for (int k = 0; k < 3; ++k)
                    v.stokes.at(k, c, x, y) = static_cast<float>(s.total(k, c));
                v.diffuse.at(x, y, c) = static_cast<float>(s.diffuse(0, c));
                v.specular.at(x, y, c) = static_cast<float>(s.specular(0, c));
            }
        }
    });
    return v;
}

namespace {

std::string view_name(int view, const char* suffix)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%04d%s", view, suffix);
    return buf;
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m)
{
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

}  // namespace

DatasetSummary render_dataset(const SceneModel& scene, const std::vector<View>& views,
                              const PathConfig& cfg, const std::filesystem::path& out_dir)
{
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec)
        throw ImageIoError("cannot create " + out_dir.string() + ": " + ec.message());
    DatasetSummary summary;
    nlohmann::json poses = nlohmann::json::array();
    const char* comp[3] = {"s0", "s1", "s2"};
    const char* chan[3] = {"r", "g", "b"};
    for (const View& view : views) {
        const RenderedView r = render_view(scene, view.camera, view.index, cfg);
        auto put = [&](const std::string& name, const Image& img) {
            const std::filesystem::path p = out_dir / name;
            write_pfm(p.string(), img);
            summary.files.push_back(name);
        };
        for (int k = 0; k < 3; ++k)
            for (int c = 0; c < 3; ++c) {
                Image plane(r.stokes.width, r.stokes.height, 1);
                std::copy_n(r.stokes.planes.begin() + r.stokes.plane_offset(k * 3 + c),
                            plane.data.size(), plane.data.begin());
                put(view_name(view.index, (std::string("_") + comp[k] + "_" + chan[c] + ".pfm").c_str()), plane);
            }
        const std::string pstk = view_name(view.index, ".pstk");
        write_pstk((out_dir / pstk).string(), r.stokes);
        summary.files.push_back(pstk);
        put(view_name(view.index, "_mask.pfm"), r.mask);
        put(view_name(view.index, "_normal.pfm"), r.normal);
        put(view_name(view.index, "_albedo.pfm"), r.albedo);
        put(view_name(view.index, "_roughness.pfm"), r.roughness);
        put(view_name(view.index, "_diffuse.pfm"), r.diffuse);
        put(view_name(view.index, "_specular.pfm"), r.specular);

        nlohmann::json pose;
        pose["view"] = view.index;
        pose["split"] = view.test ? "test" : "train";
        pose["width"] = view.camera.width;
        pose["height"] = view.camera.height;
        pose["K"] = matrix_json(view.camera.K);
        pose["cam_to_world"] = matrix_json(view.camera.cam_to_world);
        poses.push_back(pose);
        ++summary.views;
    }
    {
        std::ofstream out(out_dir / "poses.json");
        out << poses.dump(2) << '\n';
        if (!out)
            throw ImageIoError("write failed: " + (out_dir / "poses.json").string());
        summary.files.push_back("poses.json");
    }
    {
        nlohmann::json meta;
        meta["bound_center"] = {scene.rig.target.x(), scene.rig.target.y(), scene.rig.target.z()};
        meta["bound_radius"] = scene.rig.bound_radius;
        meta["views"] = summary.views;
        meta["samples_per_pixel"] = cfg.samples_per_pixel;
        meta["max_depth"] = cfg.max_depth;
        meta["seed"] = cfg.rng_seed;
        std::ofstream out(out_dir / "dataset.json");
        out << meta.dump(2) << '\n';
        if (!out)
            throw ImageIoError("write failed: " + (out_dir / "dataset.json").string());
        summary.files.push_back("dataset.json");
    }
    return summary;
}

}  // namespace neisf
