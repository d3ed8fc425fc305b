#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "doctest.h"
#include "neisf/fields.hpp"

using namespace neisf;
using ad::Array;

namespace {

constexpr double kPi = std::numbers::pi;

FieldConfig small_config()
{
    FieldConfig c;
    c.center = Vec3(0.1, -0.2, 0.05);
    c.radius = 2.0;
    c.sdf_hidden = 32;
    c.sdf_layers = 3;
    c.sdf_skip = 1;
    c.material_hidden = 16;
    c.material_layers = 2;
    c.incident_hidden = 16;
    c.incident_layers = 2;
    c.position_frequencies = 4;
    c.direction_frequencies = 2;
    return c;
}

Array random_points(std::mt19937_64& rng, int n, double scale)
{
    std::uniform_real_distribution<double> u(-scale, scale);
    Array x(n, 3);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k)
            x(i, k) = u(rng);
    return x;
}

Array random_dirs(std::mt19937_64& rng, int n)
{
    std::normal_distribution<double> g;
    Array d(n, 3);
    for (int i = 0; i < n; ++i) {
        Vec3 v(g(rng), g(rng), g(rng));
        d.row(i) = v.normalized().transpose().array();
    }
    return d;
}

void perturb(FieldBundle& b, std::mt19937_64& rng, double scale)
{
    std::normal_distribution<double> g(0.0, scale);
    for (ad::Parameter& p : b.sdf.parameters())
        p.value = p.value.unaryExpr([&](double v) { return v + g(rng); });
}

void scramble(FieldBundle& b, std::mt19937_64& rng, double scale)
{
    std::normal_distribution<double> g(0.0, scale);
    for (Mlp* m : b.networks())
        for (ad::Parameter& p : m->parameters())
            p.value = p.value.unaryExpr([&](double) { return g(rng); });
}

// Weights that make the sdf network compute exactly z_n - offset: each
// layer carries softplus(z) and softplus(-z), whose difference is z.
void set_plane_sdf(FieldBundle& b, double offset)
{
    Mlp& m = b.sdf;
    const double skip = m.spec().skip_layer;
    for (int l = 0; l < m.layer_count(); ++l) {
        Array& W = m.parameters()[2 * l].value;
        m.parameters()[2 * l + 1].value.setZero();
        W.setZero();
        const double k = l == skip ? std::sqrt(2.0) : 1.0;
        if (l == 0) {
            W(0, 2) = 1.0;
            W(1, 2) = -1.0;
        } else if (l + 1 < m.layer_count()) {
            W(0, 0) = k;
            W(0, 1) = -k;
            W(1, 0) = -k;
            W(1, 1) = k;
        } else {
            W(0, 0) = k;
            W(0, 1) = -k;
            m.parameters()[2 * l + 1].value(0, 0) = -offset;
        }
    }
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("positional encoding layout and period")
{
    Array x(2, 3);
    x << 0.3, -1.2, 2.0, 0.0, 0.5, -0.25;
    const int F = 3;
    const Array e = positional_encoding(x, F);
    REQUIRE(e.cols() == encoding_dim(F));
    for (int k = 0; k < 3; ++k)
        CHECK(e(0, k) == x(0, k));
    for (int l = 0; l < F; ++l)
        for (int k = 0; k < 3; ++k) {
            const double f = std::ldexp(1.0, l);
            CHECK(e(0, 3 + 6 * l + k) == doctest::Approx(std::sin(f * x(0, k))));
            CHECK(e(0, 6 + 6 * l + k) == doctest::Approx(std::cos(f * x(0, k))));
        }

    // A shift of 2 pi in one coordinate leaves every periodic column alone
    // and changes only that coordinate's raw column.
    Array y = x;
    y.col(1) += 2.0 * kPi;
    const Array ey = positional_encoding(y, F);
    for (int i = 0; i < 2; ++i)
        for (int c = 0; c < e.cols(); ++c) {
            if (c == 1)
                CHECK(ey(i, c) - e(i, c) == doctest::Approx(2.0 * kPi));
            else
                CHECK(ey(i, c) == doctest::Approx(e(i, c)).epsilon(1e-9));
        }
}

TEST_CASE("positional encoding jacobian matches finite differences")
{
    std::mt19937_64 rng(3);
    const Array x = random_points(rng, 5, 1.0);
    const int F = 4;
    const Array J = positional_encoding_jacobian(x, F);
    REQUIRE(J.rows() == 15);
    const double h = 1e-6;
    for (int i = 0; i < 5; ++i)
        for (int k = 0; k < 3; ++k) {
            Array xp = x.row(i), xm = x.row(i);
            xp(0, k) += h;
            xm(0, k) -= h;
            const Array fd = (positional_encoding(xp, F) - positional_encoding(xm, F)) / (2 * h);
            CHECK((fd - J.row(3 * i + k)).abs().maxCoeff() < 1e-7);
        }
}

TEST_CASE("geometric init starts close to a sphere")
{
    FieldBundle b(small_config(), 11);
    std::mt19937_64 rng(12);
    const Array xn = random_points(rng, 2000, 1.0);
    Array x = xn * b.config.radius;
    for (int k = 0; k < 3; ++k)
        x.col(k) += b.config.center[k];
    const SdfEval f = field_sdf(b, x);
    int agree = 0;
    for (int i = 0; i < xn.rows(); ++i) {
        const double ref = xn.row(i).matrix().norm() - b.config.init_radius;
        agree += (ref > 0.0) == (f.value(i, 0) > 0.0);
    }
    CHECK(agree >= 0.95 * xn.rows());
}

TEST_CASE("sdf spatial gradient matches finite differences")
{
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 3; ++trial) {
        FieldBundle b(small_config(), 20 + trial);
        perturb(b, rng, 0.05);
        const Array x = random_points(rng, 50, 1.5);
        const SdfEval f = field_sdf(b, x);
        const double h = 1e-4;
        for (int k = 0; k < 3; ++k) {
            Array xp = x, xm = x;
            xp.col(k) += h;
            xm.col(k) -= h;
            const Array fd = (field_sdf(b, xp).value - field_sdf(b, xm).value) / (2 * h);
            for (int i = 0; i < x.rows(); ++i) {
                const double ref = std::max(std::abs(fd(i, 0)), 1e-2);
                CHECK(std::abs(fd(i, 0) - f.gradient(i, k)) / ref < 1e-3);
            }
        }

        // The tape variant carries the same values.
        ad::Tape tape;
        const SdfVar v = field_sdf(tape, b, x, true);
        const double scale = 1.0 + f.value.abs().maxCoeff() + f.gradient.abs().maxCoeff();
        CHECK((v.value.value() - f.value).abs().maxCoeff() < 1e-9 * scale);
        CHECK((ad::v3_value(v.gradient) - f.gradient).abs().maxCoeff() < 1e-9 * scale);
    }
}

TEST_CASE("field outputs respect their ranges for arbitrary weights")
{
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        FieldBundle b(small_config(), 30 + trial);
        scramble(b, rng, 2.0);
        const Array x = random_points(rng, 200, 3.0);
        const Array wi = random_dirs(rng, 200);

        ad::Tape tape;
        RaySamples s;
        s.rays = 200;
        s.per_ray = 1;
        s.points = x;
        s.dirs = wi;
        s.delta = Array::Constant(200, 1, 0.1);
        const Aggregate a = volume_aggregate(tape, b, s, {});
        const double rmin = b.config.roughness_min;
        for (int i = 0; i < 200; ++i) {
            if (a.opacity.value()(i, 0) < 1e-9)
                continue;
            for (int c = 0; c < 3; ++c) {
                CHECK(a.albedo.value()(i, c) >= 0.0);
                CHECK(a.albedo.value()(i, c) <= 1.0);
            }
            CHECK(a.roughness.value()(i, 0) >= rmin - 1e-12);
            CHECK(a.roughness.value()(i, 0) <= 1.0 + 1e-12);
        }

        const IncidentField f = field_incident(b, x, wi);
        CHECK(f.s0.minCoeff() >= 0.0);
        CHECK(f.s0.allFinite());
        CHECK((f.dif_s1.abs() - f.s0).maxCoeff() <= 1e-12);
        const Array dolp_num = (f.spec_s1.square() + f.spec_s2.square()).sqrt();
        CHECK((dolp_num - f.s0).maxCoeff() <= 1e-12);
    }
}

TEST_CASE("incident fields share the intensity head and drop the diffuse s2")
{
    FieldBundle b(small_config(), 41);
    std::mt19937_64 rng(42);
    scramble(b, rng, 0.5);
    const Array x = random_points(rng, 64, 1.0);
    const Array wi = random_dirs(rng, 64);

    ad::Tape tape;
    const IncidentVar pol = field_incident(tape, b, x, wi, false, true);
    const IncidentVar nopol = field_incident(tape, b, x, wi, false, false);
    CHECK((pol.s0.value() == nopol.s0.value()).all());
    CHECK((pol.dif_s2.value() == 0.0).all());
    CHECK((nopol.dif_s1.value() == 0.0).all());
    CHECK((nopol.spec_s1.value() == 0.0).all());
    CHECK((nopol.spec_s2.value() == 0.0).all());
}

TEST_CASE("fresh polarisation heads start nearly unpolarised")
{
    FieldBundle b(small_config(), 43);
    std::mt19937_64 rng(44);
    const Array x = random_points(rng, 64, 1.0);
    const Array wi = random_dirs(rng, 64);
    const IncidentField f = field_incident(b, x, wi);
    CHECK((f.dif_s1.abs() / f.s0).maxCoeff() < 0.1);
    CHECK((f.spec_s1.abs() / f.s0).maxCoeff() < 0.1);
}

TEST_CASE("volsdf density limits")
{
    ad::Tape tape;
    Array d(5, 1);
    d << -10.0, -0.1, 0.0, 0.1, 10.0;
    const ad::Var s = volsdf_density(tape.constant(d), tape.constant(2.0), tape.constant(0.1));
    const Array v = s.value();
    CHECK(v(0, 0) == doctest::Approx(2.0));
    CHECK(v(2, 0) == doctest::Approx(1.0));
    CHECK(v(4, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(v(1, 0) + v(3, 0) == doctest::Approx(2.0));
    CHECK(v(0, 0) > v(1, 0));
    CHECK(v(1, 0) > v(2, 0));
    CHECK(v(2, 0) > v(3, 0));
}

TEST_CASE("blend weights plus residual transmittance sum to one")
{
    std::mt19937_64 rng(50);
    for (int trial = 0; trial < 4; ++trial) {
        FieldBundle b(small_config(), 50 + trial);
        b.log_beta.value(0, 0) = std::log(0.01 + 0.05 * trial);
        const Array o = random_points(rng, 32, 0.2);
        Array origins(32, 3);
        for (int i = 0; i < 32; ++i)
            origins.row(i) = b.config.center.transpose().array() + Array(random_dirs(rng, 1)) * 3.5;
        Array dirs(32, 3);
        for (int i = 0; i < 32; ++i) {
            const Vec3 to = b.config.center + Vec3(o(i, 0), o(i, 1), o(i, 2));
            dirs.row(i) = (to - Vec3(origins.row(i).transpose())).normalized().transpose().array();
        }
        const RaySamples s = sample_rays(b, origins, dirs, {}, &rng);
        ad::Tape tape;
        const Aggregate a = volume_aggregate(tape, b, s, {});
        const Array total = a.opacity.value() + a.residual.value();
        CHECK((total - 1.0).abs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("uniform albedo blends to the constant")
{
    FieldBundle b(small_config(), 60);
    std::vector<ad::Parameter>& p = b.albedo.parameters();
    for (ad::Parameter& q : p)
        q.value.setZero();
    p.back().value << 0.4, -1.0, 2.0;
    Array origins(16, 3), dirs(16, 3);
    std::mt19937_64 rng(61);
    const Array d = random_dirs(rng, 16);
    for (int i = 0; i < 16; ++i) {
        origins.row(i) = b.config.center.transpose().array() - 3.0 * d.row(i);
        dirs.row(i) = d.row(i);
    }
    const RaySamples s = sample_rays(b, origins, dirs, {}, &rng);
    ad::Tape tape;
    const Aggregate a = volume_aggregate(tape, b, s, {});
    for (int i = 0; i < 16; ++i) {
        CHECK(a.albedo.value()(i, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-0.4))).epsilon(1e-2));
        CHECK(a.albedo.value()(i, 1) == doctest::Approx(1.0 / (1.0 + std::exp(1.0))).epsilon(1e-2));
        CHECK(a.albedo.value()(i, 2) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-2));
    }
}

TEST_CASE("ray aggregation on an exact planar sdf")
{
    FieldBundle b(small_config(), 70);
    set_plane_sdf(b, 0.25);
    b.log_alpha.value(0, 0) = std::log(200.0);
    b.log_beta.value(0, 0) = std::log(0.004);
    const Vec3 c = b.config.center;
    const double plane_z = c.z() + 0.25 * b.config.radius;

    Array probe(1, 3);
    probe << c.x(), c.y(), plane_z + 0.3;
    CHECK(field_sdf(b, probe).value(0, 0) == doctest::Approx(0.3).epsilon(1e-9));

    for (const Vec3& dir : {Vec3(0, 0, -1), Vec3(0.3, -0.2, -1.0).normalized()}) {
        const SurfaceEstimate e = aggregate_ray(b, c + Vec3(0, 0, 1.5), dir);
        CHECK(e.opacity > 0.99);
        CHECK(e.normal.z() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(std::abs(e.x.z() - plane_z) < 0.05);
    }

    // A ray running parallel to the plane well above it accumulates nothing.
    CHECK_THROWS_AS(aggregate_ray(b, c + Vec3(-1.9, 0, 1.6), Vec3(1, 0, 0)), EmptyRay);
}

TEST_CASE("checkpoint round trip is bit exact")
{
    const auto dir = std::filesystem::temp_directory_path() / "neisf_test_fields";
    std::filesystem::create_directories(dir);
    FieldBundle b(small_config(), 80);
    b.log_alpha.value(0, 0) = 0.7;
    const auto first = dir / "a.nsfc";
    const auto second = dir / "b.nsfc";
    write_checkpoint(first.string(), b, 2);

    int stage = 0;
    const FieldBundle r = read_checkpoint(first.string(), &stage);
    CHECK(stage == 2);
    CHECK(r.has_radiance == b.has_radiance);
    CHECK(r.config.radius == b.config.radius);
    CHECK(r.config.center == b.config.center);
    const auto nb = b.networks();
    const auto nr = r.networks();
    REQUIRE(nb.size() == nr.size());
    for (std::size_t i = 0; i < nb.size(); ++i) {
        REQUIRE(nb[i]->parameters().size() == nr[i]->parameters().size());
        for (std::size_t j = 0; j < nb[i]->parameters().size(); ++j) {
            const Array expect = nb[i]->parameters()[j].value.cast<float>().cast<double>();
            CHECK((nr[i]->parameters()[j].value == expect).all());
        }
    }
    CHECK(r.log_alpha.value(0, 0) == static_cast<double>(0.7f));

    write_checkpoint(second.string(), r, 2);
    CHECK(slurp(first) == slurp(second));

    // Corruption is reported, never silently accepted.
    std::string bytes = slurp(first);
    std::ofstream(dir / "bad.nsfc", std::ios::binary) << "NSFX" << bytes.substr(4);
    CHECK_THROWS_AS(read_checkpoint((dir / "bad.nsfc").string()), CheckpointError);
    std::ofstream(dir / "short.nsfc", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(read_checkpoint((dir / "short.nsfc").string()), CheckpointError);
    CHECK_THROWS_AS(read_checkpoint((dir / "missing.nsfc").string()), CheckpointError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("invalid field configurations are rejected")
{
    FieldConfig c = small_config();
    c.radius = 0.0;
    CHECK_THROWS_AS(FieldBundle(c, 1), std::invalid_argument);
    c = small_config();
    c.beta_init = c.beta_min;
    CHECK_THROWS_AS(FieldBundle(c, 1), std::invalid_argument);
}
