#include "neisf/fields.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "json.hpp"

namespace neisf {

using ad::Array;
using ad::Tape;
using ad::V3;
using ad::Var;

namespace {

constexpr double kSkipScale = 0.7071067811865476;  // 1 / sqrt(2)

Array softplus_array(const Array& x, double beta)
{
    return x.unaryExpr([beta](double v) {
        const double z = beta * v;
        return (z > 20.0 ? z : std::log1p(std::exp(z))) / beta;
    });
}

Array sigmoid_array(const Array& x)
{
    return x.unaryExpr([](double v) {
        if (v >= 0.0)
            return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
}

/// Mask picking rows 3i+k of an interleaved (3N x 1) tangent column.
Array component_mask(Eigen::Index n, int k)
{
    Array m = Array::Zero(3 * n, 1);
    for (Eigen::Index i = 0; i < n; ++i)
        m(3 * i + k, 0) = 1.0;
    return m;
}

Array hstack(const Array& a, const Array& b)
{
    Array out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

}  // namespace

// ------------------------------------------------------------------ encoding

Array positional_encoding(const Array& x, int frequencies)
{
    if (x.cols() != 3)
        throw std::invalid_argument("positional_encoding: expected N x 3 input");
    Array out(x.rows(), encoding_dim(frequencies));
    out.leftCols(3) = x;
    double f = 1.0;
    for (int l = 0; l < frequencies; ++l, f *= 2.0) {
        out.middleCols(3 + 6 * l, 3) = (f * x).sin();
        out.middleCols(6 + 6 * l, 3) = (f * x).cos();
    }
    return out;
}

Array positional_encoding_jacobian(const Array& x, int frequencies)
{
    const Eigen::Index n = x.rows();
    Array J = Array::Zero(3 * n, encoding_dim(frequencies));
    for (Eigen::Index i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) {
            const Eigen::Index r = 3 * i + k;
            J(r, k) = 1.0;
            double f = 1.0;
            for (int l = 0; l < frequencies; ++l, f *= 2.0) {
                J(r, 3 + 6 * l + k) = f * std::cos(f * x(i, k));
                J(r, 6 + 6 * l + k) = -f * std::sin(f * x(i, k));
            }
        }
    return J;
}

// ----------------------------------------------------------------------- Mlp

Mlp::Mlp(std::string name, const MlpSpec& spec) : name_(std::move(name)), spec_(spec)
{
    if (spec.input_dim < 1 || spec.hidden_dim < 1 || spec.hidden_layers < 1 || spec.output_dim < 1)
        throw std::invalid_argument("Mlp: dimensions must be positive");
    if (spec.skip_layer == 0 || spec.skip_layer >= spec.hidden_layers + 1)
        if (spec.skip_layer != -1)
            throw std::invalid_argument("Mlp: skip layer must be an inner layer");
    const int layers = spec.hidden_layers + 1;
    for (int l = 0; l < layers; ++l) {
        params_.push_back({name_ + ".W" + std::to_string(l),
                           Array::Zero(layer_output_dim(l), layer_input_dim(l))});
        params_.push_back({name_ + ".b" + std::to_string(l), Array::Zero(1, layer_output_dim(l))});
    }
}

int Mlp::layer_input_dim(int layer) const
{
    if (layer == 0)
        return spec_.input_dim;
    if (layer == spec_.skip_layer)
        return spec_.hidden_dim + spec_.input_dim;
    return spec_.hidden_dim;
}

int Mlp::layer_output_dim(int layer) const
{
    return layer == spec_.hidden_layers ? spec_.output_dim : spec_.hidden_dim;
}

void Mlp::init_default(std::mt19937_64& rng)
{
    for (int l = 0; l < layer_count(); ++l) {
        Array& W = params_[2 * l].value;
        const double bound = std::sqrt(6.0 / static_cast<double>(W.cols()));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index i = 0; i < W.size(); ++i)
            W.data()[i] = u(rng);
        params_[2 * l + 1].value.setZero();
    }
}

void Mlp::init_geometric(std::mt19937_64& rng, double radius)
{
    const int last = layer_count() - 1;
    for (int l = 0; l <= last; ++l) {
        Array& W = params_[2 * l].value;
        Array& b = params_[2 * l + 1].value;
        if (l == last) {
            std::normal_distribution<double> g(std::sqrt(std::numbers::pi / W.cols()), 1e-4);
            for (Eigen::Index i = 0; i < W.size(); ++i)
                W.data()[i] = g(rng);
            b.setConstant(-radius);
            continue;
        }
        std::normal_distribution<double> g(0.0, std::sqrt(2.0) / std::sqrt(double(W.rows())));
        for (Eigen::Index i = 0; i < W.size(); ++i)
            W.data()[i] = g(rng);
        b.setZero();
        // Only the raw coordinates feed the network at the start. First-layer
        // directions are spread evenly over the sphere so the initial field
        // is close to radial even for narrow layers.
        if (l == 0) {
            W.rightCols(W.cols() - 3).setZero();
            const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
            const double scale = std::sqrt(2.0) / std::sqrt(double(W.rows())) * std::sqrt(3.0);
            const Eigen::Index n = W.rows();
            for (Eigen::Index i = 0; i < n; ++i) {
                const double z = 1.0 - 2.0 * (i + 0.5) / n;
                const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
                W(i, 0) = scale * r * std::cos(golden * i);
                W(i, 1) = scale * r * std::sin(golden * i);
                W(i, 2) = scale * z;
            }
        }
        else if (l == spec_.skip_layer)
            W.rightCols(spec_.input_dim - 3).setZero();
    }
    if (last == 0)
        return;

    // A narrow random network is only radial on average. Refit the output
    // layer by ridge regression onto |x| - radius over the unit ball so the
    // starting surface sits where intended.
    const int n = 4096;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Array x = Array::Zero(n, spec_.input_dim);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n;) {
        const Vec3 p(u(rng), u(rng), u(rng));
        if (p.squaredNorm() > 1.0)
            continue;
        x.row(i).head(3) = p.transpose().array();
        y(i) = p.norm() - radius;
        ++i;
    }
    Eigen::MatrixXd z = x.matrix();
    for (int l = 0; l <= last; ++l) {
        if (l == spec_.skip_layer) {
            Eigen::MatrixXd c(z.rows(), z.cols() + x.cols());
            c << z, x.matrix();
            z = c * kSkipScale;
        }
        if (l == last)
            break;
        Eigen::MatrixXd h = z * params_[2 * l].value.matrix().transpose();
        h.rowwise() += params_[2 * l + 1].value.matrix().row(0);
        z = softplus_array(h.array(), spec_.softplus_beta).matrix();
    }
    Eigen::MatrixXd A(n, z.cols() + 1);
    A << z, Eigen::VectorXd::Ones(n);
    Eigen::MatrixXd normal = A.transpose() * A;
    normal.diagonal().array() += 1e-8 * n;
    const Eigen::VectorXd w = normal.ldlt().solve(A.transpose() * y);
    params_[2 * last].value.row(0) = w.head(z.cols()).transpose().array();
    params_[2 * last + 1].value(0, 0) = w(z.cols());
}

Var Mlp::forward(Tape& tape, const Var& input, bool trainable) const
{
    Var z = input;
    const int last = layer_count() - 1;
    for (int l = 0; l <= last; ++l) {
        const Var W = trainable ? tape.parameter(params_[2 * l]) : tape.constant(params_[2 * l].value);
        const Var b = trainable ? tape.parameter(params_[2 * l + 1])
                                : tape.constant(params_[2 * l + 1].value);
        if (l == spec_.skip_layer)
            z = ad::hcat({z, input}) * kSkipScale;
        z = ad::linear(z, W, b);
        if (l < last)
            z = spec_.activation == Activation::softplus ? ad::softplus(z, spec_.softplus_beta)
                                                         : ad::relu(z);
    }
    return z;
}

Mlp::Tangent Mlp::forward_tangent(Tape& tape, const Var& input, const Var& input_tangent,
                                  bool trainable) const
{
    if (spec_.activation != Activation::softplus)
        throw std::logic_error("Mlp::forward_tangent: needs a smooth activation");
    Var z = input;
    Var dz = input_tangent;
    const int last = layer_count() - 1;
    for (int l = 0; l <= last; ++l) {
        const Var W = trainable ? tape.parameter(params_[2 * l]) : tape.constant(params_[2 * l].value);
        const Var b = trainable ? tape.parameter(params_[2 * l + 1])
                                : tape.constant(params_[2 * l + 1].value);
        if (l == spec_.skip_layer) {
            z = ad::hcat({z, input}) * kSkipScale;
            dz = ad::hcat({dz, input_tangent}) * kSkipScale;
        }
        const Var h = ad::linear(z, W, b);
        dz = ad::matmul_t(dz, W);
        if (l < last) {
            dz = ad::repeat_rows(ad::softplus_slope(h, spec_.softplus_beta), 3) * dz;
            z = ad::softplus(h, spec_.softplus_beta);
        } else {
            z = h;
        }
    }
    return {z, dz};
}

Array Mlp::evaluate(const Array& input) const
{
    Eigen::MatrixXd z = input.matrix();
    const int last = layer_count() - 1;
    for (int l = 0; l <= last; ++l) {
        if (l == spec_.skip_layer) {
            Eigen::MatrixXd c(z.rows(), z.cols() + input.cols());
            c << z, input.matrix();
            z = c * kSkipScale;
        }
        Eigen::MatrixXd h = z * params_[2 * l].value.matrix().transpose();
        h.rowwise() += params_[2 * l + 1].value.matrix().row(0);
        if (l < last && spec_.activation == Activation::softplus)
            z = softplus_array(h.array(), spec_.softplus_beta).matrix();
        else if (l < last)
            z = h.cwiseMax(0.0);
        else
            z = std::move(h);
    }
    return z.array();
}

std::pair<Array, Array> Mlp::evaluate_tangent(const Array& input, const Array& input_tangent) const
{
    if (spec_.activation != Activation::softplus)
        throw std::logic_error("Mlp::evaluate_tangent: needs a smooth activation");
    Eigen::MatrixXd z = input.matrix();
    Eigen::MatrixXd dz = input_tangent.matrix();
    const int last = layer_count() - 1;
    const double beta = spec_.softplus_beta;
    for (int l = 0; l <= last; ++l) {
        const Eigen::MatrixXd W = params_[2 * l].value.matrix();
        if (l == spec_.skip_layer) {
            Eigen::MatrixXd c(z.rows(), z.cols() + input.cols());
            c << z, input.matrix();
            z = c * kSkipScale;
            Eigen::MatrixXd dc(dz.rows(), dz.cols() + input_tangent.cols());
            dc << dz, input_tangent.matrix();
            dz = dc * kSkipScale;
        }
        Eigen::MatrixXd h = z * W.transpose();
        h.rowwise() += params_[2 * l + 1].value.matrix().row(0);
        dz = dz * W.transpose();
        if (l < last) {
            const Array slope = sigmoid_array(beta * h.array());
            for (Eigen::Index c = 0; c < dz.cols(); ++c)
                Eigen::Map<Eigen::MatrixXd>(dz.col(c).data(), 3, h.rows()).array().rowwise() *=
                    slope.col(c).transpose();
            z = softplus_array(h.array(), beta).matrix();
        } else {
            z = std::move(h);
        }
    }
    return {z.array(), dz.array()};
}

// -------------------------------------------------------------- FieldBundle

void FieldConfig::validate() const
{
    if (!(radius > 0.0))
        throw std::invalid_argument("FieldConfig: bound radius must be positive");
    if (sdf_hidden < 1 || sdf_layers < 1 || material_hidden < 1 || material_layers < 1 ||
        incident_hidden < 1 || incident_layers < 1)
        throw std::invalid_argument("FieldConfig: network sizes must be positive");
    if (position_frequencies < 0 || direction_frequencies < 0)
        throw std::invalid_argument("FieldConfig: frequency counts must be non-negative");
    if (!(alpha_init > 0.0) || !(beta_init > beta_min) || !(beta_min > 0.0))
        throw std::invalid_argument("FieldConfig: need alpha > 0 and beta > beta_min > 0");
    if (!(roughness_min > 0.0 && roughness_min < 1.0))
        throw std::invalid_argument("FieldConfig: roughness_min outside (0, 1)");
}

FieldBundle::FieldBundle(const FieldConfig& cfg, std::uint64_t seed) : config(cfg)
{
    cfg.validate();
    const int px = encoding_dim(cfg.position_frequencies);
    const int pd = encoding_dim(cfg.direction_frequencies);
    std::mt19937_64 rng(seed);

    MlpSpec s;
    s.input_dim = px;
    s.hidden_dim = cfg.sdf_hidden;
    s.hidden_layers = cfg.sdf_layers;
    s.output_dim = 1;
    s.skip_layer = cfg.sdf_skip > 0 && cfg.sdf_skip < cfg.sdf_layers ? cfg.sdf_skip : -1;
    s.activation = Activation::softplus;
    s.softplus_beta = cfg.softplus_beta;
    sdf = Mlp("sdf", s);
    sdf.init_geometric(rng, cfg.init_radius);

    const auto plain = [](int in, int hidden, int layers, int out) {
        MlpSpec m;
        m.input_dim = in;
        m.hidden_dim = hidden;
        m.hidden_layers = layers;
        m.output_dim = out;
        return m;
    };
    albedo = Mlp("albedo", plain(px, cfg.material_hidden, cfg.material_layers, 3));
    roughness = Mlp("roughness", plain(px, cfg.material_hidden, cfg.material_layers, 1));
    incident_i = Mlp("incident_i", plain(px + pd, cfg.incident_hidden, cfg.incident_layers, 3));
    incident_spec = Mlp("incident_spec", plain(px + pd, cfg.incident_hidden, cfg.incident_layers, 6));
    incident_dif = Mlp("incident_dif", plain(px + pd, cfg.incident_hidden, cfg.incident_layers, 3));
    radiance = Mlp("radiance", plain(px + 3 + pd, cfg.material_hidden, cfg.material_layers, 3));
    for (Mlp* m : {&albedo, &roughness, &incident_i, &incident_spec, &incident_dif, &radiance})
        m->init_default(rng);
    // Start the polarisation heads unpolarised.
    incident_spec.parameters()[2 * cfg.incident_layers].value *= 0.01;
    incident_dif.parameters()[2 * cfg.incident_layers].value *= 0.01;

    log_alpha = {"log_alpha", Array::Constant(1, 1, std::log(cfg.alpha_init))};
    log_beta = {"log_beta", Array::Constant(1, 1, std::log(cfg.beta_init - cfg.beta_min))};
}

double FieldBundle::alpha() const { return std::exp(log_alpha.value(0, 0)); }

double FieldBundle::beta() const { return config.beta_min + std::exp(log_beta.value(0, 0)); }

Array FieldBundle::normalize_points(const Array& x) const
{
    Array out = x;
    for (int k = 0; k < 3; ++k)
        out.col(k) = (x.col(k) - config.center[k]) / config.radius;
    return out;
}

namespace {

void append(std::vector<ad::Parameter*>& out, Mlp& m)
{
    for (ad::Parameter& p : m.parameters())
        out.push_back(&p);
}

}  // namespace

std::vector<ad::Parameter*> FieldBundle::geometry_parameters()
{
    std::vector<ad::Parameter*> out;
    append(out, sdf);
    out.push_back(&log_alpha);
    out.push_back(&log_beta);
    return out;
}

std::vector<ad::Parameter*> FieldBundle::material_parameters()
{
    std::vector<ad::Parameter*> out;
    append(out, albedo);
    append(out, roughness);
    return out;
}

std::vector<ad::Parameter*> FieldBundle::incident_parameters()
{
    std::vector<ad::Parameter*> out;
    append(out, incident_i);
    append(out, incident_spec);
    append(out, incident_dif);
    return out;
}

std::vector<ad::Parameter*> FieldBundle::radiance_parameters()
{
    std::vector<ad::Parameter*> out;
    append(out, radiance);
    return out;
}

std::vector<Mlp*> FieldBundle::networks()
{
    std::vector<Mlp*> out{&sdf, &albedo, &roughness, &incident_i, &incident_spec, &incident_dif};
    if (has_radiance)
        out.push_back(&radiance);
    return out;
}

std::vector<const Mlp*> FieldBundle::networks() const
{
    std::vector<const Mlp*> out{&sdf, &albedo, &roughness, &incident_i, &incident_spec, &incident_dif};
    if (has_radiance)
        out.push_back(&radiance);
    return out;
}

// -------------------------------------------------------------- field queries

SdfEval field_sdf(const FieldBundle& bundle, const Array& x)
{
    const int F = bundle.config.position_frequencies;
    const Array xn = bundle.normalize_points(x);
    auto [value, tangent] =
        bundle.sdf.evaluate_tangent(positional_encoding(xn, F), positional_encoding_jacobian(xn, F));
    SdfEval out;
    out.value = value * bundle.config.radius;
    out.gradient.resize(x.rows(), 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (int k = 0; k < 3; ++k)
            out.gradient(i, k) = tangent(3 * i + k, 0);
    return out;
}

SdfVar field_sdf(Tape& tape, const FieldBundle& bundle, const Array& x, bool trainable)
{
    const int F = bundle.config.position_frequencies;
    const Array xn = bundle.normalize_points(x);
    const Mlp::Tangent r =
        bundle.sdf.forward_tangent(tape, tape.constant(positional_encoding(xn, F)),
                                   tape.constant(positional_encoding_jacobian(xn, F)), trainable);
    const Eigen::Index n = x.rows();
    SdfVar out;
    out.value = r.value * bundle.config.radius;
    out.gradient.x = ad::sum_groups(r.tangent * tape.constant(component_mask(n, 0)), 3);
    out.gradient.y = ad::sum_groups(r.tangent * tape.constant(component_mask(n, 1)), 3);
    out.gradient.z = ad::sum_groups(r.tangent * tape.constant(component_mask(n, 2)), 3);
    return out;
}

namespace {

Array incident_input(const FieldBundle& bundle, const Array& x, const Array& wi)
{
    return hstack(positional_encoding(bundle.normalize_points(x), bundle.config.position_frequencies),
                  positional_encoding(wi, bundle.config.direction_frequencies));
}

}  // namespace

IncidentVar field_incident(Tape& tape, const FieldBundle& bundle, const Array& x, const Array& wi,
                           bool trainable, bool polarized)
{
    const Var in = tape.constant(incident_input(bundle, x, wi));
    IncidentVar out;
    out.s0 = ad::softplus(bundle.incident_i.forward(tape, in, trainable), 1.0);
    const Var zero = tape.constant(Array::Zero(x.rows(), 3));
    out.dif_s2 = zero;
    if (!polarized) {
        out.dif_s1 = zero;
        out.spec_s1 = zero;
        out.spec_s2 = zero;
        return out;
    }
    out.dif_s1 = out.s0 * ad::tanh(bundle.incident_dif.forward(tape, in, trainable));
    // Radial squashing keeps sqrt(s1^2 + s2^2) <= s0.
    const Var u = bundle.incident_spec.forward(tape, in, trainable);
    const Var u1 = ad::cols(u, 0, 3);
    const Var u2 = ad::cols(u, 3, 3);
    const Var m = ad::sqrt(ad::square(u1) + ad::square(u2) + 1e-12);
    const Var g = out.s0 * ad::tanh(m) / m;
    out.spec_s1 = g * u1;
    out.spec_s2 = g * u2;
    return out;
}

IncidentField field_incident(const FieldBundle& bundle, const Array& x, const Array& wi)
{
    Tape tape;
    const IncidentVar v = field_incident(tape, bundle, x, wi, false, true);
    return {v.s0.value(), v.dif_s1.value(), v.spec_s1.value(), v.spec_s2.value()};
}

// ------------------------------------------------------------------ sampling

namespace {

Array sdf_value(const FieldBundle& bundle, const Array& x)
{
    const Array xn = bundle.normalize_points(x);
    return bundle.sdf.evaluate(positional_encoding(xn, bundle.config.position_frequencies)) *
           bundle.config.radius;
}

}  // namespace

RaySamples sample_rays(const FieldBundle& bundle, const Array& origins, const Array& dirs,
                       const SamplingConfig& cfg, std::mt19937_64* jitter)
{
    if (cfg.coarse < 2 || cfg.fine < 0)
        throw std::invalid_argument("sample_rays: need at least two coarse samples");
    const int R = static_cast<int>(origins.rows());
    const int C = cfg.coarse;
    const int N = cfg.coarse + cfg.fine;
    const Vec3 c = bundle.config.center;
    const double rb = bundle.config.radius;

    RaySamples s;
    s.rays = R;
    s.per_ray = N;
    s.origins = origins;
    s.dirs = dirs;
    s.t = Array::Zero(R * N, 1);
    s.delta = Array::Zero(R * N, 1);
    s.points = Array::Zero(R * N, 3);
    s.in_bounds.assign(R, 0);

    std::vector<double> near(R, 0.0), far(R, 0.0);
    Array coarse_pts(R * C, 3);
    Array coarse_t(R * C, 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int r = 0; r < R; ++r) {
        const Vec3 o = origins.row(r).transpose();
        const Vec3 d = dirs.row(r).transpose();
        const Vec3 oc = o - c;
        const double b = oc.dot(d);
        const double disc = b * b - (oc.squaredNorm() - rb * rb);
        if (disc > 0.0) {
            near[r] = std::max(0.0, -b - std::sqrt(disc));
            far[r] = -b + std::sqrt(disc);
            s.in_bounds[r] = far[r] > near[r] ? 1 : 0;
        }
        const double step = (far[r] - near[r]) / C;
        for (int k = 0; k < C; ++k) {
            const double j = jitter ? u01(*jitter) : 0.5;
            const double t = near[r] + (k + j) * step;
            coarse_t(r * C + k, 0) = t;
            coarse_pts.row(r * C + k) = (o + t * d).transpose();
        }
    }

    // Locate the first zero crossing of the current SDF along each ray.
    const Array d = sdf_value(bundle, coarse_pts);
    std::vector<double> lo(R), hi(R), root(R);
    std::vector<char> bracket(R, 0);
    for (int r = 0; r < R; ++r) {
        int best = 0;
        for (int k = 0; k < C; ++k) {
            if (k + 1 < C && d(r * C + k, 0) > 0.0 && d(r * C + k + 1, 0) <= 0.0) {
                bracket[r] = 1;
                lo[r] = coarse_t(r * C + k, 0);
                hi[r] = coarse_t(r * C + k + 1, 0);
                break;
            }
            if (d(r * C + k, 0) < d(r * C + best, 0))
                best = k;
        }
        root[r] = bracket[r] ? 0.5 * (lo[r] + hi[r]) : coarse_t(r * C + best, 0);
    }
    for (int it = 0; it < cfg.root_refinements; ++it) {
        Array mid(R, 3);
        for (int r = 0; r < R; ++r)
            mid.row(r) = origins.row(r) + root[r] * dirs.row(r);
        const Array dm = sdf_value(bundle, mid);
        for (int r = 0; r < R; ++r) {
            if (!bracket[r])
                continue;
            (dm(r, 0) > 0.0 ? lo[r] : hi[r]) = root[r];
            root[r] = 0.5 * (lo[r] + hi[r]);
        }
    }

    const double width = cfg.fine_width_betas * bundle.beta();
    std::vector<double> ts(N);
    for (int r = 0; r < R; ++r) {
        for (int k = 0; k < C; ++k)
            ts[k] = coarse_t(r * C + k, 0);
        const double step = (far[r] - near[r]) / C;
        const double w = std::max(width, 0.5 * step);
        for (int k = 0; k < cfg.fine; ++k) {
            const double j = jitter ? u01(*jitter) : 0.5;
            const double t = root[r] - w + 2.0 * w * (k + j) / cfg.fine;
            ts[C + k] = std::clamp(t, near[r], far[r]);
        }
        std::sort(ts.begin(), ts.end());
        for (int k = 0; k < N; ++k) {
            const int row = r * N + k;
            s.t(row, 0) = ts[k];
            s.delta(row, 0) = (k + 1 < N ? ts[k + 1] : far[r]) - ts[k];
            if (!s.in_bounds[r])
                s.delta(row, 0) = 0.0;
            s.points.row(row) = origins.row(r) + ts[k] * dirs.row(r);
        }
    }
    return s;
}

// --------------------------------------------------------------- aggregation

Var volsdf_density(const Var& d, const Var& alpha, const Var& beta)
{
    const Var e = 0.5 * ad::exp(-(ad::abs(d) / beta));
    ad::Mask outside = d.value() >= 0.0;
    return alpha * ad::select(outside, e, 1.0 - e);
}

Aggregate volume_aggregate(Tape& tape, const FieldBundle& bundle, const RaySamples& s,
                           const AggregateOptions& opt)
{
    const int N = s.per_ray;
    const Eigen::Index rows = s.points.rows();
    Aggregate out;

    Var d;
    V3 grad;
    if (opt.geometry_grad || opt.eikonal) {
        const SdfVar f = field_sdf(tape, bundle, s.points, opt.geometry_grad);
        d = f.value;
        grad = f.gradient;
    } else {
        const SdfEval f = field_sdf(bundle, s.points);
        d = tape.constant(f.value);
        grad = ad::v3_constant(tape, f.gradient);
    }
    const Var alpha = ad::exp(opt.geometry_grad ? tape.parameter(bundle.log_alpha)
                                                : tape.constant(bundle.log_alpha.value));
    const Var beta = bundle.config.beta_min +
                     ad::exp(opt.geometry_grad ? tape.parameter(bundle.log_beta)
                                               : tape.constant(bundle.log_beta.value));

    const Var sigma = volsdf_density(d, alpha, beta);
    const Var tau = sigma * tape.constant(s.delta);
    const Var w = ad::exp(-ad::group_exclusive_cumsum(tau, N)) * (1.0 - ad::exp(-tau));
    out.opacity = ad::sum_groups(w, N);
    out.residual = ad::exp(-ad::sum_groups(tau, N));
    const Var inv_opacity = 1.0 / ad::clamp_min(out.opacity, 1e-12);

    const Var gnorm = ad::sqrt(ad::dot(grad, grad) + 1e-12);
    const V3 nk = grad * (1.0 / gnorm);
    const ad::V3 blended = ad::sum_groups(nk * w, N) * inv_opacity;
    out.normal = ad::normalize(blended, 1e-30);
    out.normal_length = ad::v3_value(blended).rowwise().norm();

    if (opt.eikonal)
        out.eikonal = ad::mean(ad::square(gnorm - 1.0));

    const Array wv = w.value();
    out.x_surf = Array::Zero(s.rays, 3);
    out.empty.assign(s.rays, 0);
    for (int r = 0; r < s.rays; ++r) {
        const double o = out.opacity.value()(r, 0);
        out.empty[r] = o < kEmptyOpacity ? 1 : 0;
        if (o <= 0.0)
            continue;
        for (int k = 0; k < N; ++k)
            out.x_surf.row(r) += wv(r * N + k, 0) * s.points.row(r * N + k);
        out.x_surf.row(r) /= o;
    }

    const int F = bundle.config.position_frequencies;
    if (opt.material || opt.radiance) {
        const Array enc = positional_encoding(bundle.normalize_points(s.points), F);
        const Var in = tape.constant(enc);
        if (opt.material) {
            const Var a = ad::sigmoid(bundle.albedo.forward(tape, in, opt.material_grad));
            const double rmin = bundle.config.roughness_min;
            const Var r =
                rmin + (1.0 - rmin) * ad::sigmoid(bundle.roughness.forward(tape, in, opt.material_grad));
            out.albedo = ad::sum_groups(a * w, N) * inv_opacity;
            out.roughness = ad::sum_groups(r * w, N) * inv_opacity;
        }
        if (opt.radiance) {
            Array view(rows, 3);
            for (Eigen::Index i = 0; i < rows; ++i)
                view.row(i) = -s.dirs.row(i / N);
            const Var vin = tape.constant(positional_encoding(view, bundle.config.direction_frequencies));
            const Var rin = ad::hcat({in, nk.x, nk.y, nk.z, vin});
            const Var c = ad::softplus(bundle.radiance.forward(tape, rin, true), 1.0);
            out.radiance = ad::sum_groups(c * w, N);
        }
    }
    return out;
}

SurfaceEstimate aggregate_ray(const FieldBundle& bundle, const Vec3& origin, const Vec3& dir,
                              const SamplingConfig& cfg)
{
    Array o(1, 3), d(1, 3);
    o.row(0) = origin.transpose().array();
    d.row(0) = dir.normalized().transpose().array();
    const RaySamples s = sample_rays(bundle, o, d, cfg, nullptr);
    Tape tape;
    AggregateOptions opt;
    const Aggregate a = volume_aggregate(tape, bundle, s, opt);
    if (a.empty[0])
        throw EmptyRay("aggregate_ray: accumulated opacity below threshold");
    SurfaceEstimate e;
    e.x = a.x_surf.row(0).transpose().matrix();
    e.normal = ad::v3_value(a.normal).row(0).transpose().matrix();
    e.albedo = a.albedo.value().row(0).transpose();
    e.roughness = a.roughness.value()(0, 0);
    e.opacity = a.opacity.value()(0, 0);
    return e;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in)
{
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4))
        throw CheckpointError("checkpoint: truncated file");
    return v;
}

void put_floats(std::ostream& out, const Array& a)
{
    // Row-major float32.
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            const float f = static_cast<float>(a(i, j));
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
}

void get_floats(std::istream& in, Array& a)
{
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            float f = 0.0f;
            if (!in.read(reinterpret_cast<char*>(&f), 4))
                throw CheckpointError("checkpoint: truncated weights");
            a(i, j) = f;
        }
}

nlohmann::json config_json(const FieldConfig& c)
{
    return {{"center", {c.center.x(), c.center.y(), c.center.z()}},
            {"radius", c.radius},
            {"sdf_hidden", c.sdf_hidden},
            {"sdf_layers", c.sdf_layers},
            {"sdf_skip", c.sdf_skip},
            {"material_hidden", c.material_hidden},
            {"material_layers", c.material_layers},
            {"incident_hidden", c.incident_hidden},
            {"incident_layers", c.incident_layers},
            {"position_frequencies", c.position_frequencies},
            {"direction_frequencies", c.direction_frequencies},
            {"init_radius", c.init_radius},
            {"softplus_beta", c.softplus_beta},
            {"alpha_init", c.alpha_init},
            {"beta_init", c.beta_init},
            {"beta_min", c.beta_min},
            {"roughness_min", c.roughness_min}};
}

FieldConfig config_from_json(const nlohmann::json& j)
{
    FieldConfig c;
    const auto& ctr = j.at("center");
    c.center = Vec3(ctr.at(0).get<double>(), ctr.at(1).get<double>(), ctr.at(2).get<double>());
    c.radius = j.at("radius").get<double>();
    c.sdf_hidden = j.at("sdf_hidden").get<int>();
    c.sdf_layers = j.at("sdf_layers").get<int>();
    c.sdf_skip = j.at("sdf_skip").get<int>();
    c.material_hidden = j.at("material_hidden").get<int>();
    c.material_layers = j.at("material_layers").get<int>();
    c.incident_hidden = j.at("incident_hidden").get<int>();
    c.incident_layers = j.at("incident_layers").get<int>();
    c.position_frequencies = j.at("position_frequencies").get<int>();
    c.direction_frequencies = j.at("direction_frequencies").get<int>();
    c.init_radius = j.at("init_radius").get<double>();
    c.softplus_beta = j.at("softplus_beta").get<double>();
    c.alpha_init = j.at("alpha_init").get<double>();
    c.beta_init = j.at("beta_init").get<double>();
    c.beta_min = j.at("beta_min").get<double>();
    c.roughness_min = j.at("roughness_min").get<double>();
    c.validate();
    return c;
}

}  // namespace

void write_checkpoint(const std::string& path, const FieldBundle& bundle, int stage)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw CheckpointError("checkpoint: cannot write " + path);
    out.write("NSFC", 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(stage));
    const std::string cfg = config_json(bundle.config).dump();
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const auto nets = bundle.networks();
    put_u32(out, static_cast<std::uint32_t>(nets.size()));
    for (const Mlp* m : nets) {
        put_u32(out, static_cast<std::uint32_t>(m->name().size()));
        out.write(m->name().data(), static_cast<std::streamsize>(m->name().size()));
        put_u32(out, static_cast<std::uint32_t>(m->layer_count()));
        for (int l = 0; l < m->layer_count(); ++l) {
            put_u32(out, static_cast<std::uint32_t>(m->layer_output_dim(l)));
            put_u32(out, static_cast<std::uint32_t>(m->layer_input_dim(l)));
        }
        for (const ad::Parameter& p : m->parameters())
            put_floats(out, p.value);
    }
    put_floats(out, bundle.log_alpha.value);
    put_floats(out, bundle.log_beta.value);
    if (!out)
        throw CheckpointError("checkpoint: write failed for " + path);
}

FieldBundle read_checkpoint(const std::string& path, int* stage)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointError("checkpoint: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "NSFC", 4) != 0)
        throw CheckpointError("checkpoint: bad magic in " + path);
    if (get_u32(in) != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version in " + path);
    const std::uint32_t st = get_u32(in);
    if (stage)
        *stage = static_cast<int>(st);
    std::string cfg(get_u32(in), '\0');
    if (!in.read(cfg.data(), static_cast<std::streamsize>(cfg.size())))
        throw CheckpointError("checkpoint: truncated config");
    FieldConfig config;
    try {
        config = config_from_json(nlohmann::json::parse(cfg));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad config: ") + e.what());
    }
    FieldBundle bundle(config, 0);
    const std::uint32_t count = get_u32(in);
    bool saw_radiance = false;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(get_u32(in), '\0');
        in.read(name.data(), static_cast<std::streamsize>(name.size()));
        Mlp* target = nullptr;
        for (Mlp* m : bundle.networks())
            if (m->name() == name)
                target = m;
        if (!target)
            throw CheckpointError("checkpoint: unknown network " + name);
        saw_radiance = saw_radiance || name == "radiance";
        const int layers = static_cast<int>(get_u32(in));
        if (layers != target->layer_count())
            throw CheckpointError("checkpoint: layer count mismatch for " + name);
        for (int l = 0; l < layers; ++l) {
            const int o = static_cast<int>(get_u32(in));
            const int k = static_cast<int>(get_u32(in));
            if (o != target->layer_output_dim(l) || k != target->layer_input_dim(l))
                throw CheckpointError("checkpoint: layer shape mismatch for " + name);
        }
        for (ad::Parameter& p : target->parameters())
            get_floats(in, p.value);
    }
    bundle.has_radiance = saw_radiance;
    get_floats(in, bundle.log_alpha.value);
    get_floats(in, bundle.log_beta.value);
    return bundle;
}

}  // namespace neisf
