#include "neisf/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "neisf/tracer.hpp"

namespace neisf {

using ad::Array;
using ad::Tape;
using ad::Var;
using nlohmann::json;

namespace fs = std::filesystem;

namespace {

constexpr int kChunk = 16;  // rays per tape; fixed so results do not depend on threads

std::string view_file(int view, const std::string& suffix)
{
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", view);
    return buf + suffix;
}

json read_json(const fs::path& p)
{
    std::ifstream in(p);
    if (!in)
        throw MissingArtifact("missing dataset file: " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::invalid_argument("cannot parse " + p.string() + ": " + e.what());
    }
}

template <class M>
M matrix_from_json(const json& j)
{
    M m;
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c)
            m(r, c) = j.at(r).at(c).get<double>();
    return m;
}

Image load_image(const fs::path& p, const std::string& what)
{
    if (!fs::exists(p))
        throw MissingArtifact("missing " + what + ": " + p.string());
    return read_pfm(p.string());
}

}  // namespace

// ------------------------------------------------------------------ dataset

std::vector<View> load_poses(const fs::path& path)
{
    const json poses = read_json(path);
    if (!poses.is_array())
        throw std::invalid_argument("poses file must hold an array: " + path.string());
    std::vector<View> out;
    try {
        for (const json& p : poses) {
            View v;
            v.index = p.at("view").get<int>();
            v.test = p.value("split", std::string("train")) == "test";
            v.camera.width = p.at("width").get<int>();
            v.camera.height = p.at("height").get<int>();
            v.camera.K = matrix_from_json<Eigen::Matrix3d>(p.at("K"));
            v.camera.cam_to_world = matrix_from_json<Eigen::Matrix4d>(p.at("cam_to_world"));
            if (v.camera.width < 1 || v.camera.height < 1)
                throw std::invalid_argument("non-positive image size");
            out.push_back(v);
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument("malformed poses file " + path.string() + ": " + e.what());
    }
    return out;
}

Dataset Dataset::load(const fs::path& dir, bool aovs)
{
    Dataset d;
    d.dir = dir;
    const json meta = read_json(dir / "dataset.json");
    const json& c = meta.at("bound_center");
    d.bound_center = Vec3(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>());
    d.bound_radius = meta.at("bound_radius").get<double>();

    for (const View& pose : load_poses(dir / "poses.json")) {
        DatasetView v;
        v.index = pose.index;
        v.test = pose.test;
        v.camera = pose.camera;
        const fs::path stokes = dir / view_file(v.index, ".pstk");
        if (!fs::exists(stokes))
            throw MissingArtifact("missing Stokes image: " + stokes.string());
        v.stokes = read_pstk(stokes.string());
        v.mask = load_image(dir / view_file(v.index, "_mask.pfm"), "mask");
        if (v.stokes.width != v.camera.width || v.stokes.height != v.camera.height ||
            v.mask.width != v.camera.width || v.mask.height != v.camera.height)
            throw std::invalid_argument("dataset: image size disagrees with poses.json for view " +
                                        std::to_string(v.index));
        if (aovs) {
            v.normal = load_image(dir / view_file(v.index, "_normal.pfm"), "GT AOV normal");
            v.albedo = load_image(dir / view_file(v.index, "_albedo.pfm"), "GT AOV albedo");
            v.roughness = load_image(dir / view_file(v.index, "_roughness.pfm"), "GT AOV roughness");
            v.diffuse = load_image(dir / view_file(v.index, "_diffuse.pfm"), "GT AOV diffuse");
            v.specular = load_image(dir / view_file(v.index, "_specular.pfm"), "GT AOV specular");
        }
        d.views.push_back(std::move(v));
    }
    if (d.views.empty())
        throw std::invalid_argument("dataset: poses.json lists no views");
    return d;
}

std::vector<const DatasetView*> Dataset::split(bool test) const
{
    std::vector<const DatasetView*> out;
    for (const DatasetView& v : views)
        if (v.test == test)
            out.push_back(&v);
    return out;
}

// ------------------------------------------------------------------- config

void TrainConfig::validate() const
{
    for (int s = 0; s < 3; ++s)
        if (iterations[s] < 0 || batch_rays[s] < 1)
            throw std::invalid_argument("TrainConfig: iteration counts must be >= 0 and batches >= 1");
    if (!(lr_stage1 > 0 && lr > 0 && lr_sdf_stage3 > 0 && lr_density > 0))
        throw std::invalid_argument("TrainConfig: learning rates must be positive");
    if (!(lr_final_fraction > 0 && lr_final_fraction <= 1))
        throw std::invalid_argument("TrainConfig: lr_final_fraction outside (0, 1]");
    if (lambda_eik < 0 || lambda_mask < 0)
        throw std::invalid_argument("TrainConfig: loss weights must be non-negative");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0))
        throw std::invalid_argument("TrainConfig: invalid optimiser moments");
    if (quadrature < 1 || eval_quadrature < 1)
        throw std::invalid_argument("TrainConfig: quadrature counts must be positive");
    if (threads < 0 || log_every < 1 || state_every < 1)
        throw std::invalid_argument("TrainConfig: threads >= 0, log_every and state_every >= 1");
    fields.validate();
}

json to_json(const TrainConfig& c)
{
    const FieldConfig& f = c.fields;
    return {
        {"iterations", c.iterations},
        {"batch_rays", c.batch_rays},
        {"lr_stage1", c.lr_stage1},
        {"lr", c.lr},
        {"lr_sdf_stage3", c.lr_sdf_stage3},
        {"lr_density", c.lr_density},
        {"lr_final_fraction", c.lr_final_fraction},
        {"lambda_eik", c.lambda_eik},
        {"lambda_mask", c.lambda_mask},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_eps", c.adam_eps},
        {"seed", c.seed},
        {"polarized", c.polarized},
        {"quadrature", c.quadrature},
        {"eval_quadrature", c.eval_quadrature},
        {"sampling",
         {{"coarse", c.sampling.coarse},
          {"fine", c.sampling.fine},
          {"root_refinements", c.sampling.root_refinements},
          {"fine_width_betas", c.sampling.fine_width_betas}}},
        {"fields",
         {{"sdf_hidden", f.sdf_hidden},
          {"sdf_layers", f.sdf_layers},
          {"sdf_skip", f.sdf_skip},
          {"material_hidden", f.material_hidden},
          {"material_layers", f.material_layers},
          {"incident_hidden", f.incident_hidden},
          {"incident_layers", f.incident_layers},
          {"position_frequencies", f.position_frequencies},
          {"direction_frequencies", f.direction_frequencies},
          {"init_radius", f.init_radius},
          {"softplus_beta", f.softplus_beta},
          {"alpha_init", f.alpha_init},
          {"beta_init", f.beta_init},
          {"beta_min", f.beta_min},
          {"roughness_min", f.roughness_min}}},
        {"threads", c.threads},
        {"log_every", c.log_every},
        {"state_every", c.state_every},
    };
}

namespace {

template <class T>
void take(const json& j, const char* key, T& out)
{
    if (j.contains(key))
        out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const json& known, const std::string& where)
{
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key()))
            throw std::invalid_argument("unknown " + where + " key: " + it.key());
}

}  // namespace

void apply_json(TrainConfig& c, const json& j)
{
    if (!j.is_object())
        throw std::invalid_argument("train config must be a JSON object");
    const json known = to_json(c);
    reject_unknown(j, known, "train config");
    take(j, "iterations", c.iterations);
    take(j, "batch_rays", c.batch_rays);
    take(j, "lr_stage1", c.lr_stage1);
    take(j, "lr", c.lr);
    take(j, "lr_sdf_stage3", c.lr_sdf_stage3);
    take(j, "lr_density", c.lr_density);
    take(j, "lr_final_fraction", c.lr_final_fraction);
    take(j, "lambda_eik", c.lambda_eik);
    take(j, "lambda_mask", c.lambda_mask);
    take(j, "adam_beta1", c.adam_beta1);
    take(j, "adam_beta2", c.adam_beta2);
    take(j, "adam_eps", c.adam_eps);
    take(j, "seed", c.seed);
    take(j, "polarized", c.polarized);
    take(j, "quadrature", c.quadrature);
    take(j, "eval_quadrature", c.eval_quadrature);
    take(j, "threads", c.threads);
    take(j, "log_every", c.log_every);
    take(j, "state_every", c.state_every);
    if (j.contains("sampling")) {
        const json& s = j.at("sampling");
        reject_unknown(s, known.at("sampling"), "sampling");
        take(s, "coarse", c.sampling.coarse);
        take(s, "fine", c.sampling.fine);
        take(s, "root_refinements", c.sampling.root_refinements);
        take(s, "fine_width_betas", c.sampling.fine_width_betas);
    }
    if (j.contains("fields")) {
        const json& f = j.at("fields");
        reject_unknown(f, known.at("fields"), "fields");
        FieldConfig& o = c.fields;
        take(f, "sdf_hidden", o.sdf_hidden);
        take(f, "sdf_layers", o.sdf_layers);
        take(f, "sdf_skip", o.sdf_skip);
        take(f, "material_hidden", o.material_hidden);
        take(f, "material_layers", o.material_layers);
        take(f, "incident_hidden", o.incident_hidden);
        take(f, "incident_layers", o.incident_layers);
        take(f, "position_frequencies", o.position_frequencies);
        take(f, "direction_frequencies", o.direction_frequencies);
        take(f, "init_radius", o.init_radius);
        take(f, "softplus_beta", o.softplus_beta);
        take(f, "alpha_init", o.alpha_init);
        take(f, "beta_init", o.beta_init);
        take(f, "beta_min", o.beta_min);
        take(f, "roughness_min", o.roughness_min);
    }
    c.validate();
}

// -------------------------------------------------------------------- Adam

void Adam::add(const std::vector<ad::Parameter*>& params, double lr)
{
    for (ad::Parameter* p : params) {
        Slot s;
        s.param = p;
        s.lr = lr;
        s.m = Array::Zero(p->value.rows(), p->value.cols());
        s.v = s.m;
        slots_.push_back(std::move(s));
    }
}

void Adam::step(const ad::Gradients& grads, double lr_scale)
{
    for (Slot& s : slots_) {
        const auto it = grads.find(s.param);
        if (it == grads.end())
            continue;
        const Array& g = it->second;
        ++s.steps;
        s.m = beta1_ * s.m + (1.0 - beta1_) * g;
        s.v = beta2_ * s.v + (1.0 - beta2_) * g.square();
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.steps));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.steps));
        s.param->value -= (s.lr * lr_scale) * (s.m / c1) / ((s.v / c2).sqrt() + eps_);
    }
}

// ----------------------------------------------------------------- training

std::vector<ad::Parameter*> all_parameters(FieldBundle& bundle)
{
    std::vector<ad::Parameter*> out;
    for (Mlp* m : bundle.networks())
        for (ad::Parameter& p : m->parameters())
            out.push_back(&p);
    out.push_back(&bundle.log_alpha);
    out.push_back(&bundle.log_beta);
    return out;
}

FieldBundle initial_bundle(const Dataset& data, const TrainConfig& cfg)
{
    FieldConfig f = cfg.fields;
    f.center = data.bound_center;
    f.radius = data.bound_radius;
    return FieldBundle(f, stream_seed(cfg.seed, 0x6669656c64ULL));
}

fs::path stage_checkpoint(const fs::path& dir, int stage)
{
    return dir / ("stage" + std::to_string(stage) + ".nsfc");
}

fs::path stage_state(const fs::path& dir, int stage)
{
    return dir / ("stage" + std::to_string(stage) + ".state");
}

namespace {

struct PixelRef {
    int view = 0;  // position in the train list
    int x = 0;
    int y = 0;
};

struct Batch {
    std::vector<PixelRef> pixels;
    Array origins;
    Array dirs;
    Array camera_x;
    Array s0;      // R x 3
    Array stokes;  // R x 9: s0 rgb, s1 rgb, s2 rgb
    Array mask;    // R x 1
};

struct PixelPools {
    std::vector<const DatasetView*> views;
    std::vector<PixelRef> masked;
    std::vector<PixelRef> bounded;  // primary ray meets the bounding sphere
};

bool meets_sphere(const Ray& r, const Vec3& c, double radius)
{
    const Vec3 oc = r.origin - c;
    const double b = oc.dot(r.dir);
    const double disc = b * b - (oc.squaredNorm() - radius * radius);
    return disc > 0.0 && -b + std::sqrt(disc) > 0.0;
}

PixelPools make_pools(const Dataset& data)
{
    PixelPools p;
    p.views = data.split(false);
    if (p.views.empty())
        throw std::invalid_argument("dataset has no training views");
    for (int v = 0; v < static_cast<int>(p.views.size()); ++v) {
        const DatasetView& view = *p.views[v];
        for (int y = 0; y < view.camera.height; ++y)
            for (int x = 0; x < view.camera.width; ++x) {
                if (view.mask.at(x, y) > 0.5f)
                    p.masked.push_back({v, x, y});
                if (meets_sphere(view.camera.pixel_ray(x, y), data.bound_center, data.bound_radius))
                    p.bounded.push_back({v, x, y});
            }
    }
    if (p.masked.empty())
        throw std::invalid_argument("dataset masks are empty");
    return p;
}

Batch make_batch(const PixelPools& pools, const std::vector<PixelRef>& picks)
{
    const int R = static_cast<int>(picks.size());
    Batch b;
    b.pixels = picks;
    b.origins.resize(R, 3);
    b.dirs.resize(R, 3);
    b.camera_x.resize(R, 3);
    b.s0.resize(R, 3);
    b.stokes.resize(R, 9);
    b.mask.resize(R, 1);
    for (int i = 0; i < R; ++i) {
        const PixelRef& p = picks[i];
        const DatasetView& v = *pools.views[p.view];
        const Ray ray = v.camera.pixel_ray(p.x, p.y);
        b.origins.row(i) = ray.origin.transpose().array();
        b.dirs.row(i) = ray.dir.transpose().array();
        b.camera_x.row(i) = v.camera.pixel_frame(ray.dir).x_axis.transpose().array();
        for (int k = 0; k < 3; ++k)
            for (int c = 0; c < 3; ++c)
                b.stokes(i, 3 * k + c) = v.stokes.at(k, c, p.x, p.y);
        b.s0.row(i) = b.stokes.row(i).head(3);
        b.mask(i, 0) = v.mask.at(p.x, p.y) > 0.5f ? 1.0 : 0.0;
    }
    return b;
}

Batch slice(const Batch& b, int first, int count)
{
    Batch s;
    s.pixels.assign(b.pixels.begin() + first, b.pixels.begin() + first + count);
    s.origins = b.origins.middleRows(first, count);
    s.dirs = b.dirs.middleRows(first, count);
    s.camera_x = b.camera_x.middleRows(first, count);
    s.s0 = b.s0.middleRows(first, count);
    s.stokes = b.stokes.middleRows(first, count);
    s.mask = b.mask.middleRows(first, count);
    return s;
}

struct LossParts {
    double total = 0.0;
    double l1 = 0.0;
    double mask = 0.0;
    double eikonal = 0.0;
};

struct ChunkResult {
    ad::Gradients grads;
    LossParts parts;
};

// Loss of one chunk, already divided by the full-batch normalisers so the
// chunk losses add up to the batch mean.
ChunkResult chunk_loss(int stage, const FieldBundle& bundle, const TrainConfig& cfg,
                       const Batch& b, const LossParts& norm, std::uint64_t seed)
{
    std::mt19937_64 jitter(seed);
    const RaySamples samples = sample_rays(bundle, b.origins, b.dirs, cfg.sampling, &jitter);
    Tape tape;
    Var loss;
    ChunkResult out;
    if (stage == 1) {
        AggregateOptions ao;
        ao.geometry_grad = true;
        ao.material = false;
        ao.radiance = true;
        ao.eikonal = true;
        const Aggregate a = volume_aggregate(tape, bundle, samples, ao);
        const Var m = tape.constant(b.mask);
        const Var l1 = ad::sum(ad::abs(a.radiance - tape.constant(b.s0)) * m) * norm.l1;
        const Var o = ad::clamp_max(ad::clamp_min(a.opacity, 1e-4), 1.0 - 1e-4);
        const Var bce =
            -ad::sum(m * ad::log(o) + (1.0 - m) * ad::log(1.0 - o)) * norm.mask;
        const Var eik = a.eikonal * norm.eikonal;
        loss = l1 + cfg.lambda_mask * bce + cfg.lambda_eik * eik;
        out.parts = {0.0, l1.value()(0, 0), bce.value()(0, 0), eik.value()(0, 0)};
    } else {
        RenderOptions ro;
        ro.quadrature = cfg.quadrature;
        ro.polarized = cfg.polarized;
        ro.geometry_grad = stage == 3;
        ro.eikonal = stage == 3;
        ro.material_grad = true;
        ro.incident_grad = true;
        ro.sampling = cfg.sampling;
        const PixelShading p = shade_samples(tape, bundle, samples, b.camera_x, ro);
        Var pred;
        Array target = b.stokes;
        if (cfg.polarized) {
            pred = ad::hcat({p.total.s0, p.total.s1, p.total.s2});
        } else {
            pred = p.total.s0;
            target = b.s0;
        }
        const Var l1 = ad::sum(ad::abs(pred - tape.constant(target))) * norm.l1;
        loss = l1;
        out.parts.l1 = l1.value()(0, 0);
        if (stage == 3) {
            const Var eik = p.aggregate.eikonal * norm.eikonal;
            loss = loss + cfg.lambda_eik * eik;
            out.parts.eikonal = eik.value()(0, 0);
        }
    }
    out.parts.total = loss.value()(0, 0);
    tape.backward(loss);
    tape.accumulate(out.grads);
    return out;
}

// --------------------------------------------------------- resumable state

constexpr char kStateMagic[4] = {'N', 'S', 'F', 'S'};
constexpr std::uint32_t kStateVersion = 1;

template <class T>
void put(std::ostream& out, const T& v)
{
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in)
{
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw CheckpointError("training state: truncated file");
    return v;
}

void put_array(std::ostream& out, const Array& a)
{
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.cols()));
    out.write(reinterpret_cast<const char*>(a.data()), sizeof(double) * a.size());
}

void get_array(std::istream& in, Array& a)
{
    const auto rows = get<std::uint32_t>(in);
    const auto cols = get<std::uint32_t>(in);
    if (rows != a.rows() || cols != a.cols())
        throw CheckpointError("training state: shape mismatch");
    if (!in.read(reinterpret_cast<char*>(a.data()), sizeof(double) * a.size()))
        throw CheckpointError("training state: truncated file");
}

struct StateHeader {
    int stage = 0;
    int next_iteration = 0;
    double seconds = 0.0;
    std::string rng;
    std::vector<double> losses;
};

void save_state(const fs::path& path, const StateHeader& h, FieldBundle& bundle, Adam& adam)
{
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out.write(kStateMagic, 4);
        put<std::uint32_t>(out, kStateVersion);
        put<std::int32_t>(out, h.stage);
        put<std::int32_t>(out, h.next_iteration);
        put<double>(out, h.seconds);
        put<std::uint8_t>(out, bundle.has_radiance ? 1 : 0);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(h.rng.size()));
        out.write(h.rng.data(), static_cast<std::streamsize>(h.rng.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(h.losses.size()));
        out.write(reinterpret_cast<const char*>(h.losses.data()),
                  static_cast<std::streamsize>(sizeof(double) * h.losses.size()));
        for (ad::Parameter* p : all_parameters(bundle))
            put_array(out, p->value);
        for (Adam::Slot& s : adam.slots()) {
            put_array(out, s.m);
            put_array(out, s.v);
            put<std::int64_t>(out, s.steps);
        }
        if (!out)
            throw CheckpointError("training state: write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

StateHeader load_state(const fs::path& path, FieldBundle& bundle, Adam& adam)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw MissingArtifact("missing training state: " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kStateMagic, 4) != 0)
        throw CheckpointError("training state: bad magic in " + path.string());
    if (get<std::uint32_t>(in) != kStateVersion)
        throw CheckpointError("training state: unsupported version");
    StateHeader h;
    h.stage = get<std::int32_t>(in);
    h.next_iteration = get<std::int32_t>(in);
    h.seconds = get<double>(in);
    bundle.has_radiance = get<std::uint8_t>(in) != 0;
    h.rng.resize(get<std::uint32_t>(in));
    if (!in.read(h.rng.data(), static_cast<std::streamsize>(h.rng.size())))
        throw CheckpointError("training state: truncated file");
    h.losses.resize(get<std::uint32_t>(in));
    if (!in.read(reinterpret_cast<char*>(h.losses.data()),
                 static_cast<std::streamsize>(sizeof(double) * h.losses.size())))
        throw CheckpointError("training state: truncated file");
    for (ad::Parameter* p : all_parameters(bundle))
        get_array(in, p->value);
    for (Adam::Slot& s : adam.slots()) {
        get_array(in, s.m);
        get_array(in, s.v);
        s.steps = get<std::int64_t>(in);
    }
    return h;
}

void append_log(const fs::path& path, const IterationLog& l)
{
    const bool fresh = !fs::exists(path);
    std::ofstream out(path, std::ios::app);
    if (fresh)
        out << "stage,iteration,loss,l1,mask,eikonal,alpha,beta,seconds\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.3f\n", l.stage,
                  l.iteration, l.loss, l.l1, l.mask, l.eikonal, l.alpha, l.beta, l.seconds);
    out << buf;
}

std::vector<PixelRef> draw(const std::vector<PixelRef>& pool, int n, std::mt19937_64& rng)
{
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<PixelRef> out(n);
    for (PixelRef& p : out)
        p = pool[pick(rng)];
    return out;
}

}  // namespace

StageReport run_stage(int stage, const Dataset& data, FieldBundle& bundle, const TrainConfig& cfg,
                      const TrainSession& session)
{
    if (stage < 1 || stage > 3)
        throw std::invalid_argument("run_stage: stage must be 1, 2 or 3");
    cfg.validate();
    if (stage > 1)
        bundle.has_radiance = false;

    Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::vector<ad::Parameter*> sdf_params;
    for (ad::Parameter& p : bundle.sdf.parameters())
        sdf_params.push_back(&p);
    const std::vector<ad::Parameter*> density{&bundle.log_alpha, &bundle.log_beta};
    if (stage == 1) {
        adam.add(sdf_params, cfg.lr_stage1);
        adam.add(bundle.radiance_parameters(), cfg.lr_stage1);
        adam.add(density, cfg.lr_density);
    } else {
        adam.add(bundle.material_parameters(), cfg.lr);
        adam.add(bundle.incident_parameters(), cfg.lr);
        if (stage == 3) {
            adam.add(sdf_params, cfg.lr_sdf_stage3);
            adam.add(density, cfg.lr_sdf_stage3);
        }
    }

    const PixelPools pools = make_pools(data);
    std::mt19937_64 rng(stream_seed(cfg.seed, 0x7374616765ULL, static_cast<std::uint64_t>(stage)));
    StageReport report;
    report.stage = stage;
    int start = 0;
    double elapsed = 0.0;
    const bool persist = !session.out_dir.empty();
    if (persist)
        fs::create_directories(session.out_dir);
    const fs::path state_path = persist ? stage_state(session.out_dir, stage) : fs::path();
    if (persist && session.resume && fs::exists(state_path)) {
        StateHeader h = load_state(state_path, bundle, adam);
        if (h.stage != stage)
            throw CheckpointError("training state belongs to another stage");
        std::istringstream(h.rng) >> rng;
        start = h.next_iteration;
        elapsed = h.seconds;
        report.losses = std::move(h.losses);
    }

    const int iterations = cfg.iterations[stage - 1];
    const int R = cfg.batch_rays[stage - 1];
    const auto clock_start = std::chrono::steady_clock::now();
    const auto seconds_now = [&] {
        return elapsed + std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    };
    const auto snapshot = [&](int next) {
        if (!persist)
            return;
        StateHeader h;
        h.stage = stage;
        h.next_iteration = next;
        h.seconds = seconds_now();
        std::ostringstream os;
        os << rng;
        h.rng = os.str();
        h.losses = report.losses;
        save_state(state_path, h, bundle, adam);
    };

    int run = 0;
    for (int it = start; it < iterations; ++it) {
        if ((session.stop_after >= 0 && run >= session.stop_after) ||
            (session.interrupt && session.interrupt->load())) {
            snapshot(it);
            report.iterations_run = run;
            report.seconds = seconds_now();
            return report;
        }
        std::vector<PixelRef> picks;
        if (stage == 1) {
            picks = draw(pools.masked, R / 2, rng);
            const std::vector<PixelRef> rest = draw(pools.bounded, R - R / 2, rng);
            picks.insert(picks.end(), rest.begin(), rest.end());
        } else {
            picks = draw(pools.masked, R, rng);
        }
        const Batch batch = make_batch(pools, picks);
        const int chunks = (R + kChunk - 1) / kChunk;
        std::vector<std::uint64_t> seeds(chunks);
        for (auto& s : seeds)
            s = rng();

        LossParts norm;
        const double masked = std::max(1.0, batch.mask.sum());
        const int width = stage == 1 ? 3 : (cfg.polarized ? 9 : 3);
        norm.l1 = 1.0 / ((stage == 1 ? masked : R) * width);
        norm.mask = 1.0 / R;
        std::vector<ChunkResult> results(chunks);
        std::vector<double> share(chunks);
        for (int c = 0; c < chunks; ++c)
            share[c] = static_cast<double>(std::min(kChunk, R - c * kChunk)) / R;
        parallel_rows(chunks, cfg.threads, [&](int c) {
            const int first = c * kChunk;
            const int count = std::min(kChunk, R - first);
            LossParts n = norm;
            n.eikonal = share[c];
            results[c] = chunk_loss(stage, bundle, cfg, slice(batch, first, count), n, seeds[c]);
        });

        LossParts parts;
        ad::Gradients grads;
        for (const ChunkResult& r : results) {
            parts.total += r.parts.total;
            parts.l1 += r.parts.l1;
            parts.mask += r.parts.mask;
            parts.eikonal += r.parts.eikonal;
            for (const auto& [p, g] : r.grads) {
                auto f = grads.find(p);
                if (f == grads.end())
                    grads.emplace(p, g);
                else
                    f->second += g;
            }
        }
        bool finite = std::isfinite(parts.total);
        for (const auto& [p, g] : grads)
            finite = finite && g.allFinite();
        if (!finite) {
            std::ostringstream msg;
            msg << "non-finite loss or gradient in stage " << stage << " iteration " << it
                << "; batch pixels (view x y):";
            for (const PixelRef& p : picks)
                msg << ' ' << pools.views[p.view]->index << ':' << p.x << ':' << p.y;
            throw NumericalFailure(msg.str());
        }

        const double progress = iterations > 1 ? static_cast<double>(it) / (iterations - 1) : 0.0;
        adam.step(grads, std::pow(cfg.lr_final_fraction, progress));
        report.losses.push_back(parts.total);
        ++run;

        if ((it + 1) % cfg.log_every == 0 || it + 1 == iterations) {
            IterationLog l{stage, it + 1, parts.total, parts.l1, parts.mask, parts.eikonal,
                           bundle.alpha(), bundle.beta(), seconds_now()};
            if (persist)
                append_log(session.out_dir / "train_log.csv", l);
            if (session.on_log)
                session.on_log(l);
        }
        if ((it + 1) % cfg.state_every == 0 && it + 1 < iterations)
            snapshot(it + 1);
    }

    report.iterations_run = run;
    report.completed = true;
    report.seconds = seconds_now();
    if (persist) {
        write_checkpoint(stage_checkpoint(session.out_dir, stage).string(), bundle, stage);
        std::error_code ec;
        fs::remove(state_path, ec);
    }
    return report;
}

// ------------------------------------------------------------------ metrics

namespace {

template <class F>
void for_mask(const Image& mask, F&& f)
{
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y) > 0.5f)
                f(x, y);
}

void check_same_size(const Image& a, const Image& b, const Image& mask)
{
    if (a.width != b.width || a.height != b.height || a.channels != b.channels ||
        mask.width != a.width || mask.height != a.height)
        throw std::invalid_argument("metric: image sizes differ");
}

}  // namespace

double normal_mae(const Image& pred, const Image& gt, const Image& mask)
{
    check_same_size(pred, gt, mask);
    double acc = 0.0;
    long n = 0;
    for_mask(mask, [&](int x, int y) {
        Vec3 a(pred.at(x, y, 0), pred.at(x, y, 1), pred.at(x, y, 2));
        Vec3 b(gt.at(x, y, 0), gt.at(x, y, 1), gt.at(x, y, 2));
        // atan2 keeps identical normals at exactly zero; a zero vector counts as 90 degrees
        if (a.norm() > 0.0 && b.norm() > 0.0)
            acc += std::atan2(a.cross(b).norm(), a.dot(b));
        else
            acc += std::numbers::pi / 2;
        ++n;
    });
    return n ? acc / n * 180.0 / std::numbers::pi : 0.0;
}

double psnr(const Image& pred, const Image& gt, const Image& mask)
{
    check_same_size(pred, gt, mask);
    double se = 0.0;
    double peak = 0.0;
    long n = 0;
    for_mask(mask, [&](int x, int y) {
        for (int c = 0; c < gt.channels; ++c) {
            const double d = double(pred.at(x, y, c)) - gt.at(x, y, c);
            se += d * d;
            peak = std::max(peak, double(gt.at(x, y, c)));
            ++n;
        }
    });
    if (n == 0 || se == 0.0)
        return std::numeric_limits<double>::infinity();
    const double mse = se / n;
    return 10.0 * std::log10(peak * peak / mse);
}

double si_l1(const Image& pred, const Image& gt, const Image& mask)
{
    check_same_size(pred, gt, mask);
    double acc = 0.0;
    long n = 0;
    for (int c = 0; c < gt.channels; ++c) {
        double xy = 0.0, xx = 0.0;
        for_mask(mask, [&](int x, int y) {
            xy += double(pred.at(x, y, c)) * gt.at(x, y, c);
            xx += double(pred.at(x, y, c)) * pred.at(x, y, c);
        });
        const double k = xx > 0.0 ? xy / xx : 0.0;
        for_mask(mask, [&](int x, int y) {
            acc += std::abs(k * pred.at(x, y, c) - gt.at(x, y, c));
            ++n;
        });
    }
    return n ? acc / n : 0.0;
}

double dolp_mae(const PolarizedImage& pred, const PolarizedImage& gt, const Image& mask)
{
    if (pred.width != gt.width || pred.height != gt.height || mask.width != gt.width ||
        mask.height != gt.height)
        throw std::invalid_argument("metric: image sizes differ");
    double acc = 0.0;
    long n = 0;
    for_mask(mask, [&](int x, int y) {
        for (int c = 0; c < 3; ++c) {
            const Eigen::Vector3d a(pred.at(0, c, x, y), pred.at(1, c, x, y), pred.at(2, c, x, y));
            const Eigen::Vector3d b(gt.at(0, c, x, y), gt.at(1, c, x, y), gt.at(2, c, x, y));
            acc += std::abs(dolp(a) - dolp(b));
            ++n;
        }
    });
    return n ? acc / n : 0.0;
}

Image random_normals(const Image& mask, std::uint64_t seed)
{
    Image out(mask.width, mask.height, 3);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    for_mask(mask, [&](int x, int y) {
        const Vec3 v = Vec3(g(rng), g(rng), g(rng)).normalized();
        for (int c = 0; c < 3; ++c)
            out.at(x, y, c) = static_cast<float>(v[c]);
    });
    return out;
}

namespace {

json metric_value(double v)
{
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    return v;
}

json view_json(const ViewMetrics& m)
{
    return {{"normal_mae_deg", metric_value(m.normal_mae)},
            {"psnr_mixed", metric_value(m.psnr_mixed)},
            {"psnr_diffuse", metric_value(m.psnr_diffuse)},
            {"psnr_specular", metric_value(m.psnr_specular)},
            {"si_l1_albedo", metric_value(m.si_l1_albedo)},
            {"si_l1_roughness", metric_value(m.si_l1_roughness)},
            {"dolp_mae", metric_value(m.dolp_mae)}};
}

}  // namespace

json MetricsReport::to_json() const
{
    json views_json = json::array();
    for (const ViewMetrics& v : views) {
        json j = view_json(v);
        j["view"] = v.view;
        views_json.push_back(j);
    }
    return {{"mean", view_json(mean)}, {"views", views_json}};
}

void MetricsReport::write(const fs::path& json_path, const fs::path& csv_path) const
{
    {
        std::ofstream out(json_path);
        out << to_json().dump(2) << '\n';
        if (!out)
            throw ImageIoError("write failed: " + json_path.string());
    }
    std::ofstream out(csv_path);
    out << "view,normal_mae_deg,psnr_mixed,psnr_diffuse,psnr_specular,si_l1_albedo,si_l1_roughness,"
           "dolp_mae\n";
    const auto line = [&](const std::string& name, const ViewMetrics& m) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), ",%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n", m.normal_mae,
                      m.psnr_mixed, m.psnr_diffuse, m.psnr_specular, m.si_l1_albedo,
                      m.si_l1_roughness, m.dolp_mae);
        out << name << buf;
    };
    for (const ViewMetrics& v : views)
        line(std::to_string(v.view), v);
    line("mean", mean);
    if (!out)
        throw ImageIoError("write failed: " + csv_path.string());
}

namespace {

void require_aovs(const DatasetView& v)
{
    if (v.normal.data.empty() || v.albedo.data.empty() || v.roughness.data.empty() ||
        v.diffuse.data.empty() || v.specular.data.empty())
        throw MissingArtifact("GT AOVs not loaded for view " + std::to_string(v.index));
}

}  // namespace

ViewMetrics score_view(const FieldRender& pred, const DatasetView& gt)
{
    require_aovs(gt);
    for (float f : pred.stokes.planes)
        if (!std::isfinite(f))
            throw NumericalFailure("non-finite pixel in view " + std::to_string(gt.index));
    ViewMetrics m;
    m.view = gt.index;
    m.normal_mae = normal_mae(pred.normal, gt.normal, gt.mask);
    m.psnr_mixed = psnr(pred.stokes.component(0), gt.stokes.component(0), gt.mask);
    m.psnr_diffuse = psnr(pred.diffuse, gt.diffuse, gt.mask);
    m.psnr_specular = psnr(pred.specular, gt.specular, gt.mask);
    m.si_l1_albedo = si_l1(pred.albedo, gt.albedo, gt.mask);
    m.si_l1_roughness = si_l1(pred.roughness, gt.roughness, gt.mask);
    m.dolp_mae = dolp_mae(pred.stokes, gt.stokes, gt.mask);
    return m;
}

namespace {

void average(MetricsReport& report)
{
    ViewMetrics& mean = report.mean;
    mean = ViewMetrics{};
    mean.view = -1;
    const double n = static_cast<double>(report.views.size());
    for (const ViewMetrics& m : report.views) {
        mean.normal_mae += m.normal_mae / n;
        mean.psnr_mixed += m.psnr_mixed / n;
        mean.psnr_diffuse += m.psnr_diffuse / n;
        mean.psnr_specular += m.psnr_specular / n;
        mean.si_l1_albedo += m.si_l1_albedo / n;
        mean.si_l1_roughness += m.si_l1_roughness / n;
        mean.dolp_mae += m.dolp_mae / n;
    }
}

}  // namespace

MetricsReport evaluate(const FieldBundle& bundle, const Dataset& data, const EvalOptions& options)
{
    const auto tests = data.split(true);
    if (tests.empty())
        throw std::invalid_argument("evaluate: dataset has no test views");
    RenderOptions ro;
    ro.quadrature = options.quadrature;
    ro.polarized = options.polarized;
    ro.sampling = options.sampling;
    MetricsReport report;
    for (const DatasetView* v : tests) {
        require_aovs(*v);
        const FieldRender r = render_fields(bundle, v->camera, ro, &v->mask, options.threads);
        report.views.push_back(score_view(r, *v));
    }
    average(report);
    return report;
}

MetricsReport evaluate_images(const Dataset& pred, const Dataset& gt)
{
    const auto tests = gt.split(true);
    if (tests.empty())
        throw std::invalid_argument("evaluate: dataset has no test views");
    MetricsReport report;
    for (const DatasetView* v : tests) {
        const auto it = std::find_if(pred.views.begin(), pred.views.end(),
                                     [&](const DatasetView& p) { return p.index == v->index; });
        if (it == pred.views.end())
            throw MissingArtifact("prediction lacks view " + std::to_string(v->index));
        const FieldRender r{it->stokes, it->mask,      it->normal,  it->albedo,
                            it->roughness, it->diffuse, it->specular};
        report.views.push_back(score_view(r, *v));
    }
    average(report);
    return report;
}

double eikonal_residual(const FieldBundle& bundle, int probes, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Array x(probes, 3);
    for (int i = 0; i < probes;) {
        const Vec3 p(u(rng), u(rng), u(rng));
        if (p.squaredNorm() > 1.0)
            continue;
        x.row(i) = (bundle.config.center + bundle.config.radius * p).transpose().array();
        ++i;
    }
    const SdfEval f = field_sdf(bundle, x);
    const Array norm = f.gradient.rowwise().norm();
    return (norm - 1.0).square().mean();
}

}  // namespace neisf
