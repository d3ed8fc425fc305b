// neisf: dataset generation, training, rendering, evaluation and incident
// light probing from the command line.
//
// Exit codes: 0 success, 2 usage or input error, 3 missing prerequisite
// artifact, 4 numerical failure, 130 interrupted (training state saved).

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "neisf/renderer.hpp"
#include "neisf/scene.hpp"
#include "neisf/tracer.hpp"
#include "neisf/train.hpp"

#ifndef NEISF_GIT_DESCRIBE
#define NEISF_GIT_DESCRIBE "unknown"
#endif

using namespace neisf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kMissing = 3;
constexpr int kNumerical = 4;
constexpr int kInterrupted = 130;

std::atomic<bool> g_interrupt{false};

extern "C" void on_sigint(int) { g_interrupt = true; }

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_config(const std::string& path)
{
    if (path.empty())
        return json::object();
    std::ifstream in(path);
    if (!in)
        throw UsageError("cannot open config file: " + path);
    try {
        json j = json::parse(in);
        if (!j.is_object())
            throw UsageError("config file must hold a JSON object: " + path);
        return j;
    } catch (const json::exception& e) {
        throw UsageError("cannot parse config file " + path + ": " + e.what());
    }
}

// Seed precedence: --seed, then the config file, then NEISF_SEED, then 0.
std::pair<std::uint64_t, std::string> resolve_seed(const CLI::Option* flag, std::uint64_t flag_value,
                                                   const json& config)
{
    if (flag->count())
        return {flag_value, "flag"};
    if (config.contains("seed"))
        return {config.at("seed").get<std::uint64_t>(), "config"};
    if (const char* env = std::getenv("NEISF_SEED")) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(env, &used);
            if (used != std::string(env).size())
                throw std::invalid_argument("trailing characters");
            return {v, "NEISF_SEED"};
        } catch (const std::exception&) {
            throw UsageError(std::string("NEISF_SEED is not an unsigned integer: ") + env);
        }
    }
    return {0, "default"};
}

std::string utc_now()
{
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    std::string config_file;
    std::uint64_t seed = 0;
    std::string seed_source = "default";
    json effective = json::object();
    std::vector<std::string> outputs;
    std::string started = utc_now();
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void write(const fs::path& path, const std::string& status) const
    {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const json j = {{"command", command},
                        {"argv", argv},
                        {"config_file", config_file},
                        {"seed", seed},
                        {"seed_source", seed_source},
                        {"git_describe", NEISF_GIT_DESCRIBE},
                        {"started_utc", started},
                        {"wall_time_seconds", wall},
                        {"status", status},
                        {"effective_config", effective},
                        {"outputs", outputs}};
        if (path.has_parent_path())
            fs::create_directories(path.parent_path());
        std::ofstream out(path);
        out << j.dump(2) << '\n';
        if (!out)
            throw ImageIoError("cannot write manifest: " + path.string());
    }
};

Vec3 parse_vec3(const std::string& text, const char* what)
{
    std::stringstream ss(text);
    Vec3 v;
    char sep = 0;
    if (!(ss >> v[0] >> sep >> v[1] >> sep >> v[2]) || !ss.eof())
        throw UsageError(std::string(what) + " must be three comma-separated numbers: " + text);
    return v;
}

std::string view_name(int view, const std::string& suffix)
{
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", view);
    return buf + suffix;
}

FieldBundle load_checkpoint(const fs::path& path, int* stage = nullptr)
{
    if (!fs::exists(path))
        throw MissingArtifact("missing checkpoint: " + path.string());
    return read_checkpoint(path.string(), stage);
}

// ---------------------------------------------------------------------- gen

struct GenArgs {
    std::string scene;
    std::string out;
    std::string config;
    int views = 0;
    int test_views = -1;
    int spp = 64;
    int depth = 8;
    int width = 0;
    int height = 0;
    std::uint64_t seed = 0;
    CLI::Option* o_views = nullptr;
    CLI::Option* o_test = nullptr;
    CLI::Option* o_spp = nullptr;
    CLI::Option* o_depth = nullptr;
    CLI::Option* o_width = nullptr;
    CLI::Option* o_height = nullptr;
    CLI::Option* o_seed = nullptr;
};

template <class T>
void pick(T& out, const CLI::Option* flag, const T& flag_value, const json& config, const char* key)
{
    if (flag->count())
        out = flag_value;
    else if (config.contains(key))
        out = config.at(key).get<T>();
}

int cmd_gen(const GenArgs& a, Manifest& m, int threads)
{
    if (!fs::exists(a.scene))
        throw UsageError("scene file not found: " + a.scene);
    SceneModel scene = SceneModel::load(a.scene);
    const json cfg = read_config(a.config);
    for (auto it = cfg.begin(); it != cfg.end(); ++it) {
        static const std::set<std::string> known{"views", "test_views", "spp", "depth",
                                                 "width", "height", "seed"};
        if (!known.count(it.key()))
            throw UsageError("unknown gen config key: " + it.key());
    }

    // --views is the total number of views on disk; test views keep the
    // scene's proportion unless given explicitly.
    const int scene_total = scene.rig.views + scene.rig.test_views;
    int total = scene_total;
    pick(total, a.o_views, a.views, cfg, "views");
    int test = -1;
    pick(test, a.o_test, a.test_views, cfg, "test_views");
    if (total < 1)
        throw UsageError("--views must be at least 1");
    if (test < 0)
        test = static_cast<int>(std::lround(double(total) * scene.rig.test_views / scene_total));
    if (test >= total)
        throw UsageError("--test-views must be smaller than --views");
    scene.rig.views = total - test;
    scene.rig.test_views = test;
    pick(scene.rig.width, a.o_width, a.width, cfg, "width");
    pick(scene.rig.height, a.o_height, a.height, cfg, "height");
    if (scene.rig.width < 1 || scene.rig.height < 1)
        throw UsageError("image size must be positive");

    PathConfig pc;
    pick(pc.samples_per_pixel, a.o_spp, a.spp, cfg, "spp");
    pick(pc.max_depth, a.o_depth, a.depth, cfg, "depth");
    const auto [seed, source] = resolve_seed(a.o_seed, a.seed, cfg);
    pc.rng_seed = seed;
    pc.threads = threads;
    try {
        pc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }

    m.config_file = a.config;
    m.seed = seed;
    m.seed_source = source;
    m.effective = {{"scene", a.scene},
                   {"views", scene.rig.views + scene.rig.test_views},
                   {"test_views", scene.rig.test_views},
                   {"width", scene.rig.width},
                   {"height", scene.rig.height},
                   {"spp", pc.samples_per_pixel},
                   {"depth", pc.max_depth},
                   {"seed", seed},
                   {"threads", threads}};
    const DatasetSummary s = render_dataset(scene, rig_views(scene.rig), pc, a.out);
    for (const std::string& f : s.files)
        m.outputs.push_back((fs::path(a.out) / f).string());
    std::cout << "wrote " << s.views << " views to " << a.out << '\n';
    return kOk;
}

// -------------------------------------------------------------------- train

struct TrainArgs {
    std::string dataset;
    std::string out;
    std::string config;
    std::string stage = "all";
    std::string ablation = "pol";
    std::vector<int> iterations;
    std::uint64_t seed = 0;
    bool resume = false;
    int stop_after = -1;
    CLI::Option* o_seed = nullptr;
};

int cmd_train(const TrainArgs& a, Manifest& m, int threads)
{
    TrainConfig cfg;
    const json file = read_config(a.config);
    try {
        apply_json(cfg, file);
    } catch (const json::exception& e) {
        throw UsageError(std::string("bad train config value: ") + e.what());
    }
    const auto [seed, source] = resolve_seed(a.o_seed, a.seed, file);
    cfg.seed = seed;
    cfg.threads = threads;
    if (a.ablation != "pol" && a.ablation != "nopol")
        throw UsageError("--ablation must be pol or nopol");
    cfg.polarized = a.ablation == "pol";
    if (!a.iterations.empty()) {
        if (a.iterations.size() != 3)
            throw UsageError("--iterations takes three counts (stages 1, 2, 3)");
        for (int s = 0; s < 3; ++s)
            cfg.iterations[s] = a.iterations[s];
    }
    cfg.validate();

    int first = 1;
    int last = 3;
    if (a.stage != "all") {
        if (a.stage != "1" && a.stage != "2" && a.stage != "3")
            throw UsageError("--stage must be 1, 2, 3 or all");
        first = last = std::stoi(a.stage);
    }

    m.config_file = a.config;
    m.seed = seed;
    m.seed_source = source;
    m.effective = to_json(cfg);
    m.effective["stage"] = a.stage;
    m.effective["ablation"] = a.ablation;
    m.effective["dataset"] = a.dataset;

    const Dataset data = Dataset::load(a.dataset);
    const fs::path out(a.out);
    fs::create_directories(out);

    // Each stage starts from the previous stage's checkpoint.
    FieldBundle bundle;
    if (first == 1) {
        bundle = initial_bundle(data, cfg);
    } else {
        const fs::path prev = stage_checkpoint(out, first - 1);
        if (!fs::exists(prev))
            throw MissingArtifact("stage " + std::to_string(first) + " needs " + prev.string() +
                                  " (run --stage " + std::to_string(first - 1) + " first)");
        bundle = load_checkpoint(prev);
    }

    TrainSession session;
    session.out_dir = out;
    session.resume = a.resume;
    session.stop_after = a.stop_after;
    session.interrupt = &g_interrupt;
    session.on_log = [](const IterationLog& l) {
        std::printf("stage %d iter %5d  loss %.5f  l1 %.5f  mask %.5f  eik %.5f  alpha %.3f  beta %.4f  %.0fs\n",
                    l.stage, l.iteration, l.loss, l.l1, l.mask, l.eikonal, l.alpha, l.beta, l.seconds);
        std::fflush(stdout);
    };

    for (int stage = first; stage <= last; ++stage) {
        const fs::path done = stage_checkpoint(out, stage);
        if (a.resume && fs::exists(done) && !fs::exists(stage_state(out, stage))) {
            bundle = load_checkpoint(done);
            std::cout << "stage " << stage << " already complete: " << done.string() << '\n';
            continue;
        }
        const StageReport r = run_stage(stage, data, bundle, cfg, session);
        if (!r.completed) {
            m.outputs.push_back(stage_state(out, stage).string());
            std::cout << "stage " << stage << " stopped after " << r.iterations_run
                      << " iterations; state saved, continue with --resume\n";
            return kInterrupted;
        }
        m.outputs.push_back(done.string());
        // Continue from the stored weights so split and resumed runs see the
        // same float32 starting point as a single run.
        bundle = load_checkpoint(done);
        std::cout << "stage " << stage << " done in " << r.seconds << " s -> " << done.string() << '\n';
    }
    m.outputs.push_back((out / "train_log.csv").string());
    return kOk;
}

// ------------------------------------------------------------------- render

const std::vector<std::string> kAovs{"stokes", "dolp",    "normal",  "albedo",
                                     "roughness", "diffuse", "specular"};

struct RenderArgs {
    std::string checkpoint;
    std::string poses;
    std::string aov = "stokes";
    std::string out;
    std::vector<int> views;
    int quadrature = 256;
    bool nopol = false;
};

Image dolp_image(const PolarizedImage& s)
{
    Image out(s.width, s.height, 3);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(x, y, c) = static_cast<float>(
                    dolp(Eigen::Vector3d(s.at(0, c, x, y), s.at(1, c, x, y), s.at(2, c, x, y))));
    return out;
}

int cmd_render(const RenderArgs& a, Manifest& m, int threads)
{
    if (std::find(kAovs.begin(), kAovs.end(), a.aov) == kAovs.end()) {
        std::string valid;
        for (const std::string& v : kAovs)
            valid += (valid.empty() ? "" : ", ") + v;
        throw UsageError("unknown AOV '" + a.aov + "'; valid: " + valid);
    }
    if (a.quadrature < 1)
        throw UsageError("--quadrature must be positive");
    const FieldBundle bundle = load_checkpoint(a.checkpoint);
    if (!fs::exists(a.poses))
        throw MissingArtifact("missing poses file: " + a.poses);
    const std::vector<View> views = load_poses(a.poses);
    RenderOptions ro;
    ro.quadrature = a.quadrature;
    ro.polarized = !a.nopol;
    m.effective = {{"checkpoint", a.checkpoint}, {"poses", a.poses}, {"aov", a.aov},
                   {"quadrature", a.quadrature}, {"polarized", ro.polarized},
                   {"views", a.views},           {"threads", threads}};
    fs::create_directories(a.out);
    int rendered = 0;
    for (const View& v : views) {
        if (!a.views.empty() && std::find(a.views.begin(), a.views.end(), v.index) == a.views.end())
            continue;
        const FieldRender r = render_fields(bundle, v.camera, ro, nullptr, threads);
        for (float f : r.stokes.planes)
            if (!std::isfinite(f))
                throw NumericalFailure("non-finite pixel in rendered view " + std::to_string(v.index));
        fs::path path;
        if (a.aov == "stokes") {
            path = fs::path(a.out) / view_name(v.index, ".pstk");
            write_pstk(path.string(), r.stokes);
        } else {
            path = fs::path(a.out) / view_name(v.index, "_" + a.aov + ".pfm");
            const Image& img = a.aov == "dolp"      ? dolp_image(r.stokes)
                               : a.aov == "normal"  ? r.normal
                               : a.aov == "albedo"  ? r.albedo
                               : a.aov == "roughness" ? r.roughness
                               : a.aov == "diffuse" ? r.diffuse
                                                    : r.specular;
            write_pfm(path.string(), img);
        }
        m.outputs.push_back(path.string());
        ++rendered;
    }
    if (rendered == 0)
        throw UsageError("no views selected");
    std::cout << "rendered " << rendered << " views to " << a.out << '\n';
    return kOk;
}

// --------------------------------------------------------------------- eval

struct EvalArgs {
    std::string source;
    std::string dataset;
    std::string out = "report.json";
    int quadrature = 256;
    bool nopol = false;
};

int cmd_eval(const EvalArgs& a, Manifest& m, int threads)
{
    if (!fs::exists(a.source))
        throw MissingArtifact("missing prediction: " + a.source);
    const Dataset gt = Dataset::load(a.dataset, true);
    MetricsReport report;
    if (fs::is_directory(a.source)) {
        report = evaluate_images(Dataset::load(a.source, true), gt);
    } else {
        EvalOptions o;
        o.quadrature = a.quadrature;
        o.polarized = !a.nopol;
        o.threads = threads;
        report = evaluate(load_checkpoint(a.source), gt, o);
    }
    const fs::path json_path(a.out);
    fs::path csv_path = json_path;
    csv_path.replace_extension(".csv");
    if (json_path.has_parent_path())
        fs::create_directories(json_path.parent_path());
    report.write(json_path, csv_path);
    m.effective = {{"source", a.source},
                   {"dataset", a.dataset},
                   {"quadrature", a.quadrature},
                   {"polarized", !a.nopol},
                   {"threads", threads}};
    m.outputs = {json_path.string(), csv_path.string()};
    std::cout << report.to_json().at("mean").dump(2) << '\n';
    return kOk;
}

// -------------------------------------------------------------------- probe

struct ProbeArgs {
    std::string checkpoint;
    std::string scene;
    std::string point;
    std::string wo;
    std::string out = "probe.csv";
    int dirs = 64;
    int spp = 256;
    int depth = 8;
    std::uint64_t seed = 0;
    CLI::Option* o_seed = nullptr;
};

int cmd_probe(const ProbeArgs& a, Manifest& m, int threads)
{
    if (a.checkpoint.empty() == a.scene.empty())
        throw UsageError("give exactly one of --checkpoint (field mode) or --scene (oracle mode)");
    if (a.dirs < 1)
        throw UsageError("--dirs must be at least 1");
    if (a.spp < 1)
        throw UsageError("--spp must be at least 1");
    const Vec3 x = parse_vec3(a.point, "--point");

    const bool oracle = !a.scene.empty();
    std::optional<SceneModel> scene;
    FieldBundle bundle;
    Vec3 n;
    double distance = 0.0;
    if (oracle) {
        if (!fs::exists(a.scene))
            throw UsageError("scene file not found: " + a.scene);
        scene = SceneModel::load(a.scene);
        distance = scene->sdf(x);
        n = scene->sdf_normal(x);
    } else {
        bundle = load_checkpoint(a.checkpoint);
        const SdfEval e = field_sdf(bundle, ad::Array(x.transpose().array()));
        distance = e.value(0, 0);
        n = Vec3(e.gradient(0, 0), e.gradient(0, 1), e.gradient(0, 2)).normalized();
    }
    if (std::abs(distance) > 0.05)
        std::cerr << "warning: point is " << distance << " from the surface\n";
    const Vec3 wo = a.wo.empty() ? n : parse_vec3(a.wo, "--wo").normalized();
    const QuadratureSet q = fibonacci_hemisphere(a.dirs, n);
    const int N = a.dirs;

    // rows: probe direction; columns per part: s0, s1, s2 over r, g, b
    Eigen::MatrixXd dif(N, 9), spec(N, 9);
    const auto [seed, source] = resolve_seed(a.o_seed, a.seed, json::object());
    if (oracle) {
        PathConfig pc;
        pc.samples_per_pixel = a.spp;
        pc.max_depth = a.depth;
        pc.rng_seed = seed;
        pc.threads = 1;
        parallel_rows(N, threads, [&](int i) {
            const IncidentStokes s =
                trace_incident_rotated(*scene, x, n, q.directions[i], wo, pc, static_cast<std::uint64_t>(i));
            for (int k = 0; k < 3; ++k)
                for (int c = 0; c < 3; ++c) {
                    dif(i, 3 * k + c) = s.diffuse(k, c);
                    spec(i, 3 * k + c) = s.specular(k, c);
                }
        });
    } else {
        ad::Array xs(N, 3), wi(N, 3);
        for (int i = 0; i < N; ++i) {
            xs.row(i) = x.transpose().array();
            wi.row(i) = q.directions[i].transpose().array();
        }
        const IncidentField f = field_incident(bundle, xs, wi);
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < 3; ++c) {
                dif(i, c) = f.s0(i, c);
                dif(i, 3 + c) = f.dif_s1(i, c);
                dif(i, 6 + c) = 0.0;
                spec(i, c) = f.s0(i, c);
                spec(i, 3 + c) = f.spec_s1(i, c);
                spec(i, 6 + c) = f.spec_s2(i, c);
            }
    }

    const fs::path out(a.out);
    if (out.has_parent_path())
        fs::create_directories(out.parent_path());
    std::ofstream csv(out);
    csv << "wx,wy,wz";
    for (const char* part : {"dif", "spec"})
        for (int k = 0; k < 3; ++k)
            for (const char* c : {"r", "g", "b"})
                csv << ',' << part << "_s" << k << '_' << c;
    csv << '\n';
    char buf[32];
    for (int i = 0; i < N; ++i) {
        csv << q.directions[i].x() << ',' << q.directions[i].y() << ',' << q.directions[i].z();
        for (const Eigen::MatrixXd* t : {&dif, &spec})
            for (int j = 0; j < 9; ++j) {
                std::snprintf(buf, sizeof(buf), ",%.9g", (*t)(i, j));
                csv << buf;
            }
        csv << '\n';
    }
    if (!csv)
        throw ImageIoError("cannot write " + out.string());
    m.seed = seed;
    m.seed_source = source;
    m.effective = {{"mode", oracle ? "oracle" : "field"},
                   {"source", oracle ? a.scene : a.checkpoint},
                   {"point", {x.x(), x.y(), x.z()}},
                   {"normal", {n.x(), n.y(), n.z()}},
                   {"wo", {wo.x(), wo.y(), wo.z()}},
                   {"dirs", N},
                   {"spp", a.spp},
                   {"depth", a.depth},
                   {"threads", threads}};
    m.outputs = {out.string()};
    std::cout << "wrote " << N << " probe rows to " << out.string() << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"neisf: polarimetric neural incident Stokes fields"};
    app.require_subcommand(1);
    app.fallthrough();
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (0 = all cores; 1 = bit-exact)")
        ->check(CLI::NonNegativeNumber);

    GenArgs gen;
    CLI::App* g = app.add_subcommand("gen", "render a polarimetric dataset from a scene file");
    g->add_option("scene", gen.scene, "scene JSON")->required();
    g->add_option("--out", gen.out, "output directory")->required();
    g->add_option("--config", gen.config, "JSON with views, test_views, spp, depth, width, height, seed");
    gen.o_views = g->add_option("--views", gen.views, "total views on disk");
    gen.o_test = g->add_option("--test-views", gen.test_views, "how many of them are test views");
    gen.o_spp = g->add_option("--spp", gen.spp, "samples per pixel");
    gen.o_depth = g->add_option("--depth", gen.depth, "maximum path depth");
    gen.o_width = g->add_option("--width", gen.width, "image width");
    gen.o_height = g->add_option("--height", gen.height, "image height");
    gen.o_seed = g->add_option("--seed", gen.seed, "RNG seed (falls back to NEISF_SEED)");

    TrainArgs tr;
    CLI::App* t = app.add_subcommand("train", "fit the neural fields to a dataset");
    t->add_option("dataset", tr.dataset, "dataset directory")->required();
    t->add_option("--out", tr.out, "run directory for checkpoints, log and state")->required();
    t->add_option("--config", tr.config, "train config JSON");
    t->add_option("--stage", tr.stage, "1, 2, 3 or all");
    t->add_option("--ablation", tr.ablation, "pol or nopol");
    t->add_option("--iterations", tr.iterations, "iterations of stages 1, 2, 3")->expected(3);
    tr.o_seed = t->add_option("--seed", tr.seed, "RNG seed (falls back to NEISF_SEED)");
    t->add_flag("--resume", tr.resume, "continue from saved state and finished stages");
    t->add_option("--stop-after", tr.stop_after, "stop after this many iterations, saving state");

    RenderArgs rd;
    CLI::App* r = app.add_subcommand("render", "render AOVs of a checkpoint");
    r->add_option("checkpoint", rd.checkpoint, "checkpoint (.nsfc)")->required();
    r->add_option("--poses", rd.poses, "poses.json")->required();
    r->add_option("--aov", rd.aov, "stokes, dolp, normal, albedo, roughness, diffuse or specular");
    r->add_option("--out", rd.out, "output directory")->required();
    r->add_option("--views", rd.views, "view indices to render (default all)");
    r->add_option("--quadrature", rd.quadrature, "hemisphere directions per pixel");
    r->add_flag("--nopol", rd.nopol, "no-pol ablation renderer");

    EvalArgs ev;
    CLI::App* e = app.add_subcommand("eval", "score test views against GT AOVs");
    e->add_option("source", ev.source, "checkpoint (.nsfc) or a dataset-layout image directory")
        ->required();
    e->add_option("dataset", ev.dataset, "GT dataset directory")->required();
    e->add_option("--out", ev.out, "report JSON (a CSV is written next to it)");
    e->add_option("--quadrature", ev.quadrature, "hemisphere directions per pixel");
    e->add_flag("--nopol", ev.nopol, "no-pol ablation renderer");

    ProbeArgs pr;
    CLI::App* p = app.add_subcommand("probe", "tabulate rotated incident Stokes vectors at a point");
    p->add_option("--checkpoint", pr.checkpoint, "field mode: query the incident fields");
    p->add_option("--scene", pr.scene, "oracle mode: trace the scene");
    p->add_option("--point", pr.point, "x,y,z")->required();
    p->add_option("--wo", pr.wo, "outgoing direction x,y,z (default: the normal)");
    p->add_option("--dirs", pr.dirs, "hemisphere directions");
    p->add_option("--spp", pr.spp, "oracle samples per direction");
    p->add_option("--depth", pr.depth, "oracle path depth");
    p->add_option("--out", pr.out, "output CSV");
    pr.o_seed = p->add_option("--seed", pr.seed, "RNG seed (falls back to NEISF_SEED)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return kUsage;
    }

    Manifest m;
    m.argv.assign(argv, argv + argc);
    fs::path manifest;
    std::signal(SIGINT, on_sigint);
    int code = kOk;
    std::string status = "ok";
    try {
        if (*g) {
            m.command = "gen";
            manifest = fs::path(gen.out) / "manifest.json";
            code = cmd_gen(gen, m, threads);
        } else if (*t) {
            m.command = "train";
            manifest = fs::path(tr.out) / ("manifest_train_stage" + tr.stage + ".json");
            code = cmd_train(tr, m, threads);
            if (code == kInterrupted)
                status = "interrupted";
        } else if (*r) {
            m.command = "render";
            manifest = fs::path(rd.out) / ("manifest_render_" + rd.aov + ".json");
            code = cmd_render(rd, m, threads);
        } else if (*e) {
            m.command = "eval";
            manifest = fs::path(ev.out).string() + ".manifest.json";
            code = cmd_eval(ev, m, threads);
        } else if (*p) {
            m.command = "probe";
            manifest = fs::path(pr.out).string() + ".manifest.json";
            code = cmd_probe(pr, m, threads);
        }
    } catch (const MissingArtifact& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return kMissing;
    } catch (const NumericalFailure& ex) {
        std::cerr << "numerical failure: " << ex.what() << '\n';
        code = kNumerical;
        status = "numerical failure";
    } catch (const std::exception& ex) {
        // usage errors, malformed inputs (scene, config, poses, checkpoints)
        std::cerr << "error: " << ex.what() << '\n';
        return kUsage;
    }
    try {
        m.write(manifest, status);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return code == kOk ? kUsage : code;
    }
    return code;
}
