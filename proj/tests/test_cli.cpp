#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"
#include "neisf/image_io.hpp"
#include "neisf/polcore.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "neisf_test_cli";

int run(const std::string& args, const std::string& env = "")
{
    const std::string cmd = env + " " NEISF_CLI " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string last_log()
{
    std::ifstream in(kRoot / "last.log");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

json read_json(const fs::path& p)
{
    std::ifstream in(p);
    return json::parse(in);
}

std::string path(const std::string& name) { return (kRoot / name).string(); }

const std::string kSky = NEISF_SOURCE_DIR "/scenes/sphere_sky.json";
const std::string kTinyGen = " --views 5 --spp 4 --width 12 --height 12 --threads 1";

// A tiny dataset shared by the later cases.
const std::string& dataset()
{
    static const std::string dir = [] {
        fs::remove_all(kRoot);
        fs::create_directories(kRoot);
        const std::string d = path("ds");
        REQUIRE(run("gen " + kSky + " --out " + d + kTinyGen + " --seed 9") == 0);
        return d;
    }();
    return dir;
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream out(p);
    out << text;
}

std::string tiny_train_config()
{
    return R"({"fields": {"sdf_hidden": 16, "sdf_layers": 2, "sdf_skip": 1, "material_hidden": 16,
               "material_layers": 2, "incident_hidden": 16, "incident_layers": 2,
               "position_frequencies": 2, "direction_frequencies": 2},
               "batch_rays": [16, 16, 16], "quadrature": 8,
               "sampling": {"coarse": 8, "fine": 8, "root_refinements": 4, "fine_width_betas": 6.0},
               "log_every": 2, "state_every": 3})";
}

}  // namespace

TEST_CASE("gen: views on disk, manifest and byte-identical re-runs")
{
    const std::string d = dataset();
    int pstk = 0;
    for (const auto& e : fs::directory_iterator(d))
        pstk += e.path().extension() == ".pstk";
    CHECK(pstk == 5);
    for (const char* aov : {"normal", "albedo", "roughness", "diffuse", "specular", "mask"})
        CHECK(fs::exists(fs::path(d) / (std::string("0000_") + aov + ".pfm")));
    CHECK(fs::exists(fs::path(d) / "poses.json"));

    const json m = read_json(fs::path(d) / "manifest.json");
    CHECK(m.at("command") == "gen");
    CHECK(m.at("seed") == 9);
    CHECK(m.at("seed_source") == "flag");
    CHECK(m.at("effective_config").at("views") == 5);
    CHECK_FALSE(m.at("git_describe").get<std::string>().empty());
    CHECK(m.contains("wall_time_seconds"));

    const std::string again = path("ds_again");
    REQUIRE(run("gen " + kSky + " --out " + again + kTinyGen + " --seed 9") == 0);
    for (const auto& e : fs::directory_iterator(d)) {
        if (e.path().filename() == "manifest.json")
            continue;
        CAPTURE(e.path().filename().string());
        CHECK(slurp(e.path()) == slurp(fs::path(again) / e.path().filename()));
    }
}

TEST_CASE("gen: usage errors and seed precedence")
{
    dataset();
    CHECK(run("gen /no/such/scene.json --out " + path("x")) == 2);
    CHECK(last_log().find("/no/such/scene.json") != std::string::npos);
    CHECK(run("gen " + kSky) == 2);  // --out missing
    CHECK(run("frobnicate") == 2);

    const std::string cfg = path("gen.json");
    write_text(cfg, R"({"seed": 4, "spp": 2})");
    REQUIRE(run("gen " + kSky + " --out " + path("s1") + kTinyGen + " --config " + cfg,
                "NEISF_SEED=7") == 0);
    json m = read_json(fs::path(path("s1")) / "manifest.json");
    CHECK(m.at("seed") == 4);
    CHECK(m.at("seed_source") == "config");
    // the flag beats the config file
    CHECK(m.at("effective_config").at("spp") == 4);

    REQUIRE(run("gen " + kSky + " --out " + path("s2") + kTinyGen, "NEISF_SEED=7") == 0);
    m = read_json(fs::path(path("s2")) / "manifest.json");
    CHECK(m.at("seed") == 7);
    CHECK(m.at("seed_source") == "NEISF_SEED");

    CHECK(run("gen " + kSky + " --out " + path("s3") + kTinyGen, "NEISF_SEED=abc") == 2);
    write_text(cfg, R"({"sky": 1})");
    CHECK(run("gen " + kSky + " --out " + path("s4") + kTinyGen + " --config " + cfg) == 2);
}

TEST_CASE("train: prerequisites, three checkpoints, resume")
{
    const std::string d = dataset();
    const std::string cfg = path("train.json");
    write_text(cfg, tiny_train_config());
    const std::string common = " --config " + cfg + " --iterations 9 6 6 --threads 1 --seed 5";

    CHECK(run("train " + d + " --out " + path("t0") + " --stage 2" + common) == 3);
    CHECK(last_log().find("stage1.nsfc") != std::string::npos);
    CHECK(run("train /no/dataset --out " + path("t0") + common) == 3);
    CHECK(run("train " + d + " --out " + path("t0") + " --stage 4" + common) == 2);
    CHECK(run("train " + d + " --out " + path("t0") + " --ablation half" + common) == 2);

    const fs::path a = path("ta");
    REQUIRE(run("train " + d + " --out " + a.string() + " --stage all" + common) == 0);
    for (int s = 1; s <= 3; ++s)
        CHECK(fs::exists(a / ("stage" + std::to_string(s) + ".nsfc")));
    const json m = read_json(a / "manifest_train_stageall.json");
    CHECK(m.at("effective_config").at("iterations") == json::array({9, 6, 6}));
    CHECK(m.at("effective_config").at("quadrature") == 8);

    // Interrupt inside stage 1 and again inside stage 2, then resume.
    const fs::path b = path("tb");
    CHECK(run("train " + d + " --out " + b.string() + common + " --stop-after 4") == 130);
    CHECK(fs::exists(b / "stage1.state"));
    CHECK(run("train " + d + " --out " + b.string() + common + " --resume --stage 1") == 0);
    CHECK(run("train " + d + " --out " + b.string() + common + " --stage 2 --stop-after 2") == 130);
    CHECK(run("train " + d + " --out " + b.string() + common + " --resume") == 0);

    const auto final_loss = [](const fs::path& log) {
        std::ifstream in(log);
        std::string line, last;
        while (std::getline(in, line))
            last = line;
        std::stringstream ss(last);
        std::string field;
        for (int i = 0; i < 3; ++i)
            std::getline(ss, field, ',');
        return std::stod(field);
    };
    const double la = final_loss(a / "train_log.csv");
    const double lb = final_loss(b / "train_log.csv");
    CHECK(std::abs(la - lb) <= 0.05 * std::abs(la));
    // Single-threaded resumption is exact, not merely close.
    CHECK(slurp(a / "stage3.nsfc") == slurp(b / "stage3.nsfc"));
}

TEST_CASE("render and eval")
{
    const std::string d = dataset();
    const std::string cfg = path("train.json");
    write_text(cfg, tiny_train_config());
    const fs::path run_dir = path("tr");
    REQUIRE(run("train " + d + " --out " + run_dir.string() + " --config " + cfg +
                " --iterations 4 2 2 --threads 1") == 0);
    const std::string ckpt = (run_dir / "stage3.nsfc").string();
    const std::string poses = d + "/poses.json";
    const fs::path out = path("render");

    CHECK(run("render " + ckpt + " --poses " + poses + " --aov sheen --out " + out.string()) == 2);
    CHECK(last_log().find("stokes, dolp, normal, albedo, roughness, diffuse, specular") !=
          std::string::npos);
    CHECK(run("render " + path("none.nsfc") + " --poses " + poses + " --out " + out.string()) == 3);

    const std::string common = " --poses " + poses + " --out " + out.string() + " --views 1 --quadrature 16 --threads 1";
    REQUIRE(run("render " + ckpt + " --aov dolp" + common) == 0);
    REQUIRE(run("render " + ckpt + " --aov stokes" + common) == 0);
    const neisf::Image dolp = neisf::read_pfm((out / "0001_dolp.pfm").string());
    const neisf::PolarizedImage s = neisf::read_pstk((out / "0001.pstk").string());
    double worst = 0.0;
    for (int y = 0; y < dolp.height; ++y)
        for (int x = 0; x < dolp.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = dolp.at(x, y, c);
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
                const double ext = neisf::dolp(
                    Eigen::Vector3d(s.at(0, c, x, y), s.at(1, c, x, y), s.at(2, c, x, y)));
                worst = std::max(worst, std::abs(ext - v));
            }
    CHECK(worst < 1e-6);
    for (const char* aov : {"normal", "albedo", "roughness", "diffuse", "specular"}) {
        CAPTURE(aov);
        CHECK(run("render " + ckpt + " --aov " + aov + common) == 0);
        CHECK(fs::exists(out / ("0001_" + std::string(aov) + ".pfm")));
    }

    // GT against itself
    const fs::path self = path("self.json");
    REQUIRE(run("eval " + d + " " + d + " --out " + self.string()) == 0);
    const json r = read_json(self);
    CHECK(r.at("mean").at("normal_mae_deg") == 0.0);
    CHECK(r.at("mean").at("si_l1_albedo") == 0.0);
    CHECK(r.at("mean").at("si_l1_roughness") == 0.0);
    for (const char* k : {"normal_mae_deg", "psnr_mixed", "psnr_diffuse", "psnr_specular",
                          "si_l1_albedo", "si_l1_roughness", "dolp_mae"})
        CHECK(r.at("mean").contains(k));
    CHECK(fs::exists(path("self.csv")));
    CHECK(fs::exists(path("self.json.manifest.json")));

    REQUIRE(run("eval " + ckpt + " " + d + " --out " + path("rep.json") + " --quadrature 16") == 0);
    CHECK(read_json(path("rep.json")).at("views").size() == 1);

    const fs::path broken = path("broken");
    fs::copy(d, broken, fs::copy_options::recursive);
    fs::remove(broken / "0004_albedo.pfm");
    CHECK(run("eval " + ckpt + " " + broken.string() + " --out " + path("b.json")) == 3);
    CHECK(last_log().find("albedo") != std::string::npos);
}

TEST_CASE("probe: constant sky oracle and field mode")
{
    const std::string d = dataset();
    const fs::path csv = path("probe.csv");
    REQUIRE(run("probe --scene " + kSky + " --point 0,0.8,0 --dirs 16 --spp 8 --out " + csv.string()) == 0);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("wx,wy,wz,dif_s0_r", 0) == 0);
    int rows = 0;
    for (std::string line; std::getline(in, line); ++rows) {
        std::stringstream ss(line);
        std::vector<double> v;
        for (std::string f; std::getline(ss, f, ',');)
            v.push_back(std::stod(f));
        REQUIRE(v.size() == 21);
        for (int part : {3, 12})
            for (int j = 3; j < 9; ++j)  // s1 and s2 columns
                CHECK(v[part + j] == 0.0);
        CHECK(v[3] > 0.0);
    }
    CHECK(rows == 16);

    CHECK(run("probe --scene " + kSky + " --point 0,0.8,0 --dirs 0") == 2);
    CHECK(run("probe --point 0,0.8,0 --dirs 4") == 2);
    CHECK(run("probe --scene " + kSky + " --point 0,0.8 --dirs 4") == 2);
    CHECK(run("probe --checkpoint " + path("none.nsfc") + " --point 0,0.8,0 --dirs 4") == 3);
}
