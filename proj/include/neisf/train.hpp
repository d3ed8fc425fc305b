#pragma once

// Three-stage optimisation of the neural fields against a rendered dataset
// (geometry, then material and light with the geometry frozen, then
// everything jointly), the Adam optimiser, resumable training state, and the
// evaluation metrics.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "neisf/camera.hpp"
#include "neisf/fields.hpp"
#include "neisf/image_io.hpp"
#include "neisf/renderer.hpp"

namespace neisf {

/// A required input file (dataset part, checkpoint, GT AOV) is absent.
class MissingArtifact : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A NaN or infinity appeared in a loss or an image.
class NumericalFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetView {
    int index = 0;
    bool test = false;
    Camera camera;
    PolarizedImage stokes;
    Image mask;
    // Ground-truth AOVs, empty unless requested at load time.
    Image normal;
    Image albedo;
    Image roughness;
    Image diffuse;
    Image specular;
};

/// Views listed in a dataset's poses.json.
std::vector<View> load_poses(const std::filesystem::path& path);

struct Dataset {
    std::filesystem::path dir;
    Vec3 bound_center = Vec3::Zero();
    double bound_radius = 1.0;
    std::vector<DatasetView> views;

    /// Reads dataset.json, poses.json, the Stokes containers and masks. With
    /// `aovs` set the GT AOVs are loaded too and each one must exist.
    static Dataset load(const std::filesystem::path& dir, bool aovs = false);
    std::vector<const DatasetView*> split(bool test) const;
};

struct TrainConfig {
    std::array<int, 3> iterations{1500, 1500, 1000};
    std::array<int, 3> batch_rays{64, 48, 48};
    double lr_stage1 = 5e-4;        ///< sdf and radiance head
    double lr = 5e-4;               ///< material and incident fields (stages 2-3)
    double lr_sdf_stage3 = 1e-4;
    double lr_density = 2e-2;       ///< log alpha, log beta in stage 1
    double lr_final_fraction = 0.1; ///< exponential decay to this fraction over a stage
    double lambda_eik = 0.1;
    double lambda_mask = 0.5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    bool polarized = true;
    int quadrature = 128;
    int eval_quadrature = 256;
    SamplingConfig sampling{24, 16, 6, 6.0};
    FieldConfig fields;  ///< centre and radius are taken from the dataset
    int threads = 1;
    int log_every = 10;
    int state_every = 100;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Overrides the fields present in `j`; unknown keys are rejected.
void apply_json(TrainConfig& c, const nlohmann::json& j);

/// Adam with per-parameter moments; parameters without a gradient in a step
/// are left untouched.
class Adam {
public:
    Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add(const std::vector<ad::Parameter*>& params, double lr);
    /// Applies one update with every group's rate multiplied by `lr_scale`.
    void step(const ad::Gradients& grads, double lr_scale = 1.0);

    struct Slot {
        ad::Parameter* param = nullptr;
        double lr = 0.0;
        ad::Array m;
        ad::Array v;
        long steps = 0;
    };
    std::vector<Slot>& slots() { return slots_; }

private:
    double beta1_;
    double beta2_;
    double eps_;
    std::vector<Slot> slots_;
};

/// Every trainable array of a bundle in a fixed order.
std::vector<ad::Parameter*> all_parameters(FieldBundle& bundle);

/// Fresh fields sized for the dataset's bounding sphere.
FieldBundle initial_bundle(const Dataset& data, const TrainConfig& cfg);

struct IterationLog {
    int stage = 0;
    int iteration = 0;
    double loss = 0.0;
    double l1 = 0.0;
    double mask = 0.0;
    double eikonal = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double seconds = 0.0;
};

struct TrainSession {
    std::filesystem::path out_dir;  ///< checkpoints, training log, resume state
    bool resume = false;
    int stop_after = -1;            ///< simulate an interruption after this many iterations
    /// When it becomes true the stage saves its state and returns unfinished.
    const std::atomic<bool>* interrupt = nullptr;
    std::function<void(const IterationLog&)> on_log;
};

struct StageReport {
    int stage = 0;
    int iterations_run = 0;
    bool completed = false;
    double seconds = 0.0;
    std::vector<double> losses;  ///< per iteration, including resumed ones
};

/// Runs one stage in place on `bundle`. Stage 1 fits the sdf with a
/// temporary radiance head, a mask loss and the Eikonal term; stage 2 fits
/// material and incident fields with the sdf frozen; stage 3 fits everything.
/// Writes stage<k>.nsfc when the stage completes.
StageReport run_stage(int stage, const Dataset& data, FieldBundle& bundle, const TrainConfig& cfg,
                      const TrainSession& session);

std::filesystem::path stage_checkpoint(const std::filesystem::path& dir, int stage);
std::filesystem::path stage_state(const std::filesystem::path& dir, int stage);

// ------------------------------------------------------------------ metrics

/// Mean angle in degrees between unit normals over mask pixels.
double normal_mae(const Image& pred, const Image& gt, const Image& mask);
/// PSNR with peak = GT maximum over the mask; +infinity for identical images.
double psnr(const Image& pred, const Image& gt, const Image& mask);
/// mean |c pred - gt| with c the least-squares scale per channel.
double si_l1(const Image& pred, const Image& gt, const Image& mask);
/// Mean absolute DoLP difference over mask pixels and channels.
double dolp_mae(const PolarizedImage& pred, const PolarizedImage& gt, const Image& mask);
/// Uniformly random unit normals on the mask (the chance baseline).
Image random_normals(const Image& mask, std::uint64_t seed);

struct ViewMetrics {
    int view = 0;
    double normal_mae = 0.0;
    double psnr_mixed = 0.0;
    double psnr_diffuse = 0.0;
    double psnr_specular = 0.0;
    double si_l1_albedo = 0.0;
    double si_l1_roughness = 0.0;
    double dolp_mae = 0.0;
};

struct MetricsReport {
    ViewMetrics mean;  ///< averages over views (view = -1)
    std::vector<ViewMetrics> views;

    nlohmann::json to_json() const;
    void write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const;
};

struct EvalOptions {
    int quadrature = 256;
    bool polarized = true;
    int threads = 1;
    SamplingConfig sampling;
};

/// Scores one predicted view against a dataset view carrying GT AOVs.
ViewMetrics score_view(const FieldRender& pred, const DatasetView& gt);

/// Renders every test view and scores it against the GT AOVs.
MetricsReport evaluate(const FieldBundle& bundle, const Dataset& data, const EvalOptions& options);

/// Scores the test views of an image dataset (same layout as a rendered
/// dataset) against the GT; views are matched by index.
MetricsReport evaluate_images(const Dataset& pred, const Dataset& gt);

/// E[(|grad sdf| - 1)^2] at uniform points in the bounding sphere.
double eikonal_residual(const FieldBundle& bundle, int probes, std::uint64_t seed);

}  // namespace neisf
