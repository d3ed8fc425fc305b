#pragma once

// Neural implicit fields on the autodiff tape: the signed distance network
// (with forward tangents for exact spatial gradients), the material networks,
// the three incident Stokes networks, VolSDF ray aggregation, and the NSFC
// checkpoint container.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "neisf/ad.hpp"
#include "neisf/advec.hpp"
#include "neisf/polcore.hpp"

namespace neisf {

class EmptyRay : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// [x, sin(2^0 x), cos(2^0 x), ..., sin(2^(F-1) x), cos(2^(F-1) x)] per row,
/// 3 + 6F columns.
ad::Array positional_encoding(const ad::Array& x, int frequencies);
/// d encoding / d x with interleaved rows: row 3i+k is the derivative of
/// row i's encoding along coordinate k.
ad::Array positional_encoding_jacobian(const ad::Array& x, int frequencies);
constexpr int encoding_dim(int frequencies) { return 3 + 6 * frequencies; }

enum class Activation { softplus, relu };

struct MlpSpec {
    int input_dim = 3;
    int hidden_dim = 64;
    int hidden_layers = 3;
    int output_dim = 1;
    int skip_layer = -1;  ///< hidden layer whose input also receives the network input
    Activation activation = Activation::relu;
    double softplus_beta = 100.0;
};

class Mlp {
public:
    Mlp() = default;
    Mlp(std::string name, const MlpSpec& spec);

    /// He-uniform weights, zero biases.
    void init_default(std::mt19937_64& rng);
    /// Starts close to |x| - radius over the first three (raw) input columns.
    void init_geometric(std::mt19937_64& rng, double radius);

    /// Raw output (no output activation). Frozen networks enter the tape as
    /// constants.
    ad::Var forward(ad::Tape& tape, const ad::Var& input, bool trainable = true) const;

    struct Tangent {
        ad::Var value;    ///< N x out
        ad::Var tangent;  ///< 3N x out, interleaved like the input tangent
    };
    /// Forward pass that also carries three input tangents (softplus only).
    Tangent forward_tangent(ad::Tape& tape, const ad::Var& input, const ad::Var& input_tangent,
                            bool trainable = true) const;

    ad::Array evaluate(const ad::Array& input) const;
    /// Returns (value, tangent) like forward_tangent, without a tape.
    std::pair<ad::Array, ad::Array> evaluate_tangent(const ad::Array& input,
                                                     const ad::Array& input_tangent) const;

    int layer_count() const { return static_cast<int>(params_.size() / 2); }
    int layer_input_dim(int layer) const;
    int layer_output_dim(int layer) const;
    const MlpSpec& spec() const { return spec_; }
    const std::string& name() const { return name_; }
    /// W0, b0, W1, b1, ...; W is (out x in), b is (1 x out).
    std::vector<ad::Parameter>& parameters() { return params_; }
    const std::vector<ad::Parameter>& parameters() const { return params_; }

private:
    std::string name_;
    MlpSpec spec_;
    std::vector<ad::Parameter> params_;
};

struct FieldConfig {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;  ///< bounding sphere; inputs are normalised by it
    int sdf_hidden = 64;
    int sdf_layers = 4;
    int sdf_skip = 2;
    int material_hidden = 64;
    int material_layers = 3;
    int incident_hidden = 64;
    int incident_layers = 3;
    int position_frequencies = 6;
    int direction_frequencies = 4;
    double init_radius = 0.5;  ///< geometric init sphere, in normalised units
    double softplus_beta = 100.0;
    double alpha_init = 1.0;
    double beta_init = 0.1;
    double beta_min = 1e-3;
    double roughness_min = 0.01;

    void validate() const;
};

class FieldBundle {
public:
    FieldBundle() = default;
    FieldBundle(const FieldConfig& config, std::uint64_t seed);

    FieldConfig config;
    Mlp sdf;
    Mlp albedo;
    Mlp roughness;
    Mlp incident_i;
    Mlp incident_spec;
    Mlp incident_dif;
    Mlp radiance;  ///< stage-1 view-dependent colour head; dropped afterwards
    bool has_radiance = true;
    ad::Parameter log_alpha;
    ad::Parameter log_beta;  ///< beta = beta_min + exp(log_beta)

    double alpha() const;
    double beta() const;
    ad::Array normalize_points(const ad::Array& x) const;

    std::vector<ad::Parameter*> geometry_parameters();
    std::vector<ad::Parameter*> material_parameters();
    std::vector<ad::Parameter*> incident_parameters();
    std::vector<ad::Parameter*> radiance_parameters();
    std::vector<Mlp*> networks();
    std::vector<const Mlp*> networks() const;
};

struct SdfEval {
    ad::Array value;     ///< N x 1, world units
    ad::Array gradient;  ///< N x 3
};

/// Signed distance and its exact spatial gradient at world points (N x 3).
SdfEval field_sdf(const FieldBundle& bundle, const ad::Array& x);

struct SdfVar {
    ad::Var value;    ///< N x 1
    ad::V3 gradient;  ///< N x 1 per coordinate
};
SdfVar field_sdf(ad::Tape& tape, const FieldBundle& bundle, const ad::Array& x, bool trainable);

/// Incident Stokes vectors pre-rotated into the diffuse and specular frames:
/// s_r_dif = [s0, dif_s1, 0], s_r_spec = [s0, spec_s1, spec_s2]. Each N x 3.
struct IncidentField {
    ad::Array s0;
    ad::Array dif_s1;
    ad::Array spec_s1;
    ad::Array spec_s2;
};
IncidentField field_incident(const FieldBundle& bundle, const ad::Array& x, const ad::Array& wi);

struct IncidentVar {
    ad::Var s0;
    ad::Var dif_s1;
    ad::Var dif_s2;  ///< constant zero
    ad::Var spec_s1;
    ad::Var spec_s2;
};
/// With `polarized` false only f_i is evaluated and the other parts are zero.
IncidentVar field_incident(ad::Tape& tape, const FieldBundle& bundle, const ad::Array& x,
                           const ad::Array& wi, bool trainable, bool polarized = true);

struct SamplingConfig {
    int coarse = 32;
    int fine = 32;
    int root_refinements = 6;
    double fine_width_betas = 6.0;  ///< half-width of the fine window in units of beta
};

/// Samples of R rays, `per_ray` consecutive rows per ray, sorted by t.
struct RaySamples {
    int rays = 0;
    int per_ray = 0;
    ad::Array origins;  ///< R x 3
    ad::Array dirs;     ///< R x 3
    ad::Array t;        ///< R*per_ray x 1
    ad::Array delta;    ///< interval to the next sample (last one to the far bound)
    ad::Array points;   ///< R*per_ray x 3
    std::vector<char> in_bounds;
};

/// Stratified coarse samples inside the bounding sphere plus a fine window
/// around the first zero crossing of the current SDF (or its minimum).
RaySamples sample_rays(const FieldBundle& bundle, const ad::Array& origins, const ad::Array& dirs,
                       const SamplingConfig& cfg, std::mt19937_64* jitter);

struct AggregateOptions {
    bool geometry_grad = false;
    bool material = true;
    bool material_grad = false;
    bool radiance = false;  ///< stage-1 colour head, needs geometry normals
    bool eikonal = false;
};

struct Aggregate {
    ad::Var opacity;    ///< R x 1, sum of weights
    ad::Var residual;   ///< R x 1, transmittance left after the last sample
    ad::V3 normal;      ///< blended, renormalised
    ad::Array normal_length;  ///< R x 1, length of the blended normal before renormalising
    ad::Var albedo;     ///< R x 3
    ad::Var roughness;  ///< R x 1
    ad::Var radiance;   ///< R x 3 (stage-1 head)
    ad::Var eikonal;    ///< 1 x 1, mean (|grad| - 1)^2 over samples
    ad::Array x_surf;   ///< R x 3, weighted mean sample position (detached)
    std::vector<char> empty;  ///< opacity below 1e-3
};

inline constexpr double kEmptyOpacity = 1e-3;

/// Alpha-blends normals, albedo and roughness along each ray with VolSDF
/// weights. Blended quantities are normalised by the ray's opacity.
Aggregate volume_aggregate(ad::Tape& tape, const FieldBundle& bundle, const RaySamples& samples,
                           const AggregateOptions& options);

struct SurfaceEstimate {
    Vec3 x;
    Vec3 normal;
    Rgb albedo;
    double roughness = 0.0;
    double opacity = 0.0;
};
/// Single-ray convenience wrapper; throws EmptyRay when nothing is hit.
SurfaceEstimate aggregate_ray(const FieldBundle& bundle, const Vec3& origin, const Vec3& dir,
                              const SamplingConfig& cfg = {});

/// VolSDF density alpha * Psi_beta(-d) on the tape.
ad::Var volsdf_density(const ad::Var& d, const ad::Var& alpha, const ad::Var& beta);

/// NSFC container: magic, version, stage, config JSON, per-network layer
/// dimensions and float32 weights, then alpha/beta parameters.
void write_checkpoint(const std::string& path, const FieldBundle& bundle, int stage);
FieldBundle read_checkpoint(const std::string& path, int* stage = nullptr);

}  // namespace neisf
