#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "ccm/tensor.hpp"

namespace ccm {

// The 3 object planes seen by the instrument, nearest plane first.
struct SceneStack {
    std::array<Tensor, 3> layers;  // each [H,W]
    double layer_spacing_um = 50.0;
    double fov_um = 200.0;

    int extent() const { return layers[0].dim(0); }
};

// Per-depth linear scrambling operator: one nonnegative mixing matrix per
// layer, rows normalized to unit sum, plus measurement noise parameters.
struct ForwardModel {
    std::array<Tensor64, 3> matrices;  // each [M,N]
    int object_extent = 0;             // object plane is object_extent^2 = N pixels
    int meas_extent = 0;               // measurement image is meas_extent^2 = M pixels
    double noise_sigma = 0.0;
    double conditioning = 1.0;
    uint64_t seed = 0;

    long n_object() const { return static_cast<long>(object_extent) * object_extent; }
    long n_meas() const { return static_cast<long>(meas_extent) * meas_extent; }
};

// Builds the per-layer operators: smoothly correlated nonnegative columns
// (Gaussian blur of white noise over the measurement plane, radius 2 px),
// singular values reshaped to decay as k^(-conditioning), entries clipped
// nonnegative and rows renormalized to unit sum. Deterministic per seed.
// Construction fails if the three layers come out too correlated to classify.
ForwardModel make_forward_model(int object_extent, int meas_extent, uint64_t seed, double conditioning,
                                double noise_sigma);

// y = sum_z A_z vec(x_z) + eta, min/max-rescaled to [0,1] and reshaped to the
// measurement extent. noise_seed only matters when noise_sigma > 0.
Tensor simulate_measurement(const SceneStack& scene, const ForwardModel& model, uint64_t noise_seed = 0);

// Same but without the [0,1] rescaling, for calibration and linearity checks.
Tensor64 simulate_measurement_raw(const SceneStack& scene, const ForwardModel& model, uint64_t noise_seed = 0);

// Scans the object-plane unit basis through layer z (1-based), recording raw
// measurements as columns. With noise_sigma == 0 this recovers A_z exactly.
Tensor64 calibration_scan(const ForwardModel& model, int layer, uint64_t noise_seed = 0);

// Pearson correlation of two equally sized tensors, used for the layer
// distinctness invariant.
double flat_correlation(const Tensor64& a, const Tensor64& b);

void save_forward_model(const ForwardModel& model, const std::string& path);
ForwardModel load_forward_model(const std::string& path);

}  // namespace ccm
