#pragma once

#include <string>
#include <vector>

#include "ccm/linear_recon.hpp"
#include "ccm/networks.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// Mean local SSIM: 7x7 uniform window over valid positions, K1 = 0.01,
// K2 = 0.03, dynamic range 1.
double ssim(const Tensor& a, const Tensor& b);

double mae(const Tensor& a, const Tensor& b);

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

// Full width at half maximum of the given row, linear-interpolated at the
// half crossings. The row must contain exactly one above-half segment.
double fwhm_px(const Tensor& image, int center_row);
double fwhm_um(const Tensor& image, int center_row, double fov_um);

struct MetricReport {
    double ssim = -1.0;      // mean; -1 when not applicable
    double mae = -1.0;
    double accuracy = -1.0;  // -1 when not applicable
    int n_samples = 0;
    std::vector<double> per_sample_ssim;
    std::vector<double> per_sample_mae;
};

// Evaluation of a trained model over a sample set. For ann2 the SSIM is
// measured on the plane carrying the object and off_target_ratio holds the
// mean intensity of the two empty planes relative to the target plane.
struct EvalReport {
    MetricReport metrics;
    double off_target_ratio = -1.0;
    double median_infer_ms = 0.0;
};

EvalReport evaluate_model(ModelState& model, const std::vector<Sample>& samples);

// One desk-scale Table-1-style row per method.
struct BenchRow {
    std::string method;
    double ssim = -1.0;
    double mae = -1.0;
    double median_ms = 0.0;
    double accuracy = -1.0;
};

std::vector<BenchRow> bench(ModelState& ann1_r, ModelState& ann1_c, ModelState& ann2,
                            const LinearReconstructor& svd, const std::vector<Sample>& test_set);

std::string format_bench_table(const std::vector<BenchRow>& rows);

}  // namespace ccm
