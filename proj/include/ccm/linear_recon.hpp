#pragma once

#include <string>
#include <vector>

#include "ccm/tensor.hpp"

namespace ccm {

// Truncation rule: keep a fixed rank, or the smallest rank capturing an
// energy fraction tau of sum(sigma_i^2).
struct RankPolicy {
    enum class Kind { Fixed, Energy };
    Kind kind = Kind::Energy;
    int fixed_k = 0;
    double tau = 0.99;

    static RankPolicy fixed(int k) { return {Kind::Fixed, k, 0.0}; }
    static RankPolicy energy(double tau) { return {Kind::Energy, 0, tau}; }
};

int choose_rank(const std::vector<double>& singular_values, const RankPolicy& policy);

// Truncated pseudoinverse fitted from a calibration matrix. Immutable after
// fit; reconstruction applies V_k diag(1/s) U_k^T in double precision.
class LinearReconstructor {
  public:
    LinearReconstructor() = default;

    static LinearReconstructor fit(const Tensor64& calib_matrix, const RankPolicy& policy,
                                   int object_extent = 0);

    // y may be a flat [M] vector or the measurement image; returns the
    // reconstructed object image, clipped nonnegative and [0,1]-normalized.
    Tensor reconstruct(const Tensor& y) const;
    Tensor64 reconstruct_raw(const Tensor64& y) const;  // no clip/normalize

    int rank() const { return rank_; }
    const std::vector<double>& singular_values() const { return sigma_; }
    int object_extent() const { return object_extent_; }
    long meas_size() const { return u_.numel() ? u_.dim(0) : 0; }
    const RankPolicy& policy() const { return policy_; }

    void save(const std::string& path) const;
    static LinearReconstructor load(const std::string& path);

  private:
    Tensor64 u_;                 // [M,k]
    Tensor64 v_;                 // [N,k]
    std::vector<double> sigma_;  // retained singular values, non-increasing
    int rank_ = 0;
    int object_extent_ = 0;
    RankPolicy policy_;
};

}  // namespace ccm
