#pragma once

#include <string>
#include <vector>

#include "ccm/forward_model.hpp"
#include "ccm/networks.hpp"
#include "ccm/phantoms.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// A z-stack of reconstructed slices; slice d sits at z0 + d * z_step.
struct Volume {
    std::vector<Tensor> slices;  // each [H,W]
    double z_step_um = 50.0;
    double z0_um = 0.0;
    double fov_um = 200.0;
};

// Steps the scan depth from z0 to max_depth: at each stop the three object
// planes within 100 um of the tip are rendered from the phantom, measured
// through the forward model, and reconstructed with the merged-projection
// network. Windows with no fluorescence produce zero slices directly.
Volume insertion_scan(ModelState& model_star, const BeadPhantom& phantom, const ForwardModel& fwd,
                      double z_step_um = 50.0, double max_depth_um = 700.0, double z0_um = 0.0);

// Stacks slices into one [D,H,W] container plus a key=value sidecar
// (z0_um, z_step_um, fov_um). `base_path` gets .tnsr and .meta suffixes.
void save_volume(const Volume& v, const std::string& base_path);
Volume load_volume(const std::string& base_path);

Volume assemble_volume(std::vector<Tensor> slices, double z_step_um, double z0_um, double fov_um = 200.0);

}  // namespace ccm
