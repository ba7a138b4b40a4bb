#pragma once

#include <cstdint>
#include <vector>

#include "ccm/tensor.hpp"

namespace ccm {

// Anti-aliased filled disks of unit peak intensity at uniformly random,
// non-overlapping centers, all fully inside the field.
// Throws GenerationError when placement fails after 1000 attempts per bead.
Tensor render_beads(int extent, int count, double diameter_px, uint64_t seed);

// Single disk at an explicit center; building block shared with the 3-d
// phantom renderer.
void stamp_disk(Tensor& image, double cx, double cy, double diameter_px, double peak = 1.0);

// Soma disk plus branching random-walk processes, smoothed and peak
// normalized.
Tensor render_neuron(int extent, uint64_t seed, int n_branches = 4);

// A bead suspended in a deep volume: transverse center in pixels, axial
// position in micrometers.
struct Bead3 {
    double x_px = 0;
    double y_px = 0;
    double z_um = 0;
    double diameter_px = 3.0;
};

struct BeadPhantom {
    std::vector<Bead3> beads;
    int extent = 32;
    double depth_um = 800.0;
    double fov_um = 200.0;
};

// Uniformly scattered beads through the volume. Deterministic per seed.
BeadPhantom make_bead_phantom(int extent, int count, double depth_um, double diameter_px, uint64_t seed);

// Renders the beads assigned to one axial plane: a bead contributes when the
// plane is the nearest of the given plane depths and lies within half the
// plane spacing.
Tensor render_phantom_plane(const BeadPhantom& phantom, const std::vector<double>& plane_depths_um,
                            int plane_index);

}  // namespace ccm
